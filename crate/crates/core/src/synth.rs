//! Synthetic paired infrared/visible clip features.
//!
//! Each sample has a latent `u ~ N(mu_c, I)` around a per-class mean. Every
//! clip of the visible stack is `tanh(B u) + eps` and every infrared clip is
//! `A P u + eps'`, where `P` projects onto a random rank-`r` subspace of the
//! latent space. The infrared modality therefore sees strictly less of the
//! latent than the visible one, and both stacks of a sample are functions of
//! the same `u`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::fusion::{ClipStack, FeatureMap};
use crate::model::one_hot;

pub const DATASET_MAGIC: &[u8; 4] = b"PMFD";
pub const DATASET_VERSION: u32 = 1;

/// Fraction of each class assigned to the training split (rounded up).
pub const TRAIN_FRACTION: f64 = 0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub clips: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub infrared_rank: usize,
    pub noise_sigma: f64,
    /// Standard deviation of the class means around the origin.
    pub class_spread: f64,
    /// Gain on the infrared mixing matrix.
    pub infrared_scale: f64,
    pub seed: u64,
    /// Keep each sample's latent vector (for debugging the pairing).
    pub retain_latents: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 12,
            samples_per_class: 100,
            clips: 5,
            height: 4,
            width: 4,
            channels: 8,
            latent_dim: 16,
            infrared_rank: 6,
            noise_sigma: 0.1,
            class_spread: 1.0,
            infrared_scale: 1.0,
            seed: 0,
            retain_latents: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.samples_per_class < 2 {
            return fail(format!("samples_per_class must be >= 2, got {}", self.samples_per_class));
        }
        if self.clips < 1 {
            return fail("clips must be >= 1".into());
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return fail("height, width and channels must be positive".into());
        }
        if self.infrared_rank == 0 || self.infrared_rank >= self.latent_dim {
            return fail(format!(
                "infrared_rank must satisfy 0 < r < latent_dim, got r={} L={}",
                self.infrared_rank, self.latent_dim
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(self.class_spread >= 0.0 && self.class_spread.is_finite()) {
            return fail(format!("class_spread must be finite and >= 0, got {}", self.class_spread));
        }
        if !(self.infrared_scale > 0.0 && self.infrared_scale.is_finite()) {
            return fail(format!("infrared_scale must be finite and > 0, got {}", self.infrared_scale));
        }
        Ok(())
    }

    pub fn map_dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn flat_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Training samples contributed by each class.
    pub fn train_per_class(&self) -> usize {
        ((TRAIN_FRACTION * self.samples_per_class as f64).ceil() as usize).min(self.samples_per_class)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    /// Unique within a dataset.
    pub id: u32,
    pub class: usize,
    pub infrared: ClipStack,
    pub visible: ClipStack,
    pub latent: Option<Vec<f64>>,
}

impl PairedSample {
    pub fn label(&self, classes: usize) -> Vec<f64> {
        one_hot(self.class, classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub config: SynthConfig,
    /// Displacement of the test-side class means; zero for the plain split.
    pub shift_scale: f64,
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl DatasetSplit {
    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn condition(&self) -> String {
        if self.shift_scale == 0.0 {
            "iid".to_string()
        } else {
            format!("shifted:{}", self.shift_scale)
        }
    }
}

/// The fixed random matrices behind one seed.
#[derive(Clone, Debug)]
pub struct SynthModel {
    latent_dim: usize,
    flat_len: usize,
    /// `flat_len × L`, row-major.
    infrared_map: Vec<f64>,
    /// `flat_len × L`, row-major.
    visible_map: Vec<f64>,
    /// Orthonormal basis of the infrared subspace, `r` vectors of length `L`.
    basis: Vec<Vec<f64>>,
    class_means: Vec<Vec<f64>>,
    shift_direction: Vec<f64>,
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| scale * std_normal(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    for x in v {
        *x /= n;
    }
}

impl SynthModel {
    fn draw(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let (l, r, n) = (config.latent_dim, config.infrared_rank, config.flat_len());
        let infrared_map = gaussian_vec(n * l, config.infrared_scale / (r as f64).sqrt(), rng);
        let visible_map = gaussian_vec(n * l, 1.0 / (l as f64).sqrt(), rng);

        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
        while basis.len() < r {
            let mut v = gaussian_vec(l, 1.0, rng);
            for b in &basis {
                let p = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
            if dot(&v, &v) > 1e-10 {
                normalize(&mut v);
                basis.push(v);
            }
        }

        let class_means = (0..config.classes).map(|_| gaussian_vec(l, config.class_spread, rng)).collect();
        let mut shift_direction = gaussian_vec(l, 1.0, rng);
        normalize(&mut shift_direction);

        Self { latent_dim: l, flat_len: n, infrared_map, visible_map, basis, class_means, shift_direction }
    }

    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::draw(config, &mut ChaCha8Rng::seed_from_u64(config.seed)))
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        &self.class_means[class]
    }

    pub fn shift_direction(&self) -> &[f64] {
        &self.shift_direction
    }

    fn project(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.latent_dim];
        for b in &self.basis {
            let p = dot(u, b);
            for (o, &y) in out.iter_mut().zip(b) {
                *o += p * y;
            }
        }
        out
    }

    /// Noise-free flattened infrared map `A P u`.
    pub fn infrared_clean(&self, u: &[f64]) -> Vec<f64> {
        let pu = self.project(u);
        self.infrared_map.chunks(self.latent_dim).map(|row| dot(row, &pu)).collect()
    }

    /// Noise-free flattened visible map `tanh(B u)`.
    pub fn visible_clean(&self, u: &[f64]) -> Vec<f64> {
        self.visible_map.chunks(self.latent_dim).map(|row| dot(row, u).tanh()).collect()
    }

    pub fn flat_len(&self) -> usize {
        self.flat_len
    }
}

fn noisy_stack(clean: &[f64], config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<ClipStack> {
    let [h, w, d] = config.map_dims();
    let clips = (0..config.clips)
        .map(|_| {
            let data = clean.iter().map(|&x| x + config.noise_sigma * std_normal(rng)).collect::<Vec<f64>>();
            FeatureMap::from_vec(h, w, d, data)
        })
        .collect::<Result<Vec<_>>>()?;
    ClipStack::new(clips)
}

/// Draws a stratified train/test split.
pub fn synthesize(config: &SynthConfig) -> Result<DatasetSplit> {
    synthesize_shifted(config, 0.0)
}

/// Like [`synthesize`], but test-side class means are displaced by
/// `shift_scale` along a fixed random latent direction. Training samples
/// are identical to those of [`synthesize`] for the same seed.
pub fn synthesize_shifted(config: &SynthConfig, shift_scale: f64) -> Result<DatasetSplit> {
    config.validate()?;
    if !(shift_scale >= 0.0 && shift_scale.is_finite()) {
        return Err(Error::Config(format!("shift_scale must be finite and >= 0, got {shift_scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = SynthModel::draw(config, &mut rng);
    let n_train = config.train_per_class();
    let mut train = Vec::with_capacity(config.classes * n_train);
    let mut test = Vec::with_capacity(config.classes * (config.samples_per_class - n_train));
    let mut next_id = 0u32;

    for class in 0..config.classes {
        for i in 0..config.samples_per_class {
            let is_test = i >= n_train;
            let mean = model.class_mean(class);
            let u: Vec<f64> = mean
                .iter()
                .zip(model.shift_direction())
                .map(|(&m, &s)| {
                    let shifted = if is_test { m + shift_scale * s } else { m };
                    shifted + std_normal(&mut rng)
                })
                .collect();
            let visible = noisy_stack(&model.visible_clean(&u), config, &mut rng)?;
            let infrared = noisy_stack(&model.infrared_clean(&u), config, &mut rng)?;
            let sample =
                PairedSample { id: next_id, class, infrared, visible, latent: config.retain_latents.then_some(u) };
            next_id += 1;
            if is_test {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    Ok(DatasetSplit { config: config.clone(), shift_scale, train, test })
}

fn write_config(w: &mut Writer, c: &SynthConfig) {
    for v in [c.classes, c.samples_per_class, c.clips, c.height, c.width, c.channels, c.latent_dim, c.infrared_rank] {
        w.u64(v as u64);
    }
    w.f64(c.noise_sigma);
    w.f64(c.class_spread);
    w.f64(c.infrared_scale);
    w.u64(c.seed);
    w.u8(c.retain_latents as u8);
}

fn read_config(r: &mut Reader) -> Result<SynthConfig, FormatError> {
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let config = SynthConfig {
        classes: dims[0],
        samples_per_class: dims[1],
        clips: dims[2],
        height: dims[3],
        width: dims[4],
        channels: dims[5],
        latent_dim: dims[6],
        infrared_rank: dims[7],
        noise_sigma: r.f64()?,
        class_spread: r.f64()?,
        infrared_scale: r.f64()?,
        seed: r.u64()?,
        retain_latents: r.u8()? != 0,
    };
    config.validate().map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok(config)
}

fn write_sample(w: &mut Writer, s: &PairedSample) {
    w.u32(s.id);
    w.u32(s.class as u32);
    for stack in [&s.infrared, &s.visible] {
        for clip in stack.clips() {
            w.f64s(clip.data());
        }
    }
    match &s.latent {
        Some(u) => {
            w.u8(1);
            w.f64s(u);
        }
        None => w.u8(0),
    }
}

fn read_sample(r: &mut Reader, c: &SynthConfig) -> Result<PairedSample, FormatError> {
    let id = r.u32()?;
    let class = r.u32()? as usize;
    if class >= c.classes {
        return Err(FormatError::Malformed(format!("class {class} out of range for {} classes", c.classes)));
    }
    let [h, w, d] = c.map_dims();
    let mut stacks = Vec::with_capacity(2);
    for _ in 0..2 {
        let clips = (0..c.clips)
            .map(|_| {
                let data = r.f64s(h * w * d)?;
                FeatureMap::from_vec(h, w, d, data).map_err(|e| FormatError::Malformed(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        stacks.push(ClipStack::new(clips).map_err(|e| FormatError::Malformed(e.to_string()))?);
    }
    let visible = stacks.pop().unwrap();
    let infrared = stacks.pop().unwrap();
    let latent = match r.u8()? {
        0 => None,
        1 => Some(r.f64s(c.latent_dim)?),
        x => return Err(FormatError::Malformed(format!("latent flag {x}"))),
    };
    Ok(PairedSample { id, class, infrared, visible, latent })
}

/// Serializes a split in the `PMFD` format.
///
/// Layout (all integers and floats little-endian):
/// `"PMFD"`, version `u32`, eight `u64` config dimensions (classes,
/// samples_per_class, clips, height, width, channels, latent_dim,
/// infrared_rank), noise_sigma `f64`, class_spread `f64`,
/// infrared_scale `f64`, seed `u64`,
/// retain_latents `u8`, shift_scale `f64`, train count `u64`, test count
/// `u64`, then each sample: id `u32`, class `u32`, `T` infrared clips and `T`
/// visible clips as `H·W·D` `f64` values each, latent flag `u8` and, if set,
/// `L` `f64` values.
pub fn encode_dataset(split: &DatasetSplit) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    write_config(&mut w, &split.config);
    w.f64(split.shift_scale);
    w.u64(split.train.len() as u64);
    w.u64(split.test.len() as u64);
    for s in split.train.iter().chain(&split.test) {
        write_sample(&mut w, s);
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetSplit, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(FormatError::Version { kind: "dataset", found: version, expected: DATASET_VERSION });
    }
    let config = read_config(&mut r)?;
    let shift_scale = r.f64()?;
    let n_train = r.usize()?;
    let n_test = r.usize()?;
    let total = config.classes.saturating_mul(config.samples_per_class);
    if n_train.saturating_add(n_test) > total {
        return Err(FormatError::Malformed(format!("{n_train}+{n_test} samples exceed configured {total}")));
    }
    let train = (0..n_train).map(|_| read_sample(&mut r, &config)).collect::<Result<Vec<_>, _>>()?;
    let test = (0..n_test).map(|_| read_sample(&mut r, &config)).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(DatasetSplit { config, shift_scale, train, test })
}

pub fn save_dataset(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(split)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_dataset(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            classes: 3,
            samples_per_class: 8,
            clips: 3,
            height: 2,
            width: 2,
            channels: 2,
            latent_dim: 5,
            infrared_rank: 2,
            seed: 42,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_noise_gives_identical_clips() {
        let split = synthesize(&SynthConfig { noise_sigma: 0.0, ..small() }).unwrap();
        for s in split.train.iter().chain(&split.test) {
            for stack in [&s.infrared, &s.visible] {
                for clip in stack.clips() {
                    assert_eq!(clip, &stack.clips()[0]);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(synthesize(&small()).unwrap(), synthesize(&small()).unwrap());
        let other = synthesize(&SynthConfig { seed: 43, ..small() }).unwrap();
        assert_ne!(other, synthesize(&small()).unwrap());
    }

    #[test]
    fn stratified_split() {
        let c = SynthConfig { samples_per_class: 10, ..small() };
        let split = synthesize(&c).unwrap();
        for class in 0..c.classes {
            let n = split.train.iter().filter(|s| s.class == class).count();
            assert_eq!(n, 8); // ceil(7.5)
            assert_eq!(split.test.iter().filter(|s| s.class == class).count(), 2);
        }
        let mut ids: Vec<u32> = split.train.iter().chain(&split.test).map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 30);
    }

    #[test]
    fn stacks_are_functions_of_the_latent() {
        let c = SynthConfig { noise_sigma: 0.0, retain_latents: true, ..small() };
        let split = synthesize(&c).unwrap();
        let model = SynthModel::new(&c).unwrap();
        for s in split.train.iter().chain(&split.test) {
            let u = s.latent.as_ref().unwrap();
            assert_eq!(s.visible.clips()[0].data(), model.visible_clean(u).as_slice());
            assert_eq!(s.infrared.clips()[0].data(), model.infrared_clean(u).as_slice());
        }
    }

    #[test]
    fn infrared_is_rank_limited() {
        // A P u depends on u only through its projection: moving u
        // orthogonally to the subspace leaves the infrared map unchanged.
        let c = small();
        let model = SynthModel::new(&c).unwrap();
        let u = vec![0.3, -1.0, 0.5, 2.0, 0.1];
        let pu = model.project(&u);
        let orth: Vec<f64> = u.iter().zip(&pu).map(|(a, b)| a - b).collect();
        let moved: Vec<f64> = u.iter().zip(&orth).map(|(a, o)| a + 3.0 * o).collect();
        let a = model.infrared_clean(&u);
        let b = model.infrared_clean(&moved);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_ne!(model.visible_clean(&u), model.visible_clean(&moved));
    }

    #[test]
    fn zero_shift_matches_plain_split() {
        assert_eq!(synthesize_shifted(&small(), 0.0).unwrap(), synthesize(&small()).unwrap());
        let shifted = synthesize_shifted(&small(), 1.0).unwrap();
        let plain = synthesize(&small()).unwrap();
        assert_eq!(shifted.train, plain.train);
        assert_ne!(shifted.test, plain.test);
        assert!(synthesize_shifted(&small(), -1.0).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        for c in [
            SynthConfig { classes: 1, ..small() },
            SynthConfig { clips: 0, ..small() },
            SynthConfig { infrared_rank: 5, ..small() },
            SynthConfig { noise_sigma: -0.1, ..small() },
        ] {
            assert!(matches!(synthesize(&c), Err(Error::Config(_))));
        }
    }

    #[test]
    fn file_round_trip_and_errors() {
        let split = synthesize(&SynthConfig { retain_latents: true, ..small() }).unwrap();
        let bytes = encode_dataset(&split);
        assert_eq!(decode_dataset(&bytes).unwrap(), split);

        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(decode_dataset(cut), Err(FormatError::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        let err = decode_dataset(&bad).unwrap_err();
        assert!(err.to_string().contains("PMFD"), "{err}");

        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode_dataset(&ver), Err(FormatError::Version { found: 9, .. })));

        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_dataset(&extra), Err(FormatError::Malformed(_))));
    }
}
