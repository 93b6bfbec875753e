//! `PMGK` checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "PMGK"  version u32
//! config  H W D C T k (u64 each), noise enabled u8, noise channels u64,
//!         noise sigma f64, w1 f64, w2 f64
//! tensors count u32, then per tensor: name (u32 length + utf-8),
//!         rank u32, dims u64 each, values f64 each
//! trainer flag u8; when 1:
//!         learning_rate beta1 beta2 (f64), batch_size epochs
//!         d_steps_per_g_step seed (u64), gen_cls_feedback u8,
//!         epochs_done u64, rng seed [32 bytes], rng stream u64,
//!         rng word position u128 (low u64 then high u64),
//!         discriminator Adam then generator Adam (step count u64,
//!         first moments, second moments as unnamed tensors),
//!         log record count u64, each record: epoch u64 then seven f64
//!         (loss_g loss_a loss_p loss_d d_real_acc d_fake_acc
//!         moment_distance); wall time is not stored, so identical runs
//!         give identical files
//! ```
//!
//! Tensor names identify the model parts: the generator and discriminator
//! of the main model always, then any of `infrared_head.*`,
//! `visible_head.*`, `generated_head.*` and `fusion_real.*` that were
//! trained. The Adam moments follow the parameter order of the optimized
//! set.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::model::{
    DiscriminatorParams, GeneratorParams, LinearHead, LossWeights, ModelConfig, ModelSet, NoiseSpec, PmGanParams,
};
use crate::tensor::Tensor;
use crate::trainer::{EpochRecord, TrainConfig, TrainLog, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PMGK";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEAD_NAMES: [&str; 2] = ["weights", "bias"];

/// A model set together with the metadata needed to evaluate or resume it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub models: ModelSet,
    /// Clips per sample of the dataset the model was trained on.
    pub clips: usize,
    pub weights: LossWeights,
    /// Present when the file can resume training.
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn new(models: ModelSet, clips: usize, weights: LossWeights) -> Self {
        Self { models, clips, weights, train_state: None }
    }

    /// Captures a training run; `heads` optionally supplies the auxiliary
    /// heads trained around `state.params`.
    pub fn from_state(state: &TrainState, clips: usize, heads: Option<ModelSet>) -> Self {
        let mut models = heads.unwrap_or_else(|| ModelSet::new(state.params.clone()));
        models.main = state.params.clone();
        Self { models, clips, weights: state.config.weights, train_state: Some(state.clone()) }
    }

    pub fn config(&self) -> &ModelConfig {
        self.models.config()
    }
}

fn write_named(w: &mut Writer, prefix: &str, names: &[&str], tensors: &[&Tensor]) {
    for (name, t) in names.iter().zip(tensors) {
        let full = if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
        w.str(&full);
        w.tensor(t);
    }
}

fn head_tensors(set: &ModelSet) -> Vec<(&'static str, Vec<&Tensor>, &'static [&'static str])> {
    let mut out = Vec::new();
    for (prefix, head) in [
        ("infrared_head", &set.infrared_head),
        ("visible_head", &set.visible_head),
        ("generated_head", &set.generated_head),
    ] {
        if let Some(h) = head {
            out.push((prefix, h.tensors(), &HEAD_NAMES[..]));
        }
    }
    if let Some(f) = &set.fusion_real {
        out.push(("fusion_real", f.tensors(), &DiscriminatorParams::NAMES[..]));
    }
    out
}

fn write_adam(w: &mut Writer, opt: &AdamState) {
    w.u64(opt.step_count);
    for t in opt.first_moment.iter().chain(&opt.second_moment) {
        w.tensor(t);
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let c = ck.config();
    for v in [c.height, c.width, c.channels, c.classes, ck.clips, c.kernel] {
        w.u64(v as u64);
    }
    w.u8(c.noise.enabled as u8);
    w.u64(c.noise.channels as u64);
    w.f64(c.noise.sigma);
    w.f64(ck.weights.w1);
    w.f64(ck.weights.w2);

    let main = &ck.models.main;
    let heads = head_tensors(&ck.models);
    let count = GeneratorParams::NAMES.len()
        + DiscriminatorParams::NAMES.len()
        + heads.iter().map(|(_, t, _)| t.len()).sum::<usize>();
    w.u32(count as u32);
    write_named(&mut w, "", &GeneratorParams::NAMES, &main.generator.tensors());
    write_named(&mut w, "", &DiscriminatorParams::NAMES, &main.discriminator.tensors());
    for (prefix, tensors, names) in &heads {
        let short: Vec<&str> = names.iter().map(|n| n.rsplit('.').next().unwrap_or(n)).collect();
        write_named(&mut w, prefix, &short, tensors);
    }

    match &ck.train_state {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            let tc = &s.config;
            w.f64(tc.learning_rate);
            w.f64(tc.beta1);
            w.f64(tc.beta2);
            for v in [tc.batch_size as u64, tc.epochs as u64, tc.d_steps_per_g_step as u64, tc.seed] {
                w.u64(v);
            }
            w.u8(tc.gen_cls_feedback as u8);
            w.u64(s.epochs_done as u64);
            w.bytes(&s.rng.get_seed());
            w.u64(s.rng.get_stream());
            let pos = s.rng.get_word_pos();
            w.u64(pos as u64);
            w.u64((pos >> 64) as u64);
            write_adam(&mut w, &s.d_opt);
            write_adam(&mut w, &s.g_opt);
            w.u64(s.log.records.len() as u64);
            for r in &s.log.records {
                w.u64(r.epoch as u64);
                w.f64s(&[r.loss_g, r.loss_a, r.loss_p, r.loss_d, r.d_real_acc, r.d_fake_acc, r.moment_distance]);
            }
        }
    }
    w.finish()
}

/// Reads tensors in file order, checking names and shapes against the
/// expected parameter set.
struct TensorStream<'r, 'a> {
    reader: &'r mut Reader<'a>,
    remaining: usize,
}

impl TensorStream<'_, '_> {
    fn next_named(&mut self) -> Result<Option<(String, Tensor)>, FormatError> {
        if self.remaining == 0 {
            return Ok(None);
        }
        self.remaining -= 1;
        let name = self.reader.str()?;
        let t = self.reader.tensor()?;
        Ok(Some((name, t)))
    }

    fn fill(&mut self, prefix: &str, names: &[&str], targets: Vec<&mut Tensor>) -> Result<(), FormatError> {
        for (name, target) in names.iter().zip(targets) {
            let expected = if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
            let (found, t) =
                self.next_named()?.ok_or_else(|| FormatError::Malformed(format!("missing tensor {expected}")))?;
            if found != expected {
                return Err(FormatError::Malformed(format!("expected tensor {expected}, found {found}")));
            }
            if t.shape() != target.shape() {
                return Err(FormatError::Malformed(format!(
                    "tensor {expected} has shape {:?}, expected {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            *target = t;
        }
        Ok(())
    }
}

fn read_adam(r: &mut Reader, config: crate::adam::AdamConfig, params: &[&Tensor]) -> Result<AdamState, FormatError> {
    let mut opt = AdamState::new(config, params);
    opt.step_count = r.u64()?;
    for (i, t) in opt.first_moment.iter_mut().chain(opt.second_moment.iter_mut()).enumerate() {
        let read = r.tensor()?;
        if read.shape() != t.shape() {
            return Err(FormatError::Malformed(format!("Adam moment {i} has shape {:?}", read.shape())));
        }
        *t = read;
    }
    Ok(opt)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version { kind: "checkpoint", found: version, expected: CHECKPOINT_VERSION });
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let noise = NoiseSpec { enabled: r.u8()? != 0, channels: r.usize()?, sigma: r.f64()? };
    let weights = LossWeights { w1: r.f64()?, w2: r.f64()? };
    let config =
        ModelConfig { height: dims[0], width: dims[1], channels: dims[2], classes: dims[3], kernel: dims[5], noise };
    let clips = dims[4];
    let invalid = |e: Error| FormatError::Malformed(e.to_string());
    config.validate().map_err(invalid)?;
    weights.validate().map_err(invalid)?;
    if clips == 0 {
        return Err(FormatError::Malformed("clip count must be positive".into()));
    }

    let count = r.u32()? as usize;
    let mut stream = TensorStream { reader: &mut r, remaining: count };
    let mut main = PmGanParams {
        config,
        generator: GeneratorParams::zeros(&config),
        discriminator: DiscriminatorParams::zeros(&config),
    };
    stream.fill("", &GeneratorParams::NAMES, main.generator.tensors_mut())?;
    stream.fill("", &DiscriminatorParams::NAMES, main.discriminator.tensors_mut())?;

    let mut models = ModelSet::new(main);
    let fusion_short: Vec<&str> =
        DiscriminatorParams::NAMES.iter().map(|n| n.rsplit('.').next().unwrap_or(n)).collect();
    while stream.remaining > 0 {
        // Peek the section from the next tensor's name prefix.
        let (name, first) = stream.next_named()?.expect("remaining > 0");
        let prefix = name.split('.').next().unwrap_or("").to_string();
        let slot: &mut Option<LinearHead> = match prefix.as_str() {
            "infrared_head" => &mut models.infrared_head,
            "visible_head" => &mut models.visible_head,
            "generated_head" => &mut models.generated_head,
            "fusion_real" => {
                if models.fusion_real.is_some() {
                    return Err(FormatError::Malformed("duplicate section fusion_real".into()));
                }
                let mut f = DiscriminatorParams::zeros(&config);
                let mut targets = f.tensors_mut().into_iter();
                place(&name, first, "fusion_real", fusion_short[0], targets.next().expect("six tensors"))?;
                stream.fill("fusion_real", &fusion_short[1..], targets.collect())?;
                models.fusion_real = Some(f);
                continue;
            }
            _ => return Err(FormatError::Malformed(format!("unknown tensor {name}"))),
        };
        if slot.is_some() {
            return Err(FormatError::Malformed(format!("duplicate section {prefix}")));
        }
        let mut head = LinearHead::zeros(&config);
        place(&name, first, &prefix, HEAD_NAMES[0], &mut head.weights)?;
        stream.fill(&prefix, &HEAD_NAMES[1..], vec![&mut head.bias])?;
        *slot = Some(head);
    }

    let train_state = match r.u8()? {
        0 => None,
        1 => {
            let learning_rate = r.f64()?;
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let batch_size = r.usize()?;
            let epochs = r.usize()?;
            let d_steps_per_g_step = r.usize()?;
            let seed = r.u64()?;
            let gen_cls_feedback = r.u8()? != 0;
            let tc = TrainConfig {
                weights,
                learning_rate,
                beta1,
                beta2,
                batch_size,
                epochs,
                d_steps_per_g_step,
                seed,
                gen_cls_feedback,
                noise,
                kernel: config.kernel,
            };
            tc.validate().map_err(invalid)?;
            let epochs_done = r.usize()?;
            let rng_seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream_id = r.u64()?;
            let lo = r.u64()? as u128;
            let hi = r.u64()? as u128;
            let mut rng = ChaCha8Rng::from_seed(rng_seed);
            rng.set_stream(stream_id);
            rng.set_word_pos(lo | (hi << 64));
            let params = models.main.clone();
            let d_opt = read_adam(&mut r, tc.adam(), &params.discriminator.tensors())?;
            let g_opt = read_adam(&mut r, tc.adam(), &params.generator.tensors())?;
            let n = r.usize()?;
            let mut records = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let epoch = r.usize()?;
                let v = r.f64s(7)?;
                records.push(EpochRecord {
                    epoch,
                    loss_g: v[0],
                    loss_a: v[1],
                    loss_p: v[2],
                    loss_d: v[3],
                    d_real_acc: v[4],
                    d_fake_acc: v[5],
                    moment_distance: v[6],
                    wall_seconds: 0.0,
                });
            }
            Some(TrainState { config: tc, params, d_opt, g_opt, rng, epochs_done, log: TrainLog { records } })
        }
        other => return Err(FormatError::Malformed(format!("trainer flag {other}"))),
    };
    r.finish()?;
    Ok(Checkpoint { models, clips, weights, train_state })
}

fn place(name: &str, t: Tensor, prefix: &str, short: &str, target: &mut Tensor) -> Result<(), FormatError> {
    let expected = format!("{prefix}.{short}");
    if name != expected {
        return Err(FormatError::Malformed(format!("expected tensor {expected}, found {name}")));
    }
    if t.shape() != target.shape() {
        return Err(FormatError::Malformed(format!(
            "tensor {expected} has shape {:?}, expected {:?}",
            t.shape(),
            target.shape()
        )));
    }
    *target = t;
    Ok(())
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize, DatasetSplit, SynthConfig};
    use crate::trainer::{run_epochs, train_heads, NoObserver};

    fn split() -> DatasetSplit {
        synthesize(&SynthConfig {
            classes: 3,
            samples_per_class: 6,
            clips: 2,
            height: 2,
            width: 2,
            channels: 3,
            latent_dim: 4,
            infrared_rank: 2,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig { batch_size: 4, epochs: 2, learning_rate: 1e-3, seed: 3, ..TrainConfig::default() }
    }

    fn trained_state() -> TrainState {
        let split = split();
        let mut s = TrainState::new(&split, &config()).unwrap();
        run_epochs(&mut s, &split, 2, &mut NoObserver).unwrap();
        s
    }

    #[test]
    fn model_only_round_trip() {
        let s = trained_state();
        let ck = Checkpoint::new(ModelSet::new(s.params.clone()), 2, s.config.weights);
        let back = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn full_round_trip_with_heads_and_state() {
        let split = split();
        let s = trained_state();
        let heads = train_heads(&split, &config(), s.params.clone()).unwrap();
        let mut ck = Checkpoint::from_state(&s, 2, Some(heads));
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint(&bytes).unwrap();
        for r in &mut ck.train_state.as_mut().unwrap().log.records {
            r.wall_seconds = 0.0;
        }
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn resume_continues_identically() {
        let split = split();
        let mut straight = TrainState::new(&split, &config()).unwrap();
        run_epochs(&mut straight, &split, 4, &mut NoObserver).unwrap();

        let half = trained_state();
        let ck = decode_checkpoint(&encode_checkpoint(&Checkpoint::from_state(&half, 2, None))).unwrap();
        let mut resumed = ck.train_state.unwrap();
        run_epochs(&mut resumed, &split, 2, &mut NoObserver).unwrap();
        assert_eq!(resumed.params, straight.params);
        assert!(resumed.log.same_values(&straight.log));
    }

    #[test]
    fn corrupt_files_give_named_errors() {
        let s = trained_state();
        let bytes = encode_checkpoint(&Checkpoint::from_state(&s, 2, None));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(FormatError::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(
            decode_checkpoint(&bad),
            Err(FormatError::Version { kind: "checkpoint", found: 9, expected: CHECKPOINT_VERSION })
        );

        for cut in [3, 10, 60, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(FormatError::Truncated { .. })), "cut {cut}");
        }

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(decode_checkpoint(&bad), Err(FormatError::Malformed(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(dir.path().join("none.pmgk")), Err(Error::Io { .. })));
    }
}
