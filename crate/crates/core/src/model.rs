//! The partial-modal GAN: a residual generator that maps the fused infrared
//! map to a fake visible map, an adversarial head `D_d`, a predictor head
//! `D_p` over the convolutionally fused pair, and the losses tying them
//! together.
//!
//! Every forward function has a tape-recorded form (`*_on`) used for
//! training and gradient checks, and a plain form that evaluates the same
//! graph on constants.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fusion::{conv_fuse_on, FeatureMap};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Optional Gaussian channels appended to the generator input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub enabled: bool,
    pub channels: usize,
    pub sigma: f64,
}

impl NoiseSpec {
    pub const fn disabled() -> Self {
        Self { enabled: false, channels: 0, sigma: 0.0 }
    }

    /// Number of extra input channels seen by the first convolution.
    pub fn extra_channels(&self) -> usize {
        if self.enabled {
            self.channels
        } else {
            0
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.enabled && (self.channels == 0 || !(self.sigma >= 0.0) || !self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise needs channels >= 1 and a finite sigma >= 0, got {} and {}",
                self.channels, self.sigma
            )));
        }
        Ok(())
    }

    /// Draws an `H×W×channels` noise tensor, or `None` when disabled.
    pub fn sample<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> Option<Tensor> {
        if !self.enabled {
            return None;
        }
        let normal = Normal::new(0.0, self.sigma).expect("validated sigma");
        Some(Tensor::from_fn([height, width, self.channels], |_| normal.sample(rng)))
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::disabled()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 0.1, w2: 0.9 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) || !self.w1.is_finite() || !self.w2.is_finite() {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got w1={} w2={}",
                self.w1, self.w2
            )));
        }
        Ok(())
    }
}

/// Shapes shared by every parameter set of one model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub kernel: usize,
    pub noise: NoiseSpec,
}

impl ModelConfig {
    pub fn new(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Self { height, width, channels, classes, kernel: 3, noise: NoiseSpec::disabled() }
    }

    pub fn map_dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// `H·W·D`.
    pub fn flat_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("feature map dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("generator kernel size must be odd, got {}", self.kernel)));
        }
        self.noise.validate()
    }

    pub(crate) fn check_map(&self, f: &FeatureMap) -> Result<()> {
        if f.dims() != self.map_dims() {
            return Err(Error::Dimension { op: "model input", lhs: self.map_dims().to_vec(), rhs: f.dims().to_vec() });
        }
        Ok(())
    }
}

/// `block(x) = x + conv(relu(conv(x, W1) + b1), W2) + b2`, same padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1_filter: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_filter: Tensor,
    pub conv2_bias: Tensor,
}

impl ResidualBlock {
    fn init<R: Rng + ?Sized>(k: usize, cin: usize, d: usize, rng: &mut R) -> Self {
        Self {
            conv1_filter: Tensor::glorot_uniform([k, k, cin, d], k * k * cin, k * k * d, rng),
            conv1_bias: Tensor::zeros([d]),
            conv2_filter: Tensor::glorot_uniform([k, k, d, d], k * k * d, k * k * d, rng),
            conv2_bias: Tensor::zeros([d]),
        }
    }

    pub fn zeros(k: usize, cin: usize, d: usize) -> Self {
        Self {
            conv1_filter: Tensor::zeros([k, k, cin, d]),
            conv1_bias: Tensor::zeros([d]),
            conv2_filter: Tensor::zeros([k, k, d, d]),
            conv2_bias: Tensor::zeros([d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.conv1_filter, &self.conv1_bias, &self.conv2_filter, &self.conv2_bias]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.conv1_filter, &mut self.conv1_bias, &mut self.conv2_filter, &mut self.conv2_bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub block1: ResidualBlock,
    pub block2: ResidualBlock,
}

impl GeneratorParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (k, d) = (config.kernel, config.channels);
        Self {
            block1: ResidualBlock::init(k, d + config.noise.extra_channels(), d, rng),
            block2: ResidualBlock::init(k, d, d, rng),
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let (k, d) = (config.kernel, config.channels);
        Self {
            block1: ResidualBlock::zeros(k, d + config.noise.extra_channels(), d),
            block2: ResidualBlock::zeros(k, d, d),
        }
    }

    pub const NAMES: [&'static str; 8] = [
        "generator.block1.conv1.filter",
        "generator.block1.conv1.bias",
        "generator.block1.conv2.filter",
        "generator.block1.conv2.bias",
        "generator.block2.conv1.filter",
        "generator.block2.conv1.bias",
        "generator.block2.conv2.filter",
        "generator.block2.conv2.bias",
    ];

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.block1.tensors().into_iter().chain(self.block2.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let (b1, b2) = (&mut self.block1, &mut self.block2);
        b1.tensors_mut().into_iter().chain(b2.tensors_mut()).collect()
    }

    pub fn bind(&self, tape: &Tape, track: bool) -> GeneratorVars {
        let v: Vec<Var> = self.tensors().into_iter().map(|t| tape.input(t.clone(), track)).collect();
        GeneratorVars { vars: [v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]] }
    }
}

/// Adversarial head, predictor head and fusion filter.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    /// `(H·W·D)×1`
    pub d_weights: Tensor,
    /// one element
    pub d_bias: Tensor,
    /// `(H·W·D)×C`
    pub p_weights: Tensor,
    /// `C`
    pub p_bias: Tensor,
    /// `1×1×2D×D`
    pub fusion_filter: Tensor,
    /// `D`
    pub fusion_bias: Tensor,
}

impl DiscriminatorParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (n, c, d) = (config.flat_len(), config.classes, config.channels);
        Self {
            d_weights: Tensor::glorot_uniform([n, 1], n, 1, rng),
            d_bias: Tensor::zeros([1]),
            p_weights: Tensor::glorot_uniform([n, c], n, c, rng),
            p_bias: Tensor::zeros([c]),
            fusion_filter: Tensor::glorot_uniform([1, 1, 2 * d, d], 2 * d, d, rng),
            fusion_bias: Tensor::zeros([d]),
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let (n, c, d) = (config.flat_len(), config.classes, config.channels);
        Self {
            d_weights: Tensor::zeros([n, 1]),
            d_bias: Tensor::zeros([1]),
            p_weights: Tensor::zeros([n, c]),
            p_bias: Tensor::zeros([c]),
            fusion_filter: Tensor::zeros([1, 1, 2 * d, d]),
            fusion_bias: Tensor::zeros([d]),
        }
    }

    pub const NAMES: [&'static str; 6] = [
        "discriminator.d_weights",
        "discriminator.d_bias",
        "discriminator.p_weights",
        "discriminator.p_bias",
        "discriminator.fusion_filter",
        "discriminator.fusion_bias",
    ];

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.d_weights, &self.d_bias, &self.p_weights, &self.p_bias, &self.fusion_filter, &self.fusion_bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.d_weights,
            &mut self.d_bias,
            &mut self.p_weights,
            &mut self.p_bias,
            &mut self.fusion_filter,
            &mut self.fusion_bias,
        ]
    }

    pub fn bind(&self, tape: &Tape, track: bool) -> DiscriminatorVars {
        let v: Vec<Var> = self.tensors().into_iter().map(|t| tape.input(t.clone(), track)).collect();
        DiscriminatorVars {
            d_weights: v[0],
            d_bias: v[1],
            p_weights: v[2],
            p_bias: v[3],
            fusion_filter: v[4],
            fusion_bias: v[5],
        }
    }
}

/// Fully connected softmax head over one flattened map, used when a single
/// modality is classified without fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `(H·W·D)×C`
    pub weights: Tensor,
    /// `C`
    pub bias: Tensor,
}

impl LinearHead {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (n, c) = (config.flat_len(), config.classes);
        Self { weights: Tensor::glorot_uniform([n, c], n, c, rng), bias: Tensor::zeros([c]) }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self { weights: Tensor::zeros([config.flat_len(), config.classes]), bias: Tensor::zeros([config.classes]) }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weights, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weights, &mut self.bias]
    }

    pub fn bind(&self, tape: &Tape, track: bool) -> HeadVars {
        HeadVars { weights: tape.input(self.weights.clone(), track), bias: tape.input(self.bias.clone(), track) }
    }
}

/// Generator plus discriminator/predictor: everything the adversarial
/// training loop updates.
#[derive(Clone, Debug, PartialEq)]
pub struct PmGanParams {
    pub config: ModelConfig,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
}

impl PmGanParams {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let generator = GeneratorParams::init(&config, rng);
        let discriminator = DiscriminatorParams::init(&config, rng);
        Ok(Self { config, generator, discriminator })
    }

    /// Deterministic forward of the generator on a fused infrared map.
    pub fn generate<R: Rng + ?Sized>(&self, infrared: &FeatureMap, rng: &mut R) -> Result<FeatureMap> {
        generate(infrared, &self.config, &self.generator, rng)
    }
}

/// Parameters for every row of the modality ablation. Only `main` is
/// required; the single-modality heads and the real-visible fusion
/// predictor are trained separately.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSet {
    pub main: PmGanParams,
    pub infrared_head: Option<LinearHead>,
    pub visible_head: Option<LinearHead>,
    pub generated_head: Option<LinearHead>,
    /// Fusion filter and predictor trained on real infrared/visible pairs.
    pub fusion_real: Option<DiscriminatorParams>,
}

impl ModelSet {
    pub fn new(main: PmGanParams) -> Self {
        Self { main, infrared_head: None, visible_head: None, generated_head: None, fusion_real: None }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.main.config
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub vars: [Var; 8],
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    pub d_weights: Var,
    pub d_bias: Var,
    pub p_weights: Var,
    pub p_bias: Var,
    pub fusion_filter: Var,
    pub fusion_bias: Var,
}

impl DiscriminatorVars {
    pub fn all(&self) -> [Var; 6] {
        [self.d_weights, self.d_bias, self.p_weights, self.p_bias, self.fusion_filter, self.fusion_bias]
    }

    /// Constant copies; losses that must not update the discriminator use these.
    pub fn detached(&self, tape: &Tape) -> Self {
        Self {
            d_weights: tape.detach(self.d_weights),
            d_bias: tape.detach(self.d_bias),
            p_weights: tape.detach(self.p_weights),
            p_bias: tape.detach(self.p_bias),
            fusion_filter: tape.detach(self.fusion_filter),
            fusion_bias: tape.detach(self.fusion_bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weights: Var,
    pub bias: Var,
}

fn residual_block_on(tape: &Tape, x: Var, noise: Option<Var>, p: &[Var]) -> Result<Var> {
    let input = match noise {
        Some(z) => tape.concat_channels(x, z)?,
        None => x,
    };
    let h = tape.conv_same(input, p[0], p[1])?;
    let h = tape.relu(h);
    let r = tape.conv_same(h, p[2], p[3])?;
    tape.add(x, r)
}

/// Two residual blocks; noise channels, if any, join the input of the first.
pub fn generate_on(tape: &Tape, gen: &GeneratorVars, infrared: Var, noise: Option<Var>) -> Result<Var> {
    let h = residual_block_on(tape, infrared, noise, &gen.vars[..4])?;
    residual_block_on(tape, h, None, &gen.vars[4..])
}

fn linear_logits(tape: &Tape, f: Var, weights: Var, bias: Var) -> Result<Var> {
    let flat = tape.flatten_row(f)?;
    let z = tape.matmul(flat, weights)?;
    let n = tape.shape(z)[1];
    let z = tape.reshape(z, [n])?;
    tape.add(z, bias)
}

/// `sigmoid(flatten(f) · d_weights + d_bias)` as a rank-0 scalar.
pub fn discriminate_on(tape: &Tape, disc: &DiscriminatorVars, f: Var) -> Result<Var> {
    let z = linear_logits(tape, f, disc.d_weights, disc.d_bias)?;
    let z = tape.reshape(z, Vec::<usize>::new())?;
    Ok(tape.sigmoid(z))
}

/// Class probabilities from the fused infrared/visible pair.
pub fn predict_on(tape: &Tape, disc: &DiscriminatorVars, infrared: Var, visible: Var) -> Result<Var> {
    let fused = conv_fuse_on(tape, infrared, visible, disc.fusion_filter, disc.fusion_bias)?;
    let z = linear_logits(tape, fused, disc.p_weights, disc.p_bias)?;
    Ok(tape.softmax(z))
}

pub fn predict_single_on(tape: &Tape, head: &HeadVars, f: Var) -> Result<Var> {
    let z = linear_logits(tape, f, head.weights, head.bias)?;
    Ok(tape.softmax(z))
}

/// `-ln(l · p)` for a one-hot `label`.
pub fn cross_entropy_on(tape: &Tape, probs: Var, label: &[f64]) -> Result<Var> {
    let l = tape.constant(Tensor::new([label.len()], label.to_vec())?);
    let picked = tape.mul(probs, l)?;
    let picked = tape.sum(picked);
    Ok(tape.neg(tape.log(picked)))
}

/// Generator loss `-ln D_d(f_g)`; the discriminator is held constant.
pub fn loss_g_on(tape: &Tape, disc: &DiscriminatorVars, generated: Var) -> Result<Var> {
    let frozen = disc.detached(tape);
    let p = discriminate_on(tape, &frozen, generated)?;
    Ok(tape.neg(tape.log(p)))
}

/// Adversarial loss `-ln D_d(f_vis) - ln(1 - D_d(f_g))`; `f_g` is detached.
pub fn loss_adversarial_on(tape: &Tape, disc: &DiscriminatorVars, real: Var, generated: Var) -> Result<Var> {
    let fake = tape.detach(generated);
    let p_real = discriminate_on(tape, disc, real)?;
    let p_fake = discriminate_on(tape, disc, fake)?;
    let real_term = tape.log(p_real);
    let one_minus = tape.add_scalar(tape.neg(p_fake), 1.0);
    let fake_term = tape.log(one_minus);
    let s = tape.add(real_term, fake_term)?;
    Ok(tape.neg(s))
}

/// Predictive loss `-ln(l · D_p(f_inf, f_g))`; `f_g` is detached.
pub fn loss_predictive_on(
    tape: &Tape,
    disc: &DiscriminatorVars,
    infrared: Var,
    generated: Var,
    label: &[f64],
) -> Result<Var> {
    let fake = tape.detach(generated);
    let probs = predict_on(tape, disc, infrared, fake)?;
    cross_entropy_on(tape, probs, label)
}

/// Terms of the discriminative loss recorded on one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminativeTerms {
    pub adversarial: Var,
    pub predictive: Var,
    pub total: Var,
}

/// `w1 · L_a + w2 · L_p` with `f_g` detached.
pub fn loss_d_on(
    tape: &Tape,
    disc: &DiscriminatorVars,
    real: Var,
    infrared: Var,
    generated: Var,
    label: &[f64],
    weights: LossWeights,
) -> Result<DiscriminativeTerms> {
    weights.validate()?;
    let adversarial = loss_adversarial_on(tape, disc, real, generated)?;
    let predictive = loss_predictive_on(tape, disc, infrared, generated, label)?;
    let total = tape.add(tape.scale(adversarial, weights.w1), tape.scale(predictive, weights.w2))?;
    Ok(DiscriminativeTerms { adversarial, predictive, total })
}

pub fn validate_one_hot(label: &[f64], classes: usize) -> Result<usize> {
    if label.len() != classes {
        return Err(Error::Contract(format!("label has {} entries, expected {classes}", label.len())));
    }
    let mut hot = None;
    for (i, &v) in label.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::Contract(format!("label {label:?} is not one-hot")));
        }
    }
    hot.ok_or_else(|| Error::Contract(format!("label {label:?} is not one-hot")))
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut l = vec![0.0; classes];
    l[class] = 1.0;
    l
}

/// Applies the generator to a fused infrared map, drawing noise channels
/// from `rng` when noise is enabled.
pub fn generate<R: Rng + ?Sized>(
    infrared: &FeatureMap,
    config: &ModelConfig,
    params: &GeneratorParams,
    rng: &mut R,
) -> Result<FeatureMap> {
    let z = config.noise.sample(config.height, config.width, rng);
    generate_with_noise(infrared, config, params, z)
}

/// Applies the generator with all noise channels set to zero.
pub fn generate_noiseless(infrared: &FeatureMap, config: &ModelConfig, params: &GeneratorParams) -> Result<FeatureMap> {
    let z = config.noise.enabled.then(|| Tensor::zeros([config.height, config.width, config.noise.channels]));
    generate_with_noise(infrared, config, params, z)
}

fn generate_with_noise(
    infrared: &FeatureMap,
    config: &ModelConfig,
    params: &GeneratorParams,
    noise: Option<Tensor>,
) -> Result<FeatureMap> {
    config.check_map(infrared)?;
    let tape = Tape::new();
    let gen = params.bind(&tape, false);
    let x = tape.constant(infrared.tensor().clone());
    let z = noise.map(|z| tape.constant(z));
    let out = generate_on(&tape, &gen, x, z)?;
    FeatureMap::new(tape.value(out))
}

pub fn discriminate(f: &FeatureMap, config: &ModelConfig, params: &DiscriminatorParams) -> Result<f64> {
    config.check_map(f)?;
    let tape = Tape::new();
    let disc = params.bind(&tape, false);
    let p = discriminate_on(&tape, &disc, tape.constant(f.tensor().clone()))?;
    Ok(tape.scalar_value(p))
}

pub fn predict(
    infrared: &FeatureMap,
    visible: &FeatureMap,
    config: &ModelConfig,
    params: &DiscriminatorParams,
) -> Result<Vec<f64>> {
    config.check_map(infrared)?;
    config.check_map(visible)?;
    let tape = Tape::new();
    let disc = params.bind(&tape, false);
    let p =
        predict_on(&tape, &disc, tape.constant(infrared.tensor().clone()), tape.constant(visible.tensor().clone()))?;
    Ok(tape.value(p).into_data())
}

pub fn predict_single(f: &FeatureMap, config: &ModelConfig, head: &LinearHead) -> Result<Vec<f64>> {
    config.check_map(f)?;
    let tape = Tape::new();
    let h = head.bind(&tape, false);
    let p = predict_single_on(&tape, &h, tape.constant(f.tensor().clone()))?;
    Ok(tape.value(p).into_data())
}

pub fn loss_g(generated: &FeatureMap, config: &ModelConfig, params: &DiscriminatorParams) -> Result<f64> {
    config.check_map(generated)?;
    let tape = Tape::new();
    let disc = params.bind(&tape, false);
    let l = loss_g_on(&tape, &disc, tape.constant(generated.tensor().clone()))?;
    Ok(tape.scalar_value(l))
}

pub fn loss_adversarial(
    real: &FeatureMap,
    generated: &FeatureMap,
    config: &ModelConfig,
    params: &DiscriminatorParams,
) -> Result<f64> {
    config.check_map(real)?;
    config.check_map(generated)?;
    let tape = Tape::new();
    let disc = params.bind(&tape, false);
    let l = loss_adversarial_on(
        &tape,
        &disc,
        tape.constant(real.tensor().clone()),
        tape.constant(generated.tensor().clone()),
    )?;
    Ok(tape.scalar_value(l))
}

pub fn loss_predictive(
    infrared: &FeatureMap,
    generated: &FeatureMap,
    label: &[f64],
    config: &ModelConfig,
    params: &DiscriminatorParams,
) -> Result<f64> {
    validate_one_hot(label, config.classes)?;
    config.check_map(infrared)?;
    config.check_map(generated)?;
    let tape = Tape::new();
    let disc = params.bind(&tape, false);
    let l = loss_predictive_on(
        &tape,
        &disc,
        tape.constant(infrared.tensor().clone()),
        tape.constant(generated.tensor().clone()),
        label,
    )?;
    Ok(tape.scalar_value(l))
}

/// Values of `(L_a, L_p, L_D)` from a single forward pass.
pub fn loss_d(
    real: &FeatureMap,
    infrared: &FeatureMap,
    generated: &FeatureMap,
    label: &[f64],
    weights: LossWeights,
    config: &ModelConfig,
    params: &DiscriminatorParams,
) -> Result<(f64, f64, f64)> {
    validate_one_hot(label, config.classes)?;
    for f in [real, infrared, generated] {
        config.check_map(f)?;
    }
    let tape = Tape::new();
    let disc = params.bind(&tape, false);
    let t = loss_d_on(
        &tape,
        &disc,
        tape.constant(real.tensor().clone()),
        tape.constant(infrared.tensor().clone()),
        tape.constant(generated.tensor().clone()),
        label,
        weights,
    )?;
    Ok((tape.scalar_value(t.adversarial), tape.scalar_value(t.predictive), tape.scalar_value(t.total)))
}
