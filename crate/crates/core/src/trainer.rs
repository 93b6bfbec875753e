//! Alternating adversarial training.
//!
//! Each mini-batch first updates the discriminator and predictor on
//! `w1 · L_a + w2 · L_p` with the generator frozen, then updates the
//! generator on `-ln D_d(f_g)` with the discriminator frozen. The run rng
//! drives initialization, per-epoch shuffling and generator noise, and its
//! position is part of [`TrainState`] so a resumed run continues exactly
//! where a straight run would be.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::fusion::{sum_fuse, FeatureMap};
use crate::model::{
    self, cross_entropy_on, discriminate_on, generate_on, loss_d_on, loss_g_on, predict_on, predict_single_on,
    DiscriminatorParams, LinearHead, LossWeights, ModelConfig, ModelSet, NoiseSpec, PmGanParams,
};
use crate::synth::{DatasetSplit, PairedSample};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub d_steps_per_g_step: usize,
    pub seed: u64,
    /// Adds `w2 · L_p` (gradient into the generator only) to the generator loss.
    pub gen_cls_feedback: bool,
    pub noise: NoiseSpec,
    /// Kernel size of the generator convolutions.
    pub kernel: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 2e-5,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 30,
            epochs: 200,
            d_steps_per_g_step: 1,
            seed: 0,
            gen_cls_feedback: false,
            noise: NoiseSpec::disabled(),
            kernel: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.noise.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if self.d_steps_per_g_step == 0 {
            return bad("d_steps_per_g_step must be >= 1".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: 1e-8 }
    }

    pub fn model_config(&self, split: &DatasetSplit) -> ModelConfig {
        let c = &split.config;
        ModelConfig {
            height: c.height,
            width: c.width,
            channels: c.channels,
            classes: c.classes,
            kernel: self.kernel,
            noise: self.noise,
        }
    }
}

/// Per-epoch training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_g: f64,
    pub loss_a: f64,
    pub loss_p: f64,
    pub loss_d: f64,
    /// Fraction of real visible maps with `D_d > 0.5` during D steps.
    pub d_real_acc: f64,
    /// Fraction of generated maps with `D_d < 0.5` during D steps.
    pub d_fake_acc: f64,
    /// Moment distance between generated and real visible monitor maps
    /// after the epoch.
    pub moment_distance: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,loss_g,loss_a,loss_p,loss_d,d_real_acc,d_fake_acc,moment_distance,wall_seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_g,
            self.loss_a,
            self.loss_p,
            self.loss_d,
            self.d_real_acc,
            self.d_fake_acc,
            self.moment_distance,
            self.wall_seconds
        )
    }

    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &EpochRecord) -> bool {
        EpochRecord { wall_seconds: 0.0, ..self.clone() } == EpochRecord { wall_seconds: 0.0, ..other.clone() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EpochRecord::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn same_values(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_values(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
}

/// One parameter update as seen by a [`TrainObserver`].
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub phase: Phase,
    pub before: &'a PmGanParams,
    pub after: &'a PmGanParams,
}

pub trait TrainObserver {
    fn on_step(&mut self, _event: &StepEvent<'_>) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// One sample with its clip stacks already fused.
#[derive(Clone, Debug)]
pub struct FusedSample {
    pub infrared: Tensor,
    pub visible: Tensor,
    pub class: usize,
}

pub fn fuse_samples(samples: &[PairedSample]) -> Vec<FusedSample> {
    samples
        .iter()
        .map(|s| FusedSample {
            infrared: sum_fuse(&s.infrared).into_tensor(),
            visible: sum_fuse(&s.visible).into_tensor(),
            class: s.class,
        })
        .collect()
}

/// Relative Frobenius distance between the means plus that between the
/// (population) covariances of two sets of flattened maps.
pub fn moment_distance(real: &[FeatureMap], fake: &[FeatureMap]) -> Result<f64> {
    let (Some(r0), Some(f0)) = (real.first(), fake.first()) else {
        return Err(Error::Config("moment distance needs non-empty sets".into()));
    };
    let dims = r0.dims();
    if let Some(bad) = real.iter().chain(fake).find(|m| m.dims() != dims) {
        return Err(Error::Dimension { op: "moment_distance", lhs: dims.to_vec(), rhs: bad.dims().to_vec() });
    }
    let _ = f0;
    let stats = |maps: &[FeatureMap]| {
        let n = maps[0].data().len();
        let count = maps.len() as f64;
        let mut mean = vec![0.0; n];
        for m in maps {
            for (a, &x) in mean.iter_mut().zip(m.data()) {
                *a += x;
            }
        }
        for a in &mut mean {
            *a /= count;
        }
        let mut cov = vec![0.0; n * n];
        let mut centered = vec![0.0; n];
        for m in maps {
            for ((c, &x), &mu) in centered.iter_mut().zip(m.data()).zip(&mean) {
                *c = x - mu;
            }
            for i in 0..n {
                let ci = centered[i];
                let row = &mut cov[i * n..(i + 1) * n];
                for (o, &cj) in row.iter_mut().zip(&centered) {
                    *o += ci * cj;
                }
            }
        }
        for c in &mut cov {
            *c /= count;
        }
        (mean, cov)
    };
    let (mr, cr) = stats(real);
    let (mf, cf) = stats(fake);
    Ok(relative_distance(&mf, &mr) + relative_distance(&cf, &cr))
}

fn relative_distance(x: &[f64], reference: &[f64]) -> f64 {
    let diff: f64 = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = reference.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Everything needed to continue a run: parameters, optimizer moments,
/// the rng position and the log so far.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: PmGanParams,
    pub d_opt: AdamState,
    pub g_opt: AdamState,
    pub rng: ChaCha8Rng,
    pub epochs_done: usize,
    pub log: TrainLog,
}

impl TrainState {
    pub fn new(split: &DatasetSplit, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = PmGanParams::init(config.model_config(split), &mut rng)?;
        let d_opt = AdamState::new(config.adam(), &params.discriminator.tensors());
        let g_opt = AdamState::new(config.adam(), &params.generator.tensors());
        Ok(Self { config: config.clone(), params, d_opt, g_opt, rng, epochs_done: 0, log: TrainLog::default() })
    }
}

/// Trains for `config.epochs` epochs from a fresh initialization.
pub fn train(split: &DatasetSplit, config: &TrainConfig) -> Result<(PmGanParams, TrainLog)> {
    let mut state = TrainState::new(split, config)?;
    run_epochs(&mut state, split, config.epochs, &mut NoObserver)?;
    Ok((state.params, state.log))
}

pub fn train_observed(
    split: &DatasetSplit,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(PmGanParams, TrainLog)> {
    let mut state = TrainState::new(split, config)?;
    run_epochs(&mut state, split, config.epochs, observer)?;
    Ok((state.params, state.log))
}

fn sample_noise(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Option<Tensor> {
    config.noise.sample(config.height, config.width, rng)
}

/// Runs `epochs` further epochs on `state`.
pub fn run_epochs(
    state: &mut TrainState,
    split: &DatasetSplit,
    epochs: usize,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    if split.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mc = state.params.config;
    if mc.map_dims() != split.config.map_dims() || mc.classes != split.config.classes {
        return Err(Error::Dimension {
            op: "train",
            lhs: vec![mc.height, mc.width, mc.channels, mc.classes],
            rhs: vec![split.config.height, split.config.width, split.config.channels, split.config.classes],
        });
    }
    let train_set = fuse_samples(&split.train);
    let monitor_src = if split.test.is_empty() { &split.train } else { &split.test };
    let monitor = fuse_samples(monitor_src);
    let monitor_real: Vec<FeatureMap> =
        monitor.iter().map(|s| FeatureMap::new(s.visible.clone())).collect::<Result<_>>()?;

    for _ in 0..epochs {
        let started = Instant::now();
        let epoch = state.epochs_done + 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut state.rng);

        let mut acc = EpochAccumulator::default();
        for (b, chunk) in order.chunks(state.config.batch_size).enumerate() {
            let batch: Vec<&FusedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            for _ in 0..state.config.d_steps_per_g_step {
                let before = state.params.clone();
                discriminator_step(state, &batch, epoch, b + 1, &mut acc)?;
                observer.on_step(&StepEvent {
                    epoch,
                    batch: b + 1,
                    phase: Phase::Discriminator,
                    before: &before,
                    after: &state.params,
                });
            }
            let before = state.params.clone();
            generator_step(state, &batch, epoch, b + 1, &mut acc)?;
            observer.on_step(&StepEvent {
                epoch,
                batch: b + 1,
                phase: Phase::Generator,
                before: &before,
                after: &state.params,
            });
        }

        let generated: Vec<FeatureMap> = monitor
            .iter()
            .map(|s| {
                let f = FeatureMap::new(s.infrared.clone())?;
                model::generate_noiseless(&f, &mc, &state.params.generator)
            })
            .collect::<Result<_>>()?;
        let moment_distance = moment_distance(&monitor_real, &generated)?;
        state.log.records.push(acc.finish(epoch, moment_distance, started.elapsed().as_secs_f64()));
        state.epochs_done = epoch;
    }
    Ok(())
}

#[derive(Default)]
struct EpochAccumulator {
    g_sum: f64,
    g_batches: usize,
    a_sum: f64,
    p_sum: f64,
    d_sum: f64,
    d_batches: usize,
    real_hits: usize,
    fake_hits: usize,
    seen: usize,
}

impl EpochAccumulator {
    fn finish(&self, epoch: usize, moment_distance: f64, wall_seconds: f64) -> EpochRecord {
        let d = self.d_batches.max(1) as f64;
        EpochRecord {
            epoch,
            loss_g: self.g_sum / self.g_batches.max(1) as f64,
            loss_a: self.a_sum / d,
            loss_p: self.p_sum / d,
            loss_d: self.d_sum / d,
            d_real_acc: self.real_hits as f64 / self.seen.max(1) as f64,
            d_fake_acc: self.fake_hits as f64 / self.seen.max(1) as f64,
            moment_distance,
            wall_seconds,
        }
    }
}

fn check_finite(value: f64, epoch: usize, batch: usize, component: &'static str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { epoch, batch, component })
    }
}

fn discriminator_step(
    state: &mut TrainState,
    batch: &[&FusedSample],
    epoch: usize,
    batch_no: usize,
    acc: &mut EpochAccumulator,
) -> Result<()> {
    let mc = state.params.config;
    let tape = Tape::new();
    let gen = state.params.generator.bind(&tape, false);
    let disc = state.params.discriminator.bind(&tape, true);
    let inv = 1.0 / batch.len() as f64;

    let mut total = None;
    let (mut la, mut lp) = (0.0, 0.0);
    for s in batch {
        let x = tape.constant(s.infrared.clone());
        let z = sample_noise(&mc, &mut state.rng).map(|z| tape.constant(z));
        let fg = generate_on(&tape, &gen, x, z)?;
        let real = tape.constant(s.visible.clone());
        let label = model::one_hot(s.class, mc.classes);
        let terms = loss_d_on(&tape, &disc, real, x, fg, &label, state.config.weights)?;
        la += tape.scalar_value(terms.adversarial);
        lp += tape.scalar_value(terms.predictive);

        let frozen = disc.detached(&tape);
        if tape.scalar_value(discriminate_on(&tape, &frozen, real)?) > 0.5 {
            acc.real_hits += 1;
        }
        if tape.scalar_value(discriminate_on(&tape, &frozen, fg)?) < 0.5 {
            acc.fake_hits += 1;
        }
        acc.seen += 1;

        let scaled = tape.scale(terms.total, inv);
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let total = total.expect("non-empty batch");
    let loss = tape.scalar_value(total);
    check_finite(la, epoch, batch_no, "adversarial loss")?;
    check_finite(lp, epoch, batch_no, "predictive loss")?;
    check_finite(loss, epoch, batch_no, "discriminative loss")?;

    let grads = tape.backward(total)?;
    let grad_list: Vec<&Tensor> = disc.all().iter().map(|&v| grads.wrt(v)).collect();
    state.d_opt.step(&mut state.params.discriminator.tensors_mut(), &grad_list)?;

    acc.a_sum += la * inv;
    acc.p_sum += lp * inv;
    acc.d_sum += loss;
    acc.d_batches += 1;
    Ok(())
}

fn generator_step(
    state: &mut TrainState,
    batch: &[&FusedSample],
    epoch: usize,
    batch_no: usize,
    acc: &mut EpochAccumulator,
) -> Result<()> {
    let mc = state.params.config;
    let tape = Tape::new();
    let gen = state.params.generator.bind(&tape, true);
    let disc = state.params.discriminator.bind(&tape, false);
    let inv = 1.0 / batch.len() as f64;
    let w2 = state.config.weights.w2;

    let mut total = None;
    let mut lg_sum = 0.0;
    for s in batch {
        let x = tape.constant(s.infrared.clone());
        let z = sample_noise(&mc, &mut state.rng).map(|z| tape.constant(z));
        let fg = generate_on(&tape, &gen, x, z)?;
        let lg = loss_g_on(&tape, &disc, fg)?;
        lg_sum += tape.scalar_value(lg);
        let mut sample_loss = lg;
        if state.config.gen_cls_feedback {
            let probs = predict_on(&tape, &disc, x, fg)?;
            let lp = cross_entropy_on(&tape, probs, &model::one_hot(s.class, mc.classes))?;
            sample_loss = tape.add(lg, tape.scale(lp, w2))?;
        }
        let scaled = tape.scale(sample_loss, inv);
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let total = total.expect("non-empty batch");
    check_finite(tape.scalar_value(total), epoch, batch_no, "generator loss")?;

    let grads = tape.backward(total)?;
    let grad_list: Vec<&Tensor> = gen.vars.iter().map(|&v| grads.wrt(v)).collect();
    state.g_opt.step(&mut state.params.generator.tensors_mut(), &grad_list)?;

    acc.g_sum += lg_sum * inv;
    acc.g_batches += 1;
    Ok(())
}

/// Which fused map(s) a standalone classifier consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInput {
    Infrared,
    Visible,
    Generated,
}

/// Trains a single-modality softmax head with the same optimizer settings,
/// batch size and epoch budget as the main model. `features` are flattened
/// fused maps paired with class indices.
pub fn train_linear_head(
    features: &[(Tensor, usize)],
    model_config: &ModelConfig,
    config: &TrainConfig,
    stream: u64,
) -> Result<LinearHead> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::Config("no training features for head".into()));
    }
    let mut rng = head_rng(config.seed, stream);
    let mut head = LinearHead::init(model_config, &mut rng);
    let mut opt = AdamState::new(config.adam(), &head.tensors());
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let tape = Tape::new();
            let vars = head.bind(&tape, true);
            let inv = 1.0 / chunk.len() as f64;
            let mut total = None;
            for &i in chunk {
                let (f, class) = &features[i];
                let probs = predict_single_on(&tape, &vars, tape.constant(f.clone()))?;
                let l = cross_entropy_on(&tape, probs, &model::one_hot(*class, model_config.classes))?;
                let l = tape.scale(l, inv);
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("non-empty batch");
            check_finite(tape.scalar_value(total), epoch, b + 1, "head loss")?;
            let grads = tape.backward(total)?;
            opt.step(&mut head.tensors_mut(), &[grads.wrt(vars.weights), grads.wrt(vars.bias)])?;
        }
    }
    Ok(head)
}

/// Trains the fusion filter and predictor on real infrared/visible pairs.
/// The adversarial head of the result is left at its initialization.
pub fn train_fusion_head(
    pairs: &[FusedSample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    stream: u64,
) -> Result<DiscriminatorParams> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs for fusion head".into()));
    }
    let mut rng = head_rng(config.seed, stream);
    let mut params = DiscriminatorParams::init(model_config, &mut rng);
    let mut opt = AdamState::new(config.adam(), &params.tensors());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let tape = Tape::new();
            let vars = params.bind(&tape, true);
            let inv = 1.0 / chunk.len() as f64;
            let mut total = None;
            for &i in chunk {
                let s = &pairs[i];
                let probs =
                    predict_on(&tape, &vars, tape.constant(s.infrared.clone()), tape.constant(s.visible.clone()))?;
                let l = cross_entropy_on(&tape, probs, &model::one_hot(s.class, model_config.classes))?;
                let l = tape.scale(l, inv);
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("non-empty batch");
            check_finite(tape.scalar_value(total), epoch, b + 1, "fusion head loss")?;
            let grads = tape.backward(total)?;
            let grad_list: Vec<&Tensor> = vars.all().iter().map(|&v| grads.wrt(v)).collect();
            opt.step(&mut params.tensors_mut(), &grad_list)?;
        }
    }
    Ok(params)
}

fn head_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Flattened fused features of one modality for every sample, with the
/// generated modality produced by `main`'s generator (noise channels zero).
pub fn head_features(samples: &[FusedSample], input: HeadInput, main: &PmGanParams) -> Result<Vec<(Tensor, usize)>> {
    samples
        .iter()
        .map(|s| {
            let t = match input {
                HeadInput::Infrared => s.infrared.clone(),
                HeadInput::Visible => s.visible.clone(),
                HeadInput::Generated => {
                    let f = FeatureMap::new(s.infrared.clone())?;
                    model::generate_noiseless(&f, &main.config, &main.generator)?.into_tensor()
                }
            };
            Ok((t, s.class))
        })
        .collect()
}

/// Trains the main model followed by every auxiliary head needed for the
/// five-row modality ablation.
pub fn train_ablation(split: &DatasetSplit, config: &TrainConfig) -> Result<(ModelSet, TrainLog)> {
    let (main, log) = train(split, config)?;
    let heads = train_heads(split, config, main)?;
    Ok((heads, log))
}

/// Trains the auxiliary heads around an already trained main model.
pub fn train_heads(split: &DatasetSplit, config: &TrainConfig, main: PmGanParams) -> Result<ModelSet> {
    let fused = fuse_samples(&split.train);
    let mc = main.config;
    let infrared = train_linear_head(&head_features(&fused, HeadInput::Infrared, &main)?, &mc, config, 1)?;
    let visible = train_linear_head(&head_features(&fused, HeadInput::Visible, &main)?, &mc, config, 2)?;
    let generated = train_linear_head(&head_features(&fused, HeadInput::Generated, &main)?, &mc, config, 3)?;
    let fusion_real = train_fusion_head(&fused, &mc, config, 4)?;
    Ok(ModelSet {
        main,
        infrared_head: Some(infrared),
        visible_head: Some(visible),
        generated_head: Some(generated),
        fusion_real: Some(fusion_real),
    })
}

/// A fresh 64-bit value from the run rng, for deriving auxiliary seeds.
pub fn derive_seed(rng: &mut ChaCha8Rng) -> u64 {
    rng.next_u64()
}
