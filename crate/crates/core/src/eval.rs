//! Modality ablation, covariate-shift evaluation and confusion matrices.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{sum_fuse, FeatureMap};
use crate::model::{self, ModelConfig, ModelSet};
use crate::synth::{synthesize_shifted, DatasetSplit, PairedSample, SynthConfig};
use crate::trainer::{train_ablation, TrainConfig, TrainLog};

/// The five rows of the ablation, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModalityMode {
    InfraredOnly,
    VisibleOnly,
    GeneratedVisibleOnly,
    FusionRealVisible,
    FusionGeneratedVisible,
}

impl ModalityMode {
    pub const ALL: [ModalityMode; 5] = [
        ModalityMode::InfraredOnly,
        ModalityMode::VisibleOnly,
        ModalityMode::GeneratedVisibleOnly,
        ModalityMode::FusionRealVisible,
        ModalityMode::FusionGeneratedVisible,
    ];

    /// Stable identifier used in CSV files and on the command line.
    pub fn key(self) -> &'static str {
        match self {
            ModalityMode::InfraredOnly => "infrared",
            ModalityMode::VisibleOnly => "visible",
            ModalityMode::GeneratedVisibleOnly => "generated",
            ModalityMode::FusionRealVisible => "fusion-real",
            ModalityMode::FusionGeneratedVisible => "fusion-generated",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModalityMode::InfraredOnly => "Infrared",
            ModalityMode::VisibleOnly => "Visible",
            ModalityMode::GeneratedVisibleOnly => "Generated visible",
            ModalityMode::FusionRealVisible => "Infrared + visible",
            ModalityMode::FusionGeneratedVisible => "Infrared + generated visible",
        }
    }

    /// Whether the mode reads real visible test data.
    pub fn uses_visible(self) -> bool {
        matches!(self, ModalityMode::VisibleOnly | ModalityMode::FusionRealVisible)
    }
}

impl fmt::Display for ModalityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ModalityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModalityMode::ALL.into_iter().find(|m| m.key() == s).ok_or_else(|| {
            let keys: Vec<_> = ModalityMode::ALL.iter().map(|m| m.key()).collect();
            Error::Config(format!("unknown mode {s:?}; expected one of {}", keys.join(", ")))
        })
    }
}

/// Test data as seen by one evaluation. When the visible modality is
/// withheld, the maps are not present at all and every access attempt is
/// counted and refused.
pub struct EvalContext {
    infrared: Vec<FeatureMap>,
    visible: Option<Vec<FeatureMap>>,
    classes: Vec<usize>,
    visible_attempts: Cell<usize>,
}

impl EvalContext {
    pub fn new(samples: &[PairedSample], withhold_visible: bool) -> Self {
        Self {
            infrared: samples.iter().map(|s| sum_fuse(&s.infrared)).collect(),
            visible: (!withhold_visible).then(|| samples.iter().map(|s| sum_fuse(&s.visible)).collect()),
            classes: samples.iter().map(|s| s.class).collect(),
            visible_attempts: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn infrared(&self, i: usize) -> &FeatureMap {
        &self.infrared[i]
    }

    pub fn class(&self, i: usize) -> usize {
        self.classes[i]
    }

    pub fn visible(&self, i: usize) -> Result<&FeatureMap> {
        match &self.visible {
            Some(v) => Ok(&v[i]),
            None => {
                self.visible_attempts.set(self.visible_attempts.get() + 1);
                Err(Error::VisibleWithheld)
            }
        }
    }

    pub fn visible_withheld(&self) -> bool {
        self.visible.is_none()
    }

    /// Refused visible accesses so far.
    pub fn visible_attempts(&self) -> usize {
        self.visible_attempts.get()
    }
}

/// Test-time options.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct EvalOptions {
    /// Sample generator noise at test time (ignored when the model has none).
    pub test_noise: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: ModalityMode,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub n: usize,
    pub seed: u64,
    pub config: ModelConfig,
    /// Visible maps the evaluation attempted to read while they were withheld.
    pub visible_attempts: usize,
}

impl EvalReport {
    pub fn correct(&self) -> u64 {
        (0..self.confusion.len()).map(|c| self.confusion[c][c]).sum()
    }

    /// Confusion matrix with a header row and column of class indices.
    pub fn confusion_csv(&self) -> String {
        let c = self.confusion.len();
        let mut out = String::from("true\\pred");
        for j in 0..c {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn missing(mode: ModalityMode, part: &str) -> Error {
    Error::Config(format!("mode {mode} needs the {part}, which this model set does not contain"))
}

/// Class probabilities of test sample `i` under `mode`.
pub fn predict_sample(
    models: &ModelSet,
    ctx: &EvalContext,
    i: usize,
    mode: ModalityMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<f64>> {
    let mc = models.config();
    let inf = ctx.infrared(i);
    let generated = |rng: Option<&mut ChaCha8Rng>| match rng {
        Some(r) => model::generate(inf, mc, &models.main.generator, r),
        None => model::generate_noiseless(inf, mc, &models.main.generator),
    };
    match mode {
        ModalityMode::InfraredOnly => {
            let head = models.infrared_head.as_ref().ok_or_else(|| missing(mode, "infrared head"))?;
            model::predict_single(inf, mc, head)
        }
        ModalityMode::VisibleOnly => {
            let head = models.visible_head.as_ref().ok_or_else(|| missing(mode, "visible head"))?;
            model::predict_single(ctx.visible(i)?, mc, head)
        }
        ModalityMode::GeneratedVisibleOnly => {
            let head = models.generated_head.as_ref().ok_or_else(|| missing(mode, "generated head"))?;
            model::predict_single(&generated(rng)?, mc, head)
        }
        ModalityMode::FusionRealVisible => {
            let fusion = models.fusion_real.as_ref().ok_or_else(|| missing(mode, "real-visible fusion predictor"))?;
            model::predict(inf, ctx.visible(i)?, mc, fusion)
        }
        ModalityMode::FusionGeneratedVisible => model::predict(inf, &generated(rng)?, mc, &models.main.discriminator),
    }
}

/// Accuracy and confusion matrix of one mode. Real visible data is withheld
/// from every mode that does not need it.
pub fn evaluate(models: &ModelSet, test: &[PairedSample], mode: ModalityMode, opts: EvalOptions) -> Result<EvalReport> {
    let ctx = EvalContext::new(test, !mode.uses_visible());
    evaluate_in(models, &ctx, mode, opts)
}

pub fn evaluate_in(models: &ModelSet, ctx: &EvalContext, mode: ModalityMode, opts: EvalOptions) -> Result<EvalReport> {
    let mc = *models.config();
    if ctx.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let dims = ctx.infrared(0).dims();
    if dims != mc.map_dims() {
        return Err(Error::Dimension { op: "evaluate", lhs: mc.map_dims().to_vec(), rhs: dims.to_vec() });
    }
    let c = mc.classes;
    let mut rng = (opts.test_noise && mc.noise.enabled).then(|| ChaCha8Rng::seed_from_u64(opts.seed));
    let mut confusion = vec![vec![0u64; c]; c];
    for i in 0..ctx.len() {
        let probs = predict_sample(models, ctx, i, mode, rng.as_mut())?;
        let truth = ctx.class(i);
        if truth >= c {
            return Err(Error::Config(format!("test label {truth} outside {c} classes")));
        }
        confusion[truth][argmax(&probs)] += 1;
    }
    let n = ctx.len();
    let correct: u64 = (0..c).map(|k| confusion[k][k]).sum();
    Ok(EvalReport {
        mode,
        accuracy: correct as f64 / n as f64,
        confusion,
        n,
        seed: opts.seed,
        config: mc,
        visible_attempts: ctx.visible_attempts(),
    })
}

/// One report per mode, in table order.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub condition: String,
    pub rows: Vec<EvalReport>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str = "mode,accuracy,n_test,seed";

    pub fn accuracy(&self, mode: ModalityMode) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode).map(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.mode.key(), r.accuracy, r.n, r.seed));
        }
        out
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "condition: {}", self.condition)?;
        writeln!(f, "{:<30} {:>9}", "modality", "accuracy")?;
        for r in &self.rows {
            writeln!(f, "{:<30} {:>8.2}%", r.mode.label(), 100.0 * r.accuracy)?;
        }
        Ok(())
    }
}

/// Evaluates every mode; any missing head is a configuration error.
pub fn ablation_table(models: &ModelSet, split: &DatasetSplit, opts: EvalOptions) -> Result<AblationTable> {
    let rows = ModalityMode::ALL.into_iter().map(|m| evaluate(models, &split.test, m, opts)).collect::<Result<_>>()?;
    Ok(AblationTable { condition: split.condition(), rows })
}

/// The same trained models evaluated on the in-distribution test split and
/// on a covariate-shifted one.
#[derive(Clone, Debug)]
pub struct GeneralizationReport {
    pub models: ModelSet,
    pub log: TrainLog,
    pub unshifted: AblationTable,
    pub shifted: AblationTable,
}

/// Trains on the (shift-independent) training split of `config`, then
/// evaluates on both the plain and the `shift_scale`-displaced test split.
pub fn generalization_eval(
    config: &SynthConfig,
    shift_scale: f64,
    train_config: &TrainConfig,
    opts: EvalOptions,
) -> Result<GeneralizationReport> {
    let plain = synthesize_shifted(config, 0.0)?;
    let shifted = synthesize_shifted(config, shift_scale)?;
    debug_assert_eq!(plain.train, shifted.train);
    let (models, log) = train_ablation(&plain, train_config)?;
    Ok(GeneralizationReport {
        unshifted: ablation_table(&models, &plain, opts)?,
        shifted: ablation_table(&models, &shifted, opts)?,
        models,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiscriminatorParams, LinearHead, PmGanParams};
    use crate::synth::synthesize;
    use crate::tensor::Tensor;

    fn toy_split(classes: usize) -> DatasetSplit {
        synthesize(&SynthConfig {
            classes,
            samples_per_class: 8,
            clips: 2,
            height: 2,
            width: 2,
            channels: 2,
            latent_dim: 4,
            infrared_rank: 2,
            class_spread: 3.0,
            seed: 11,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn zero_set(split: &DatasetSplit) -> ModelSet {
        let c = &split.config;
        let mc = ModelConfig::new(c.height, c.width, c.channels, c.classes);
        let main = PmGanParams {
            config: mc,
            generator: crate::model::GeneratorParams::zeros(&mc),
            discriminator: DiscriminatorParams::zeros(&mc),
        };
        ModelSet {
            main,
            infrared_head: Some(LinearHead::zeros(&mc)),
            visible_head: Some(LinearHead::zeros(&mc)),
            generated_head: Some(LinearHead::zeros(&mc)),
            fusion_real: Some(DiscriminatorParams::zeros(&mc)),
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn uniform_model_predicts_class_zero() {
        let split = toy_split(3);
        let set = zero_set(&split);
        let table = ablation_table(&set, &split, EvalOptions::default()).unwrap();
        let per_class = split.test.iter().filter(|s| s.class == 0).count();
        for r in &table.rows {
            assert_eq!(r.accuracy, per_class as f64 / split.test.len() as f64);
            for row in &r.confusion {
                assert_eq!(row[1..].iter().sum::<u64>(), 0);
            }
        }
    }

    #[test]
    fn oracle_heads_are_perfect() {
        // Two classes whose fused infrared maps differ in sign of the sum.
        let mut split = toy_split(2);
        for s in split.train.iter_mut().chain(split.test.iter_mut()) {
            let sign = if s.class == 0 { 1.0 } else { -1.0 };
            let clip = FeatureMap::new(Tensor::full([2, 2, 2], sign)).unwrap();
            s.infrared = crate::fusion::ClipStack::new(vec![clip.clone()]).unwrap();
            s.visible = crate::fusion::ClipStack::new(vec![clip]).unwrap();
        }
        let mut set = zero_set(&split);
        let mut w = Tensor::zeros([8, 2]);
        for r in 0..8 {
            w.data_mut()[r * 2] = 1.0;
            w.data_mut()[r * 2 + 1] = -1.0;
        }
        let head = LinearHead { weights: w.clone(), bias: Tensor::zeros([2]) };
        set.infrared_head = Some(head.clone());
        set.visible_head = Some(head.clone());
        set.generated_head = Some(head);
        set.main.discriminator.p_weights = w.clone();
        let mut real = set.main.discriminator.clone();
        real.p_weights = w;
        // Pass the infrared channels straight through the fusion filter.
        let mut sel = Tensor::zeros([1, 1, 4, 2]);
        for c in 0..2 {
            sel.data_mut()[(2 * c + 1) * 2 + c] = 1.0;
        }
        set.main.discriminator.fusion_filter = sel.clone();
        real.fusion_filter = sel;
        set.fusion_real = Some(real);

        let table = ablation_table(&set, &split, EvalOptions::default()).unwrap();
        for r in &table.rows {
            assert_eq!(r.accuracy, 1.0, "{}", r.mode);
            assert_eq!(r.confusion[0][1] + r.confusion[1][0], 0);
        }
    }

    #[test]
    fn rows_sum_to_class_counts_and_trace_matches_accuracy() {
        let split = toy_split(3);
        let (set, _) = train_ablation(
            &split,
            &TrainConfig { epochs: 2, batch_size: 6, learning_rate: 1e-2, ..TrainConfig::default() },
        )
        .unwrap();
        let table = ablation_table(&set, &split, EvalOptions::default()).unwrap();
        for r in &table.rows {
            for (c, row) in r.confusion.iter().enumerate() {
                let expected = split.test.iter().filter(|s| s.class == c).count() as u64;
                assert_eq!(row.iter().sum::<u64>(), expected);
            }
            assert!((r.accuracy - r.correct() as f64 / r.n as f64).abs() <= 1e-12);
            assert_eq!(r.visible_attempts, 0);
            assert_eq!(evaluate(&set, &split.test, r.mode, EvalOptions::default()).unwrap(), *r);
        }
    }

    #[test]
    fn withheld_visible_is_refused_and_counted() {
        let split = toy_split(2);
        let set = zero_set(&split);
        let ctx = EvalContext::new(&split.test, true);
        assert!(matches!(ctx.visible(0), Err(Error::VisibleWithheld)));
        let err = evaluate_in(&set, &ctx, ModalityMode::VisibleOnly, EvalOptions::default()).unwrap_err();
        assert!(matches!(err, Error::VisibleWithheld));
        assert_eq!(ctx.visible_attempts(), 2);
        let r = evaluate_in(&set, &ctx, ModalityMode::FusionGeneratedVisible, EvalOptions::default()).unwrap();
        assert_eq!(r.visible_attempts, 2);
        assert_eq!(ctx.visible_attempts(), 2);
    }

    #[test]
    fn missing_head_is_config_error() {
        let split = toy_split(2);
        let mut set = zero_set(&split);
        set.generated_head = None;
        assert!(matches!(
            evaluate(&set, &split.test, ModalityMode::GeneratedVisibleOnly, EvalOptions::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(ablation_table(&set, &split, EvalOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let split = toy_split(2);
        let other = synthesize(&SynthConfig { channels: 3, ..split.config.clone() }).unwrap();
        let set = zero_set(&split);
        assert!(matches!(
            evaluate(&set, &other.test, ModalityMode::InfraredOnly, EvalOptions::default()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn csv_layouts() {
        let split = toy_split(2);
        let set = zero_set(&split);
        let table = ablation_table(&set, &split, EvalOptions { test_noise: false, seed: 5 }).unwrap();
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "mode,accuracy,n_test,seed");
        assert_eq!(lines.len(), 6);
        assert!(lines[1].starts_with("infrared,"));
        assert!(lines[5].starts_with("fusion-generated,"));
        assert!(lines[1].ends_with(",4,5"));
        let cm = table.rows[0].confusion_csv();
        assert_eq!(cm.lines().next().unwrap(), "true\\pred,0,1");
        assert_eq!(cm.lines().count(), 3);
        assert!(table.to_string().contains("Infrared + generated visible"));
    }

    #[test]
    fn mode_keys_round_trip() {
        for m in ModalityMode::ALL {
            assert_eq!(m.key().parse::<ModalityMode>().unwrap(), m);
        }
        assert!("rgb".parse::<ModalityMode>().is_err());
    }
}
