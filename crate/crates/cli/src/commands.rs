use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use pmgan_core::trainer::{run_epochs, train_heads, NoObserver, TrainState};
use pmgan_core::{
    evaluate, load_checkpoint, load_dataset, run_gradcheck, save_checkpoint, save_dataset, synthesize,
    synthesize_shifted, AblationTable, Checkpoint, EpochRecord, EvalOptions, GradCheckOptions, LossWeights,
    ModalityMode, NoiseSpec, Scope, SynthConfig, TrainConfig,
};
use serde::Deserialize;
use serde_json::json;

use crate::config::{load_file, Resolved, Source};
use crate::manifest::Manifest;
use crate::{CliError, ConfigArg};

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn required<T>(value: Option<T>, key: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::config(format!("missing required key `{key}` (flag --{})", key.replace('_', "-"))))
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// Clips per sample (T)
    #[arg(long)]
    clips: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    infrared_rank: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    class_spread: Option<f64>,
    #[arg(long)]
    infrared_scale: Option<f64>,
    /// Displacement of the test-split class means
    #[arg(long)]
    shift_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    retain_latents: Option<bool>,
    /// Dataset path [default: <out-dir>/dataset.pmfd]
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    classes: Option<usize>,
    samples_per_class: Option<usize>,
    clips: Option<usize>,
    height: Option<usize>,
    width: Option<usize>,
    channels: Option<usize>,
    latent_dim: Option<usize>,
    infrared_rank: Option<usize>,
    noise_sigma: Option<f64>,
    class_spread: Option<f64>,
    infrared_scale: Option<f64>,
    shift_scale: Option<f64>,
    seed: Option<u64>,
    retain_latents: Option<bool>,
}

pub fn synth(a: SynthArgs, out: &Path) -> Result<(), CliError> {
    let f: SynthFile = load_file(a.config.config.as_deref(), "synth")?;
    let d = SynthConfig::default();
    let mut r = Resolved::default();
    let config = SynthConfig {
        classes: r.pick("classes", a.classes, f.classes, d.classes),
        samples_per_class: r.pick("samples_per_class", a.samples_per_class, f.samples_per_class, d.samples_per_class),
        clips: r.pick("clips", a.clips, f.clips, d.clips),
        height: r.pick("height", a.height, f.height, d.height),
        width: r.pick("width", a.width, f.width, d.width),
        channels: r.pick("channels", a.channels, f.channels, d.channels),
        latent_dim: r.pick("latent_dim", a.latent_dim, f.latent_dim, d.latent_dim),
        infrared_rank: r.pick("infrared_rank", a.infrared_rank, f.infrared_rank, d.infrared_rank),
        noise_sigma: r.pick("noise_sigma", a.noise_sigma, f.noise_sigma, d.noise_sigma),
        class_spread: r.pick("class_spread", a.class_spread, f.class_spread, d.class_spread),
        infrared_scale: r.pick("infrared_scale", a.infrared_scale, f.infrared_scale, d.infrared_scale),
        seed: r.pick("seed", a.seed, f.seed, d.seed),
        retain_latents: r.pick("retain_latents", a.retain_latents, f.retain_latents, d.retain_latents),
    };
    let shift = r.pick("shift_scale", a.shift_scale, f.shift_scale, 0.0);
    let split = if shift == 0.0 { synthesize(&config)? } else { synthesize_shifted(&config, shift)? };

    let path = a.output.unwrap_or_else(|| out.join("dataset.pmfd"));
    save_dataset(&split, &path)?;
    let mut m = Manifest::new("synth");
    m.seed(config.seed);
    m.artifact("dataset", &path);
    m.result("train_samples", json!(split.train.len()));
    m.result("test_samples", json!(split.test.len()));
    m.result("condition", json!(split.condition()));
    m.write(out, &r)?;
    println!("wrote {} ({} train, {} test samples)", path.display(), split.train.len(), split.test.len());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// PMFD dataset to train on
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Continue from a PMGK checkpoint that carries training state
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Epochs to run (further epochs when resuming)
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    beta1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    beta2: Option<f64>,
    /// Weight of the adversarial term in the discriminator loss
    #[arg(long, allow_negative_numbers = true)]
    w1: Option<f64>,
    /// Weight of the predictive term in the discriminator loss
    #[arg(long, allow_negative_numbers = true)]
    w2: Option<f64>,
    /// Discriminator steps per generator step
    #[arg(long)]
    d_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feed the predictive loss back into the generator
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    gen_cls_feedback: Option<bool>,
    /// Concatenate Gaussian noise channels to the generator input
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    noise: Option<bool>,
    #[arg(long)]
    noise_channels: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Generator kernel size (odd)
    #[arg(long)]
    kernel: Option<usize>,
    /// Also train the ablation heads
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    heads: Option<bool>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    dataset: Option<PathBuf>,
    resume: Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    w1: Option<f64>,
    w2: Option<f64>,
    d_steps: Option<usize>,
    seed: Option<u64>,
    gen_cls_feedback: Option<bool>,
    noise: Option<bool>,
    noise_channels: Option<usize>,
    noise_sigma: Option<f64>,
    kernel: Option<usize>,
    heads: Option<bool>,
}

const HYPER_KEYS: [&str; 13] = [
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "w1",
    "w2",
    "d_steps",
    "seed",
    "gen_cls_feedback",
    "noise",
    "noise_channels",
    "noise_sigma",
    "kernel",
];

fn record_hyper(r: &mut Resolved, c: &TrainConfig, source: Source) {
    r.record("batch_size", &c.batch_size, source);
    r.record("lr", &c.learning_rate, source);
    r.record("beta1", &c.beta1, source);
    r.record("beta2", &c.beta2, source);
    r.record("w1", &c.weights.w1, source);
    r.record("w2", &c.weights.w2, source);
    r.record("d_steps", &c.d_steps_per_g_step, source);
    r.record("seed", &c.seed, source);
    r.record("gen_cls_feedback", &c.gen_cls_feedback, source);
    r.record("noise", &c.noise.enabled, source);
    r.record("noise_channels", &c.noise.channels, source);
    r.record("noise_sigma", &c.noise.sigma, source);
    r.record("kernel", &c.kernel, source);
}

pub fn train(a: TrainArgs, out: &Path) -> Result<(), CliError> {
    let f: TrainFile = load_file(a.config.config.as_deref(), "train")?;
    let d = TrainConfig::default();
    let mut r = Resolved::default();
    let dataset = required(r.pick_opt("dataset", a.dataset, f.dataset), "dataset")?;
    let resume = r.pick_opt("resume", a.resume, f.resume);
    let epochs = r.pick("epochs", a.epochs, f.epochs, d.epochs);
    let heads = r.pick("heads", a.heads, f.heads, true);
    let mut config = TrainConfig {
        weights: LossWeights { w1: r.pick("w1", a.w1, f.w1, d.weights.w1), w2: r.pick("w2", a.w2, f.w2, d.weights.w2) },
        learning_rate: r.pick("lr", a.lr, f.lr, d.learning_rate),
        beta1: r.pick("beta1", a.beta1, f.beta1, d.beta1),
        beta2: r.pick("beta2", a.beta2, f.beta2, d.beta2),
        batch_size: r.pick("batch_size", a.batch_size, f.batch_size, d.batch_size),
        epochs,
        d_steps_per_g_step: r.pick("d_steps", a.d_steps, f.d_steps, d.d_steps_per_g_step),
        seed: r.pick("seed", a.seed, f.seed, d.seed),
        gen_cls_feedback: r.pick("gen_cls_feedback", a.gen_cls_feedback, f.gen_cls_feedback, d.gen_cls_feedback),
        noise: {
            let enabled = r.pick("noise", a.noise, f.noise, false);
            let channels = r.pick("noise_channels", a.noise_channels, f.noise_channels, 1);
            let sigma = r.pick("noise_sigma", a.noise_sigma, f.noise_sigma, 1.0);
            if enabled {
                NoiseSpec { enabled, channels, sigma }
            } else {
                NoiseSpec::disabled()
            }
        },
        kernel: r.pick("kernel", a.kernel, f.kernel, d.kernel),
    };
    config.validate()?;

    let split = load_dataset(&dataset)?;
    r.record("clips", &split.config.clips, Source::Dataset);

    let mut state = match &resume {
        None => TrainState::new(&split, &config)?,
        Some(path) => {
            if let Some(k) = HYPER_KEYS.iter().find(|k| r.source(k) != Some(Source::Default)) {
                return Err(CliError::config(format!(
                    "`{k}` cannot be set when resuming; the checkpoint's training configuration is used"
                )));
            }
            let ck = load_checkpoint(path)?;
            let state = ck
                .train_state
                .ok_or_else(|| CliError::config(format!("{}: checkpoint has no training state", path.display())))?;
            config = state.config.clone();
            record_hyper(&mut r, &config, Source::Checkpoint);
            state
        }
    };
    run_epochs(&mut state, &split, epochs, &mut NoObserver)?;
    let models = if heads { Some(train_heads(&split, &state.config, state.params.clone())?) } else { None };

    let ck_path = out.join("model.pmgk");
    let log_path = out.join("train_log.csv");
    save_checkpoint(&Checkpoint::from_state(&state, split.config.clips, models), &ck_path)?;
    write(&log_path, state.log.to_csv())?;

    let mut m = Manifest::new("train");
    m.seed(config.seed);
    m.artifact("dataset", &dataset);
    m.artifact("checkpoint", &ck_path);
    m.artifact("train_log", &log_path);
    m.result("epochs_done", json!(state.epochs_done));
    if let Some(last) = state.log.records.last() {
        m.result("final_epoch", record_json(last));
    }
    m.write(out, &r)?;
    println!("wrote {} and {} after {} epochs", ck_path.display(), log_path.display(), state.epochs_done);
    Ok(())
}

fn record_json(e: &EpochRecord) -> serde_json::Value {
    json!({
        "epoch": e.epoch,
        "loss_g": e.loss_g,
        "loss_a": e.loss_a,
        "loss_p": e.loss_p,
        "loss_d": e.loss_d,
        "d_real_acc": e.d_real_acc,
        "d_fake_acc": e.d_fake_acc,
        "moment_distance": e.moment_distance,
    })
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// PMFD dataset; its test split is evaluated
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// One of infrared, visible, generated, fusion-real, fusion-generated
    #[arg(long, conflicts_with = "all")]
    mode: Option<String>,
    /// Evaluate all five modes
    #[arg(long)]
    all: bool,
    /// Sample generator noise at test time
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    test_noise: Option<bool>,
    /// Seed for test-time noise
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFile {
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    mode: Option<String>,
    test_noise: Option<bool>,
    seed: Option<u64>,
}

pub fn eval(a: EvalArgs, out: &Path) -> Result<(), CliError> {
    let f: EvalFile = load_file(a.config.config.as_deref(), "eval")?;
    let mut r = Resolved::default();
    let checkpoint = required(r.pick_opt("checkpoint", a.checkpoint, f.checkpoint), "checkpoint")?;
    let dataset = required(r.pick_opt("dataset", a.dataset, f.dataset), "dataset")?;
    let flag_mode = if a.all { Some("all".to_string()) } else { a.mode };
    let mode = required(r.pick_opt("mode", flag_mode, f.mode), "mode")?;
    let opts = EvalOptions {
        test_noise: r.pick("test_noise", a.test_noise, f.test_noise, false),
        seed: r.pick("seed", a.seed, f.seed, 0),
    };
    let modes: Vec<ModalityMode> = if mode == "all" { ModalityMode::ALL.to_vec() } else { vec![mode.parse()?] };

    let ck = load_checkpoint(&checkpoint)?;
    let split = load_dataset(&dataset)?;
    let mut rows = Vec::new();
    let mut m = Manifest::new("eval");
    m.seed(opts.seed);
    m.artifact("checkpoint", &checkpoint);
    m.artifact("dataset", &dataset);
    for mode in modes {
        let report = evaluate(&ck.models, &split.test, mode, opts)?;
        if !mode.uses_visible() && report.visible_attempts > 0 {
            return Err(CliError::contract(format!(
                "mode {mode} attempted {} visible-data reads",
                report.visible_attempts
            )));
        }
        let path = out.join(format!("confusion-{}.csv", mode.key()));
        write(&path, report.confusion_csv())?;
        m.artifact(&format!("confusion_{}", mode.key()), &path);
        m.result(
            mode.key(),
            json!({
                "accuracy": report.accuracy,
                "n_test": report.n,
                "visible_withheld": !mode.uses_visible(),
                "visible_reads": report.visible_attempts,
            }),
        );
        rows.push(report);
    }
    let table = AblationTable { condition: split.condition(), rows };
    let table_path = out.join("eval.csv");
    write(&table_path, table.to_csv())?;
    m.artifact("table", &table_path);
    m.write(out, &r)?;
    print!("{table}");
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// op, model or all
    #[arg(long)]
    scope: Option<String>,
    /// Finite-difference step
    #[arg(long)]
    step: Option<f64>,
    /// Maximum accepted relative error
    #[arg(long)]
    tolerance: Option<f64>,
    /// Lower bound on the relative-error denominator
    #[arg(long)]
    floor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Test hook: NAME=DELTA adds DELTA to one analytic gradient entry of every input named NAME
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcheckFile {
    scope: Option<String>,
    step: Option<f64>,
    tolerance: Option<f64>,
    floor: Option<f64>,
    seed: Option<u64>,
    corrupt: Option<String>,
}

fn parse_corrupt(s: &str) -> Result<(String, f64), CliError> {
    let (name, delta) =
        s.split_once('=').ok_or_else(|| CliError::config(format!("corrupt expects NAME=DELTA, got {s:?}")))?;
    let delta = delta.parse().map_err(|_| CliError::config(format!("corrupt delta {delta:?} is not a number")))?;
    Ok((name.to_string(), delta))
}

pub fn gradcheck(a: GradcheckArgs, out: &Path) -> Result<(), CliError> {
    let f: GradcheckFile = load_file(a.config.config.as_deref(), "gradcheck")?;
    let d = GradCheckOptions::default();
    let mut r = Resolved::default();
    let scope_key = r.pick("scope", a.scope, f.scope, "all".to_string());
    let scope: Scope = scope_key.parse()?;
    let corrupt = r.pick_opt("corrupt", a.corrupt, f.corrupt);
    let opts = GradCheckOptions {
        step: r.pick("step", a.step, f.step, d.step),
        tolerance: r.pick("tolerance", a.tolerance, f.tolerance, d.tolerance),
        floor: r.pick("floor", a.floor, f.floor, d.floor),
        seed: r.pick("seed", a.seed, f.seed, d.seed),
        corrupt: corrupt.as_deref().map(parse_corrupt).transpose()?,
    };
    let report = run_gradcheck(scope, &opts)?;
    let listing = format!("{report}\n");
    let path = out.join("gradcheck.txt");
    write(&path, &listing)?;
    let failed: Vec<String> =
        report.results.iter().flat_map(|c| c.failing().map(move |p| format!("{}:{}", c.check, p.name))).collect();
    let mut m = Manifest::new("gradcheck");
    m.seed(opts.seed);
    m.artifact("listing", &path);
    m.result("checks", json!(report.results.len()));
    m.result("max_rel_error", json!(report.max_rel_error()));
    m.result("failed", json!(failed));
    m.write(out, &r)?;
    print!("{listing}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError {
            kind: "gradcheck",
            detail: format!("{} parameter checks failed: {}", failed.len(), failed.join(", ")),
            code: 1,
        })
    }
}

#[derive(Args)]
pub struct ReportArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Training log CSV written by `train`
    #[arg(long)]
    log: Option<PathBuf>,
    /// Evaluation table CSV written by `eval`
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    log: Option<PathBuf>,
    table: Option<PathBuf>,
}

/// Rows of a CSV file as header-keyed lookups.
fn read_csv(path: &Path, header: &str) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let first = lines.next().unwrap_or("");
    if first != header {
        return Err(CliError {
            kind: "format",
            detail: format!("{}: expected header {header:?}, found {first:?}", path.display()),
            code: 4,
        });
    }
    let cols = first.split(',').map(str::to_string).collect();
    let rows = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((cols, rows))
}

fn column(cols: &[String], row: &[String], name: &str, path: &Path) -> Result<f64, CliError> {
    let i = cols.iter().position(|c| c == name).expect("header checked");
    row.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| CliError {
        kind: "format",
        detail: format!("{}: bad {name} value in row {row:?}", path.display()),
        code: 4,
    })
}

pub fn report(a: ReportArgs, out: &Path) -> Result<(), CliError> {
    let f: ReportFile = load_file(a.config.config.as_deref(), "report")?;
    let mut r = Resolved::default();
    let log = r.pick_opt("log", a.log, f.log);
    let table = r.pick_opt("table", a.table, f.table);
    if log.is_none() && table.is_none() {
        return Err(CliError::config("report needs --log, --table or both"));
    }
    let mut m = Manifest::new("report");
    let mut text = String::new();

    if let Some(path) = &log {
        let (cols, rows) = read_csv(path, EpochRecord::CSV_HEADER)?;
        m.artifact("log", path);
        text.push_str(&format!("training log {}: {} epochs\n", path.display(), rows.len()));
        if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
            for name in ["loss_g", "loss_d", "d_real_acc", "d_fake_acc", "moment_distance"] {
                let (a, b) = (column(&cols, first, name, path)?, column(&cols, last, name, path)?);
                text.push_str(&format!("  {name:<16} first {a:>12.6}  last {b:>12.6}\n"));
            }
            let md0 = column(&cols, first, "moment_distance", path)?;
            let md1 = column(&cols, last, "moment_distance", path)?;
            let ratio = md1 / md0;
            text.push_str(&format!("  moment distance ratio last/first {ratio:.4}\n"));
            m.result("moment_distance_ratio", json!(ratio));
        }
    }

    if let Some(path) = &table {
        let (cols, rows) = read_csv(path, AblationTable::CSV_HEADER)?;
        m.artifact("table", path);
        text.push_str(&format!("evaluation table {}:\n", path.display()));
        let mut acc = std::collections::BTreeMap::new();
        for row in &rows {
            let a = column(&cols, row, "accuracy", path)?;
            text.push_str(&format!("  {:<18} {:>7.2}%\n", row[0], 100.0 * a));
            acc.insert(row[0].clone(), a);
        }
        let get = |m: ModalityMode| acc.get(m.key()).copied();
        if let (Some(ir), Some(gen)) = (get(ModalityMode::InfraredOnly), get(ModalityMode::FusionGeneratedVisible)) {
            text.push_str(&format!("  generated fusion minus infrared {:+.4}\n", gen - ir));
            m.result("generated_fusion_gain", json!(gen - ir));
        }
        if let (Some(gen), Some(real)) =
            (get(ModalityMode::FusionGeneratedVisible), get(ModalityMode::FusionRealVisible))
        {
            text.push_str(&format!("  real fusion minus generated fusion {:+.4}\n", real - gen));
        }
        m.result("accuracy", json!(acc));
    }

    let path = out.join("report.txt");
    write(&path, &text)?;
    m.artifact("report", &path);
    m.write(out, &r)?;
    print!("{text}");
    Ok(())
}
