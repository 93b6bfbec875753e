//! Central finite-difference verification of the tape gradients.
//!
//! Each check is a scalar function of named input tensors, rebuilt on a
//! fresh tape for every evaluation. Non-scalar primitive ops are reduced
//! with a fixed random weighting `sum(out ⊙ R)` so every output element
//! contributes. The error of one entry is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::conv_fuse_on;
use crate::model::{
    self, DiscriminatorParams, GeneratorParams, GeneratorVars, LossWeights, ModelConfig, NoiseSpec, PmGanParams,
};
use crate::synth::{synthesize, SynthConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::fuse_samples;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Model,
    All,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "model" => Ok(Scope::Model),
            "all" => Ok(Scope::All),
            _ => Err(Error::Config(format!("unknown gradcheck scope {s:?}; expected op, model or all"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
    /// Test hook: adds `delta` to the first analytic gradient entry of every
    /// input with this name.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, tolerance: 1e-6, floor: 1e-3, seed: 0, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub check: String,
    pub params: Vec<ParamError>,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamError> {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        self.params.iter().filter(|p| !(p.max_rel_error < self.tolerance))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.results.iter().map(CheckResult::max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            for p in &r.params {
                let verdict = if p.max_rel_error < r.tolerance { "PASS" } else { "FAIL" };
                writeln!(
                    f,
                    "{verdict} {}:{} max_rel_error={:.3e} entries={}",
                    r.check, p.name, p.max_rel_error, p.entries
                )?;
            }
        }
        let n = self.results.len();
        let failed = self.results.iter().filter(|r| !r.passed()).count();
        write!(f, "{} of {n} checks passed; max relative error {:.3e}", n - failed, self.max_rel_error())
    }
}

type Builder<'a> = dyn Fn(&Tape, &[Var]) -> Result<Var> + 'a;

/// Checks `build` against central differences with respect to every input.
pub fn check_function(
    check: &str,
    inputs: &[(String, Tensor)],
    build: &Builder<'_>,
    opts: &GradCheckOptions,
) -> Result<CheckResult> {
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&tape, &vars)?;
        Ok(tape.scalar_value(out))
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let root = build(&tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut params = Vec::with_capacity(inputs.len());
    for (k, (name, _)) in inputs.iter().enumerate() {
        let mut analytic = grads.wrt(vars[k]).clone();
        if let Some((target, delta)) = &opts.corrupt {
            if target == name {
                analytic.data_mut()[0] += delta;
            }
        }
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for i in 0..values[k].len() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&values)?;
            values[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            max_abs = max_abs.max(abs);
            // NaN must register as a failure.
            max_rel = if rel.is_nan() { f64::INFINITY } else { max_rel.max(rel) };
        }
        params.push(ParamError {
            name: name.clone(),
            entries: values[k].len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(CheckResult { check: check.to_string(), params, tolerance: opts.tolerance })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from the relu kink so the finite difference never
/// straddles it.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn weighted_sum(tape: &Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    Ok(tape.sum(tape.mul(out, w)?))
}

fn op_check(
    name: &str,
    inputs: Vec<(&str, Tensor)>,
    out_shape: &[usize],
    op: impl Fn(&Tape, &[Var]) -> Result<Var>,
    rng: &mut ChaCha8Rng,
    opts: &GradCheckOptions,
) -> Result<CheckResult> {
    let weights = uniform(out_shape, -1.0, 1.0, rng);
    let inputs: Vec<(String, Tensor)> = inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    let build = |tape: &Tape, v: &[Var]| -> Result<Var> {
        let out = op(tape, v)?;
        if tape.shape(out).is_empty() {
            Ok(out)
        } else {
            weighted_sum(tape, out, &weights)
        }
    };
    check_function(name, &inputs, &build, opts)
}

/// Every primitive tape operation.
pub fn check_ops(opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let (h, w, c) = (3, 2, 2);

    let a = uniform(&[3, 4], -1.0, 1.0, r);
    let b = uniform(&[4, 2], -1.0, 1.0, r);
    out.push(op_check("matmul", vec![("a", a), ("b", b)], &[3, 2], |t, v| t.matmul(v[0], v[1]), r, opts)?);

    for k in [1, 3] {
        let x = uniform(&[h, w, c], -1.0, 1.0, r);
        let f = uniform(&[k, k, c, 3], -1.0, 1.0, r);
        let bias = uniform(&[3], -1.0, 1.0, r);
        out.push(op_check(
            &format!("conv_same_k{k}"),
            vec![("input", x), ("filter", f), ("bias", bias)],
            &[h, w, 3],
            |t, v| t.conv_same(v[0], v[1], v[2]),
            r,
            opts,
        )?);
    }

    let x = uniform(&[h, w, 4], -1.0, 1.0, r);
    let f = uniform(&[1, 1, 4, 2], -1.0, 1.0, r);
    let bias = uniform(&[2], -1.0, 1.0, r);
    out.push(op_check(
        "conv1x1",
        vec![("input", x), ("filter", f), ("bias", bias)],
        &[h, w, 2],
        |t, v| t.conv1x1(v[0], v[1], v[2]),
        r,
        opts,
    )?);

    let shape = [h, w, c];
    let x = uniform(&shape, -1.0, 1.0, r);
    let y = uniform(&shape, -1.0, 1.0, r);
    out.push(op_check("add", vec![("a", x.clone()), ("b", y.clone())], &shape, |t, v| t.add(v[0], v[1]), r, opts)?);
    out.push(op_check(
        "add_broadcast",
        vec![("a", x.clone()), ("s", uniform(&[1], -1.0, 1.0, r))],
        &shape,
        |t, v| t.add(v[0], v[1]),
        r,
        opts,
    )?);
    out.push(op_check("mul", vec![("a", x.clone()), ("b", y.clone())], &shape, |t, v| t.mul(v[0], v[1]), r, opts)?);
    out.push(op_check(
        "mul_broadcast",
        vec![("s", uniform(&[1], -1.0, 1.0, r)), ("a", y.clone())],
        &shape,
        |t, v| t.mul(v[0], v[1]),
        r,
        opts,
    )?);
    out.push(op_check("add_scalar", vec![("a", x.clone())], &shape, |t, v| Ok(t.add_scalar(v[0], 0.7)), r, opts)?);
    out.push(op_check("scale", vec![("a", x.clone())], &shape, |t, v| Ok(t.scale(v[0], -1.3)), r, opts)?);
    out.push(op_check("neg", vec![("a", x.clone())], &shape, |t, v| Ok(t.neg(v[0])), r, opts)?);
    let kinked = away_from_zero(&shape, r);
    out.push(op_check("relu", vec![("a", kinked)], &shape, |t, v| Ok(t.relu(v[0])), r, opts)?);
    let wide = uniform(&shape, -4.0, 4.0, r);
    out.push(op_check("sigmoid", vec![("a", wide.clone())], &shape, |t, v| Ok(t.sigmoid(v[0])), r, opts)?);
    let positive = uniform(&shape, 0.2, 2.0, r);
    out.push(op_check("log", vec![("a", positive)], &shape, |t, v| Ok(t.log(v[0])), r, opts)?);
    out.push(op_check("softmax", vec![("a", wide)], &shape, |t, v| Ok(t.softmax(v[0])), r, opts)?);
    out.push(op_check("sum", vec![("a", x.clone())], &[], |t, v| Ok(t.sum(v[0])), r, opts)?);
    out.push(op_check("mean", vec![("a", x.clone())], &[], |t, v| Ok(t.mean(v[0])), r, opts)?);
    out.push(op_check("reshape", vec![("a", x.clone())], &[w, h * c], |t, v| t.reshape(v[0], [w, h * c]), r, opts)?);
    out.push(op_check(
        "interleave",
        vec![("first", x.clone()), ("second", y.clone())],
        &[h, w, 2 * c],
        |t, v| t.interleave(v[0], v[1]),
        r,
        opts,
    )?);
    let z = uniform(&[h, w, 1], -1.0, 1.0, r);
    out.push(op_check(
        "concat_channels",
        vec![("a", x), ("b", z)],
        &[h, w, c + 1],
        |t, v| t.concat_channels(v[0], v[1]),
        r,
        opts,
    )?);
    Ok(out)
}

/// Model configuration of the full-loss checks: `H = W = 2`, `D = 3`,
/// `C = 3`, with `T = 2` clips fused per sample.
pub fn model_check_config() -> SynthConfig {
    SynthConfig {
        classes: 3,
        samples_per_class: 4,
        clips: 2,
        height: 2,
        width: 2,
        channels: 3,
        latent_dim: 4,
        infrared_rank: 2,
        seed: 17,
        ..SynthConfig::default()
    }
}

fn prefixed(names: &[&str], tensors: Vec<&Tensor>) -> Vec<(String, Tensor)> {
    names.iter().zip(tensors).map(|(n, t)| (n.to_string(), t.clone())).collect()
}

fn generator_vars(v: &[Var]) -> GeneratorVars {
    GeneratorVars { vars: v.try_into().expect("eight generator tensors") }
}

fn discriminator_vars(v: &[Var]) -> model::DiscriminatorVars {
    model::DiscriminatorVars {
        d_weights: v[0],
        d_bias: v[1],
        p_weights: v[2],
        p_bias: v[3],
        fusion_filter: v[4],
        fusion_bias: v[5],
    }
}

/// `L_G` with respect to the generator and `L_D` (plus its two terms) with
/// respect to the discriminator, on synthetic samples.
pub fn check_model(opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let sc = model_check_config();
    let split = synthesize(&sc)?;
    let fused = fuse_samples(&split.train);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();

    for noise in [NoiseSpec::disabled(), NoiseSpec { enabled: true, channels: 2, sigma: 1.0 }] {
        let mc = ModelConfig { noise, ..ModelConfig::new(sc.height, sc.width, sc.channels, sc.classes) };
        let mut params = PmGanParams::init(mc, &mut rng)?;
        // Biases start at zero; perturb them so their gradients are exercised
        // away from the initial point.
        for t in params.generator.tensors_mut().into_iter().chain(params.discriminator.tensors_mut()) {
            if t.shape().len() == 1 {
                *t = uniform(t.shape(), -0.3, 0.3, &mut rng);
            }
        }
        let samples = &fused[..2];
        let noises: Vec<Option<Tensor>> = samples.iter().map(|_| noise.sample(mc.height, mc.width, &mut rng)).collect();
        let tag = if noise.enabled { "_noise" } else { "" };

        // L_G averaged over the samples, generator parameters free.
        let disc = params.discriminator.clone();
        let build_g = |tape: &Tape, v: &[Var]| -> Result<Var> {
            let gen = generator_vars(v);
            let dv = disc.bind(tape, false);
            let mut total = None;
            for (s, z) in samples.iter().zip(&noises) {
                let fg = model::generate_on(
                    tape,
                    &gen,
                    tape.constant(s.infrared.clone()),
                    z.clone().map(|z| tape.constant(z)),
                )?;
                let l = model::loss_g_on(tape, &dv, fg)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            Ok(tape.scale(total.expect("samples"), 0.5))
        };
        out.push(check_function(
            &format!("loss_g{tag}"),
            &prefixed(&GeneratorParams::NAMES, params.generator.tensors()),
            &build_g,
            opts,
        )?);

        // L_D and its terms, discriminator/predictor free, f_g constant.
        let generated: Vec<Tensor> = samples
            .iter()
            .zip(&noises)
            .map(|(s, z)| {
                let tape = Tape::new();
                let gen = params.generator.bind(&tape, false);
                let fg = model::generate_on(
                    &tape,
                    &gen,
                    tape.constant(s.infrared.clone()),
                    z.clone().map(|z| tape.constant(z)),
                )?;
                Ok(tape.value(fg))
            })
            .collect::<Result<_>>()?;
        for (term, pick) in [("loss_d", 0usize), ("loss_adversarial", 1), ("loss_predictive", 2)] {
            let build_d = |tape: &Tape, v: &[Var]| -> Result<Var> {
                let dv = discriminator_vars(v);
                let mut total = None;
                for (s, fg) in samples.iter().zip(&generated) {
                    let terms = model::loss_d_on(
                        tape,
                        &dv,
                        tape.constant(s.visible.clone()),
                        tape.constant(s.infrared.clone()),
                        tape.constant(fg.clone()),
                        &model::one_hot(s.class, mc.classes),
                        LossWeights::default(),
                    )?;
                    let l = [terms.total, terms.adversarial, terms.predictive][pick];
                    total = Some(match total {
                        None => l,
                        Some(t) => tape.add(t, l)?,
                    });
                }
                Ok(tape.scale(total.expect("samples"), 0.5))
            };
            let inputs = prefixed(&DiscriminatorParams::NAMES, params.discriminator.tensors());
            // Parameters a term does not reach have zero gradient on both
            // sides; the loss_d check covers all six.
            out.push(check_function(&format!("{term}{tag}"), &inputs, &build_d, opts)?);
        }

        // The fusion conv end to end, as the predictor sees it.
        let s = &samples[0];
        let fused_weights = uniform(&[mc.height, mc.width, mc.channels], -1.0, 1.0, &mut rng);
        let build_f = |tape: &Tape, v: &[Var]| -> Result<Var> {
            let f = conv_fuse_on(tape, v[0], v[1], v[2], v[3])?;
            weighted_sum(tape, f, &fused_weights)
        };
        let inputs = vec![
            ("infrared".to_string(), s.infrared.clone()),
            ("generated".to_string(), generated[0].clone()),
            ("fusion_filter".to_string(), params.discriminator.fusion_filter.clone()),
            ("fusion_bias".to_string(), params.discriminator.fusion_bias.clone()),
        ];
        out.push(check_function(&format!("conv_fuse{tag}"), &inputs, &build_f, opts)?);
    }
    Ok(out)
}

pub fn run_gradcheck(scope: Scope, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut results = Vec::new();
    if matches!(scope, Scope::Op | Scope::All) {
        results.extend(check_ops(opts)?);
    }
    if matches!(scope, Scope::Model | Scope::All) {
        results.extend(check_model(opts)?);
    }
    if let Some((target, _)) = &opts.corrupt {
        if !results.iter().any(|r| r.params.iter().any(|p| &p.name == target)) {
            return Err(Error::Config(format!("corrupt target {target:?} names no checked input")));
        }
    }
    Ok(GradCheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let report = run_gradcheck(Scope::All, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error() < 1e-6);
    }

    #[test]
    fn corrupted_gradient_is_named() {
        let opts = GradCheckOptions { corrupt: Some(("discriminator.p_bias".into(), 1e-3)), ..Default::default() };
        let report = run_gradcheck(Scope::Model, &opts).unwrap();
        assert!(!report.passed());
        let failing: Vec<&str> = report.results.iter().flat_map(|r| r.failing().map(|p| p.name.as_str())).collect();
        assert!(!failing.is_empty());
        assert!(failing.iter().all(|n| *n == "discriminator.p_bias"), "{failing:?}");
        assert!(report.to_string().contains("FAIL loss_d:discriminator.p_bias"));
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("op".parse::<Scope>().unwrap(), Scope::Op);
        assert!("everything".parse::<Scope>().is_err());
    }
}
