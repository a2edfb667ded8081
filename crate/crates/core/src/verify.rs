//! The property and behaviour suite behind `styleddg verify` and the
//! acceptance target. Every check is seeded, so a report is reproducible
//! byte for byte.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::gradcheck::{check_gradient, GradCheckReport, Probe, DEFAULT_STEP};
use crate::autodiff::{Graph, Var};
use crate::config::ExperimentConfig;
use crate::data::{generate, split_leave_one_domain_out, DataConfig, Shard};
use crate::error::{Error, Result};
use crate::experiment::{mean_std, method_average, prepare_data, run_cell, summarize, Cell};
use crate::federation::{consensus_step, disagreement, LrSchedule, SimConfig, Simulation};
use crate::model::{Model, ModelParams, ModelSpec};
use crate::network::{metropolis_weights, spectral_gap, DeviceGraph, GraphKind, MixingMatrix};
use crate::stats::{
    check_style_bounds, device_style_vector, instance_bound_margin, instance_stats, instance_stats_var, lipschitz_check,
    scalar_count, LayerStyle, StyleVector,
};
use crate::style::{
    adain, dsu, mixstyle_shuffle_forward, style_explore, style_shift, LayerRandomness, StyleLayerConfig, StyleMode,
    StylePlan,
};
use crate::tensor::Tensor4;

pub const CRITERIA: [&str; 10] = [
    "gradients",
    "identities",
    "bounds",
    "lipschitz",
    "style_size",
    "consensus",
    "nesting",
    "stationarity",
    "dg",
    "radius",
];

pub const GRAD_TOL: f64 = 1e-4;
pub const IDENTITY_TOL: f64 = 1e-9;
pub const STOCHASTIC_TOL: f64 = 1e-12;
pub const CONTRACTION_SLACK: f64 = 1e-6;
pub const CONSENSUS_TARGET: f64 = 1e-12;
pub const CONSENSUS_STEPS: usize = 500;
/// Contraction ratios are measured only while the disagreement is above
/// this. Below it, rounding of O(1) parameters (about 1e-16 each) moves the
/// ratio by more than the 1e-6 slack.
pub const CONTRACTION_FLOOR: f64 = 1e-14;
pub const DG_MARGIN: f64 = 0.02;

/// Trial counts; `Default` is the full acceptance setting.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifySettings {
    pub seed: u64,
    pub grad_instances: usize,
    pub identity_instances: usize,
    pub bound_draws: usize,
    pub lipschitz_trials: usize,
    pub nesting_iterations: usize,
    pub stationarity_ks: Vec<usize>,
    pub stationarity_seeds: Vec<u64>,
    /// Deliberately break one Metropolis weight (negative control).
    pub corrupt_mixing: bool,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            seed: 2024,
            grad_instances: 20,
            identity_instances: 100,
            bound_draws: 1000,
            lipschitz_trials: 200,
            nesting_iterations: 50,
            stationarity_ks: vec![250, 500, 1000, 2000],
            stationarity_seeds: vec![1, 2, 3],
            corrupt_mixing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub pass: bool,
    pub summary: String,
    /// Informational lines, including soft-criterion results.
    pub details: Vec<String>,
}

impl Outcome {
    fn new(name: &str, pass: bool, summary: String, details: Vec<String>) -> Self {
        Self { name: name.to_string(), pass, summary, details }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.summary)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Report {
    pub outcomes: Vec<Outcome>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.outcomes.iter().all(|o| o.pass)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for o in &self.outcomes {
            let _ = writeln!(s, "{}", o.line());
            for d in &o.details {
                let _ = writeln!(s, "    {d}");
            }
        }
        let failed = self.outcomes.iter().filter(|o| !o.pass).count();
        let _ = writeln!(s, "{} checks, {} failed", self.outcomes.len(), failed);
        s
    }
}

/// Runs one named check.
pub fn run_check(name: &str, settings: &VerifySettings, cfg: &ExperimentConfig) -> Result<Outcome> {
    match name {
        "gradients" => check_gradients(settings),
        "identities" => check_identities(settings),
        "bounds" => check_bounds(settings),
        "lipschitz" => check_lipschitz(settings),
        "style_size" => check_style_size(),
        "consensus" => check_consensus(settings),
        "nesting" => check_nesting(settings),
        "stationarity" => check_stationarity(settings),
        "dg" => check_dg(cfg),
        "radius" => check_radius(cfg),
        other => Err(Error::Config(format!("unknown check '{other}' (expected one of {})", CRITERIA.join(", ")))),
    }
}

/// Runs `only` (or every check) in the canonical order. `progress` sees each
/// outcome as soon as it is known.
pub fn run_all(
    only: Option<&[String]>,
    settings: &VerifySettings,
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&Outcome),
) -> Result<Report> {
    if let Some(list) = only {
        if let Some(bad) = list.iter().find(|n| !CRITERIA.contains(&n.as_str())) {
            return Err(Error::Config(format!("unknown check '{bad}' (expected one of {})", CRITERIA.join(", "))));
        }
    }
    let mut report = Report::default();
    for name in CRITERIA {
        if only.is_some_and(|l| !l.iter().any(|n| n == name)) {
            continue;
        }
        let o = run_check(name, settings, cfg)?;
        progress(&o);
        report.outcomes.push(o);
    }
    Ok(report)
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

// ---- gradients --------------------------------------------------------------

/// Tiny model used for finite-difference checks.
pub fn gradcheck_spec() -> ModelSpec {
    ModelSpec { in_channels: 2, height: 6, width: 6, channels: vec![3, 4], kernel: 3, pool: 2, classes: 3, hooks: vec![0, 1] }
}

fn model_gradcheck(model: &Model, params: &ModelParams, x: &Tensor4, y: &[usize], plan: &StylePlan) -> Result<GradCheckReport> {
    let (_, grad) = model.loss_and_grad(params, x, y, plan)?;
    let mut err = None;
    let report = check_gradient(&params.values, &grad, DEFAULT_STEP, |p| {
        match model.loss_probe(&ModelParams { values: p.to_vec() }, x, y, plan) {
            Ok(probe) => probe,
            Err(e) => {
                err = Some(e);
                Probe { value: f64::NAN, signature: 0 }
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Single conv block, a style operator, global pooling and a linear head;
/// the operator sees a trainable activation and the gradient is taken with
/// respect to all four parameter tensors.
struct MiniNet {
    dims: [[usize; 4]; 4],
}

impl MiniNet {
    fn new(cin: usize, c: usize, classes: usize) -> Self {
        Self { dims: [[c, cin, 3, 3], [1, c, 1, 1], [classes, c, 1, 1], [1, classes, 1, 1]] }
    }

    fn len(&self) -> usize {
        self.dims.iter().map(|d| d.iter().product::<usize>()).sum()
    }

    fn build<F>(&self, g: &mut Graph, flat: &[f64], x: &Tensor4, y: &[usize], trainable: bool, op: &F) -> Result<(Var, Vec<Var>)>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let mut vars = Vec::new();
        let mut off = 0;
        for d in self.dims {
            let n: usize = d.iter().product();
            let t = Tensor4::from_vec(d, flat[off..off + n].to_vec())?;
            vars.push(if trainable { g.leaf(t) } else { g.constant(t) });
            off += n;
        }
        let xv = g.constant(x.clone());
        let h = g.conv2d(xv, vars[0], vars[1], 1, 1)?;
        let h = g.relu(h)?;
        let h = op(g, h)?;
        let p = g.global_avg_pool(h)?;
        let logits = g.linear(p, vars[2], vars[3])?;
        Ok((g.softmax_cross_entropy(logits, y)?, vars))
    }

    fn check<F>(&self, flat: &[f64], x: &Tensor4, y: &[usize], op: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let mut g = Graph::new();
        let (loss, vars) = self.build(&mut g, flat, x, y, true, &op)?;
        g.backward(loss)?;
        let mut grad = Vec::with_capacity(flat.len());
        for (v, d) in vars.iter().zip(self.dims) {
            match g.grad(*v) {
                Some(gr) => grad.extend_from_slice(gr),
                None => grad.extend(std::iter::repeat_n(0.0, d.iter().product())),
            }
        }
        let mut err = None;
        let report = check_gradient(flat, &grad, DEFAULT_STEP, |p| {
            let mut g = Graph::new();
            match self.build(&mut g, p, x, y, false, &op) {
                Ok((loss, _)) => Probe { value: g.value(loss).data()[0], signature: g.kink_signature() },
                Err(e) => {
                    err = Some(e);
                    Probe { value: f64::NAN, signature: 0 }
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(report),
        }
    }
}

fn random_layer_style(rng: &mut ChaCha8Rng, c: usize) -> LayerStyle {
    LayerStyle {
        mu_bar: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        sigma_bar: (0..c).map(|_| rng.random_range(0.3..1.5)).collect(),
        var_mu: (0..c).map(|_| rng.random_range(0.0..0.3)).collect(),
        var_sigma: (0..c).map(|_| rng.random_range(0.0..0.3)).collect(),
    }
}

/// Finite-difference reports for the six variants, each merged over
/// `instances` random draws.
pub fn gradient_reports(seed: u64, instances: usize) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let spec = gradcheck_spec();
    let model = Model::new(spec.clone())?;
    let channels = spec.hook_channels();
    let b = 4;
    let names = ["plain", "mixstyle", "dsu", "styleshift", "styleexplore", "styleddg"];
    let mut out: Vec<(&'static str, GradCheckReport)> = names.iter().map(|n| (*n, GradCheckReport::default())).collect();
    for inst in 0..instances {
        let mut rng = rng_for(seed, inst as u64);
        let params = model.init_params(rng.random());
        let x = Tensor4::randn(spec.input_dims(b), &mut rng);
        let y = random_labels(&mut rng, b, spec.classes);
        let cfg = |mode| StyleLayerConfig { mode, p_ell: vec![1.0], ..StyleLayerConfig::default() };

        out[0].1.merge(&model_gradcheck(&model, &params, &x, &y, &StylePlan::identity(2))?);

        let plan = StylePlan::sample(&cfg(StyleMode::MixStyle), &mut rng, b, &channels, &[])?;
        out[1].1.merge(&model_gradcheck(&model, &params, &x, &y, &plan)?);

        let plan = StylePlan::sample(&cfg(StyleMode::Dsu), &mut rng, b, &channels, &[])?;
        out[2].1.merge(&model_gradcheck(&model, &params, &x, &y, &plan)?);

        let net = MiniNet::new(2, 3, 3);
        let flat: Vec<f64> = (0..net.len()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let xm = Tensor4::randn([b, 2, 5, 5], &mut rng);
        let psi = random_layer_style(&mut rng, 3);
        let r = LayerRandomness::sample(&mut rng, b, 3, &cfg(StyleMode::StyleDdg), &[1])?;
        let eps_var = crate::stats::DEFAULT_EPS_VAR;
        out[3].1.merge(&net.check(&flat, &xm, &y, |g, h| {
            let (s_idx, c_idx) = r.shift_partition();
            let xs = g.gather_batch(h, &s_idx)?;
            let xc = g.gather_batch(h, &c_idx)?;
            let shifted = style_shift(g, xs, xc, &psi, &r.eps_mu, &r.eps_sigma, eps_var)?;
            g.gather_batch(shifted, &r.restore_order())
        })?);
        out[4].1.merge(&net.check(&flat, &xm, &y, |g, h| {
            style_explore(g, h, &r.explore_mask, &r.mix_perm, r.lambda, 3.0, eps_var)
        })?);

        let other = Tensor4::randn(spec.input_dims(b), &mut rng);
        let sv = device_style_vector(&model, &model.init_params(rng.random()), &other, &spec.hooks, eps_var)?;
        let plan = StylePlan::sample(&cfg(StyleMode::StyleDdg), &mut rng, b, &channels, &[(1, &sv)])?;
        out[5].1.merge(&model_gradcheck(&model, &params, &x, &y, &plan)?);
    }
    Ok(out)
}

pub fn check_gradients(s: &VerifySettings) -> Result<Outcome> {
    let reports = gradient_reports(s.seed, s.grad_instances)?;
    let pass = reports.iter().all(|(_, r)| r.passes(GRAD_TOL));
    let worst = reports.iter().map(|(_, r)| r.max_rel_err).fold(0.0, f64::max);
    let details = reports
        .iter()
        .map(|(n, r)| {
            format!("{n}: max rel err {:.2e} over {} coordinates ({} kink-straddling skipped)", r.max_rel_err, r.checked, r.skipped_kinks)
        })
        .collect();
    Ok(Outcome::new(
        "gradients",
        pass,
        format!("worst rel err {worst:.2e} < {GRAD_TOL:.0e} across 6 variants x {} instances", s.grad_instances),
        details,
    ))
}

// ---- operator identities ----------------------------------------------------

pub fn identity_errors(seed: u64, instances: usize) -> Result<[f64; 4]> {
    let eps_var = crate::stats::DEFAULT_EPS_VAR;
    let mut worst = [0.0f64; 4];
    for inst in 0..instances {
        let mut rng = rng_for(seed, 1000 + inst as u64);
        let b = 2 * rng.random_range(1..4);
        let c = rng.random_range(1..5);
        let scale = rng.random_range(0.1..5.0);
        let mut x = Tensor4::randn([b, c, 5, 5], &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (mu, sigma) = instance_stats_var(&mut g, xv, eps_var)?;
        let outs = [
            adain(&mut g, xv, mu, sigma, eps_var)?,
            {
                let perm = shuffled(&mut rng, b);
                mixstyle_shuffle_forward(&mut g, xv, &perm, 1.0, eps_var)?
            },
            dsu(&mut g, xv, &Tensor4::zeros([b, c, 1, 1]), &Tensor4::zeros([1, c, 1, 1]), eps_var)?,
            {
                let mask: Vec<bool> = (0..b).map(|i| i % 2 == 0).collect();
                let ident: Vec<usize> = (0..b).collect();
                let lambda = rng.random_range(0.0..1.0);
                style_explore(&mut g, xv, &mask, &ident, lambda, 0.0, eps_var)?
            },
        ];
        for (w, o) in worst.iter_mut().zip(outs) {
            *w = w.max(g.value(o).max_abs_diff(&x));
        }
    }
    Ok(worst)
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Counts instances where a StyleDDG plan with every layer inactive fails to
/// reproduce the plain forward pass bit for bit.
pub fn inactive_layer_mismatches(seed: u64, instances: usize) -> Result<usize> {
    let spec = ModelSpec::default();
    let model = Model::new(spec.clone())?;
    let cfg = StyleLayerConfig { p_ell: vec![0.0], ..StyleLayerConfig::default() };
    let mut bad = 0;
    for inst in 0..instances {
        let mut rng = rng_for(seed, 5000 + inst as u64);
        let params = model.init_params(rng.random());
        let x = Tensor4::randn(spec.input_dims(4), &mut rng);
        let sv = device_style_vector(&model, &params, &x, &spec.hooks, cfg.eps_var)?;
        let plan = StylePlan::sample(&cfg, &mut rng, 4, &spec.hook_channels(), &[(1, &sv)])?;
        let plain = model.logits(&params, &x)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &params, &x, &plan, false)?;
        if !plan.is_identity() || g.value(out.logits).data() != plain.data() {
            bad += 1;
        }
    }
    Ok(bad)
}

pub fn check_identities(s: &VerifySettings) -> Result<Outcome> {
    let errs = identity_errors(s.seed, s.identity_instances)?;
    let inactive = inactive_layer_mismatches(s.seed, s.identity_instances)?;
    let names = ["adain with own stats", "mixstyle at lambda=1", "dsu at eps=0", "styleexplore at alpha=0, identity perm"];
    let pass = errs.iter().all(|e| *e <= IDENTITY_TOL) && inactive == 0;
    let mut details: Vec<String> =
        names.iter().zip(errs).map(|(n, e)| format!("{n}: max abs err {e:.2e} (tol {IDENTITY_TOL:.0e})")).collect();
    details.push(format!("inactive styleddg layer: {inactive} non-bit-exact instances"));
    let worst = errs.iter().fold(0.0f64, |m, e| m.max(*e));
    Ok(Outcome::new(
        "identities",
        pass,
        format!("worst err {worst:.2e} <= {IDENTITY_TOL:.0e}, inactive-layer mismatches {inactive}, {} instances each", s.identity_instances),
        details,
    ))
}

// ---- bounded statistics -----------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct BoundsSummary {
    pub draws: usize,
    pub violations: usize,
    /// Smallest margin relative to the bound `U`.
    pub min_relative_margin: f64,
}

pub fn bounds_summary(seed: u64, draws: usize) -> Result<BoundsSummary> {
    let mut violations = 0;
    let mut min_rel = f64::INFINITY;
    for d in 0..draws {
        let mut rng = rng_for(seed, 10_000 + d as u64);
        let spec = ModelSpec { channels: vec![4, 8, 8], ..ModelSpec::default() };
        let model = Model::new(spec.clone())?;
        let params = model.init_params(rng.random());
        let scale = rng.random_range(0.1..5.0);
        let mut x = Tensor4::randn(spec.input_dims(rng.random_range(2..9)), &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let acts = model.activations(&params, &x)?;
        let mut us = Vec::new();
        let mut layers = Vec::new();
        for &h in &spec.hooks {
            let u = acts[h].max_abs();
            let st = instance_stats(&acts[h], 0.0);
            let margin = instance_bound_margin(&st, u);
            if margin < 0.0 {
                violations += 1;
            }
            if u > 0.0 {
                min_rel = min_rel.min(margin / u);
            }
            us.push(u);
            layers.push(LayerStyle::from_instance_stats(&st));
        }
        let report = check_style_bounds(&StyleVector { layers }, &us)?;
        for l in &report.layers {
            if !l.pass {
                violations += 1;
            }
            if l.bound_u > 0.0 {
                min_rel = min_rel.min(l.mu_margin.min(l.sigma_margin) / l.bound_u);
            }
        }
    }
    Ok(BoundsSummary { draws, violations, min_relative_margin: min_rel })
}

pub fn check_bounds(s: &VerifySettings) -> Result<Outcome> {
    let r = bounds_summary(s.seed, s.bound_draws)?;
    Ok(Outcome::new(
        "bounds",
        r.violations == 0,
        format!("{} violations over {} draws, min margin {:.3} U", r.violations, r.draws, r.min_relative_margin),
        vec!["bounds |mu| <= U, |sigma| <= sqrt(2) U, |mu_bar| <= U, |sigma_bar| <= sqrt(2) U".into()],
    ))
}

// ---- Lipschitz statistics ---------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzSummary {
    pub trials: usize,
    pub violations: usize,
    /// Largest observed `ratio / bound` per statistic.
    pub worst_utilization: [f64; 4],
    /// Smallest positive per-channel gamma over all trials and layers.
    pub min_gamma: f64,
    /// Channel checks where gamma was zero, leaving two of the bounds vacuous.
    pub vacuous: usize,
    pub channel_checks: usize,
}

pub fn lipschitz_summary(seed: u64, trials: usize) -> Result<LipschitzSummary> {
    let spec = ModelSpec { channels: vec![4, 8, 8], ..ModelSpec::default() };
    let model = Model::new(spec.clone())?;
    let mut violations = 0;
    let mut worst = [0.0f64; 4];
    let mut min_gamma = f64::INFINITY;
    let mut vacuous = 0;
    let mut channel_checks = 0;
    for t in 0..trials {
        let mut rng = rng_for(seed, 20_000 + t as u64);
        let theta = model.init_params(rng.random());
        let dir: Vec<f64> = (0..theta.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dist = if rng.random_bool(0.5) { 1e-3 } else { 1e-2 };
        let other = ModelParams { values: theta.values.iter().zip(&dir).map(|(a, d)| a + dist * d / norm).collect() };
        let dist = theta.distance(&other);
        let x = Tensor4::randn(spec.input_dims(4), &mut rng);
        let (ha, hb) = (model.activations(&theta, &x)?, model.activations(&other, &x)?);
        for &h in &spec.hooks {
            let c = lipschitz_check(&ha[h], &hb[h], dist)?;
            violations += c.violations;
            min_gamma = min_gamma.min(c.gamma);
            vacuous += c.vacuous_channels;
            channel_checks += c.channels;
            for i in 0..4 {
                worst[i] = worst[i].max(c.utilization[i]);
            }
        }
    }
    Ok(LipschitzSummary { trials, violations, worst_utilization: worst, min_gamma, vacuous, channel_checks })
}

pub fn check_lipschitz(s: &VerifySettings) -> Result<Outcome> {
    let r = lipschitz_summary(s.seed, s.lipschitz_trials)?;
    let w = r.worst_utilization;
    Ok(Outcome::new(
        "lipschitz",
        r.violations == 0,
        format!("{} violations over {} trials", r.violations, r.trials),
        vec![
            format!("largest ratio/bound: mu_bar {:.3}, sigma_bar {:.3}, var_mu {:.3}, var_sigma {:.3}", w[0], w[1], w[2], w[3]),
            format!(
                "smallest positive per-channel gamma {:.3e}; sigma bounds vacuous (gamma = 0) in {} of {} channel checks",
                r.min_gamma, r.vacuous, r.channel_checks
            ),
        ],
    ))
}

// ---- style vector size ------------------------------------------------------

pub fn check_style_size() -> Result<Outcome> {
    let spec = [64, 128, 256];
    let counted = scalar_count(&spec);
    let model = Model::new(ModelSpec { height: 8, width: 8, channels: spec.to_vec(), ..ModelSpec::default() })?;
    let mut rng = rng_for(0, 30_000);
    let x = Tensor4::randn(model.spec().input_dims(2), &mut rng);
    let sv = device_style_vector(&model, &model.init_params(1), &x, &model.spec().hooks, crate::stats::DEFAULT_EPS_VAR)?;
    let measured = sv.flat().len();
    let pass = counted == 1792 && measured == 1792 && sv.scalar_count() == 1792;
    Ok(Outcome::new(
        "style_size",
        pass,
        format!("channels {{64,128,256}} -> {counted} counted, {measured} in a computed style vector (expected 1792)"),
        Vec::new(),
    ))
}

// ---- consensus --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusRun {
    pub label: String,
    pub rho: f64,
    pub stochasticity_error: f64,
    pub symmetric_stochastic: bool,
    /// Largest `D_{k+1} / D_k` observed while `D_k > CONTRACTION_FLOOR`.
    pub worst_contraction: f64,
    /// First step with disagreement below `CONSENSUS_TARGET`.
    pub steps_to_target: Option<usize>,
}

impl ConsensusRun {
    pub fn pass(&self) -> bool {
        self.symmetric_stochastic
            && self.rho < 1.0
            && self.worst_contraction <= self.rho * self.rho + CONTRACTION_SLACK
            && self.steps_to_target.is_some_and(|k| k <= CONSENSUS_STEPS)
    }
}

/// Adds a small perturbation to one off-diagonal weight, breaking double
/// stochasticity (negative control for the checks).
pub fn corrupt(w: &mut MixingMatrix) {
    if w.len() > 1 {
        let v = w.get(0, 1);
        w.set(0, 1, v + 1e-3);
    }
}

pub fn consensus_run(label: &str, graph: &DeviceGraph, seed: u64, corrupt_weights: bool) -> Result<ConsensusRun> {
    let mut w = metropolis_weights(graph);
    if corrupt_weights {
        corrupt(&mut w);
    }
    let stochasticity_error = w.stochasticity_error();
    let symmetric_stochastic = w.validate(STOCHASTIC_TOL).is_ok();
    let (rho, _) = spectral_gap(&w)?;
    let mut rng = rng_for(seed, 40_000);
    let mut params: Vec<ModelParams> = (0..graph.len())
        .map(|_| ModelParams { values: (0..64).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() })
        .collect();
    let grads = vec![Vec::new(); graph.len()];
    let mut prev = disagreement(&params);
    let mut worst = 0.0f64;
    let mut steps_to_target = (prev < CONSENSUS_TARGET).then_some(0);
    for k in 1..=CONSENSUS_STEPS {
        params = consensus_step(&params, &w, 0.0, &grads);
        let d = disagreement(&params);
        if prev > CONTRACTION_FLOOR {
            worst = worst.max(d / prev);
        }
        if steps_to_target.is_none() && d < CONSENSUS_TARGET {
            steps_to_target = Some(k);
        }
        prev = d;
    }
    Ok(ConsensusRun { label: label.to_string(), rho, stochasticity_error, symmetric_stochastic, worst_contraction: worst, steps_to_target })
}

pub fn consensus_graphs(seed: u64) -> Result<Vec<(String, DeviceGraph)>> {
    Ok(vec![
        ("complete m=3".into(), DeviceGraph::complete(3)?),
        ("ring m=4".into(), DeviceGraph::ring(4)?),
        ("random geometric m=9 r=0.8".into(), DeviceGraph::random_geometric(9, 0.8, seed)?),
    ])
}

pub fn check_consensus(s: &VerifySettings) -> Result<Outcome> {
    let mut details = Vec::new();
    let mut pass = true;
    for (label, g) in consensus_graphs(s.seed)? {
        let r = consensus_run(&label, &g, s.seed, s.corrupt_mixing)?;
        pass &= r.pass();
        details.push(format!(
            "{label}: rho {:.6}, stochasticity err {:.1e}, worst contraction {:.6} vs rho^2 {:.6}, below {CONSENSUS_TARGET:.0e} after {}",
            r.rho,
            r.stochasticity_error,
            r.worst_contraction,
            r.rho * r.rho,
            r.steps_to_target.map_or("never".to_string(), |k| format!("{k} steps")),
        ));
    }
    let summary = if pass {
        "3 graphs contract within rho^2 and reach consensus".to_string()
    } else {
        "a graph failed the mixing or contraction checks".to_string()
    };
    Ok(Outcome::new("consensus", pass, summary, details))
}

// ---- mode nesting -----------------------------------------------------------

/// A small three-domain task for engine-level checks: `m` devices, one
/// source domain each, domain 3 held out.
pub fn small_task(m: usize, per_domain: usize, seed: u64) -> Result<(DataConfig, Vec<Shard>)> {
    let cfg = DataConfig { train_per_domain: per_domain, test_per_domain: 8, ..DataConfig::default() };
    let data = generate(&cfg, seed)?;
    let (shards, _) = split_leave_one_domain_out(&data.train, 3, m)?;
    Ok((cfg, shards))
}

/// Iterations (out of `iterations`) where the two trajectories differ in any bit.
pub fn nesting_mismatches(seed: u64, iterations: usize) -> Result<usize> {
    let (_, shards) = small_task(3, 48, seed)?;
    let base = SimConfig {
        model: ModelSpec { channels: vec![4, 8, 8], ..ModelSpec::default() },
        batch: 8,
        iterations,
        seed,
        parallel: false,
        lr: LrSchedule::Constant(0.1),
        ..SimConfig::default()
    };
    let plain = SimConfig { style: StyleLayerConfig { mode: StyleMode::None, ..base.style.clone() }, ..base.clone() };
    let off = SimConfig { style: StyleLayerConfig { mode: StyleMode::StyleDdg, p_ell: vec![0.0], ..base.style.clone() }, ..base };
    let mut a = Simulation::new(plain, shards.clone(), None)?;
    let mut b = Simulation::new(off, shards, None)?;
    let mut bad = 0;
    for _ in 0..iterations {
        let (ra, rb) = (a.step()?, b.step()?);
        let same = a.params().iter().zip(b.params()).all(|(p, q)| p.values == q.values);
        if !same || ra.losses != rb.losses {
            bad += 1;
        }
    }
    Ok(bad)
}

pub fn check_nesting(s: &VerifySettings) -> Result<Outcome> {
    let bad = nesting_mismatches(s.seed, s.nesting_iterations)?;
    Ok(Outcome::new(
        "nesting",
        bad == 0,
        format!("styleddg with p=0 vs dsgd: {bad} of {} iterations differ", s.nesting_iterations),
        Vec::new(),
    ))
}

// ---- stationarity trend -----------------------------------------------------

/// Training setup for the stationarity trend: small model, complete graph of
/// three devices, `alpha0 / sqrt(K + 1)` step size, probe every iteration.
/// Augmentation follows the experiment defaults (first block, `alpha = 1`);
/// with the stronger default layer the small model is still leaving its
/// initial plateau at K = 2000 and the gradient norm is rising.
pub fn stationarity_sim_config(k: usize, seed: u64) -> SimConfig {
    SimConfig {
        graph: GraphKind::Complete,
        m: 3,
        seed,
        model: ModelSpec { channels: vec![4, 8, 8], hooks: vec![0], ..ModelSpec::default() },
        style: StyleLayerConfig { mode: StyleMode::StyleDdg, alpha_explore: 1.0, ..StyleLayerConfig::default() },
        batch: 16,
        iterations: k,
        lr: LrSchedule::InvSqrt(3.0),
        probe_every: 1,
        parallel: false,
        distinct_init: false,
        consensus_only: false,
    }
}

/// Median over seeds of the running average of the probe gradient norm, per K.
pub fn stationarity_trend(ks: &[usize], seeds: &[u64]) -> Result<Vec<(usize, Vec<f64>, f64)>> {
    // A large training set keeps the held-out probe gradient from settling
    // on an overfitting floor.
    let cfg = DataConfig { train_per_domain: 2000, test_per_domain: 40, ..DataConfig::default() };
    let data = generate(&cfg, 11)?;
    let (shards, _) = split_leave_one_domain_out(&data.train, 3, 3)?;
    let probe_idx: Vec<usize> = (0..data.test.len()).filter(|&i| data.test.domains[i] != 3).step_by(2).collect();
    let probe = data.test.batch(&probe_idx)?;
    let mut out = Vec::new();
    for &k in ks {
        let mut vals = Vec::new();
        for &seed in seeds {
            let mut sim = Simulation::new(stationarity_sim_config(k, seed), shards.clone(), Some(probe.clone()))?;
            let run = sim.run(None, |_| {})?;
            vals.push(run.running_grad_norm().ok_or_else(|| Error::State("no probe values".into()))?);
        }
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        out.push((k, vals, median));
    }
    Ok(out)
}

pub fn check_stationarity(s: &VerifySettings) -> Result<Outcome> {
    let trend = stationarity_trend(&s.stationarity_ks, &s.stationarity_seeds)?;
    let pass = trend.windows(2).all(|w| w[1].2 <= w[0].2);
    let medians: Vec<String> = trend.iter().map(|(k, _, m)| format!("K={k}: {m:.4}")).collect();
    let details = trend
        .iter()
        .map(|(k, v, _)| format!("K={k} per seed: {}", v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")))
        .collect();
    Ok(Outcome::new(
        "stationarity",
        pass,
        format!("running avg ||grad F(theta_bar)||^2 medians {} (non-increasing required)", medians.join(", ")),
        details,
    ))
}

// ---- domain generalization --------------------------------------------------

/// The DG matrix: configured methods, targets and seeds on the configured
/// graph and device count.
pub fn dg_results(cfg: &ExperimentConfig) -> Result<Vec<crate::experiment::SummaryEntry>> {
    let data = prepare_data(cfg)?;
    let graph = crate::experiment::resolve_graph(cfg)?;
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &target in &cfg.targets {
            for &seed in &cfg.seeds {
                rows.push(run_cell(cfg, &data, &Cell { method, target, seed, graph: graph.clone() }, None, None)?);
            }
        }
    }
    Ok(summarize(&rows))
}

pub fn check_dg(cfg: &ExperimentConfig) -> Result<Outcome> {
    let cfg = ExperimentConfig {
        sim: SimConfig { graph: GraphKind::Complete, m: 3, ..cfg.sim.clone() },
        methods: StyleMode::ALL.to_vec(),
        graph_file: None,
        ..cfg.clone()
    };
    let entries = dg_results(&cfg)?;
    let avg = |m: StyleMode| method_average(&entries, m.method_name()).unwrap_or(f64::NAN);
    let ddg = avg(StyleMode::StyleDdg);
    let base = avg(StyleMode::None);
    let best_other = StyleMode::ALL.iter().filter(|&&m| m != StyleMode::StyleDdg).map(|&m| avg(m)).fold(f64::NEG_INFINITY, f64::max);
    let ranks_first = ddg > best_other;
    let margin = ddg - base;
    let mut details: Vec<String> = StyleMode::ALL
        .iter()
        .map(|&m| {
            let per: Vec<String> = entries
                .iter()
                .filter(|e| e.method == m.method_name())
                .map(|e| format!("t{} {:.2}±{:.2}", e.target, 100.0 * e.mean, 100.0 * e.std))
                .collect();
            format!("{}: avg {:.2} ({})", m.method_name(), 100.0 * avg(m), per.join(", "))
        })
        .collect();
    let soft_ok = margin >= DG_MARGIN;
    details.push(format!(
        "SOFT {} margin styleddg - dsgd = {:.2} points (target >= {:.0})",
        if soft_ok { "met" } else { "missed" },
        100.0 * margin,
        100.0 * DG_MARGIN
    ));
    Ok(Outcome::new(
        "dg",
        ranks_first && margin > 0.0,
        format!(
            "styleddg avg {:.2} vs dsgd {:.2} (+{:.2}), best other {:.2}; ranks first: {ranks_first}",
            100.0 * ddg,
            100.0 * base,
            100.0 * margin,
            100.0 * best_other
        ),
        details,
    ))
}

// ---- graph radius -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct RadiusPoint {
    pub radius: f64,
    pub rho_mean: f64,
    pub dsgd: f64,
    pub styleddg: f64,
}

/// Mean target accuracy of dsgd and styleddg per radius on `m = 9` devices.
pub fn radius_results(cfg: &ExperimentConfig) -> Result<Vec<RadiusPoint>> {
    let data = prepare_data(cfg)?;
    let mut out = Vec::new();
    for &radius in &cfg.radii {
        let graph = GraphKind::RandomGeometric { radius };
        let mut acc = [Vec::new(), Vec::new()];
        let mut rhos = Vec::new();
        for (slot, method) in [StyleMode::None, StyleMode::StyleDdg].into_iter().enumerate() {
            for &target in &cfg.targets {
                for &seed in &cfg.seeds {
                    let r = run_cell(cfg, &data, &Cell { method, target, seed, graph: graph.clone() }, None, None)?;
                    acc[slot].push(r.target_acc_mean);
                    if slot == 0 {
                        rhos.push(r.rho);
                    }
                }
            }
        }
        out.push(RadiusPoint { radius, rho_mean: mean_std(&rhos).0, dsgd: mean_std(&acc[0]).0, styleddg: mean_std(&acc[1]).0 });
    }
    Ok(out)
}

/// The radius sweep setting: nine devices and the configured radii.
pub fn radius_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        sim: SimConfig { m: 9, ..cfg.sim.clone() },
        graph_file: None,
        methods: vec![StyleMode::None, StyleMode::StyleDdg],
        ..cfg.clone()
    }
}

pub fn check_radius(cfg: &ExperimentConfig) -> Result<Outcome> {
    let points = radius_results(&radius_config(cfg))?;
    let ordered = points.iter().all(|p| p.styleddg >= p.dsgd);
    let mut details: Vec<String> = points
        .iter()
        .map(|p| {
            format!(
                "r={}: rho {:.4}, dsgd {:.2}, styleddg {:.2}, margin {:+.2}",
                p.radius,
                p.rho_mean,
                100.0 * p.dsgd,
                100.0 * p.styleddg,
                100.0 * (p.styleddg - p.dsgd)
            )
        })
        .collect();
    let margin = |p: &RadiusPoint| p.styleddg - p.dsgd;
    let by_radius = {
        let mut v = points.clone();
        v.sort_by(|a, b| a.radius.total_cmp(&b.radius));
        v
    };
    let trend = match (by_radius.first(), by_radius.last()) {
        (Some(lo), Some(hi)) => margin(hi) >= margin(lo),
        _ => false,
    };
    details.push(format!("SOFT {} margin at the largest radius >= margin at the smallest", if trend { "met" } else { "missed" }));
    Ok(Outcome::new(
        "radius",
        ordered,
        format!("styleddg >= dsgd at {} of {} radii", points.iter().filter(|p| p.styleddg >= p.dsgd).count(), points.len()),
        details,
    ))
}
