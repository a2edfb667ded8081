//! Style augmentation operators as differentiable graph layers, plus the
//! per-step random draws that parameterize them.
//!
//! Statistics of the layer's own batch carry gradient. Statistics received
//! from a neighbor enter the graph as constants.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::stats::{batch_variance_var, instance_stats_var, LayerStyle, StyleVector, DEFAULT_EPS_VAR};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StyleMode {
    None,
    MixStyle,
    Dsu,
    StyleDdg,
}

impl StyleMode {
    pub const ALL: [StyleMode; 4] = [StyleMode::None, StyleMode::MixStyle, StyleMode::Dsu, StyleMode::StyleDdg];

    /// Method name used in reports.
    pub fn method_name(self) -> &'static str {
        match self {
            StyleMode::None => "dsgd",
            StyleMode::MixStyle => "dsgd+mixstyle",
            StyleMode::Dsu => "dsgd+dsu",
            StyleMode::StyleDdg => "styleddg",
        }
    }
}

impl fmt::Display for StyleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.method_name())
    }
}

impl FromStr for StyleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "dsgd" => Ok(StyleMode::None),
            "mixstyle" | "dsgd+mixstyle" => Ok(StyleMode::MixStyle),
            "dsu" | "dsgd+dsu" => Ok(StyleMode::Dsu),
            "styleddg" => Ok(StyleMode::StyleDdg),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaDist {
    Beta { a: f64, b: f64 },
    Fixed(f64),
}

impl LambdaDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        match *self {
            LambdaDist::Fixed(v) => Ok(v),
            LambdaDist::Beta { a, b } => {
                let d = Beta::new(a, b).map_err(|e| Error::Config(format!("beta({a}, {b}): {e}")))?;
                Ok(d.sample(rng))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LambdaDist::Fixed(v) if !(0.0..=1.0).contains(&v) => {
                Err(Error::Config(format!("fixed lambda {v} outside [0, 1]")))
            }
            LambdaDist::Beta { a, b } if !(a > 0.0 && b > 0.0) => {
                Err(Error::Config(format!("beta parameters must be positive, got ({a}, {b})")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LambdaDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaDist::Beta { a, b } => write!(f, "beta({a},{b})"),
            LambdaDist::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for LambdaDist {
    type Err = Error;

    /// `beta(a,b)` or a fixed value.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("cannot parse lambda distribution '{s}'"));
        if let Some(inner) = t.strip_prefix("beta(").and_then(|r| r.strip_suffix(')')) {
            let (a, b) = inner.split_once(',').ok_or_else(bad)?;
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            return Ok(LambdaDist::Beta { a, b });
        }
        t.parse().map(LambdaDist::Fixed).map_err(|_| bad())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleLayerConfig {
    pub mode: StyleMode,
    /// Activation probability per hooked layer; a single entry applies to all.
    pub p_ell: Vec<f64>,
    pub alpha_explore: f64,
    pub lambda: LambdaDist,
    /// Standard deviation of the Gaussian style perturbations (1 is the
    /// standard choice; 0 disables them).
    pub eps_std: f64,
    pub eps_var: f64,
}

impl Default for StyleLayerConfig {
    fn default() -> Self {
        Self {
            mode: StyleMode::StyleDdg,
            p_ell: vec![0.5],
            alpha_explore: 3.0,
            lambda: LambdaDist::Beta { a: 0.1, b: 0.1 },
            eps_std: 1.0,
            eps_var: DEFAULT_EPS_VAR,
        }
    }
}

impl StyleLayerConfig {
    pub fn p_for(&self, hook: usize) -> f64 {
        match self.p_ell.as_slice() {
            [p] => *p,
            ps => ps.get(hook).copied().unwrap_or(0.0),
        }
    }

    pub fn validate(&self, hooks: usize) -> Result<()> {
        if self.p_ell.is_empty() || (self.p_ell.len() != 1 && self.p_ell.len() != hooks) {
            return Err(Error::Config(format!("p_ell needs 1 or {hooks} entries, got {}", self.p_ell.len())));
        }
        if let Some(p) = self.p_ell.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("p_ell entry {p} outside [0, 1]")));
        }
        if !(self.alpha_explore >= 0.0) {
            return Err(Error::Config(format!("alpha_explore must be >= 0, got {}", self.alpha_explore)));
        }
        if !(self.eps_std >= 0.0) || !(self.eps_var >= 0.0) {
            return Err(Error::Config("eps_std and eps_var must be >= 0".into()));
        }
        self.lambda.validate()
    }
}

// ---- operators --------------------------------------------------------------

/// `sigma_t * (x - mu) / sigma + mu_t` with precomputed source statistics.
pub fn adain_with(g: &mut Graph, x: Var, mu: Var, sigma: Var, mu_t: Var, sigma_t: Var) -> Result<Var> {
    let centered = g.sub(x, mu)?;
    let normed = g.div(centered, sigma)?;
    let scaled = g.mul(normed, sigma_t)?;
    g.add(scaled, mu_t)
}

/// Re-styles every instance of `x` to `(mu_t, sigma_t)`, each `(B, C, 1, 1)`
/// or `(1, C, 1, 1)`.
pub fn adain(g: &mut Graph, x: Var, mu_t: Var, sigma_t: Var, eps_var: f64) -> Result<Var> {
    check_target(g, x, mu_t)?;
    check_target(g, x, sigma_t)?;
    let (mu, sigma) = instance_stats_var(g, x, eps_var)?;
    adain_with(g, x, mu, sigma, mu_t, sigma_t)
}

fn check_target(g: &Graph, x: Var, t: Var) -> Result<()> {
    let [b, c, _, _] = g.dims(x);
    let d = g.dims(t);
    if (d[0] == b || d[0] == 1) && d[1] == c && d[2] == 1 && d[3] == 1 {
        Ok(())
    } else {
        Err(shape_err!("style target {d:?} does not fit activation {:?}", g.dims(x)))
    }
}

fn lerp(g: &mut Graph, own: Var, target: Var, lambda: f64) -> Result<Var> {
    let a = g.scale(own, lambda)?;
    let b = g.scale(target, 1.0 - lambda)?;
    g.add(a, b)
}

/// AdaIN onto `lambda * own + (1 - lambda) * target` statistics.
pub fn mixstyle(g: &mut Graph, x: Var, mu_t: Var, sigma_t: Var, lambda: f64, eps_var: f64) -> Result<Var> {
    check_lambda(lambda)?;
    check_target(g, x, mu_t)?;
    check_target(g, x, sigma_t)?;
    let (mu, sigma) = instance_stats_var(g, x, eps_var)?;
    mix_with(g, x, mu, sigma, mu_t, sigma_t, lambda)
}

fn mix_with(g: &mut Graph, x: Var, mu: Var, sigma: Var, mu_t: Var, sigma_t: Var, lambda: f64) -> Result<Var> {
    let beta = lerp(g, mu, mu_t, lambda)?;
    let gamma = lerp(g, sigma, sigma_t, lambda)?;
    adain_with(g, x, mu, sigma, beta, gamma)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Input(format!("lambda {lambda} outside [0, 1]")))
    }
}

pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Input(format!("permutation of length {} for batch {n}", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Input(format!("{perm:?} is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// The MixStyle baseline layer: targets are the statistics of the batch
/// permuted by `perm`.
pub fn mixstyle_shuffle_forward(g: &mut Graph, x: Var, perm: &[usize], lambda: f64, eps_var: f64) -> Result<Var> {
    check_permutation(perm, g.dims(x)[0])?;
    check_lambda(lambda)?;
    let (mu, sigma) = instance_stats_var(g, x, eps_var)?;
    let mu_t = g.gather_batch(mu, perm)?;
    let sigma_t = g.gather_batch(sigma, perm)?;
    mix_with(g, x, mu, sigma, mu_t, sigma_t, lambda)
}

/// Perturbs each instance's statistics by Gaussian draws scaled with the
/// batch's own style standard deviations. `eps_*` are `(B, C, 1, 1)` or
/// `(1, C, 1, 1)`.
pub fn dsu(g: &mut Graph, x: Var, eps_mu: &Tensor4, eps_sigma: &Tensor4, eps_var: f64) -> Result<Var> {
    let (mu, sigma) = instance_stats_var(g, x, eps_var)?;
    let e_mu = g.constant(eps_mu.clone());
    let e_sigma = g.constant(eps_sigma.clone());
    check_target(g, x, e_mu)?;
    check_target(g, x, e_sigma)?;
    let var_mu = batch_variance_var(g, mu)?;
    let var_sigma = batch_variance_var(g, sigma)?;
    let sd_mu = g.sqrt(var_mu)?;
    let sd_sigma = g.sqrt(var_sigma)?;
    let shift_mu = g.mul(e_mu, sd_mu)?;
    let shift_sigma = g.mul(e_sigma, sd_sigma)?;
    let mu_t = g.add(mu, shift_mu)?;
    let sigma_t = g.add(sigma, shift_sigma)?;
    adain_with(g, x, mu, sigma, mu_t, sigma_t)
}

/// Neighbor style perturbed per channel: `stat + eps * sqrt(var)`, as a
/// `(1, C, 1, 1)` constant.
fn shifted_target(mean: &[f64], var: &[f64], eps: &[f64]) -> Result<Tensor4> {
    let data = mean.iter().zip(var).zip(eps).map(|((m, v), e)| m + e * v.sqrt()).collect();
    Tensor4::from_vec([1, mean.len(), 1, 1], data)
}

/// Re-styles `x_s` onto the neighbor's perturbed batch style and appends the
/// untouched `x_sc`. Output rows: `x_s` then `x_sc`.
pub fn style_shift(
    g: &mut Graph,
    x_s: Var,
    x_sc: Var,
    psi: &LayerStyle,
    eps_mu: &[f64],
    eps_sigma: &[f64],
    eps_var: f64,
) -> Result<Var> {
    let c = g.dims(x_s)[1];
    if g.dims(x_s)[0] != g.dims(x_sc)[0] {
        return Err(Error::Config(format!(
            "shift halves differ in size ({} vs {}); batch size must be even",
            g.dims(x_s)[0],
            g.dims(x_sc)[0]
        )));
    }
    if psi.channels() != c || eps_mu.len() != c || eps_sigma.len() != c {
        return Err(shape_err!(
            "layer has {c} channels, shared style {} and noise ({}, {})",
            psi.channels(),
            eps_mu.len(),
            eps_sigma.len()
        ));
    }
    let mu_t = g.constant(shifted_target(&psi.mu_bar, &psi.var_mu, eps_mu)?);
    let sigma_t = g.constant(shifted_target(&psi.sigma_bar, &psi.var_sigma, eps_sigma)?);
    let shifted = adain(g, x_s, mu_t, sigma_t, eps_var)?;
    g.concat_batch(shifted, x_sc)
}

/// Extrapolates the statistics of rows with `i_e[k]` set away from the batch
/// mean by `alpha`, permutes the resulting targets by `i_m` and mixes them
/// into `x` with weight `lambda` on the own statistics.
pub fn style_explore(
    g: &mut Graph,
    x: Var,
    i_e: &[bool],
    i_m: &[usize],
    lambda: f64,
    alpha: f64,
    eps_var: f64,
) -> Result<Var> {
    let b = g.dims(x)[0];
    if i_e.len() != b {
        return Err(Error::Input(format!("explore mask of length {} for batch {b}", i_e.len())));
    }
    check_permutation(i_m, b)?;
    check_lambda(lambda)?;
    let (mu, sigma) = instance_stats_var(g, x, eps_var)?;
    let mask = Tensor4::from_vec([b, 1, 1, 1], i_e.iter().map(|&on| if on { alpha } else { 0.0 }).collect())?;
    let mask = g.constant(mask);
    let mut explored = [mu, sigma];
    for stat in &mut explored {
        let mean = g.batch_mean(*stat)?;
        let away = g.sub(*stat, mean)?;
        let step = g.mul(mask, away)?;
        *stat = g.add(*stat, step)?;
    }
    let mu_t = g.gather_batch(explored[0], i_m)?;
    let sigma_t = g.gather_batch(explored[1], i_m)?;
    mix_with(g, x, mu, sigma, mu_t, sigma_t, lambda)
}

/// StyleShift on the rows selected by `r.shift_mask`, rows restored to their
/// original order, then StyleExplore.
pub fn styleddg_layer(
    g: &mut Graph,
    h: Var,
    psi: &LayerStyle,
    r: &LayerRandomness,
    alpha: f64,
    eps_var: f64,
) -> Result<Var> {
    let b = g.dims(h)[0];
    r.validate(b, g.dims(h)[1])?;
    let (s_idx, c_idx) = r.shift_partition();
    let x_s = g.gather_batch(h, &s_idx)?;
    let x_sc = g.gather_batch(h, &c_idx)?;
    let shifted = style_shift(g, x_s, x_sc, psi, &r.eps_mu, &r.eps_sigma, eps_var)?;
    let restored = g.gather_batch(shifted, &r.restore_order())?;
    style_explore(g, restored, &r.explore_mask, &r.mix_perm, r.lambda, alpha, eps_var)
}

// ---- randomness -------------------------------------------------------------

/// Draws for one StyleDDG layer at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRandomness {
    pub eps_mu: Vec<f64>,
    pub eps_sigma: Vec<f64>,
    pub lambda: f64,
    pub shift_mask: Vec<bool>,
    pub explore_mask: Vec<bool>,
    pub mix_perm: Vec<usize>,
    pub neighbor: usize,
}

fn half_mask<R: Rng + ?Sized>(rng: &mut R, b: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..b).collect();
    idx.shuffle(rng);
    let mut mask = vec![false; b];
    for &i in &idx[..b / 2] {
        mask[i] = true;
    }
    mask
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn shuffled<R: Rng + ?Sized>(rng: &mut R, b: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..b).collect();
    p.shuffle(rng);
    p
}

impl LayerRandomness {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        batch: usize,
        channels: usize,
        cfg: &StyleLayerConfig,
        neighbors: &[usize],
    ) -> Result<Self> {
        if batch % 2 != 0 {
            return Err(Error::Config(format!("styleddg needs an even batch size, got {batch}")));
        }
        if neighbors.is_empty() {
            return Err(Error::Input("no neighbor styles to shift toward".into()));
        }
        let neighbor = neighbors[rng.random_range(0..neighbors.len())];
        let eps_mu = gaussian(rng, channels, cfg.eps_std);
        let eps_sigma = gaussian(rng, channels, cfg.eps_std);
        let lambda = cfg.lambda.sample(rng)?;
        let shift_mask = half_mask(rng, batch);
        let explore_mask = half_mask(rng, batch);
        let mix_perm = shuffled(rng, batch);
        Ok(Self { eps_mu, eps_sigma, lambda, shift_mask, explore_mask, mix_perm, neighbor })
    }

    pub fn validate(&self, batch: usize, channels: usize) -> Result<()> {
        if batch % 2 != 0 {
            return Err(Error::Config(format!("styleddg needs an even batch size, got {batch}")));
        }
        let ones = |m: &[bool]| m.iter().filter(|&&v| v).count();
        if self.shift_mask.len() != batch || ones(&self.shift_mask) != batch / 2 {
            return Err(Error::Input("shift mask must select exactly half the batch".into()));
        }
        if self.explore_mask.len() != batch || ones(&self.explore_mask) != batch / 2 {
            return Err(Error::Input("explore mask must select exactly half the batch".into()));
        }
        check_permutation(&self.mix_perm, batch)?;
        check_lambda(self.lambda)?;
        if self.eps_mu.len() != channels || self.eps_sigma.len() != channels {
            return Err(shape_err!("noise length ({}, {}) for {channels} channels", self.eps_mu.len(), self.eps_sigma.len()));
        }
        Ok(())
    }

    /// `(selected, complement)` batch indices, each ascending.
    pub fn shift_partition(&self) -> (Vec<usize>, Vec<usize>) {
        let sel = (0..self.shift_mask.len()).filter(|&k| self.shift_mask[k]).collect();
        let rest = (0..self.shift_mask.len()).filter(|&k| !self.shift_mask[k]).collect();
        (sel, rest)
    }

    /// Gather indices that undo the `selected ++ complement` ordering.
    pub fn restore_order(&self) -> Vec<usize> {
        let (sel, rest) = self.shift_partition();
        let mut inv = vec![0; self.shift_mask.len()];
        for (pos, &k) in sel.iter().chain(&rest).enumerate() {
            inv[k] = pos;
        }
        inv
    }
}

/// What a hooked layer does to its activation this step.
#[derive(Clone, Debug, PartialEq)]
pub enum HookAction {
    Identity,
    MixStyle { perm: Vec<usize>, lambda: f64 },
    Dsu { eps_mu: Tensor4, eps_sigma: Tensor4 },
    StyleDdg { psi: LayerStyle, randomness: LayerRandomness },
}

/// One action per hooked layer, in hook order.
#[derive(Clone, Debug, PartialEq)]
pub struct StylePlan {
    pub actions: Vec<HookAction>,
    pub alpha_explore: f64,
    pub eps_var: f64,
}

impl StylePlan {
    pub fn identity(hooks: usize) -> Self {
        Self { actions: vec![HookAction::Identity; hooks], alpha_explore: 0.0, eps_var: DEFAULT_EPS_VAR }
    }

    pub fn is_identity(&self) -> bool {
        self.actions.iter().all(|a| *a == HookAction::Identity)
    }

    /// Samples the step's randomness. Each hooked layer is active with its
    /// probability; draws that would leave the activation unchanged (lambda
    /// of 1, all-zero noise) are recorded as `Identity`. `inbox` holds the
    /// neighbor style vectors available this step.
    pub fn sample<R: Rng + ?Sized>(
        cfg: &StyleLayerConfig,
        rng: &mut R,
        batch: usize,
        channels: &[usize],
        inbox: &[(usize, &StyleVector)],
    ) -> Result<Self> {
        cfg.validate(channels.len())?;
        let mut plan = Self { actions: Vec::with_capacity(channels.len()), alpha_explore: cfg.alpha_explore, eps_var: cfg.eps_var };
        if cfg.mode == StyleMode::StyleDdg {
            if inbox.is_empty() {
                return Err(Error::Input("styleddg step without neighbor styles".into()));
            }
            if let Some((j, sv)) = inbox.iter().find(|(_, sv)| sv.channel_spec() != channels) {
                return Err(Error::Input(format!("style vector from device {j} has layers {:?}, expected {channels:?}", sv.channel_spec())));
            }
        }
        let neighbors: Vec<usize> = inbox.iter().map(|(j, _)| *j).collect();
        for (hook, &c) in channels.iter().enumerate() {
            if cfg.mode == StyleMode::None {
                plan.actions.push(HookAction::Identity);
                continue;
            }
            let p = cfg.p_for(hook);
            let active = p > 0.0 && rng.random_bool(p);
            let action = if !active {
                HookAction::Identity
            } else {
                match cfg.mode {
                    StyleMode::None => HookAction::Identity,
                    StyleMode::MixStyle => {
                        let perm = shuffled(rng, batch);
                        let lambda = cfg.lambda.sample(rng)?;
                        if lambda == 1.0 {
                            HookAction::Identity
                        } else {
                            HookAction::MixStyle { perm, lambda }
                        }
                    }
                    StyleMode::Dsu => {
                        let eps_mu = gaussian(rng, batch * c, cfg.eps_std);
                        let eps_sigma = gaussian(rng, batch * c, cfg.eps_std);
                        if eps_mu.iter().chain(&eps_sigma).all(|&e| e == 0.0) {
                            HookAction::Identity
                        } else {
                            HookAction::Dsu {
                                eps_mu: Tensor4::from_vec([batch, c, 1, 1], eps_mu)?,
                                eps_sigma: Tensor4::from_vec([batch, c, 1, 1], eps_sigma)?,
                            }
                        }
                    }
                    StyleMode::StyleDdg => {
                        let randomness = LayerRandomness::sample(rng, batch, c, cfg, &neighbors)?;
                        let (_, sv) = inbox.iter().find(|(j, _)| *j == randomness.neighbor).expect("neighbor drawn from inbox");
                        HookAction::StyleDdg { psi: sv.layers[hook].clone(), randomness }
                    }
                }
            };
            plan.actions.push(action);
        }
        Ok(plan)
    }

    /// Applies the action for hook `hook` to activation `h`.
    pub fn apply(&self, g: &mut Graph, hook: usize, h: Var) -> Result<Var> {
        match self.actions.get(hook) {
            None | Some(HookAction::Identity) => Ok(h),
            Some(HookAction::MixStyle { perm, lambda }) => mixstyle_shuffle_forward(g, h, perm, *lambda, self.eps_var),
            Some(HookAction::Dsu { eps_mu, eps_sigma }) => dsu(g, h, eps_mu, eps_sigma, self.eps_var),
            Some(HookAction::StyleDdg { psi, randomness }) => {
                styleddg_layer(g, h, psi, randomness, self.alpha_explore, self.eps_var)
            }
        }
    }
}
