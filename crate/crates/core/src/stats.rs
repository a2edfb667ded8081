//! First- and second-order style statistics of layer activations and the
//! per-device style vector that neighbors exchange.
//!
//! All variances are population variances: divisor `H*W` spatially and `B`
//! across the batch.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::{Model, ModelParams};
use crate::tensor::Tensor4;

/// Guard added to the spatial variance before the square root when `sigma`
/// is used for normalization.
pub const DEFAULT_EPS_VAR: f64 = 1e-5;

/// Per-instance, per-channel spatial mean and standard deviation, `B x C`
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub batch: usize,
    pub channels: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl InstanceStats {
    pub fn mu_at(&self, b: usize, c: usize) -> f64 {
        self.mu[b * self.channels + c]
    }

    pub fn sigma_at(&self, b: usize, c: usize) -> f64 {
        self.sigma[b * self.channels + c]
    }
}

/// `sigma = sqrt(spatial variance + eps_var)`.
pub fn instance_stats(x: &Tensor4, eps_var: f64) -> InstanceStats {
    let [b, c, h, w] = x.dims();
    let hw = (h * w) as f64;
    let mut mu = Vec::with_capacity(b * c);
    let mut sigma = Vec::with_capacity(b * c);
    for map in x.data().chunks(h * w) {
        let m = map.iter().sum::<f64>() / hw;
        let var = map.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / hw;
        mu.push(m);
        sigma.push((var + eps_var).sqrt());
    }
    InstanceStats { batch: b, channels: c, mu, sigma }
}

/// Per-channel variance across the batch of `mu` and of `sigma`.
pub fn second_order_stats(s: &InstanceStats) -> (Vec<f64>, Vec<f64>) {
    (batch_variance(&s.mu, s.batch, s.channels), batch_variance(&s.sigma, s.batch, s.channels))
}

fn batch_mean(v: &[f64], b: usize, c: usize) -> Vec<f64> {
    (0..c).map(|ci| (0..b).map(|bi| v[bi * c + ci]).sum::<f64>() / b as f64).collect()
}

fn batch_variance(v: &[f64], b: usize, c: usize) -> Vec<f64> {
    let mean = batch_mean(v, b, c);
    (0..c)
        .map(|ci| (0..b).map(|bi| (v[bi * c + ci] - mean[ci]).powi(2)).sum::<f64>() / b as f64)
        .collect()
}

/// Differentiable `(mu, sigma)`, each `(B, C, 1, 1)`.
pub fn instance_stats_var(g: &mut Graph, x: Var, eps_var: f64) -> Result<(Var, Var)> {
    let mu = g.spatial_mean(x)?;
    let centered = g.sub(x, mu)?;
    let sq = g.square(centered)?;
    let var = g.spatial_mean(sq)?;
    let guarded = if eps_var != 0.0 { g.add_scalar(var, eps_var)? } else { var };
    let sigma = g.sqrt(guarded)?;
    Ok((mu, sigma))
}

/// Differentiable per-channel batch variance of a `(B, C, 1, 1)` statistic,
/// returned as `(1, C, 1, 1)`.
pub fn batch_variance_var(g: &mut Graph, stat: Var) -> Result<Var> {
    let mean = g.batch_mean(stat)?;
    let centered = g.sub(stat, mean)?;
    let sq = g.square(centered)?;
    g.batch_mean(sq)
}

/// The four shared statistics of one hooked layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStyle {
    pub mu_bar: Vec<f64>,
    pub sigma_bar: Vec<f64>,
    pub var_mu: Vec<f64>,
    pub var_sigma: Vec<f64>,
}

impl LayerStyle {
    pub fn channels(&self) -> usize {
        self.mu_bar.len()
    }

    pub fn from_activation(h: &Tensor4, eps_var: f64) -> Self {
        Self::from_instance_stats(&instance_stats(h, eps_var))
    }

    pub fn from_instance_stats(s: &InstanceStats) -> Self {
        let (var_mu, var_sigma) = second_order_stats(s);
        Self {
            mu_bar: batch_mean(&s.mu, s.batch, s.channels),
            sigma_bar: batch_mean(&s.sigma, s.batch, s.channels),
            var_mu,
            var_sigma,
        }
    }
}

/// Style statistics of every hooked layer of one device's model on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    pub layers: Vec<LayerStyle>,
}

impl StyleVector {
    pub fn channel_spec(&self) -> Vec<usize> {
        self.layers.iter().map(LayerStyle::channels).collect()
    }

    /// Number of shared scalars: four per channel per layer.
    pub fn scalar_count(&self) -> usize {
        scalar_count(&self.channel_spec())
    }

    /// Layer-major flattening, each layer ordered `(mu_bar, sigma_bar, var_mu, var_sigma)`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for l in &self.layers {
            out.extend_from_slice(&l.mu_bar);
            out.extend_from_slice(&l.sigma_bar);
            out.extend_from_slice(&l.var_mu);
            out.extend_from_slice(&l.var_sigma);
        }
        out
    }

    /// Wire format: `u64` LE layer count, `u64` LE channel count per layer,
    /// then [`StyleVector::flat`] as `f64` LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.channel_spec();
        let mut out = Vec::with_capacity(8 * (1 + spec.len() + self.scalar_count()));
        out.extend_from_slice(&(spec.len() as u64).to_le_bytes());
        for c in &spec {
            out.extend_from_slice(&(*c as u64).to_le_bytes());
        }
        for v in self.flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut words = bytes.chunks_exact(8);
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("style payload is not a whole number of 8-byte words".into()));
        }
        let mut next_u64 = || -> Result<u64> {
            words
                .next()
                .map(|w| u64::from_le_bytes(w.try_into().unwrap()))
                .ok_or_else(|| Error::Format("truncated style payload".into()))
        };
        let layers = next_u64()? as usize;
        let spec: Vec<usize> = (0..layers).map(|_| next_u64().map(|c| c as usize)).collect::<Result<_>>()?;
        let expected = 8 * (1 + layers + scalar_count(&spec));
        if bytes.len() != expected {
            return Err(Error::Format(format!("style payload has {} bytes, header implies {expected}", bytes.len())));
        }
        let mut vals = bytes[8 * (1 + layers)..].chunks_exact(8).map(|w| f64::from_le_bytes(w.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
        let layers = spec
            .iter()
            .map(|&c| LayerStyle { mu_bar: take(c), sigma_bar: take(c), var_mu: take(c), var_sigma: take(c) })
            .collect();
        Ok(Self { layers })
    }
}

pub fn scalar_count(channel_spec: &[usize]) -> usize {
    4 * channel_spec.iter().sum::<usize>()
}

/// Runs the plain forward pass (no style layers), captures the output of each
/// hooked block and summarizes it. The result is plain data with no gradient.
pub fn device_style_vector(
    model: &Model,
    params: &ModelParams,
    x: &Tensor4,
    hooks: &[usize],
    eps_var: f64,
) -> Result<StyleVector> {
    let blocks = model.spec().channels.len();
    if let Some(&bad) = hooks.iter().find(|&&h| h >= blocks) {
        return Err(Error::Config(format!("hook on block {bad} but the model has {blocks} blocks")));
    }
    let acts = model.activations(params, x)?;
    let layers = hooks.iter().map(|&h| LayerStyle::from_activation(&acts[h], eps_var)).collect();
    Ok(StyleVector { layers })
}

// ---- bounded statistics ---------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LayerBoundCheck {
    pub layer: usize,
    pub bound_u: f64,
    /// `U - max_c |mu_bar_c|`
    pub mu_margin: f64,
    /// `sqrt(2) U - max_c |sigma_bar_c|`
    pub sigma_margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundsReport {
    pub layers: Vec<LayerBoundCheck>,
}

impl BoundsReport {
    pub fn all_pass(&self) -> bool {
        self.layers.iter().all(|l| l.pass)
    }
}

/// Checks `|mu_bar_c| <= U` and `|sigma_bar_c| <= sqrt(2) U` for every layer,
/// where `U` is the largest absolute activation of that layer.
pub fn check_style_bounds(sv: &StyleVector, u_per_layer: &[f64]) -> Result<BoundsReport> {
    if u_per_layer.len() != sv.layers.len() {
        return Err(shape_err!("{} bounds for {} layers", u_per_layer.len(), sv.layers.len()));
    }
    let layers = sv
        .layers
        .iter()
        .zip(u_per_layer)
        .enumerate()
        .map(|(layer, (ls, &u))| {
            let max_mu = ls.mu_bar.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let max_sigma = ls.sigma_bar.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mu_margin = u - max_mu;
            let sigma_margin = std::f64::consts::SQRT_2 * u - max_sigma;
            LayerBoundCheck { layer, bound_u: u, mu_margin, sigma_margin, pass: mu_margin >= 0.0 && sigma_margin >= 0.0 }
        })
        .collect();
    Ok(BoundsReport { layers })
}

/// Instance-level form of the same bounds: `|mu_bc| <= U`, `sigma_bc <= sqrt(2) U`.
/// Returns the smallest margin over both statistics.
pub fn instance_bound_margin(s: &InstanceStats, u: f64) -> f64 {
    let mu = s.mu.iter().map(|m| u - m.abs());
    let sigma = s.sigma.iter().map(|v| std::f64::consts::SQRT_2 * u - v.abs());
    mu.chain(sigma).fold(f64::INFINITY, f64::min)
}

// ---- Lipschitz continuity in the parameters ----------------------------------

/// Observed change of the four statistics of one layer between two parameter
/// vectors, checked channel by channel against the bounds implied by the
/// observed constants.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzCheck {
    /// Largest absolute activation over both parameter vectors.
    pub bound_u: f64,
    /// Largest activation change divided by the parameter distance.
    pub lipschitz_d: f64,
    /// Smallest positive per-channel gamma (infinite if there is none).
    pub gamma: f64,
    /// Largest per-channel `ratio / bound` for `(mu_bar, sigma_bar, var_mu,
    /// var_sigma)`, where the ratio is `|stat(theta) - stat(theta')| / ||theta - theta'||`.
    pub utilization: [f64; 4],
    /// Channel-statistic pairs whose ratio is non-finite or above its bound.
    pub violations: usize,
    /// Channels where some instance has sigma = 0 under one of the parameter
    /// vectors but not every instance under both. The sigma_bar and var_sigma
    /// bounds are vacuous there and are not checked.
    pub vacuous_channels: usize,
    pub channels: usize,
}

/// Compares the raw (unguarded) statistics of one layer's activations `h_a`
/// and `h_b`, produced by parameters at distance `param_dist`. Gamma is taken
/// per channel, the smallest instance sigma of that channel on either side.
pub fn lipschitz_check(h_a: &Tensor4, h_b: &Tensor4, param_dist: f64) -> Result<LipschitzCheck> {
    if h_a.dims() != h_b.dims() {
        return Err(shape_err!("activation dims {:?} vs {:?}", h_a.dims(), h_b.dims()));
    }
    let (sa, sb) = (instance_stats(h_a, 0.0), instance_stats(h_b, 0.0));
    let (la, lb) = (LayerStyle::from_instance_stats(&sa), LayerStyle::from_instance_stats(&sb));
    let u = h_a.max_abs().max(h_b.max_abs());
    let d = h_a.max_abs_diff(h_b) / param_dist;
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut out = LipschitzCheck {
        bound_u: u,
        lipschitz_d: d,
        gamma: f64::INFINITY,
        utilization: [0.0; 4],
        violations: 0,
        vacuous_channels: 0,
        channels: sa.channels,
    };
    for ch in 0..sa.channels {
        let sigmas = (0..sa.batch).flat_map(|b| [sa.sigma_at(b, ch), sb.sigma_at(b, ch)]);
        let gamma = sigmas.clone().fold(f64::INFINITY, f64::min);
        // Flat under both vectors: the sigma statistics are zero on both sides.
        let flat = sigmas.clone().all(|s| s == 0.0);
        let ratios = [
            (la.mu_bar[ch] - lb.mu_bar[ch]).abs(),
            (la.sigma_bar[ch] - lb.sigma_bar[ch]).abs(),
            (la.var_mu[ch] - lb.var_mu[ch]).abs(),
            (la.var_sigma[ch] - lb.var_sigma[ch]).abs(),
        ]
        .map(|r| r / param_dist);
        let bounds = [
            Some(d),
            (gamma > 0.0).then(|| 4.0 * u * d / gamma),
            Some(4.0 * u * d),
            (gamma > 0.0).then(|| 4.0 * u * d * (1.0 + 2.0 * sqrt2 * u / gamma)),
        ];
        if gamma > 0.0 {
            out.gamma = out.gamma.min(gamma);
        } else if !flat {
            out.vacuous_channels += 1;
        }
        for i in 0..4 {
            let r = ratios[i];
            let Some(bound) = bounds[i] else { continue };
            if !r.is_finite() || r > bound {
                out.violations += 1;
            } else if bound > 0.0 {
                out.utilization[i] = out.utilization[i].max(r / bound);
            }
        }
    }
    Ok(out)
}
