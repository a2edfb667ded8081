mod common;

use common::{adain as adain_oracle, lerp, rows_tensor, stats};
use styleddg::autodiff::{Graph, Var};
use styleddg::stats::LayerStyle;
use styleddg::style::{
    adain, dsu, mixstyle, mixstyle_shuffle_forward, style_explore, style_shift, styleddg_layer, LayerRandomness,
};
use styleddg::Tensor4;

fn eval(x: &Tensor4, f: impl FnOnce(&mut Graph, Var) -> Var) -> Tensor4 {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v);
    g.value(out).clone()
}

/// Standardized noise maps rescaled so instance `b`, channel `c` has spread
/// `0.5 + 0.4 (b + c)` and mean `b - 0.7 c`.
fn styled_input(dims: [usize; 4], seed: u64) -> Tensor4 {
    let mut x = common::randn(dims, seed);
    let (mu, sigma) = stats(&x, 0.0);
    let [b, c, h, w] = dims;
    for bi in 0..b {
        for ci in 0..c {
            let (scale, shift) = (0.5 + 0.4 * (bi + ci) as f64, bi as f64 - 0.7 * ci as f64);
            for i in 0..h {
                for j in 0..w {
                    let v = (x.at(bi, ci, i, j) - mu[bi][ci]) / sigma[bi][ci];
                    x.set(bi, ci, i, j, scale * v + shift);
                }
            }
        }
    }
    x
}

#[test]
fn adain_onto_unit_style_standardizes() {
    let x = styled_input([3, 2, 5, 5], 1);
    let y = eval(&x, |g, v| {
        let mu = g.constant(Tensor4::zeros([1, 2, 1, 1]));
        let sd = g.constant(Tensor4::filled([1, 2, 1, 1], 1.0));
        adain(g, v, mu, sd, 0.0).unwrap()
    });
    let (mu, sigma) = stats(&y, 0.0);
    assert!(mu.iter().flatten().all(|m| m.abs() < 1e-12));
    assert!(sigma.iter().flatten().all(|s| (s - 1.0).abs() < 1e-12));
}

#[test]
fn adain_matches_scalar_oracle() {
    let x = styled_input([2, 3, 4, 4], 2);
    let mu_t: Vec<Vec<f64>> = vec![vec![0.5, -1.0, 2.0], vec![0.0, 0.3, -0.4]];
    let sd_t: Vec<Vec<f64>> = vec![vec![1.5, 0.2, 0.9], vec![2.0, 1.0, 0.7]];
    let y = eval(&x, |g, v| {
        let (m, s) = (g.constant(rows_tensor(&mu_t)), g.constant(rows_tensor(&sd_t)));
        adain(g, v, m, s, 1e-5).unwrap()
    });
    assert!(common::max_diff(&y, &adain_oracle(&x, &mu_t, &sd_t, 1e-5)) < 1e-12);
}

#[test]
fn mixstyle_interpolates_statistics() {
    let x = styled_input([2, 3, 4, 4], 3);
    let mu_t = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]];
    let sd_t = vec![vec![0.5, 1.5, 1.0], vec![1.0, 2.0, 0.3]];
    let (mu, sigma) = stats(&x, 1e-5);
    for lambda in [0.0, 0.5] {
        let y = eval(&x, |g, v| {
            let (m, s) = (g.constant(rows_tensor(&mu_t)), g.constant(rows_tensor(&sd_t)));
            mixstyle(g, v, m, s, lambda, 1e-5).unwrap()
        });
        let want = adain_oracle(&x, &lerp(&mu, &mu_t, lambda), &lerp(&sigma, &sd_t, lambda), 1e-5);
        assert!(common::max_diff(&y, &want) < 1e-12, "lambda {lambda}");
    }
}

#[test]
fn mixstyle_shuffle_identity_and_swap() {
    let x = styled_input([2, 3, 4, 4], 4);
    let same = eval(&x, |g, v| mixstyle_shuffle_forward(g, v, &[0, 1], 0.3, 1e-5).unwrap());
    assert!(common::max_diff(&same, &x) < 1e-12);

    let swapped = eval(&x, |g, v| mixstyle_shuffle_forward(g, v, &[1, 0], 0.0, 0.0).unwrap());
    let (mu, sigma) = stats(&x, 0.0);
    let (mu2, sigma2) = stats(&swapped, 0.0);
    for c in 0..3 {
        assert!((mu2[0][c] - mu[1][c]).abs() < 1e-12 && (mu2[1][c] - mu[0][c]).abs() < 1e-12);
        assert!((sigma2[0][c] - sigma[1][c]).abs() < 1e-12 && (sigma2[1][c] - sigma[0][c]).abs() < 1e-12);
    }
}

#[test]
fn dsu_on_single_instance_is_identity() {
    let x = styled_input([1, 3, 4, 4], 5);
    let e = Tensor4::filled([1, 3, 1, 1], 2.5);
    let y = eval(&x, |g, v| dsu(g, v, &e, &e, 1e-5).unwrap());
    assert!(common::max_diff(&y, &x) < 1e-12);
}

#[test]
fn dsu_matches_composed_oracle() {
    let x = styled_input([4, 2, 3, 3], 6);
    let eps_mu = common::randn([4, 2, 1, 1], 7);
    let eps_sigma = common::randn([4, 2, 1, 1], 8);
    let y = eval(&x, |g, v| dsu(g, v, &eps_mu, &eps_sigma, 1e-5).unwrap());
    let (mu, sigma) = stats(&x, 1e-5);
    let (_, var_mu) = common::batch_moments(&mu);
    let (_, var_sigma) = common::batch_moments(&sigma);
    let target = |s: &[Vec<f64>], var: &[f64], e: &Tensor4| -> Vec<Vec<f64>> {
        (0..4).map(|b| (0..2).map(|c| s[b][c] + e.at(b, c, 0, 0) * var[c].sqrt()).collect()).collect()
    };
    let want = adain_oracle(&x, &target(&mu, &var_mu, &eps_mu), &target(&sigma, &var_sigma, &eps_sigma), 1e-5);
    assert!(common::max_diff(&y, &want) < 1e-12);
}

fn halves(x: &Tensor4) -> (Tensor4, Tensor4) {
    let b = x.batch();
    let first: Vec<usize> = (0..b / 2).collect();
    let second: Vec<usize> = (b / 2..b).collect();
    (x.select_batch(&first).unwrap(), x.select_batch(&second).unwrap())
}

#[test]
fn style_shift_without_noise_lands_on_the_shared_means() {
    let x = styled_input([6, 3, 4, 4], 9);
    let (xs, xsc) = halves(&x);
    let psi = LayerStyle::from_activation(&styled_input([5, 3, 4, 4], 10), 0.0);
    let zero = vec![0.0; 3];
    let mut g = Graph::new();
    let (a, b) = (g.constant(xs), g.constant(xsc.clone()));
    let out = style_shift(&mut g, a, b, &psi, &zero, &zero, 0.0).unwrap();
    let out = g.value(out);
    let (shifted, kept) = halves(out);
    let (mu, sigma) = stats(&shifted, 0.0);
    for bi in 0..3 {
        for c in 0..3 {
            assert!((mu[bi][c] - psi.mu_bar[c]).abs() < 1e-9);
            assert!((sigma[bi][c] - psi.sigma_bar[c]).abs() < 1e-9);
        }
    }
    assert_eq!(kept.data(), xsc.data());
}

#[test]
fn style_shift_with_noise_matches_oracle() {
    let x = styled_input([4, 2, 4, 4], 11);
    let (xs, xsc) = halves(&x);
    let psi = LayerStyle::from_activation(&styled_input([3, 2, 4, 4], 12), 1e-5);
    let (em, es) = (vec![0.4, -1.1], vec![-0.3, 0.8]);
    let mut g = Graph::new();
    let (a, b) = (g.constant(xs.clone()), g.constant(xsc));
    let out = style_shift(&mut g, a, b, &psi, &em, &es, 1e-5).unwrap();
    let (shifted, _) = halves(g.value(out));
    let mu_t: Vec<f64> = (0..2).map(|c| psi.mu_bar[c] + em[c] * psi.var_mu[c].sqrt()).collect();
    let sd_t: Vec<f64> = (0..2).map(|c| psi.sigma_bar[c] + es[c] * psi.var_sigma[c].sqrt()).collect();
    let want = adain_oracle(&xs, &[mu_t.clone(), mu_t], &[sd_t.clone(), sd_t], 1e-5);
    assert!(common::max_diff(&shifted, &want) < 1e-12);
}

#[test]
fn style_shift_onto_own_single_instance_style_is_identity() {
    let x = styled_input([2, 3, 4, 4], 13);
    let (xs, xsc) = halves(&x);
    let psi = LayerStyle::from_activation(&xs, 1e-5);
    let noise = vec![1.7, -0.4, 0.9];
    let mut g = Graph::new();
    let (a, b) = (g.constant(xs), g.constant(xsc));
    let out = style_shift(&mut g, a, b, &psi, &noise, &noise, 1e-5).unwrap();
    assert!(common::max_diff(g.value(out), &x) < 1e-12);
}

#[test]
fn style_explore_at_lambda_one_is_identity() {
    let x = styled_input([4, 2, 3, 3], 14);
    let y = eval(&x, |g, v| style_explore(g, v, &[true, false, true, false], &[3, 2, 1, 0], 1.0, 3.0, 1e-5).unwrap());
    assert!(common::max_diff(&y, &x) < 1e-12);
}

#[test]
fn style_explore_extrapolates_selected_instances() {
    // styled_input grows mean offset and spread with the batch index, so the
    // last two instances sit above the batch mean in both statistics.
    let x = styled_input([4, 2, 4, 4], 15);
    let mask = [false, false, true, true];
    let id = [0, 1, 2, 3];
    let y = eval(&x, |g, v| style_explore(g, v, &mask, &id, 0.0, 3.0, 0.0).unwrap());
    let (mu, sigma) = stats(&x, 0.0);
    let (mu_mean, _) = common::batch_moments(&mu);
    let (sigma_mean, _) = common::batch_moments(&sigma);
    let (mu_y, sigma_y) = stats(&y, 0.0);
    for b in 0..4 {
        let a = if mask[b] { 3.0 } else { 0.0 };
        for c in 0..2 {
            assert!(sigma[b][c] > sigma_mean[c] || !mask[b]);
            assert!((mu_y[b][c] - (mu[b][c] + a * (mu[b][c] - mu_mean[c]))).abs() < 1e-10);
            assert!((sigma_y[b][c] - (sigma[b][c] + a * (sigma[b][c] - sigma_mean[c]))).abs() < 1e-10);
        }
    }
}

fn randomness(lambda: f64) -> LayerRandomness {
    LayerRandomness {
        eps_mu: vec![0.3, -0.2],
        eps_sigma: vec![-0.5, 0.1],
        lambda,
        shift_mask: vec![false, true, true, false],
        explore_mask: vec![true, false, false, true],
        mix_perm: vec![2, 0, 3, 1],
        neighbor: 1,
    }
}

#[test]
fn styleddg_layer_is_shift_then_explore() {
    let x = styled_input([4, 2, 4, 4], 16);
    let psi = LayerStyle::from_activation(&styled_input([6, 2, 4, 4], 17), 1e-5);
    let r = randomness(0.35);
    let got = eval(&x, |g, v| styleddg_layer(g, v, &psi, &r, 2.0, 1e-5).unwrap());
    let want = eval(&x, |g, v| {
        let xs = g.gather_batch(v, &[1, 2]).unwrap();
        let xsc = g.gather_batch(v, &[0, 3]).unwrap();
        let shifted = style_shift(g, xs, xsc, &psi, &r.eps_mu, &r.eps_sigma, 1e-5).unwrap();
        // rows are [1, 2, 0, 3]; put them back in batch order
        let restored = g.gather_batch(shifted, &[2, 0, 1, 3]).unwrap();
        style_explore(g, restored, &r.explore_mask, &r.mix_perm, r.lambda, 2.0, 1e-5).unwrap()
    });
    assert_eq!(got.data(), want.data());
}

#[test]
fn degenerate_styleddg_layer_is_identity() {
    let x = styled_input([2, 2, 4, 4], 18);
    let psi = LayerStyle::from_activation(&x.select_batch(&[0]).unwrap(), 1e-5);
    let r = LayerRandomness {
        eps_mu: vec![0.0; 2],
        eps_sigma: vec![0.0; 2],
        lambda: 1.0,
        shift_mask: vec![true, false],
        explore_mask: vec![true, false],
        mix_perm: vec![1, 0],
        neighbor: 0,
    };
    let y = eval(&x, |g, v| styleddg_layer(g, v, &psi, &r, 3.0, 1e-5).unwrap());
    assert!(common::max_diff(&y, &x) < 1e-12);
}

#[test]
fn odd_batches_are_rejected_by_the_shift() {
    let x = styled_input([3, 2, 4, 4], 19);
    let psi = LayerStyle::from_activation(&x, 1e-5);
    let mut g = Graph::new();
    let v = g.constant(x);
    let mut r = randomness(0.5);
    r.shift_mask = vec![true, false, false];
    assert!(matches!(styleddg_layer(&mut g, v, &psi, &r, 1.0, 1e-5), Err(styleddg::Error::Config(_))));
}
