//! Scalar-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use styleddg::Tensor4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(dims: [usize; 4], seed: u64) -> Tensor4 {
    Tensor4::randn(dims, &mut rng(seed))
}

/// `(mu[b][c], sigma[b][c])` with `sigma = sqrt(var + eps)`, two-pass.
pub fn stats(x: &Tensor4, eps: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let [b, c, h, w] = x.dims();
    let n = (h * w) as f64;
    let mut mu = vec![vec![0.0; c]; b];
    let mut sigma = vec![vec![0.0; c]; b];
    for bi in 0..b {
        for ci in 0..c {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += x.at(bi, ci, i, j);
                }
            }
            let m = s / n;
            let mut v = 0.0;
            for i in 0..h {
                for j in 0..w {
                    v += (x.at(bi, ci, i, j) - m).powi(2);
                }
            }
            mu[bi][ci] = m;
            sigma[bi][ci] = (v / n + eps).sqrt();
        }
    }
    (mu, sigma)
}

/// Per-channel mean and population variance across the batch of `s[b][c]`.
pub fn batch_moments(s: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let b = s.len() as f64;
    let c = s[0].len();
    let mean: Vec<f64> = (0..c).map(|ci| s.iter().map(|r| r[ci]).sum::<f64>() / b).collect();
    let var = (0..c).map(|ci| s.iter().map(|r| (r[ci] - mean[ci]).powi(2)).sum::<f64>() / b).collect();
    (mean, var)
}

/// Re-styles every instance onto `(mu_t[b][c], sigma_t[b][c])`.
pub fn adain(x: &Tensor4, mu_t: &[Vec<f64>], sigma_t: &[Vec<f64>], eps: f64) -> Tensor4 {
    let [b, c, h, w] = x.dims();
    let (mu, sigma) = stats(x, eps);
    let mut out = Tensor4::zeros(x.dims());
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = (x.at(bi, ci, i, j) - mu[bi][ci]) / sigma[bi][ci] * sigma_t[bi][ci] + mu_t[bi][ci];
                    out.set(bi, ci, i, j, v);
                }
            }
        }
    }
    out
}

pub fn lerp(own: &[Vec<f64>], target: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    own.iter().zip(target).map(|(a, t)| a.iter().zip(t).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect()).collect()
}

/// `B x C` rows as a `(B, C, 1, 1)` tensor.
pub fn rows_tensor(rows: &[Vec<f64>]) -> Tensor4 {
    Tensor4::from_vec([rows.len(), rows[0].len(), 1, 1], rows.concat()).unwrap()
}

pub fn max_diff(a: &Tensor4, b: &Tensor4) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.max_abs_diff(b)
}
