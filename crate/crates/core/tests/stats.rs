mod common;

use styleddg::autodiff::conv::conv2d_direct;
use styleddg::autodiff::Graph;
use styleddg::stats::{
    check_style_bounds, device_style_vector, instance_bound_margin, instance_stats, instance_stats_var,
    second_order_stats, LayerStyle, StyleVector,
};
use styleddg::{Model, ModelSpec, Tensor4};

#[test]
fn instance_and_batch_stats_match_scalar_loops() {
    let x = common::randn([2, 3, 4, 4], 3);
    for eps in [0.0, 1e-5] {
        let s = instance_stats(&x, eps);
        let (mu, sigma) = common::stats(&x, eps);
        for b in 0..2 {
            for c in 0..3 {
                assert!((s.mu_at(b, c) - mu[b][c]).abs() < 1e-12);
                assert!((s.sigma_at(b, c) - sigma[b][c]).abs() < 1e-12);
            }
        }
        let (var_mu, var_sigma) = second_order_stats(&s);
        let (_, want_mu) = common::batch_moments(&mu);
        let (_, want_sigma) = common::batch_moments(&sigma);
        for c in 0..3 {
            assert!((var_mu[c] - want_mu[c]).abs() < 1e-12);
            assert!((var_sigma[c] - want_sigma[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn differentiable_stats_agree_with_plain_stats() {
    let x = common::randn([3, 2, 5, 3], 8);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let (mu, sigma) = instance_stats_var(&mut g, v, 1e-5).unwrap();
    let s = instance_stats(&x, 1e-5);
    assert_eq!(g.value(mu).data(), s.mu.as_slice());
    assert!(g.value(sigma).data().iter().zip(&s.sigma).all(|(a, b)| (a - b).abs() < 1e-14));
}

#[test]
fn identical_instances_have_no_spread() {
    let one = common::randn([1, 4, 3, 3], 1);
    let x = Tensor4::stack(&[&one, &one, &one]).unwrap();
    let ls = LayerStyle::from_activation(&x, 1e-5);
    assert!(ls.var_mu.iter().chain(&ls.var_sigma).all(|&v| v == 0.0));
}

/// Forward of the tiny two-block net by hand: conv, relu, pool, conv, relu.
fn tiny_blocks(model: &Model, params: &styleddg::ModelParams, x: &Tensor4) -> Vec<Tensor4> {
    let t = model.unflatten(params).unwrap();
    let relu = |mut a: Tensor4| {
        a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        a
    };
    let h1 = relu(conv2d_direct(x, &t[0], t[1].data(), 1, 1).unwrap());
    let [b, c, h, w] = h1.dims();
    let mut pooled = Tensor4::zeros([b, c, h / 2, w / 2]);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let s = h1.at(bi, ci, 2 * i, 2 * j)
                        + h1.at(bi, ci, 2 * i + 1, 2 * j)
                        + h1.at(bi, ci, 2 * i, 2 * j + 1)
                        + h1.at(bi, ci, 2 * i + 1, 2 * j + 1);
                    pooled.set(bi, ci, i, j, s / 4.0);
                }
            }
        }
    }
    let h2 = relu(conv2d_direct(&pooled, &t[2], t[3].data(), 1, 1).unwrap());
    vec![h1, h2]
}

#[test]
fn device_style_vector_of_tiny_net_matches_oracle() {
    let spec = ModelSpec { in_channels: 2, height: 6, width: 6, channels: vec![3, 4], classes: 3, hooks: vec![0, 1], ..ModelSpec::default() };
    let model = Model::new(spec).unwrap();
    let params = model.init_params(5);
    let x = common::randn([4, 2, 6, 6], 6);
    let sv = device_style_vector(&model, &params, &x, &[0, 1], 1e-5).unwrap();
    assert_eq!(sv.scalar_count(), 4 * (3 + 4));
    let mut want = Vec::new();
    for h in tiny_blocks(&model, &params, &x) {
        let (mu, sigma) = common::stats(&h, 1e-5);
        let (mu_bar, var_mu) = common::batch_moments(&mu);
        let (sigma_bar, var_sigma) = common::batch_moments(&sigma);
        want.extend(mu_bar.into_iter().chain(sigma_bar).chain(var_mu).chain(var_sigma));
    }
    let got = sv.flat();
    assert_eq!(got.len(), want.len());
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(StyleVector::from_bytes(&sv.to_bytes()).unwrap(), sv);
}

#[test]
fn hooks_outside_the_model_are_rejected() {
    let model = Model::new(ModelSpec::default()).unwrap();
    let params = model.init_params(1);
    let x = Tensor4::zeros(model.spec().input_dims(2));
    assert!(matches!(device_style_vector(&model, &params, &x, &[3], 1e-5), Err(styleddg::Error::Config(_))));
}

#[test]
fn spike_map_respects_the_bounds() {
    let mut x = Tensor4::zeros([1, 1, 8, 8]);
    x.set(0, 0, 3, 5, 7.5);
    let s = instance_stats(&x, 0.0);
    assert!(instance_bound_margin(&s, x.max_abs()) >= 0.0);
    let sv = StyleVector { layers: vec![LayerStyle::from_instance_stats(&s)] };
    assert!(check_style_bounds(&sv, &[x.max_abs()]).unwrap().all_pass());
}
