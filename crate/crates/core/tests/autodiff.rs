mod common;

use styleddg::autodiff::conv::{conv2d_direct, conv2d_forward};
use styleddg::autodiff::gradcheck::{check_gradient, Probe, DEFAULT_STEP};
use styleddg::autodiff::Graph;
use styleddg::{Error, Tensor4};

fn ce_oracle(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[y].exp() / z).ln();
    }
    total / logits.len() as f64
}

#[test]
fn cross_entropy_of_equal_logits_is_log_classes() {
    let mut g = Graph::new();
    let l = g.leaf(Tensor4::filled([2, 4, 1, 1], 0.7));
    let loss = g.softmax_cross_entropy(l, &[0, 3]).unwrap();
    assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-14);
}

#[test]
fn cross_entropy_of_dominant_correct_logit_is_zero() {
    let mut logits = vec![0.0; 4];
    logits[2] = 1000.0;
    let mut g = Graph::new();
    let l = g.leaf(Tensor4::from_vec([1, 4, 1, 1], logits).unwrap());
    let loss = g.softmax_cross_entropy(l, &[2]).unwrap();
    g.backward(loss).unwrap();
    assert!(g.value(loss).data()[0].abs() < 1e-12);
    assert!(g.grad(l).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn cross_entropy_matches_scalar_oracle_and_gradient() {
    let x = common::randn([3, 5, 1, 1], 42);
    let labels = [1, 4, 0];
    let rows: Vec<Vec<f64>> = x.data().chunks(5).map(|r| r.to_vec()).collect();
    let mut g = Graph::new();
    let l = g.leaf(x.clone());
    let loss = g.softmax_cross_entropy(l, &labels).unwrap();
    g.backward(loss).unwrap();
    assert!((g.value(loss).data()[0] - ce_oracle(&rows, &labels)).abs() < 1e-12);
    // d/dz_j = (softmax_j - [j = y]) / B
    let grad = g.grad(l).unwrap();
    for (b, row) in rows.iter().enumerate() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for j in 0..5 {
            let want = (row[j].exp() / z - f64::from(u8::from(j == labels[b]))) / 3.0;
            assert!((grad[b * 5 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn simple_reductions_have_closed_form_gradients() {
    let x = common::randn([2, 3, 2, 2], 5);
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let s = g.sum(v).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().iter().all(|&d| d == 1.0));

    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let sq = g.square(v).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    g.backward(half).unwrap();
    assert_eq!(g.grad(v).unwrap(), x.data());
}

#[test]
fn backward_before_forward_is_a_state_error() {
    let mut g = Graph::new();
    let mut other = Graph::new();
    let v = other.leaf(Tensor4::scalar(1.0));
    assert!(matches!(g.backward(v), Err(Error::State(_))));
}

#[test]
fn gradients_are_deterministic_and_finite() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(common::randn([2, 2, 5, 5], 1));
        let k = g.leaf(common::randn([3, 2, 3, 3], 2));
        let b = g.leaf(common::randn([1, 3, 1, 1], 3));
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.global_avg_pool(y).unwrap();
        let loss = g.softmax_cross_entropy(y, &[0, 2]).unwrap();
        g.backward(loss).unwrap();
        (g.grad(k).unwrap().to_vec(), g.grad(b).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.0.iter().chain(&a.1).all(|v| v.is_finite()));
}

#[test]
fn conv_forward_matches_direct_loops() {
    let x = common::randn([2, 3, 6, 5], 9);
    let k = common::randn([4, 3, 3, 3], 10);
    let bias = [0.1, -0.2, 0.3, 0.0];
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let fast = conv2d_forward(&x, &k, &bias, stride, pad).unwrap();
        let slow = conv2d_direct(&x, &k, &bias, stride, pad).unwrap();
        assert!(common::max_diff(&fast, &slow) < 1e-12);
    }
}

#[test]
fn conv_linear_chain_passes_finite_differences() {
    let x = common::randn([2, 2, 4, 4], 11);
    let k0 = common::randn([3, 2, 3, 3], 12);
    let w0 = common::randn([4, 3, 1, 1], 13);
    let nk = k0.len();
    let labels = [1, 3];
    let build = |g: &mut Graph, p: &[f64], trainable: bool| {
        let k = Tensor4::from_vec([3, 2, 3, 3], p[..nk].to_vec()).unwrap();
        let w = Tensor4::from_vec([4, 3, 1, 1], p[nk..].to_vec()).unwrap();
        let (k, w) = if trainable { (g.leaf(k), g.leaf(w)) } else { (g.constant(k), g.constant(w)) };
        let xv = g.constant(x.clone());
        let zb = g.constant(Tensor4::zeros([1, 3, 1, 1]));
        let lb = g.constant(Tensor4::zeros([1, 4, 1, 1]));
        let h = g.conv2d(xv, k, zb, 1, 1).unwrap();
        let h = g.square(h).unwrap();
        let h = g.global_avg_pool(h).unwrap();
        let logits = g.linear(h, w, lb).unwrap();
        (g.softmax_cross_entropy(logits, &labels).unwrap(), k, w)
    };
    let point: Vec<f64> = k0.data().iter().chain(w0.data()).copied().collect();
    let mut g = Graph::new();
    let (loss, k, w) = build(&mut g, &point, true);
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = g.grad(k).unwrap().iter().chain(g.grad(w).unwrap()).copied().collect();
    let report = check_gradient(&point, &analytic, DEFAULT_STEP, |p| {
        let mut g = Graph::new();
        let (loss, _, _) = build(&mut g, p, false);
        Probe { value: g.value(loss).data()[0], signature: 0 }
    });
    assert_eq!(report.checked, point.len());
    assert!(report.passes(1e-4), "{report:?}");
}
