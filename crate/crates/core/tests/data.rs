use std::collections::BTreeSet;

use styleddg::data::{generate, render_content, render_sample, split_leave_one_domain_out, DataConfig, DomainSpec, Shard};
use styleddg::federation::{evaluate, SimConfig, Simulation};
use styleddg::style::{StyleLayerConfig, StyleMode};
use styleddg::Model;

fn small() -> DataConfig {
    DataConfig { train_per_domain: 60, test_per_domain: 30, ..DataConfig::default() }
}

/// Euclidean distance between the per-domain mean channel statistics
/// (mean of per-sample channel means and of channel spreads) over 500 samples.
fn style_gap(cfg: &DataConfig, a: &DomainSpec, b: &DomainSpec) -> f64 {
    let plane = cfg.height * cfg.width;
    let domain_stats = |d: &DomainSpec| -> Vec<f64> {
        let mut acc = vec![0.0; 2 * cfg.channels];
        for k in 0..500u64 {
            let img = render_sample(cfg, d, (k % 5) as usize, k);
            for (c, ch) in img.chunks(plane).enumerate() {
                let m = ch.iter().sum::<f64>() / plane as f64;
                acc[c] += m / 500.0;
                acc[cfg.channels + c] += (ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / plane as f64).sqrt() / 500.0;
            }
        }
        acc
    };
    let (sa, sb) = (domain_stats(a), domain_stats(b));
    sa.iter().zip(&sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn style_gap_grows_with_the_configured_gap() {
    let cfg = small();
    let raw = DomainSpec::raw(0, 3);
    let gaps: Vec<f64> = [0.0, 0.25, 0.5, 1.0, 2.0]
        .iter()
        .map(|&t| {
            let d = DomainSpec { id: 1, scale: vec![1.0 + t, 1.0 + 0.5 * t, 1.0 + 2.0 * t], shift: vec![t, -t, 0.5 * t], ..raw.clone() };
            style_gap(&cfg, &raw, &d)
        })
        .collect();
    assert!(gaps[0] < 1e-12);
    assert!(gaps.windows(2).all(|w| w[1] > w[0]), "{gaps:?}");
}

#[test]
fn three_devices_get_one_source_domain_each() {
    let data = generate(&small(), 1).unwrap();
    let (shards, target) = split_leave_one_domain_out(&data.train, 3, 3).unwrap();
    assert_eq!(shards.iter().map(|s| s.domain).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(target.domains.iter().all(|&d| d == 3));
    for s in &shards {
        assert!(s.data.domains.iter().all(|&d| d == s.domain));
        assert_eq!(s.data.len(), 60);
    }
}

#[test]
fn nine_devices_split_each_domain_three_ways() {
    let data = generate(&small(), 2).unwrap();
    let (shards, target) = split_leave_one_domain_out(&data.train, 0, 9).unwrap();
    let target_ids: BTreeSet<u64> = target.ids.iter().copied().collect();
    let mut seen = BTreeSet::new();
    for d in 1..4 {
        let mine: Vec<_> = shards.iter().filter(|s| s.domain == d).collect();
        assert_eq!(mine.len(), 3);
        let mut union = BTreeSet::new();
        for s in mine {
            for &id in &s.data.ids {
                assert!(union.insert(id), "sample {id} on two devices");
                assert!(!target_ids.contains(&id));
            }
        }
        assert_eq!(union.len(), 60);
        seen.extend(union);
    }
    assert_eq!(seen.len() + target.len(), data.train.len());
}

#[test]
fn too_few_devices_or_unknown_target_is_rejected() {
    let data = generate(&small(), 3).unwrap();
    assert!(split_leave_one_domain_out(&data.train, 3, 2).is_err());
    assert!(split_leave_one_domain_out(&data.train, 7, 3).is_err());
}

#[test]
fn train_and_test_are_disjoint() {
    let data = generate(&small(), 4).unwrap();
    let train: BTreeSet<u64> = data.train.ids.iter().copied().collect();
    assert_eq!(train.len(), data.train.len());
    assert!(data.test.ids.iter().all(|id| !train.contains(id)));
    let whole = data.whole_domain(2);
    assert_eq!(whole.len(), 90);
    assert!(whole.domains.iter().all(|&d| d == 2));
}

#[test]
fn generation_is_a_function_of_the_seed() {
    let cfg = small();
    let (a, b, c) = (generate(&cfg, 9).unwrap(), generate(&cfg, 9).unwrap(), generate(&cfg, 10).unwrap());
    assert_eq!(a.train.to_bytes(), b.train.to_bytes());
    assert_eq!(a.test.to_bytes(), b.test.to_bytes());
    assert_ne!(a.train.to_bytes(), c.train.to_bytes());
}

#[test]
fn identical_styles_render_identical_images() {
    let cfg = small();
    let a = DomainSpec { id: 1, ..cfg.domains[2].clone() };
    let b = DomainSpec { id: 3, ..cfg.domains[2].clone() };
    for k in 0..20u64 {
        assert_eq!(render_sample(&cfg, &a, (k % 5) as usize, k), render_sample(&cfg, &b, (k % 5) as usize, k));
    }
    let raw = DomainSpec::raw(0, 3);
    let content = render_content(2, 77, 3, cfg.height, cfg.width, cfg.noise, cfg.tint_jitter);
    assert_eq!(render_sample(&cfg, &raw, 2, 77), content);
}

#[test]
fn pooled_source_data_is_learnable() {
    let data = generate(&DataConfig::default(), 3).unwrap();
    let (shards, _) = split_leave_one_domain_out(&data.train, 0, 3).unwrap();
    let pooled = shards.into_iter().map(|s| s.data).reduce(|a, b| a.concat(&b)).unwrap();
    let cfg = SimConfig {
        m: 1,
        style: StyleLayerConfig { mode: StyleMode::None, ..StyleLayerConfig::default() },
        parallel: false,
        ..SimConfig::default()
    };
    let model = Model::new(cfg.model.clone()).unwrap();
    let mut sim = Simulation::new(cfg, vec![Shard { device: 0, domain: 1, data: pooled }], None).unwrap();
    let out = sim.run(None, |_| {}).unwrap();
    let val = data.test.subset(&(0..data.test.len()).filter(|&i| data.test.domains[i] != 0).collect::<Vec<_>>());
    let acc = evaluate(&model, &out.params, &val).unwrap().per_device[0];
    assert!(acc >= 0.9, "source validation accuracy {acc}");
}
