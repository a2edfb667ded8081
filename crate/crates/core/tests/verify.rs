use styleddg::config::ExperimentConfig;
use styleddg::verify::{check_style_size, run_all, VerifySettings};

fn cheap() -> VerifySettings {
    VerifySettings { grad_instances: 2, identity_instances: 5, bound_draws: 20, lipschitz_trials: 10, nesting_iterations: 5, ..VerifySettings::default() }
}

fn only(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

#[test]
fn corrupted_mixing_fails_the_consensus_check() {
    let cfg = ExperimentConfig::default();
    let names = only(&["consensus"]);
    let good = run_all(Some(&names), &cheap(), &cfg, |_| {}).unwrap();
    assert!(good.all_pass(), "{}", good.to_text());
    let bad = run_all(Some(&names), &VerifySettings { corrupt_mixing: true, ..cheap() }, &cfg, |_| {}).unwrap();
    assert!(!bad.all_pass());
    assert!(bad.to_text().starts_with("FAIL consensus"));
}

#[test]
fn reports_are_deterministic() {
    let cfg = ExperimentConfig::default();
    let names = only(&["gradients", "identities", "bounds", "lipschitz", "style_size", "consensus", "nesting"]);
    let mut seen = Vec::new();
    let a = run_all(Some(&names), &cheap(), &cfg, |o| seen.push(o.name.clone())).unwrap();
    let b = run_all(Some(&names), &cheap(), &cfg, |_| {}).unwrap();
    assert_eq!(seen, names);
    assert_eq!(a, b);
    assert!(a.all_pass(), "{}", a.to_text());
}

#[test]
fn unknown_check_is_a_config_error() {
    let r = run_all(Some(&only(&["consensus", "bogus"])), &cheap(), &ExperimentConfig::default(), |_| {});
    assert!(matches!(r, Err(styleddg::Error::Config(m)) if m.contains("bogus")));
}

#[test]
fn reference_channels_share_1792_scalars() {
    let o = check_style_size().unwrap();
    assert!(o.pass, "{}", o.line());
}
