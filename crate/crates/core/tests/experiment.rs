use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use styleddg::config::ExperimentConfig;
use styleddg::data::generate;
use styleddg::experiment::{cmd_run, cmd_sweep_radius, mean_std, read_rows_csv, RunReport};
use styleddg::federation::evaluate;
use styleddg::network::{metropolis_weights, spectral_gap, DeviceGraph};
use styleddg::Model;

fn quick(extra: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for kv in [
        "train_per_domain=24",
        "test_per_domain=12",
        "channels=4,8,8",
        "batch=8",
        "iterations=4",
        "eval_every=2",
        "seeds=1",
        "parallel=false",
    ]
    .iter()
    .chain(extra)
    {
        cfg.apply_override(kv).unwrap();
    }
    cfg
}

fn run(cfg: &ExperimentConfig, dir: &Path) -> RunReport {
    cmd_run(cfg, dir, false, None, &mut |_| {}).unwrap()
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") && p.file_name().unwrap() != "timing.csv" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_matrix_has_sixteen_rows_and_an_avg_column() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick(&["iterations=1"]);
    let report = run(&cfg, tmp.path());
    assert_eq!(report.rows.len(), 16);
    assert_eq!(report.summary.entries.len(), 16);
    let lines: Vec<&str> = report.table.lines().collect();
    assert!(lines[0].trim_end().ends_with("Avg"));
    for (line, m) in lines[1..5].iter().zip(["dsgd", "dsgd+mixstyle", "dsgd+dsu", "styleddg"]) {
        assert!(line.starts_with(m));
    }
    assert!(lines[5].contains("population std"));
    assert_eq!(fs::read_to_string(tmp.path().join("status.txt")).unwrap().trim(), "complete");
}

#[test]
fn mode_override_and_population_std() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick(&["mode=styleddg", "mode=dsgd", "targets=1", "seeds=1,2,3"]);
    let report = run(&cfg, tmp.path());
    assert!(report.rows.iter().all(|r| r.method == "dsgd"));
    let accs: Vec<f64> = report.rows.iter().map(|r| r.target_acc_mean).collect();
    let e = &report.summary.entries[0];
    assert_eq!(e.method, "dsgd");
    let mean = accs.iter().sum::<f64>() / 3.0;
    let pop = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((e.mean - mean).abs() < 1e-15 && (e.std - pop).abs() < 1e-15);
    assert_eq!(mean_std(&accs), (e.mean, e.std));
}

#[test]
fn rows_are_reconstructible_from_cell_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick(&["methods=dsgd,styleddg", "targets=2", "seeds=1,2"]);
    let report = run(&cfg, tmp.path());
    let rows = read_rows_csv(&fs::read_to_string(tmp.path().join("rows.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    let data = generate(&cfg.data, cfg.data_seed).unwrap();
    let target = data.whole_domain(2);
    let model = Model::new(cfg.sim.model.clone()).unwrap();
    for (row, full) in rows.iter().zip(&report.rows) {
        assert_eq!(row.target_acc_mean, full.target_acc_mean);
        let cell = tmp.path().join("cells").join(format!("{}_t2_s{}", row.method, row.seed));
        let text = fs::read_to_string(cell.join("iterations.csv")).unwrap();
        let last: Vec<&str> = text.lines().last().unwrap().split(',').collect();
        assert_eq!(last[0], "3");
        assert!((last[7].parse::<f64>().unwrap() - row.target_acc_mean).abs() < 1e-12);
        assert!((last[8].parse::<f64>().unwrap() - row.target_acc_avg_model).abs() < 1e-12);
        let params: Vec<_> = (0..3).map(|i| model.load_checkpoint(&cell.join(format!("device{i}"))).unwrap()).collect();
        let eval = evaluate(&model, &params, &target).unwrap();
        assert!((eval.mean_device() - row.target_acc_mean).abs() < 1e-12);
        assert!((eval.average_model - row.target_acc_avg_model).abs() < 1e-12);
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    for (e, json) in report.summary.entries.iter().zip(summary["entries"].as_array().unwrap()) {
        let accs: Vec<f64> = rows.iter().filter(|r| r.method == e.method).map(|r| r.target_acc_mean).collect();
        let (mean, std) = mean_std(&accs);
        assert!((json["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
        assert!((json["std"].as_f64().unwrap() - std).abs() < 1e-12);
    }
}

#[test]
fn config_snapshot_reproduces_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = quick(&["methods=dsu,styleddg", "targets=0", "probe_every=2"]);
    run(&cfg, a.path());
    let snapshot = ExperimentConfig::load(&a.path().join("config.txt")).unwrap();
    assert_eq!(snapshot, cfg);
    run(&snapshot, b.path());
    let (fa, fb) = (csv_files(a.path()), csv_files(b.path()));
    assert_eq!(fa.len(), 3);
    assert_eq!(fa, fb);
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let (full, part) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = quick(&["methods=dsgd,mixstyle", "targets=0,1"]);
    run(&cfg, full.path());

    let stop = AtomicBool::new(false);
    let mut seen = 0;
    let report = cmd_run(&cfg, part.path(), false, Some(&stop), &mut |_| {
        seen += 1;
        if seen == 2 {
            stop.store(true, Ordering::SeqCst);
        }
    })
    .unwrap();
    assert_eq!(report.summary.status, "interrupted, resumable");
    assert!(report.rows.last().unwrap().interrupted);
    assert_eq!(fs::read_to_string(part.path().join("status.txt")).unwrap().trim(), "interrupted, resumable");

    let mut reused = 0;
    let resumed = cmd_run(&cfg, part.path(), true, None, &mut |m| reused += usize::from(m.ends_with("reused"))).unwrap();
    assert_eq!(reused, 2);
    assert_eq!(resumed.summary.status, "complete");
    assert_eq!(fs::read(full.path().join("rows.csv")).unwrap(), fs::read(part.path().join("rows.csv")).unwrap());

    let other = quick(&["methods=dsgd", "targets=0,1"]);
    assert!(matches!(cmd_run(&other, part.path(), true, None, &mut |_| {}), Err(styleddg::Error::Config(_))));
}

#[test]
fn single_radius_sweep_equals_a_run_on_that_graph() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sweep = quick(&["methods=dsgd,styleddg", "targets=3", "m=4", "radii=0.9"]);
    let run_cfg = quick(&["methods=dsgd,styleddg", "targets=3", "m=4", "graph=rgg(0.9)", "radii=0.9"]);
    cmd_sweep_radius(&sweep, a.path(), false, None, &mut |_| {}).unwrap();
    run(&run_cfg, b.path());
    assert_eq!(fs::read(a.path().join("rows.csv")).unwrap(), fs::read(b.path().join("rows.csv")).unwrap());
}

#[test]
fn sweep_rho_tracks_connectivity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick(&["methods=dsgd", "targets=0", "m=9", "iterations=1", "seeds=1,2,3", "radii=0.4,0.8,1.5"]);
    let report = cmd_sweep_radius(&cfg, tmp.path(), false, None, &mut |_| {}).unwrap();
    let median = |graph: &str| {
        let mut v: Vec<f64> = report.rows.iter().filter(|r| r.graph == graph).map(|r| r.rho).collect();
        v.sort_by(f64::total_cmp);
        v[1]
    };
    let rhos: Vec<f64> = ["random_geometric(0.4)", "random_geometric(0.8)", "random_geometric(1.5)"].iter().map(|g| median(g)).collect();
    assert!(rhos.windows(2).all(|w| w[1] <= w[0]), "{rhos:?}");
    let complete = spectral_gap(&metropolis_weights(&DeviceGraph::complete(9).unwrap())).unwrap().0;
    for r in report.rows.iter().filter(|r| r.graph == "random_geometric(1.5)") {
        assert!((r.rho - complete).abs() < 1e-10);
    }
}
