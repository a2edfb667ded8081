//! Experiment matrix driver: methods x target domains x seeds (x radii),
//! with per-iteration CSVs, summary statistics and a results table.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{generate, split_leave_one_domain_out, Dataset, DomainData};
use crate::error::{Error, Result};
use crate::federation::{evaluate, RunOutput, SimConfig, Simulation};
use crate::network::{DeviceGraph, GraphKind};
use crate::style::StyleMode;
use crate::tensor::Tensor4;

pub const ITERATIONS_CSV_HEADER: &str = "# schema v1: one row per iteration; disagreement and grad_norm_sq are measured after the update";
pub const ITERATIONS_CSV_COLUMNS: &str =
    "k,lr,mean_loss,disagreement,grad_norm_sq,bytes_model,bytes_style,target_acc_mean,target_acc_avg_model";
pub const ROWS_CSV_HEADER: &str = "# schema v1: one row per (method, target, seed, graph) cell";
pub const ROWS_CSV_COLUMNS: &str = "method,target,seed,graph,rho,target_acc_mean,target_acc_avg_model,source_acc_mean,final_disagreement,style_overhead,iterations,interrupted";

/// Loads or generates the dataset named by the config. A `dataset` path is
/// either a directory holding `train.bin` and `test.bin` (as written by
/// `gen-data`) or a single file, whose samples then serve as both splits.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<DomainData> {
    match &cfg.dataset {
        Some(p) if p.is_dir() => Ok(DomainData { train: Dataset::load(&p.join("train.bin"))?, test: Dataset::load(&p.join("test.bin"))? }),
        Some(p) => {
            let all = Dataset::load(p)?;
            Ok(DomainData { train: all.clone(), test: all })
        }
        None => generate(&cfg.data, cfg.data_seed),
    }
}

/// Graph used by a cell: the custom edge list if configured, else `graph`.
pub fn resolve_graph(cfg: &ExperimentConfig) -> Result<GraphKind> {
    match &cfg.graph_file {
        Some(p) => {
            let g = DeviceGraph::load_edge_list(p, Some(cfg.sim.m))?;
            Ok(GraphKind::Custom(g.edges()))
        }
        None => Ok(cfg.sim.graph.clone()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: StyleMode,
    pub target: usize,
    pub seed: u64,
    pub graph: GraphKind,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        let g = match &self.graph {
            GraphKind::RandomGeometric { radius } => format!("_r{radius}"),
            _ => String::new(),
        };
        format!("{}_t{}_s{}{g}", self.method.method_name().replace('+', "-"), self.target, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub method: String,
    pub target: usize,
    pub seed: u64,
    pub graph: String,
    pub rho: f64,
    /// Mean over devices of each device's target accuracy (headline number).
    pub target_acc_mean: f64,
    pub target_acc_avg_model: f64,
    pub target_acc_per_device: Vec<f64>,
    /// Mean device accuracy on held-out source-domain data.
    pub source_acc_mean: f64,
    pub final_disagreement: f64,
    /// Style bytes over model bytes.
    pub style_overhead: f64,
    pub iterations: usize,
    pub running_grad_norm: Option<f64>,
    pub interrupted: bool,
}

impl CellResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
            self.method,
            self.target,
            self.seed,
            self.graph,
            self.rho,
            self.target_acc_mean,
            self.target_acc_avg_model,
            self.source_acc_mean,
            self.final_disagreement,
            self.style_overhead,
            self.iterations,
            self.interrupted
        )
    }

    /// Inverse of [`CellResult::csv_row`]. Per-device accuracies and the
    /// gradient-norm average are not stored in the row and come back empty.
    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::Format(format!("rows.csv: expected 12 fields in '{line}'")));
        }
        let bad = || Error::Format(format!("rows.csv: bad value in '{line}'"));
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            method: f[0].to_string(),
            target: f[1].parse().map_err(|_| bad())?,
            seed: f[2].parse().map_err(|_| bad())?,
            graph: f[3].to_string(),
            rho: num(4)?,
            target_acc_mean: num(5)?,
            target_acc_avg_model: num(6)?,
            target_acc_per_device: Vec::new(),
            source_acc_mean: num(7)?,
            final_disagreement: num(8)?,
            style_overhead: num(9)?,
            iterations: f[10].parse().map_err(|_| bad())?,
            running_grad_norm: None,
            interrupted: f[11].parse().map_err(|_| bad())?,
        })
    }
}

/// Rows of a `rows.csv` file, skipping comment and header lines.
pub fn read_rows_csv(text: &str) -> Result<Vec<CellResult>> {
    text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).skip(1).map(CellResult::from_csv_row).collect()
}

/// Fixed probe batch drawn round-robin from the source domains' held-out data.
pub fn probe_batch(data: &DomainData, target: usize, size: usize) -> Result<Option<(Tensor4, Vec<usize>)>> {
    if size == 0 {
        return Ok(None);
    }
    let sources: Vec<Vec<usize>> =
        data.test.domain_ids().into_iter().filter(|&d| d != target).map(|d| data.test.domain_indices(d)).collect();
    let mut idx = Vec::with_capacity(size);
    'outer: for k in 0.. {
        let mut any = false;
        for s in &sources {
            if let Some(&i) = s.get(k) {
                idx.push(i);
                any = true;
                if idx.len() == size {
                    break 'outer;
                }
            }
        }
        if !any {
            break;
        }
    }
    if idx.is_empty() {
        return Ok(None);
    }
    data.test.batch(&idx).map(Some)
}

/// Runs one cell. With `out` set, writes `iterations.csv`, `timing.csv` and
/// final checkpoints into that directory.
pub fn run_cell(
    cfg: &ExperimentConfig,
    data: &DomainData,
    cell: &Cell,
    out: Option<&Path>,
    stop: Option<&AtomicBool>,
) -> Result<CellResult> {
    let sim_cfg = SimConfig { graph: cell.graph.clone(), seed: cell.seed, ..cfg.sim.clone() };
    let sim_cfg = SimConfig { style: crate::style::StyleLayerConfig { mode: cell.method, ..cfg.sim.style.clone() }, ..sim_cfg };
    let (shards, _) = split_leave_one_domain_out(&data.train, cell.target, sim_cfg.m)?;
    let target_set = data.whole_domain(cell.target);
    let source_val = {
        let idx: Vec<usize> = (0..data.test.len()).filter(|&i| data.test.domains[i] != cell.target).collect();
        data.test.subset(&idx)
    };
    let probe = probe_batch(data, cell.target, if sim_cfg.probe_every > 0 { cfg.probe_batch } else { 0 })?;
    let mut sim = Simulation::new(sim_cfg.clone(), shards, probe)?;
    let model = sim.model().clone();

    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = std::io::BufWriter::new(fs::File::create(dir.join("iterations.csv"))?);
            writeln!(f, "{ITERATIONS_CSV_HEADER}")?;
            writeln!(f, "{ITERATIONS_CSV_COLUMNS}")?;
            Some(f)
        }
        None => None,
    };
    let mut io_err = None;
    let iterations = sim_cfg.iterations;
    let eval_every = cfg.eval_every;
    // Evaluation inside the record callback needs the current parameters,
    // so iterate manually.
    let mut output = RunOutput {
        records: Vec::new(),
        initial_disagreement: crate::federation::disagreement(&sim.params()),
        initial_grad_norm_sq: if sim_cfg.probe_every > 0 { sim.probe_grad_norm_sq()? } else { None },
        timings: Vec::new(),
        interrupted: false,
        params: Vec::new(),
    };
    let mut last_eval = None;
    while sim.iteration() < iterations {
        if stop.is_some_and(|s| s.load(std::sync::atomic::Ordering::Relaxed)) {
            output.interrupted = true;
            break;
        }
        let t = std::time::Instant::now();
        let r = sim.step()?;
        output.timings.push(t.elapsed().as_secs_f64());
        let done = sim.iteration();
        let eval_now = done == iterations || (eval_every > 0 && done % eval_every == 0);
        let eval = if eval_now { Some(evaluate(&model, &sim.params(), &target_set)?) } else { None };
        if let Some(f) = csv.as_mut() {
            let mean_loss = r.losses.iter().sum::<f64>() / r.losses.len() as f64;
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
            let res = writeln!(
                f,
                "{},{:.17e},{:.17e},{:.17e},{},{},{},{},{}",
                r.k,
                r.lr,
                mean_loss,
                r.disagreement,
                opt(r.grad_norm_sq),
                r.bytes_model,
                r.bytes_style,
                opt(eval.as_ref().map(|e| e.mean_device())),
                opt(eval.as_ref().map(|e| e.average_model)),
            );
            if let Err(e) = res {
                io_err = Some(e);
            }
        }
        if eval.is_some() {
            last_eval = eval;
        }
        output.records.push(r);
    }
    if let Some(mut f) = csv {
        f.flush()?;
    }
    if let Some(e) = io_err {
        return Err(e.into());
    }
    output.params = sim.params();
    let eval = match last_eval {
        Some(e) if !output.interrupted => e,
        _ => evaluate(&model, &output.params, &target_set)?,
    };
    let source = evaluate(&model, &output.params, &source_val)?;
    if let Some(dir) = out {
        let mut t = String::from("k,seconds\n");
        for (k, s) in output.timings.iter().enumerate() {
            let _ = writeln!(t, "{k},{s:.6}");
        }
        fs::write(dir.join("timing.csv"), t)?;
        for (i, p) in output.params.iter().enumerate() {
            model.save_checkpoint(p, &dir.join(format!("device{i}")))?;
        }
    }
    let (model_bytes, style_bytes) = sim.message_bytes();
    let sharing = cell.method == StyleMode::StyleDdg;
    Ok(CellResult {
        method: cell.method.method_name().to_string(),
        target: cell.target,
        seed: cell.seed,
        graph: cell.graph.to_string(),
        rho: sim.rho(),
        target_acc_mean: eval.mean_device(),
        target_acc_avg_model: eval.average_model,
        target_acc_per_device: eval.per_device,
        source_acc_mean: source.mean_device(),
        final_disagreement: output.records.last().map_or(output.initial_disagreement, |r| r.disagreement),
        style_overhead: if sharing { style_bytes as f64 / model_bytes as f64 } else { 0.0 },
        iterations: output.records.len(),
        running_grad_norm: output.running_grad_norm(),
        interrupted: output.interrupted,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryEntry {
    pub method: String,
    pub target: usize,
    pub graph: String,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub mean_avg_model: f64,
    pub rho_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub status: String,
    pub entries: Vec<SummaryEntry>,
    pub style_overhead: f64,
}

pub fn summarize(rows: &[CellResult]) -> Vec<SummaryEntry> {
    let mut keys: Vec<(String, usize, String)> = Vec::new();
    for r in rows {
        let k = (r.method.clone(), r.target, r.graph.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, target, graph)| {
            let group: Vec<&CellResult> =
                rows.iter().filter(|r| r.method == method && r.target == target && r.graph == graph).collect();
            let accs: Vec<f64> = group.iter().map(|r| r.target_acc_mean).collect();
            let (mean, std) = mean_std(&accs);
            let (mean_avg_model, _) = mean_std(&group.iter().map(|r| r.target_acc_avg_model).collect::<Vec<_>>());
            let (rho_mean, _) = mean_std(&group.iter().map(|r| r.rho).collect::<Vec<_>>());
            SummaryEntry { method, target, graph, seeds: group.iter().map(|r| r.seed).collect(), mean, std, mean_avg_model, rho_mean }
        })
        .collect()
}

/// Methods as rows, targets as columns, plus the row mean. Cells read
/// `mean ± std` in percent.
pub fn format_table(entries: &[SummaryEntry]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut targets: Vec<usize> = Vec::new();
    for e in entries {
        if !methods.contains(&e.method.as_str()) {
            methods.push(&e.method);
        }
        if !targets.contains(&e.target) {
            targets.push(e.target);
        }
    }
    targets.sort_unstable();
    let mut out = format!("{:<16}", "method");
    for t in &targets {
        let _ = write!(out, " {:>15}", format!("target {t}"));
    }
    let _ = writeln!(out, " {:>8}", "Avg");
    for m in methods {
        let _ = write!(out, "{m:<16}");
        let mut means = Vec::new();
        for t in &targets {
            match entries.iter().find(|e| e.method == m && e.target == *t) {
                Some(e) => {
                    means.push(e.mean);
                    let _ = write!(out, " {:>15}", format!("{:.2} ± {:.2}", 100.0 * e.mean, 100.0 * e.std));
                }
                None => {
                    let _ = write!(out, " {:>15}", "-");
                }
            }
        }
        let avg = means.iter().sum::<f64>() / means.len().max(1) as f64;
        let _ = writeln!(out, " {:>8.2}", 100.0 * avg);
    }
    out.push_str("target accuracy in %, mean ± population std over seeds\n");
    out
}

/// Row mean over targets for one method.
pub fn method_average(entries: &[SummaryEntry], method: &str) -> Option<f64> {
    let v: Vec<f64> = entries.iter().filter(|e| e.method == method).map(|e| e.mean).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub struct RunReport {
    pub rows: Vec<CellResult>,
    pub summary: Summary,
    pub table: String,
    pub dir: PathBuf,
}

/// Progress messages for long runs.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

/// Runs every `(method, target, seed)` cell on `graphs` and writes the run
/// directory: `config.txt`, `cells/<cell>/...`, `rows.csv`, `summary.json`,
/// `table.txt`, `status.txt`.
///
/// With `resume`, completed rows of an earlier run in `out` with the same
/// config snapshot are kept and only the missing cells run. Cells are
/// deterministic, so the result equals an uninterrupted run.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    graphs: &[GraphKind],
    out: &Path,
    resume: bool,
    stop: Option<&AtomicBool>,
    progress: Progress<'_>,
) -> Result<RunReport> {
    cfg.validate()?;
    let snapshot = cfg.to_text();
    let mut done: Vec<CellResult> = Vec::new();
    if resume {
        let old = fs::read_to_string(out.join("config.txt"))
            .map_err(|e| Error::Config(format!("cannot resume from {}: {e}", out.display())))?;
        if old != snapshot {
            return Err(Error::Config(format!("config differs from the snapshot in {}; cannot resume", out.display())));
        }
        if let Ok(text) = fs::read_to_string(out.join("rows.csv")) {
            done = read_rows_csv(&text)?.into_iter().filter(|r| !r.interrupted).collect();
        }
    }
    fs::create_dir_all(out.join("cells"))?;
    fs::write(out.join("config.txt"), &snapshot)?;
    fs::write(out.join("status.txt"), "running\n")?;
    let data = prepare_data(cfg)?;
    let mut rows = Vec::new();
    let mut rows_csv = format!("{ROWS_CSV_HEADER}\n{ROWS_CSV_COLUMNS}\n");
    let mut interrupted = false;
    'cells: for graph in graphs {
        for &method in &cfg.methods {
            for &target in &cfg.targets {
                for &seed in &cfg.seeds {
                    let cell = Cell { method, target, seed, graph: graph.clone() };
                    let key = (method.method_name(), target, seed, graph.to_string());
                    if let Some(r) = done.iter().find(|r| (r.method.as_str(), r.target, r.seed, r.graph.clone()) == key) {
                        progress(&format!("{} target={} seed={} graph={} reused", r.method, r.target, r.seed, r.graph));
                        rows_csv.push_str(&r.csv_row());
                        rows_csv.push('\n');
                        rows.push(r.clone());
                        continue;
                    }
                    let r = run_cell(cfg, &data, &cell, Some(&out.join("cells").join(cell.dir_name())), stop)?;
                    progress(&format!(
                        "{} target={} seed={} graph={} acc={:.4}",
                        r.method, r.target, r.seed, r.graph, r.target_acc_mean
                    ));
                    rows_csv.push_str(&r.csv_row());
                    rows_csv.push('\n');
                    fs::write(out.join("rows.csv"), &rows_csv)?;
                    let stopped = r.interrupted;
                    rows.push(r);
                    if stopped {
                        interrupted = true;
                        break 'cells;
                    }
                }
            }
        }
    }
    let entries = summarize(&rows);
    let style_overhead = rows.iter().map(|r| r.style_overhead).fold(0.0, f64::max);
    let status = if interrupted { "interrupted, resumable" } else { "complete" };
    let summary = Summary { status: status.to_string(), entries, style_overhead };
    let table = format_table(&summary.entries);
    fs::write(out.join("rows.csv"), &rows_csv)?;
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    fs::write(out.join("table.txt"), &table)?;
    fs::write(out.join("status.txt"), format!("{status}\n"))?;
    Ok(RunReport { rows, summary, table, dir: out.to_path_buf() })
}

pub fn cmd_run(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: bool,
    stop: Option<&AtomicBool>,
    progress: Progress<'_>,
) -> Result<RunReport> {
    let graph = resolve_graph(cfg)?;
    run_matrix(cfg, &[graph], out, resume, stop, progress)
}

/// One run per radius of a random geometric graph.
pub fn cmd_sweep_radius(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: bool,
    stop: Option<&AtomicBool>,
    progress: Progress<'_>,
) -> Result<RunReport> {
    if cfg.radii.is_empty() {
        return Err(Error::Config("radii must be non-empty".into()));
    }
    let graphs: Vec<GraphKind> = cfg.radii.iter().map(|&radius| GraphKind::RandomGeometric { radius }).collect();
    run_matrix(cfg, &graphs, out, resume, stop, progress)
}
