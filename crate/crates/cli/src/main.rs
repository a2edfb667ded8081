use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use styleddg::config::ExperimentConfig;
use styleddg::experiment::{cmd_run, cmd_sweep_radius, RunReport};
use styleddg::verify::{run_all, VerifySettings};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "STYLEDDG_OUT";

#[derive(Parser)]
#[command(name = "styleddg", version, about = "Decentralized domain generalization with style sharing, simulated")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `KEY=VAL` setting, applied after the config file (repeatable).
    #[arg(long = "override", value_name = "KEY=VAL")]
    overrides: Vec<String>,
    /// Seeds, comma separated (shorthand for `--override seeds=...`).
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads for per-device computation.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the methods x targets x seeds matrix.
    Run {
        #[command(flatten)]
        common: Common,
        /// Run directory (default: $STYLEDDG_OUT/run, or runs/run).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep finished cells of an interrupted run in the same directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run the matrix on random geometric graphs of several radii.
    SweepRadius {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Radii, comma separated (shorthand for `--override radii=...`).
        #[arg(long)]
        radii: Option<String>,
        #[arg(long)]
        resume: bool,
    },
    /// Run the property and behaviour checks.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Only these checks, comma separated.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt_mixing: bool,
    },
    /// Generate the synthetic dataset and write `train.bin` and `test.bin`.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: $STYLEDDG_OUT/data, or runs/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn default_out(leaf: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(leaf)
}

fn load_config(common: &Common) -> styleddg::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = &common.seeds {
        cfg.set("seeds", s)?;
    }
    if let Some(n) = common.threads {
        cfg.sim.parallel = n > 1;
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: thread pool already set up: {e}");
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stop_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        if f.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupt: finishing the current iteration (press again to abort)");
    }) {
        eprintln!("warning: cannot install the interrupt handler: {e}");
    }
    flag
}

fn print_run(report: &RunReport, started: Instant) {
    println!("{}", report.table);
    println!("status: {}", report.summary.status);
    if report.summary.style_overhead > 0.0 {
        println!("style/model bytes per message: {:.6}%", 100.0 * report.summary.style_overhead);
    }
    for e in &report.summary.entries {
        if e.graph != "complete" {
            println!("{} {} target {}: rho {:.4}", e.graph, e.method, e.target, e.rho_mean);
        }
    }
    println!("run directory: {}", report.dir.display());
    eprintln!("elapsed {:.1}s", started.elapsed().as_secs_f64());
}

fn matrix(out: &Path, report: styleddg::Result<RunReport>, started: Instant) -> styleddg::Result<ExitCode> {
    let report = report?;
    print_run(&report, started);
    if report.summary.status != "complete" {
        eprintln!("interrupted; rerun with --resume --out {} to finish", out.display());
        return Ok(ExitCode::from(130));
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> styleddg::Result<ExitCode> {
    let started = Instant::now();
    let mut progress = |msg: &str| eprintln!("[{:>7.1}s] {msg}", started.elapsed().as_secs_f64());
    match cli.command {
        Command::Run { common, out, resume } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| default_out("run"));
            let stop = stop_flag();
            let report = cmd_run(&cfg, &out, resume, Some(&stop), &mut progress);
            matrix(&out, report, started)
        }
        Command::SweepRadius { common, out, radii, resume } => {
            let mut cfg = load_config(&common)?;
            if let Some(r) = radii {
                cfg.set("radii", &r)?;
            }
            let out = out.unwrap_or_else(|| default_out("sweep-radius"));
            let stop = stop_flag();
            let report = cmd_sweep_radius(&cfg, &out, resume, Some(&stop), &mut progress);
            matrix(&out, report, started)
        }
        Command::Verify { common, only, out, corrupt_mixing } => {
            let cfg = load_config(&common)?;
            let settings = VerifySettings { corrupt_mixing, ..VerifySettings::default() };
            let report = run_all(only.as_deref(), &settings, &cfg, |o| {
                eprintln!("[{:>7.1}s] {}", started.elapsed().as_secs_f64(), o.line());
            })?;
            let text = report.to_text();
            print!("{text}");
            if let Some(p) = out {
                std::fs::write(p, &text)?;
            }
            Ok(if report.all_pass() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| default_out("data"));
            let data = styleddg::data::generate(&cfg.data, cfg.data_seed)?;
            std::fs::create_dir_all(&out)?;
            data.train.save(&out.join("train.bin"))?;
            data.test.save(&out.join("test.bin"))?;
            println!(
                "wrote {} train and {} test samples ({} domains) to {}",
                data.train.len(),
                data.test.len(),
                data.train.domain_ids().len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
