//! Plain-text `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated.
//! Block and hook indices are 1-based in the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{DataConfig, DomainSpec};
use crate::error::{Error, Result};
use crate::federation::{LrSchedule, SimConfig};
use crate::network::GraphKind;
use crate::style::{LambdaDist, StyleMode};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Simulation settings; `sim.seed` is replaced by each entry of `seeds`.
    pub sim: SimConfig,
    pub data: DataConfig,
    pub data_seed: u64,
    /// Load this dataset file instead of generating one.
    pub dataset: Option<PathBuf>,
    /// Custom device graph as an edge list; overrides `graph`.
    pub graph_file: Option<PathBuf>,
    pub methods: Vec<StyleMode>,
    pub targets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub radii: Vec<f64>,
    pub probe_batch: usize,
    /// Evaluate on the target every this many iterations (0: final only).
    pub eval_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut sim = SimConfig::default();
        // Augment only after the first block, with full extrapolation.
        sim.model.hooks = vec![0];
        sim.style.alpha_explore = 1.0;
        Self {
            sim,
            data: DataConfig::default(),
            data_seed: 7,
            dataset: None,
            graph_file: None,
            methods: StyleMode::ALL.to_vec(),
            targets: vec![0, 1, 2, 3],
            seeds: vec![1, 2, 3],
            radii: vec![0.5, 0.8, 1.2],
            probe_batch: 64,
            eval_every: 0,
        }
    }
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn one_based(key: &str, v: &str) -> Result<Vec<usize>> {
    list(v, |s| {
        let i: usize = num(key, s)?;
        i.checked_sub(1).ok_or_else(|| Error::Config(format!("{key}: indices start at 1")))
    })
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a `KEY=VAL` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VAL")))?;
        self.set(k.trim(), v.trim())
    }

    fn domain_mut(&mut self, id: usize) -> &mut DomainSpec {
        if let Some(i) = self.data.domains.iter().position(|d| d.id == id) {
            return &mut self.data.domains[i];
        }
        self.data.domains.push(DomainSpec::raw(id, self.data.channels));
        self.data.domains.last_mut().unwrap()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.sim;
        match key {
            "graph" => s.graph = v.parse()?,
            "graph_file" => self.graph_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "m" | "devices" => s.m = num(key, v)?,
            "mode" => self.methods = vec![v.parse()?],
            "methods" => self.methods = list(v, str::parse)?,
            "targets" => self.targets = list(v, |x| num(key, x))?,
            "seeds" => self.seeds = list(v, |x| num(key, x))?,
            "radii" => self.radii = list(v, |x| num(key, x))?,
            "data_seed" => self.data_seed = num(key, v)?,
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "batch" => s.batch = num(key, v)?,
            "iterations" => s.iterations = num(key, v)?,
            "lr" => s.lr = v.parse::<LrSchedule>()?,
            "probe_every" => s.probe_every = num(key, v)?,
            "probe_batch" => self.probe_batch = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "parallel" => s.parallel = flag(key, v)?,
            "distinct_init" => s.distinct_init = flag(key, v)?,
            "channels" => s.model.channels = list(v, |x| num(key, x))?,
            "kernel" => s.model.kernel = num(key, v)?,
            "pool" => s.model.pool = num(key, v)?,
            "hooks" => s.model.hooks = one_based(key, v)?,
            "p_ell" => s.style.p_ell = list(v, |x| num(key, x))?,
            "alpha_explore" => s.style.alpha_explore = num(key, v)?,
            "lambda" => s.style.lambda = v.parse::<LambdaDist>()?,
            "eps_std" => s.style.eps_std = num(key, v)?,
            "eps_var" => s.style.eps_var = num(key, v)?,
            "classes" => {
                self.data.classes = num(key, v)?;
                s.model.classes = self.data.classes;
            }
            "image_channels" => {
                self.data.channels = num(key, v)?;
                s.model.in_channels = self.data.channels;
            }
            "image_size" => {
                let n: usize = num(key, v)?;
                (self.data.height, self.data.width) = (n, n);
                (s.model.height, s.model.width) = (n, n);
            }
            "train_per_domain" => self.data.train_per_domain = num(key, v)?,
            "test_per_domain" => self.data.test_per_domain = num(key, v)?,
            "noise" => self.data.noise = num(key, v)?,
            "tint_jitter" => self.data.tint_jitter = num(key, v)?,
            "domains" => {
                let ids: Vec<usize> = list(v, |x| num(key, x))?;
                self.data.domains.retain(|d| ids.contains(&d.id));
                for id in ids {
                    self.domain_mut(id);
                }
                self.data.domains.sort_by_key(|d| d.id);
            }
            _ => {
                let Some((id, field)) = key.strip_prefix("domain.").and_then(|r| r.split_once('.')) else {
                    return Err(Error::Config(format!("unknown key '{key}'")));
                };
                let id: usize = num(key, id)?;
                let d = self.domain_mut(id);
                match field {
                    "scale" => d.scale = list(v, |x| num(key, x))?,
                    "shift" => d.shift = list(v, |x| num(key, x))?,
                    "freq" => d.freq = num(key, v)?,
                    "amp" => d.amp = num(key, v)?,
                    "angle" => d.angle = num(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key '{key}'"))),
                }
                self.data.domains.sort_by_key(|d| d.id);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.model.validate()?;
        self.sim.style.validate(self.sim.model.hooks.len())?;
        if self.dataset.is_none() {
            self.data.validate()?;
        }
        if self.methods.is_empty() || self.seeds.is_empty() || self.targets.is_empty() {
            return Err(Error::Config("methods, seeds and targets must be non-empty".into()));
        }
        if self.sim.batch == 0 || self.sim.iterations == 0 {
            return Err(Error::Config("batch and iterations must be positive".into()));
        }
        if self.methods.contains(&StyleMode::StyleDdg) && self.sim.batch % 2 != 0 {
            return Err(Error::Config(format!("batch: styleddg needs an even batch size, got {}", self.sim.batch)));
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces this configuration.
    pub fn to_text(&self) -> String {
        let s = &self.sim;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &s.graph {
            GraphKind::Custom(_) => kv("graph", "complete".into()),
            g => kv("graph", g.to_string()),
        }
        if let Some(p) = &self.graph_file {
            kv("graph_file", p.display().to_string());
        }
        kv("m", s.m.to_string());
        kv("methods", join(&self.methods));
        kv("targets", join(&self.targets));
        kv("seeds", join(&self.seeds));
        kv("radii", join(&self.radii));
        kv("data_seed", self.data_seed.to_string());
        if let Some(p) = &self.dataset {
            kv("dataset", p.display().to_string());
        }
        kv("batch", s.batch.to_string());
        kv("iterations", s.iterations.to_string());
        kv("lr", s.lr.to_string());
        kv("probe_every", s.probe_every.to_string());
        kv("probe_batch", self.probe_batch.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("parallel", s.parallel.to_string());
        kv("distinct_init", s.distinct_init.to_string());
        kv("classes", self.data.classes.to_string());
        kv("image_channels", self.data.channels.to_string());
        kv("image_size", self.data.height.to_string());
        kv("channels", join(&s.model.channels));
        kv("kernel", s.model.kernel.to_string());
        kv("pool", s.model.pool.to_string());
        kv("hooks", join(&s.model.hooks.iter().map(|h| h + 1).collect::<Vec<_>>()));
        kv("p_ell", join(&s.style.p_ell));
        kv("alpha_explore", s.style.alpha_explore.to_string());
        kv("lambda", s.style.lambda.to_string());
        kv("eps_std", s.style.eps_std.to_string());
        kv("eps_var", s.style.eps_var.to_string());
        kv("train_per_domain", self.data.train_per_domain.to_string());
        kv("test_per_domain", self.data.test_per_domain.to_string());
        kv("noise", self.data.noise.to_string());
        kv("tint_jitter", self.data.tint_jitter.to_string());
        kv("domains", join(&self.data.domains.iter().map(|d| d.id).collect::<Vec<_>>()));
        for d in &self.data.domains {
            kv(&format!("domain.{}.scale", d.id), join(&d.scale));
            kv(&format!("domain.{}.shift", d.id), join(&d.shift));
            kv(&format!("domain.{}.freq", d.id), d.freq.to_string());
            kv(&format!("domain.{}.amp", d.id), d.amp.to_string());
            kv(&format!("domain.{}.angle", d.id), d.angle.to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_names_the_key() {
        let err = ExperimentConfig::parse("batch = 8\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("learning_rate")));
    }

    #[test]
    fn mode_override_replaces_methods() {
        let mut c = ExperimentConfig::parse("mode = styleddg").unwrap();
        assert_eq!(c.methods, vec![StyleMode::StyleDdg]);
        c.apply_override("mode=dsgd").unwrap();
        assert_eq!(c.methods, vec![StyleMode::None]);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text("graph = random_geometric(0.8)\nm = 9\nhooks = 1,3\ndomain.2.amp = 0.25\nlambda = 1\n").unwrap();
        assert_eq!(c.sim.model.hooks, vec![0, 2]);
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn malformed_lines() {
        assert!(ExperimentConfig::parse("batch 8").is_err());
        assert!(ExperimentConfig::parse("batch = eight").is_err());
        assert!(ExperimentConfig::parse("hooks = 0").is_err());
        assert!(ExperimentConfig::parse("domain.1.colour = 3").is_err());
    }
}
