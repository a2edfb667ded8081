//! Device graphs, Metropolis-Hastings mixing matrices and their spectra.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Rejection-sampling budget for connected random geometric graphs.
pub const MAX_GRAPH_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub enum GraphKind {
    Complete,
    Ring,
    RandomGeometric { radius: f64 },
    /// Edges `(i, j)`, 0-indexed.
    Custom(Vec<(usize, usize)>),
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphKind::Complete => write!(f, "complete"),
            GraphKind::Ring => write!(f, "ring"),
            GraphKind::RandomGeometric { radius } => write!(f, "random_geometric({radius})"),
            GraphKind::Custom(e) => write!(f, "custom({} edges)", e.len()),
        }
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    /// `complete`, `ring` or `random_geometric(r)`. Custom graphs come from
    /// an edge-list file instead.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "complete" => return Ok(GraphKind::Complete),
            "ring" => return Ok(GraphKind::Ring),
            _ => {}
        }
        let bad = || Error::Config(format!("unknown graph kind '{s}'"));
        let inner = t
            .strip_prefix("random_geometric(")
            .or_else(|| t.strip_prefix("rgg("))
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let radius = inner.trim().parse().map_err(|_| bad())?;
        Ok(GraphKind::RandomGeometric { radius })
    }
}

/// Undirected, connected device graph without self-loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceGraph {
    m: usize,
    neighbors: Vec<Vec<usize>>,
}

impl DeviceGraph {
    pub fn build(kind: &GraphKind, m: usize, seed: u64) -> Result<Self> {
        match kind {
            GraphKind::Complete => Self::complete(m),
            GraphKind::Ring => Self::ring(m),
            GraphKind::RandomGeometric { radius } => Self::random_geometric(m, *radius, seed),
            GraphKind::Custom(edges) => Self::from_edges(m, edges),
        }
    }

    pub fn complete(m: usize) -> Result<Self> {
        let edges: Vec<_> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
        Self::from_edges(m, &edges)
    }

    pub fn ring(m: usize) -> Result<Self> {
        let edges: Vec<_> = (0..m).map(|i| (i, (i + 1) % m)).filter(|(i, j)| i != j).collect();
        Self::from_edges(m, &edges)
    }

    /// Points uniform in the unit square, joined when their distance is at
    /// most `radius`; resampled until connected.
    pub fn random_geometric(m: usize, radius: f64, seed: u64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Construction(format!("radius must be positive, got {radius}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_GRAPH_RETRIES {
            let pts: Vec<(f64, f64)> = (0..m).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
            let mut edges = Vec::new();
            for i in 0..m {
                for j in i + 1..m {
                    let (dx, dy) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
                    if (dx * dx + dy * dy).sqrt() <= radius {
                        edges.push((i, j));
                    }
                }
            }
            match Self::from_edges(m, &edges) {
                Ok(g) => return Ok(g),
                Err(Error::Construction(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::Construction(format!(
            "no connected random geometric graph with m={m}, radius={radius} in {MAX_GRAPH_RETRIES} draws"
        )))
    }

    /// Duplicate edges are merged. Self-loops and out-of-range endpoints are
    /// input errors; a disconnected result is a construction error.
    pub fn from_edges(m: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if m == 0 {
            return Err(Error::Construction("a graph needs at least one device".into()));
        }
        let mut neighbors = vec![Vec::new(); m];
        for &(i, j) in edges {
            if i >= m || j >= m {
                return Err(Error::Input(format!("edge ({i}, {j}) out of range for {m} devices")));
            }
            if i == j {
                return Err(Error::Input(format!("self-loop on device {i}")));
            }
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        let g = Self { m, neighbors };
        if !g.is_connected() {
            return Err(Error::Construction(format!("graph on {m} devices is not connected")));
        }
        Ok(g)
    }

    /// Parses `i j` lines; blank lines and `#` comments are skipped. With
    /// `m = None` the device count is one more than the largest index.
    pub fn parse_edge_list(text: &str, m: Option<usize>) -> Result<Self> {
        let mut edges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(i)), Some(Ok(j)), None) => edges.push((i, j)),
                _ => return Err(Error::Format(format!("edge list line {}: expected 'i j', got '{line}'", n + 1))),
            }
        }
        let m = m.unwrap_or_else(|| edges.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0));
        Self::from_edges(m, &edges)
    }

    pub fn load_edge_list(path: &Path, m: Option<usize>) -> Result<Self> {
        Self::parse_edge_list(&std::fs::read_to_string(path)?, m)
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.m).flat_map(|i| self.neighbors[i].iter().filter(move |&&j| j > i).map(move |&j| (i, j))).collect()
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.m];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !std::mem::replace(&mut seen[j], true) {
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// 0/1 adjacency matrix, one row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.m {
            let row: Vec<&str> = (0..self.m).map(|j| if self.has_edge(i, j) { "1" } else { "0" }).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_edge_list(&self) -> String {
        self.edges().iter().map(|(i, j)| format!("{i} {j}\n")).collect()
    }
}

/// Dense `m x m` mixing matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    m: usize,
    w: Vec<f64>,
}

impl MixingMatrix {
    /// Wraps an arbitrary dense matrix without checking it; see [`MixingMatrix::validate`].
    pub fn from_dense(m: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != m * m {
            return Err(Error::Shape(format!("{} entries for a {m}x{m} matrix", w.len())));
        }
        Ok(Self { m, w })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.m + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.w[i * self.m + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.m..(i + 1) * self.m]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    /// Largest deviation from symmetry and from unit row and column sums.
    pub fn stochasticity_error(&self) -> f64 {
        let m = self.m;
        let mut err = 0.0f64;
        for i in 0..m {
            let row: f64 = (0..m).map(|j| self.get(i, j)).sum();
            let col: f64 = (0..m).map(|j| self.get(j, i)).sum();
            err = err.max((row - 1.0).abs()).max((col - 1.0).abs());
            for j in 0..m {
                err = err.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        err
    }

    /// Symmetric, doubly stochastic within `tol`, with non-negative entries.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let err = self.stochasticity_error();
        if !(err <= tol) {
            return Err(Error::Numeric(format!("mixing matrix is not symmetric doubly stochastic (error {err:.3e})")));
        }
        if let Some(v) = self.w.iter().find(|v| **v < 0.0) {
            return Err(Error::Numeric(format!("mixing matrix has negative entry {v}")));
        }
        Ok(())
    }

    /// `W x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.m).map(|i| self.row(i).iter().zip(x).map(|(w, v)| w * v).sum()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.m {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// `p_ij = 1 / (1 + max(deg_i, deg_j))` on edges, diagonal fills each row to 1.
pub fn metropolis_weights(g: &DeviceGraph) -> MixingMatrix {
    let m = g.len();
    let mut w = MixingMatrix { m, w: vec![0.0; m * m] };
    for i in 0..m {
        let mut off = 0.0;
        for &j in g.neighbors(i) {
            let p = 1.0 / (1.0 + g.degree(i).max(g.degree(j)) as f64);
            w.set(i, j, p);
            off += p;
        }
        w.set(i, i, 1.0 - off);
    }
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    /// Eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
    /// Largest eigenvalue magnitude after removing the top eigenvalue.
    pub rho: f64,
    pub gap: f64,
}

pub fn spectrum(w: &MixingMatrix) -> Result<Spectrum> {
    let m = w.len();
    let mat = DMatrix::from_row_slice(m, m, w.as_slice());
    let eig = SymmetricEigen::try_new(mat, 1e-15, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let rho = ev[1..].iter().fold(0.0f64, |r, v| r.max(v.abs()));
    Ok(Spectrum { eigenvalues: ev, rho, gap: 1.0 - rho })
}

/// `(rho, 1 - rho)`.
pub fn spectral_gap(w: &MixingMatrix) -> Result<(f64, f64)> {
    let s = spectrum(w)?;
    Ok((s.rho, s.gap))
}
