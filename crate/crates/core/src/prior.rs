//! Causality maps between per-class embeddings and the task prior built from a
//! causal graph over findings.
//!
//! For a sample with normalized disease-causal rows `Q^1 … Q^n`, entry `(i, j)` of
//! its map estimates `P(Q^i | Q^j) ≈ max(Q^i) · max(Q^j) / Σ Q^j`. An asymmetry
//! `P(Q^i|Q^j) > P(Q^j|Q^i)` reads as the signal `i → j`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Branch, EmbeddingKind, FeatureEmbedding};

/// Stabilizer for the batch maximum and the row sums.
pub const EPS: f64 = 1e-8;

/// Clamps to `≥ 0` and divides by the batch-wide maximum (plus [`EPS`]).
pub fn normalize_embeddings(q: &FeatureEmbedding) -> Result<FeatureEmbedding> {
    if q.branch() != Branch::Disease || q.kind() != EmbeddingKind::Causal {
        return Err(Error::contract(format!(
            "causality maps are built from disease-causal embeddings, got {:?}/{:?}",
            q.branch(),
            q.kind()
        )));
    }
    if q.batch() == 0 {
        return Err(Error::contract("cannot normalize an empty batch"));
    }
    let pos = q.values().relu()?;
    let max = pos.flatten_all()?.max_keepdim(0)?.reshape((1, 1, 1))?;
    let normed = pos.broadcast_div(&(max + EPS)?)?;
    FeatureEmbedding::new(normed, q.branch(), q.kind())
}

/// Per-sample causality maps `batch × n × n` from normalized embeddings.
///
/// Columns whose row sum is at most [`EPS`] are zero.
pub fn causality_map(q_norm: &FeatureEmbedding) -> Result<Tensor> {
    let values = q_norm.values();
    let peak = values.max(D::Minus1)?;
    let mass = values.sum(D::Minus1)?;
    let active = mass.gt(EPS)?.to_dtype(values.dtype())?;
    let ratio = peak.div(&(&mass + EPS)?)?.mul(&active)?;
    Ok(peak.unsqueeze(2)?.broadcast_mul(&ratio.unsqueeze(1)?)?)
}

/// An `n × n` map held on the host; `values[i][j]` stands for `P(Q^i | Q^j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalityMap {
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    /// `P(Q^i|Q^j) > P(Q^j|Q^i)`: `i` drives `j`.
    Forward,
    /// `P(Q^j|Q^i) > P(Q^i|Q^j)`: `j` drives `i`.
    Backward,
    None,
}

impl CausalityMap {
    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            values: t.to_dtype(DType::F64)?.to_vec2::<f64>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let n = self.size();
        let flat: Vec<f64> = self.values.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (n, n), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Direction of the causality signal between `i` and `j`; differences within
    /// `tol` count as no signal.
    pub fn signal(&self, i: usize, j: usize, tol: f64) -> Signal {
        let fwd = self.values[i][j];
        let bwd = self.values[j][i];
        if (fwd - bwd).abs() <= tol {
            Signal::None
        } else if fwd > bwd {
            Signal::Forward
        } else {
            Signal::Backward
        }
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("finding");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in names.iter().zip(&self.values) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Directed acyclic graph over findings; node order matches class order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub nodes: Vec<String>,
    /// `(parent, child)` index pairs.
    pub edges: BTreeSet<(usize, usize)>,
}

impl CausalGraph {
    pub fn new(nodes: Vec<String>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let n = nodes.len();
        let edges: BTreeSet<_> = edges.into_iter().collect();
        if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(Error::contract(format!("edge {a} -> {b} references a missing node")));
        }
        let graph = Self { nodes, edges };
        if graph.has_cycle() {
            return Err(Error::contract("causal graph contains a cycle"));
        }
        Ok(graph)
    }

    pub fn from_names(nodes: &[&str], edges: &[(&str, &str)]) -> Result<Self> {
        let nodes: Vec<String> = nodes.iter().map(|s| s.to_string()).collect();
        let index: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut idx = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            let (Some(&i), Some(&j)) = (index.get(a), index.get(b)) else {
                return Err(Error::contract(format!("edge {a} -> {b} references an undeclared node")));
            };
            idx.push((i, j));
        }
        Self::new(nodes.clone(), idx)
    }

    /// Parses the text format: one node name per line, or `parent -> child` edge
    /// lines. Blank lines and lines starting with `#` are ignored. Edges may
    /// reference nodes declared later in the file.
    pub fn parse(text: &str) -> Result<Self> {
        let mut nodes: Vec<String> = Vec::new();
        let mut raw_edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((a, b)) = line.split_once("->") {
                let (a, b) = (a.trim(), b.trim());
                if a.is_empty() || b.is_empty() {
                    return Err(Error::contract(format!("line {}: malformed edge `{line}`", lineno + 1)));
                }
                raw_edges.push((a.to_string(), b.to_string()));
            } else if nodes.iter().any(|n| n == line) {
                return Err(Error::contract(format!("line {}: duplicate node `{line}`", lineno + 1)));
            } else {
                nodes.push(line.to_string());
            }
        }
        let node_refs: Vec<&str> = nodes.iter().map(String::as_str).collect();
        let edge_refs: Vec<(&str, &str)> = raw_edges.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        Self::from_names(&node_refs, &edge_refs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(n);
            out.push('\n');
        }
        for &(a, b) in &self.edges {
            let _ = writeln!(out, "{} -> {}", self.nodes[a], self.nodes[b]);
        }
        out
    }

    fn has_cycle(&self) -> bool {
        // Kahn's algorithm: a cycle leaves nodes with nonzero in-degree
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for &(_, b) in &self.edges {
            indeg[b] += 1;
        }
        let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(v) = stack.pop() {
            seen += 1;
            for &(a, b) in &self.edges {
                if a == v {
                    indeg[b] -= 1;
                    if indeg[b] == 0 {
                        stack.push(b);
                    }
                }
            }
        }
        seen != n
    }

    /// `reach[a][b]` is true when a directed path `a → … → b` exists.
    pub fn reachability(&self) -> Vec<Vec<bool>> {
        let n = self.nodes.len();
        let mut reach = vec![vec![false; n]; n];
        for &(a, b) in &self.edges {
            reach[a][b] = true;
        }
        for k in 0..n {
            for i in 0..n {
                if reach[i][k] {
                    for j in 0..n {
                        if reach[k][j] {
                            reach[i][j] = true;
                        }
                    }
                }
            }
        }
        reach
    }

    /// Default prior over the nine chest X-ray findings: lung opacity is a parent
    /// of consolidation, effusion, edema, pneumonia and atelectasis.
    pub fn chest_xray_default() -> Self {
        let nodes = crate::data::CXR_FINDINGS;
        let parent = "Lung opacity";
        let children = ["Consolidation", "Effusion", "Edema", "Pneumonia", "Atelectasis"];
        let edges: Vec<(&str, &str)> = children.iter().map(|c| (parent, *c)).collect();
        Self::from_names(&nodes, &edges).expect("static graph is valid")
    }
}

/// Values used for the ground-truth map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtLevels {
    pub hi: f64,
    pub lo: f64,
    pub base: f64,
}

impl Default for GtLevels {
    fn default() -> Self {
        Self {
            hi: 0.9,
            lo: 0.1,
            base: 0.5,
        }
    }
}

/// Ground-truth map: `(i, j) = hi` when `j` is an ancestor of `i`, `lo` when `i`
/// is an ancestor of `j`, `base` otherwise (including the diagonal).
pub fn build_gt_map(graph: &CausalGraph, levels: GtLevels) -> Result<CausalityMap> {
    let GtLevels { hi, lo, base } = levels;
    if !(0.0 <= lo && lo < base && base < hi && hi <= 1.0) {
        return Err(Error::contract(format!(
            "ground-truth levels must satisfy 0 <= lo < base < hi <= 1, got lo={lo} base={base} hi={hi}"
        )));
    }
    if graph.has_cycle() {
        return Err(Error::contract("causal graph contains a cycle"));
    }
    let reach = graph.reachability();
    let n = graph.nodes.len();
    let values = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        base
                    } else if reach[j][i] {
                        hi
                    } else if reach[i][j] {
                        lo
                    } else {
                        base
                    }
                })
                .collect()
        })
        .collect();
    Ok(CausalityMap { values })
}

/// Mean over the batch of the mean squared difference between each predicted
/// map (`batch × n × n`) and the ground truth.
pub fn prior_loss(pred: &Tensor, gt: &CausalityMap) -> Result<Tensor> {
    let (_, n1, n2) = pred.dims3()?;
    let n = gt.size();
    if n1 != n || n2 != n {
        return Err(Error::Shape {
            context: "task prior",
            expected: vec![n, n],
            actual: vec![n1, n2],
        });
    }
    let gt = gt.to_tensor(pred.dtype())?;
    Ok(pred.broadcast_sub(&gt)?.sqr()?.mean_all()?)
}
