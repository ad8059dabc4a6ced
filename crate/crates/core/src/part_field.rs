//! Part-identity embeddings, soft part assignments and the neighborhood KL loss.

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::spatial::KdTree;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const DEFAULT_KNN: usize = 16;
pub const KL_FLOOR: f64 = 1e-12;

/// Shared linear map from embeddings to `K` part logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartProjection {
    pub k: usize,
    pub e: usize,
    /// Row-major `K × E`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PartProjection {
    pub fn zeros(k: usize, e: usize) -> Self {
        PartProjection { k, e, weights: vec![0.0; k * e], bias: vec![0.0; k] }
    }

    /// Weights uniform in `[-1/√E, 1/√E]`, zero bias.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, k: usize, e: usize) -> Self {
        let bound = 1.0 / (e.max(1) as f64).sqrt();
        let weights = (0..k * e).map(|_| rng.random_range(-bound..=bound)).collect();
        PartProjection { k, e, weights, bias: vec![0.0; k] }
    }

    pub fn logits(&self, psi: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(self.k) {
            let row = &self.weights[k * self.e..(k + 1) * self.e];
            *o = self.bias[k] + row.iter().zip(psi).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

/// Per-Gaussian embeddings, row-major `M × E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub m: usize,
    pub e: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    /// I.i.d. `N(0, std²)` entries.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, m: usize, e: usize, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Embeddings { m, e, data: (0..m * e).map(|_| normal.sample(rng)).collect() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.e..(i + 1) * self.e]
    }
}

/// Frozen KNN graph over canonical centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnGraph {
    pub k: usize,
    /// Row-major `M × k` neighbor indices.
    pub neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.neighbors.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// Exact `k` nearest neighbors of every center, excluding itself. `k` is
/// clamped to `M - 1`.
pub fn build_knn(centers: &[Vec3], k: usize) -> Result<KnnGraph> {
    if k == 0 {
        return Err(Error::InvalidParameter("knn k must be at least 1".into()));
    }
    if centers.len() < 2 {
        return Err(Error::EmptyInput("knn graph needs at least two centers"));
    }
    let k = k.min(centers.len() - 1);
    let tree = KdTree::new(centers);
    let mut neighbors = Vec::with_capacity(centers.len() * k);
    for (i, c) in centers.iter().enumerate() {
        neighbors.extend(tree.k_nearest(c, k, Some(i)).into_iter().map(|(j, _)| j));
    }
    Ok(KnnGraph { k, neighbors })
}

/// Row-stochastic `M × K` matrix of part probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentField {
    pub m: usize,
    pub k: usize,
    pub probs: Vec<f64>,
}

impl AssignmentField {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn from_logits(m: usize, k: usize, logits: &[f64]) -> Self {
        let mut probs = logits.to_vec();
        for row in probs.chunks_mut(k) {
            softmax_in_place(row);
        }
        AssignmentField { m, k, probs }
    }

    pub fn one_hot(labels: &[usize], k: usize) -> Self {
        let mut probs = vec![0.0; labels.len() * k];
        for (i, &l) in labels.iter().enumerate() {
            probs[i * k + l] = 1.0;
        }
        AssignmentField { m: labels.len(), k, probs }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Row-wise softmax of `W ψ_i + b`.
pub fn assignment(emb: &Embeddings, proj: &PartProjection) -> Result<AssignmentField> {
    if emb.e != proj.e {
        return Err(Error::DimensionMismatch(format!("embedding dim {} vs projection {}", emb.e, proj.e)));
    }
    let mut logits = vec![0.0; emb.m * proj.k];
    for i in 0..emb.m {
        proj.logits(emb.row(i), &mut logits[i * proj.k..(i + 1) * proj.k]);
    }
    Ok(AssignmentField::from_logits(emb.m, proj.k, &logits))
}

fn check_graph(field: &AssignmentField, graph: &KnnGraph) -> Result<()> {
    if graph.len() != field.m {
        return Err(Error::DimensionMismatch(format!("graph over {} nodes, field has {} rows", graph.len(), field.m)));
    }
    Ok(())
}

fn neighbor_mean(field: &AssignmentField, graph: &KnnGraph, i: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let inv = 1.0 / graph.k as f64;
    for &j in graph.of(i) {
        for (o, p) in out.iter_mut().zip(field.row(j)) {
            *o += p * inv;
        }
    }
}

/// `(1/M) Σ_i KL(p_i ‖ q̄_i)` with `q̄_i` the neighbor mean floored at [`KL_FLOOR`].
pub fn part_loss(field: &AssignmentField, graph: &KnnGraph) -> Result<f64> {
    part_loss_grad(field, graph, None)
}

/// Part loss and, when `grad` is given, its gradient with respect to the
/// probabilities (added into `grad`, row-major `M × K`).
pub fn part_loss_grad(field: &AssignmentField, graph: &KnnGraph, mut grad: Option<&mut [f64]>) -> Result<f64> {
    check_graph(field, graph)?;
    if field.m == 0 {
        return Ok(0.0);
    }
    let k = field.k;
    let inv_m = 1.0 / field.m as f64;
    let inv_n = 1.0 / graph.k as f64;
    let mut qbar = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..field.m {
        neighbor_mean(field, graph, i, &mut qbar);
        let p = field.row(i);
        let mut kl = 0.0;
        for c in 0..k {
            let q = qbar[c].max(KL_FLOOR);
            if p[c] > 0.0 {
                kl += p[c] * (p[c].ln() - q.ln());
            }
        }
        total += kl;
        if let Some(g) = grad.as_deref_mut() {
            for c in 0..k {
                let q = qbar[c].max(KL_FLOOR);
                if p[c] > 0.0 {
                    g[i * k + c] += inv_m * (p[c].ln() + 1.0 - q.ln());
                }
                if qbar[c] > KL_FLOOR && p[c] > 0.0 {
                    let dq = -inv_m * p[c] / qbar[c] * inv_n;
                    for &j in graph.of(i) {
                        g[j * k + c] += dq;
                    }
                }
            }
        }
    }
    Ok(total * inv_m)
}

/// Row argmax, ties toward the lowest part index.
pub fn hard_assign(field: &AssignmentField) -> Vec<usize> {
    (0..field.m)
        .map(|i| {
            let row = field.row(i);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
