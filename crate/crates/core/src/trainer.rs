//! Joint optimization of part embeddings and per-part rigid transforms.

use crate::articulation::{procrustes_target, LossBreakdown};
use crate::error::{Error, Result};
use crate::fusion::{fuse_states, FusionConfig, FusionReport};
use crate::gaussian::{LossWeights, PartTransform, SceneState, DEFAULT_EMBEDDING_DIM};
use crate::math::{
    geodesic_angle, geodesic_angle_grad, normalize4, normalize4_vjp, quat_from_wxyz, quat_to_wxyz, random_rotation_within,
    rotation_matrix, rotation_matrix_vjp, Mat3, Vec3,
};
use crate::part_field::{
    build_knn, hard_assign, part_loss_grad, softmax_in_place, AssignmentField, Embeddings, KnnGraph, PartProjection,
    DEFAULT_KNN,
};
use crate::repel::{clip, clip_vjp, init_repel, ForceKernel, RepelConfig, RepelField};
use crate::spatial::KdTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Upper bound on the number of parts.
    pub k_parts: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub repel: RepelConfig,
    pub knn_k: usize,
    pub log_every: usize,
    pub embedding_dim: usize,
    pub embedding_std: f64,
    /// Largest initial rotation of a movable slot, in degrees.
    pub init_max_angle_deg: f64,
    pub fusion: FusionConfig,
    pub explore: ExploreConfig,
}

/// Multi-start exploration: several random initializations are optimized
/// briefly on a subset of the Gaussians without the repel term, and the one
/// with the lowest total loss seeds the main run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExploreConfig {
    /// Number of random starts; 1 disables exploration.
    pub starts: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Size of the random subset the starts are optimized on.
    pub max_gaussians: usize,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig { starts: 8, steps: 1500, learning_rate: 1e-3, max_gaussians: 512 }
    }
}

/// Outcome of one exploratory start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub seed: u64,
    pub total: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_parts: 2,
            learning_rate: 1e-3,
            steps: 5000,
            seed: 0,
            weights: LossWeights::default(),
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            repel: RepelConfig::default(),
            knn_k: DEFAULT_KNN,
            log_every: 100,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            embedding_std: 0.01,
            init_max_angle_deg: 10.0,
            fusion: FusionConfig::default(),
            explore: ExploreConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_parts == 0 {
            return Err(Error::InvalidParameter("k_parts must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParameter("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {}", self.learning_rate)));
        }
        if self.embedding_dim == 0 || self.knn_k == 0 {
            return Err(Error::InvalidParameter("embedding_dim and knn_k must be positive".into()));
        }
        if !(self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) && self.adam_eps > 0.0) {
            return Err(Error::InvalidParameter("adam betas must lie in [0,1) and eps > 0".into()));
        }
        if !(self.embedding_std > 0.0 && self.init_max_angle_deg >= 0.0) {
            return Err(Error::InvalidParameter("embedding_std must be > 0 and init angle >= 0".into()));
        }
        self.weights.validate()?;
        if self.explore.starts == 0 {
            return Err(Error::InvalidParameter("explore.starts must be at least 1".into()));
        }
        if !(self.explore.learning_rate > 0.0 && self.explore.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("exploration learning rate {}", self.explore.learning_rate)));
        }
        self.repel.validate()
    }
}

/// Multipliers on each loss component inside the optimized objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub part: f64,
    pub art: f64,
    pub contact: f64,
    pub velocity: f64,
    pub vector: f64,
    pub lambda_rot: f64,
}

impl Coefficients {
    pub fn from_weights(w: &LossWeights) -> Self {
        Coefficients {
            part: w.lambda_part,
            art: w.lambda_art,
            contact: w.lambda_phys,
            velocity: w.lambda_phys,
            vector: w.lambda_phys,
            lambda_rot: w.lambda_rot,
        }
    }

    /// Only the named component, with unit weight.
    pub fn single(name: &str, lambda_rot: f64) -> Option<Self> {
        let zero = Coefficients { part: 0.0, art: 0.0, contact: 0.0, velocity: 0.0, vector: 0.0, lambda_rot };
        Some(match name {
            "part" => Coefficients { part: 1.0, ..zero },
            "art" => Coefficients { art: 1.0, ..zero },
            "contact" => Coefficients { contact: 1.0, ..zero },
            "velocity" => Coefficients { velocity: 1.0, ..zero },
            "vector" => Coefficients { vector: 1.0, ..zero },
            "total" => Coefficients::from_weights(&LossWeights { lambda_rot, ..LossWeights::default() }),
            _ => return None,
        })
    }
}

/// Offsets of each parameter block in the flat vector
/// `[ψ (M·E) | W (K·E) | b (K) | q (K·4) | t (K·3)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub m: usize,
    pub k: usize,
    pub e: usize,
}

impl Layout {
    pub fn psi(&self) -> usize {
        0
    }
    pub fn w(&self) -> usize {
        self.m * self.e
    }
    pub fn b(&self) -> usize {
        self.w() + self.k * self.e
    }
    pub fn q(&self) -> usize {
        self.b() + self.k
    }
    pub fn t(&self) -> usize {
        self.q() + 4 * self.k
    }
    pub fn len(&self) -> usize {
        self.t() + 3 * self.k
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn quat(&self, params: &[f64], c: usize) -> [f64; 4] {
        let o = self.q() + 4 * c;
        [params[o], params[o + 1], params[o + 2], params[o + 3]]
    }

    pub fn translation(&self, params: &[f64], c: usize) -> Vec3 {
        let o = self.t() + 3 * c;
        Vec3::new(params[o], params[o + 1], params[o + 2])
    }

    pub fn transforms(&self, params: &[f64]) -> Vec<PartTransform> {
        (0..self.k)
            .map(|c| PartTransform::new(quat_from_wxyz(&self.quat(params, c)), self.translation(params, c)))
            .collect()
    }

    pub fn projection(&self, params: &[f64]) -> PartProjection {
        PartProjection {
            k: self.k,
            e: self.e,
            weights: params[self.w()..self.b()].to_vec(),
            bias: params[self.b()..self.q()].to_vec(),
        }
    }

    pub fn embeddings(&self, params: &[f64]) -> Embeddings {
        Embeddings { m: self.m, e: self.e, data: params[..self.w()].to_vec() }
    }
}

/// Discrete choices made during one evaluation: the rotation targets and
/// the hard memberships and nearest static neighbors of the contact term.
/// Holding them fixed makes the objective differentiable for checking.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub rot_targets: Vec<Option<[f64; 4]>>,
    pub labels: Vec<usize>,
    pub nearest_static: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub raw_q: Vec<[f64; 4]>,
    pub qn: Vec<[f64; 4]>,
    pub rot: Vec<Mat3>,
    pub probs: Vec<f64>,
    pub y: Vec<Vec3>,
    pub x: Vec<Vec3>,
}

/// Everything the objective needs besides the parameters.
#[derive(Debug, Clone)]
pub struct Problem {
    /// State-0 member of each matched pair.
    pub sources: Vec<Vec3>,
    /// State-1 member of each matched pair.
    pub targets: Vec<Vec3>,
    pub displacements: Vec<Vec3>,
    pub graph: KnnGraph,
    pub kernel: Option<ForceKernel>,
    pub layout: Layout,
    /// Slot pinned to the identity, if any.
    pub static_slot: Option<usize>,
}

impl Problem {
    pub fn new(
        sources: Vec<Vec3>,
        targets: Vec<Vec3>,
        graph: KnnGraph,
        kernel: Option<ForceKernel>,
        k: usize,
        e: usize,
    ) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::DimensionMismatch("sources and targets differ in length".into()));
        }
        if graph.len() != sources.len() {
            return Err(Error::DimensionMismatch("graph size differs from the number of gaussians".into()));
        }
        let displacements = sources.iter().zip(&targets).map(|(a, b)| b - a).collect();
        let layout = Layout { m: sources.len(), k, e };
        let static_slot = (k >= 2).then_some(0);
        Ok(Problem { sources, targets, displacements, graph, kernel: kernel.filter(|k| !k.is_empty()), layout, static_slot })
    }

    fn movable(&self, c: usize) -> bool {
        Some(c) != self.static_slot
    }

    /// Parameters that the optimizer updates.
    pub fn free_mask(&self) -> Vec<bool> {
        let lay = self.layout;
        let mut mask = vec![true; lay.len()];
        if let Some(s) = self.static_slot {
            for v in &mut mask[lay.q() + 4 * s..lay.q() + 4 * s + 4] {
                *v = false;
            }
            for v in &mut mask[lay.t() + 3 * s..lay.t() + 3 * s + 3] {
                *v = false;
            }
        }
        mask
    }

    /// Soft assignment, per-slot positions `y[i·K + c]` and soft positions.
    pub fn forward(&self, params: &[f64]) -> Forward {
        let lay = self.layout;
        let (m, k, e) = (lay.m, lay.k, lay.e);
        let raw_q: Vec<[f64; 4]> = (0..k).map(|c| lay.quat(params, c)).collect();
        let qn: Vec<[f64; 4]> = raw_q.iter().map(normalize4).collect();
        let rot: Vec<Mat3> = qn.iter().map(rotation_matrix).collect();
        let trans: Vec<Vec3> = (0..k).map(|c| lay.translation(params, c)).collect();

        let w = &params[lay.w()..lay.b()];
        let bias = &params[lay.b()..lay.q()];
        let mut probs = vec![0.0; m * k];
        for i in 0..m {
            let psi = &params[i * e..(i + 1) * e];
            for c in 0..k {
                probs[i * k + c] = bias[c] + w[c * e..(c + 1) * e].iter().zip(psi).map(|(a, b)| a * b).sum::<f64>();
            }
            softmax_in_place(&mut probs[i * k..(i + 1) * k]);
        }

        let mut y = vec![Vec3::zeros(); m * k];
        let mut x = vec![Vec3::zeros(); m];
        for i in 0..m {
            let a = self.sources[i];
            for c in 0..k {
                let yc = rot[c] * a + trans[c];
                y[i * k + c] = yc;
                x[i] += yc * probs[i * k + c];
            }
        }
        Forward { raw_q, qn, rot, probs, y, x }
    }

    /// Loss components (unweighted), their weighted total and, optionally,
    /// the gradient of the total with respect to `params`.
    pub fn evaluate(
        &self,
        params: &[f64],
        coef: &Coefficients,
        frozen: Option<&Frozen>,
        grad: Option<&mut [f64]>,
    ) -> Result<(LossBreakdown, Frozen)> {
        let lay = self.layout;
        let (m, k, e) = (lay.m, lay.k, lay.e);
        if params.len() != lay.len() {
            return Err(Error::DimensionMismatch(format!("{} parameters, expected {}", params.len(), lay.len())));
        }

        let Forward { raw_q, qn, rot: _, probs, y, x } = self.forward(params);
        let w = &params[lay.w()..lay.b()];

        let mut g_p = vec![0.0; m * k];
        let mut g_y = vec![Vec3::zeros(); m * k];
        let mut g_x = vec![Vec3::zeros(); m];
        let mut g_qn = vec![[0.0; 4]; k];
        let mut out = LossBreakdown::default();

        // neighborhood consistency
        if coef.part != 0.0 {
            let field = AssignmentField { m, k, probs: probs.clone() };
            let mut gp = vec![0.0; m * k];
            out.part = part_loss_grad(&field, &self.graph, Some(&mut gp))?;
            for (a, b) in g_p.iter_mut().zip(&gp) {
                *a += coef.part * b;
            }
        } else {
            let field = AssignmentField { m, k, probs: probs.clone() };
            out.part = part_loss_grad(&field, &self.graph, None)?;
        }

        // repel force at the soft positions
        let forces: Option<Vec<(Vec3, Mat3)>> =
            self.kernel.as_ref().map(|kern| x.par_iter().map(|xi| kern.raw_with_jacobian(xi)).collect());
        let tau = self.kernel.as_ref().map_or(0.0, |kern| kern.tau_max);

        // articulation: positional term
        let mut pos = 0.0;
        for i in 0..m {
            let f = forces.as_ref().map_or(Vec3::zeros(), |fs| clip(&fs[i].0, tau));
            let mut g_f = Vec3::zeros();
            for c in 0..k {
                let p = probs[i * k + c];
                let fc = if self.movable(c) { f } else { Vec3::zeros() };
                let r = y[i * k + c] + fc - self.targets[i];
                let r2 = r.norm_squared();
                pos += p * r2;
                g_p[i * k + c] += coef.art * r2;
                g_y[i * k + c] += r * (2.0 * coef.art * p);
                if self.movable(c) {
                    g_f += r * (2.0 * coef.art * p);
                }
            }
            if let Some(fs) = &forces {
                let (g, jac) = &fs[i];
                g_x[i] += jac * clip_vjp(g, tau, &g_f);
            }
        }

        // articulation: rotation term against Procrustes targets
        let rot_targets: Vec<Option<[f64; 4]>> = match frozen {
            Some(fz) => fz.rot_targets.clone(),
            None => (0..k)
                .map(|c| {
                    if !self.movable(c) {
                        return None;
                    }
                    let wts: Vec<f64> = (0..m).map(|i| probs[i * k + c]).collect();
                    procrustes_target(&self.sources, &self.targets, &wts).ok().map(|tf| quat_to_wxyz(&tf.rotation))
                })
                .collect(),
        };
        let mut rot_term = 0.0;
        for c in 0..k {
            if let (true, Some(target)) = (self.movable(c), rot_targets[c]) {
                rot_term += geodesic_angle(&qn[c], &target);
                let g = geodesic_angle_grad(&qn[c], &target);
                for (a, b) in g_qn[c].iter_mut().zip(g) {
                    *a += coef.art * coef.lambda_rot * b;
                }
            }
        }
        out.art = pos + coef.lambda_rot * rot_term;

        // vector field consistency
        let mut vec_term = 0.0;
        for i in 0..m {
            for c in 0..k {
                let p = probs[i * k + c];
                let r = y[i * k + c] - self.targets[i];
                let r2 = r.norm_squared();
                vec_term += p * r2;
                g_p[i * k + c] += coef.vector * r2;
                g_y[i * k + c] += r * (2.0 * coef.vector * p);
            }
        }
        out.vector = vec_term;

        // velocity consistency on the observed displacements
        let mut vel = 0.0;
        for c in 0..k {
            let wsum: f64 = (0..m).map(|i| probs[i * k + c]).sum();
            if !(wsum > 0.0) {
                continue;
            }
            let mean = (0..m).map(|i| self.displacements[i] * probs[i * k + c]).sum::<Vec3>() / wsum;
            let dev: Vec<f64> = (0..m).map(|i| (self.displacements[i] - mean).norm_squared()).collect();
            let var = (0..m).map(|i| probs[i * k + c] * dev[i]).sum::<f64>() / wsum;
            vel += var;
            for i in 0..m {
                g_p[i * k + c] += coef.velocity * (dev[i] - var) / wsum;
            }
        }
        out.velocity = vel;

        // contact between movable parts and the static base
        let labels = match frozen {
            Some(fz) => fz.labels.clone(),
            None => hard_assign(&AssignmentField { m, k, probs: probs.clone() }),
        };
        let mut nearest_static = vec![None; m];
        if let Some(s) = self.static_slot {
            let statics: Vec<usize> = (0..m).filter(|&i| labels[i] == s).collect();
            if !statics.is_empty() {
                let centroid = statics.iter().map(|&j| x[j]).sum::<Vec3>() / statics.len() as f64;
                let mut counts = vec![0usize; k];
                for &l in &labels {
                    counts[l] += 1;
                }
                match frozen {
                    Some(fz) => nearest_static.clone_from(&fz.nearest_static),
                    None => {
                        let pts: Vec<Vec3> = statics.iter().map(|&j| x[j]).collect();
                        let tree = KdTree::new(&pts);
                        for i in 0..m {
                            if labels[i] != s {
                                nearest_static[i] = tree.nearest(&x[i]).map(|(j, _)| statics[j]);
                            }
                        }
                    }
                }
                let mut contact = 0.0;
                let mut g_centroid = Vec3::zeros();
                for i in 0..m {
                    let Some(j) = nearest_static[i] else { continue };
                    if labels[i] == s {
                        continue;
                    }
                    let d1 = x[i] - x[j];
                    let d2 = x[i] - centroid;
                    let (n1, n2) = (d1.norm(), d2.norm());
                    if n1 == 0.0 || n2 == 0.0 {
                        continue;
                    }
                    let cos = d1.dot(&d2) / (n1 * n2);
                    if cos >= 0.0 {
                        continue;
                    }
                    let scale = 1.0 / counts[labels[i]] as f64;
                    contact += -cos * scale;
                    let dc1 = d2 / (n1 * n2) - d1 * (cos / (n1 * n1));
                    let dc2 = d1 / (n1 * n2) - d2 * (cos / (n2 * n2));
                    let g = coef.contact * scale;
                    g_x[i] -= (dc1 + dc2) * g;
                    g_x[j] += dc1 * g;
                    g_centroid += dc2 * g;
                }
                let share = g_centroid / statics.len() as f64;
                for &j in &statics {
                    g_x[j] += share;
                }
                out.contact = contact;
            }
        }

        out.total = coef.part * out.part
            + coef.art * out.art
            + coef.contact * out.contact
            + coef.velocity * out.velocity
            + coef.vector * out.vector;
        let frozen_out = Frozen { rot_targets, labels, nearest_static };

        let Some(grad) = grad else {
            return Ok((out, frozen_out));
        };

        // soft positions feed back into probabilities and slot positions
        for i in 0..m {
            if g_x[i] == Vec3::zeros() {
                continue;
            }
            for c in 0..k {
                g_p[i * k + c] += g_x[i].dot(&y[i * k + c]);
                g_y[i * k + c] += g_x[i] * probs[i * k + c];
            }
        }

        grad.iter_mut().for_each(|g| *g = 0.0);
        // rigid transforms
        let mut g_rot = vec![Mat3::zeros(); k];
        let mut g_t = vec![Vec3::zeros(); k];
        for i in 0..m {
            let a = self.sources[i];
            for c in 0..k {
                let gy = g_y[i * k + c];
                g_t[c] += gy;
                g_rot[c] += gy * a.transpose();
            }
        }
        for c in 0..k {
            if !self.movable(c) {
                continue;
            }
            let from_matrix = rotation_matrix_vjp(&qn[c], &g_rot[c]);
            let mut gq = [0.0; 4];
            for d in 0..4 {
                gq[d] = from_matrix[d] + g_qn[c][d];
            }
            let graw = normalize4_vjp(&raw_q[c], &gq);
            grad[lay.q() + 4 * c..lay.q() + 4 * c + 4].copy_from_slice(&graw);
            for d in 0..3 {
                grad[lay.t() + 3 * c + d] = g_t[c][d];
            }
        }

        // softmax, projection and embeddings
        for i in 0..m {
            let p = &probs[i * k..(i + 1) * k];
            let gp = &g_p[i * k..(i + 1) * k];
            let dot: f64 = p.iter().zip(gp).map(|(a, b)| a * b).sum();
            let psi = &params[i * e..(i + 1) * e];
            for c in 0..k {
                let gz = p[c] * (gp[c] - dot);
                if gz == 0.0 {
                    continue;
                }
                grad[lay.b() + c] += gz;
                for d in 0..e {
                    grad[i * e + d] += gz * w[c * e + d];
                    grad[lay.w() + c * e + d] += gz * psi[d];
                }
            }
        }
        Ok((out, frozen_out))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, betas: [f64; 2], eps: f64) -> Self {
        Adam { lr, b1: betas[0], b2: betas[1], eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.b1 * *m + (1.0 - self.b1) * g;
            *v = self.b2 * *v + (1.0 - self.b2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }

    /// Forget the moment estimates of a parameter range.
    pub fn reset(&mut self, range: std::ops::Range<usize>) {
        self.m[range.clone()].fill(0.0);
        self.v[range].fill(0.0);
    }
}

/// One entry of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Result of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub fusion: FusionReport,
    /// `(state0 index, state1 index)` behind every canonical Gaussian.
    pub pairs: Vec<(usize, usize)>,
    /// Canonical field with the learned embeddings.
    pub canonical: SceneState,
    pub projection: PartProjection,
    pub assignment: AssignmentField,
    pub labels: Vec<usize>,
    pub transforms: Vec<PartTransform>,
    pub static_slot: Option<usize>,
    pub repel: RepelField,
    pub loss_history: Vec<LossRecord>,
    pub final_loss: LossBreakdown,
    /// Exploratory starts in order; empty when exploration is off.
    #[serde(default)]
    pub starts: Vec<StartRecord>,
}

fn check_finite(b: &LossBreakdown, step: usize) -> Result<()> {
    for (name, v) in [
        ("part", b.part),
        ("art", b.art),
        ("contact", b.contact),
        ("velocity", b.velocity),
        ("vector", b.vector),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: format!("{name} (breakdown {b:?})"), step: Some(step) });
        }
    }
    Ok(())
}

/// Runs the exploratory starts on a random subset of the Gaussians and
/// lifts the best one to the full parameter vector: projection and
/// transforms are copied and every Gaussian takes an embedding from the
/// subset.
fn explore(
    problem: &Problem,
    centers: &[Vec3],
    coef: &Coefficients,
    cfg: &TrainConfig,
) -> Result<(Vec<StartRecord>, Option<Vec<f64>>)> {
    let lay = problem.layout;
    let m = lay.m;
    let n = cfg.explore.max_gaussians.clamp(2, m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let mut subset = rand::seq::index::sample(&mut rng, m, n).into_vec();
    subset.sort_unstable();
    let sub_centers: Vec<Vec3> = subset.iter().map(|&i| centers[i]).collect();
    let probe = Problem::new(
        subset.iter().map(|&i| problem.sources[i]).collect(),
        subset.iter().map(|&i| problem.targets[i]).collect(),
        build_knn(&sub_centers, cfg.knn_k.min(n - 1).max(1))?,
        None,
        lay.k,
        lay.e,
    )?;
    let sub = probe.layout;

    let mut records = Vec::with_capacity(cfg.explore.starts);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in 0..cfg.explore.starts {
        let seed = start_seed(cfg.seed, s);
        let init = init_params(&sub, probe.static_slot, &TrainConfig { seed, ..cfg.clone() });
        let (p, total) = match descend(&probe, init, coef, cfg, cfg.explore.learning_rate, cfg.explore.steps, None) {
            Ok(r) => r,
            // a diverging start is simply not selected
            Err(Error::NonFinite { .. }) => (Vec::new(), f64::INFINITY),
            Err(e) => return Err(e),
        };
        log::debug!("start {s} (seed {seed}): total {total:.6e}");
        records.push(StartRecord { seed, total });
        if total.is_finite() && best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, p));
        }
    }
    let Some((_, p)) = best else {
        return Ok((records, None));
    };

    // each Gaussian joins the slot that best explains its motion and takes
    // the embedding of the nearest subset member with that label
    let fw = probe.forward(&p);
    let k = lay.k;
    let sub_labels: Vec<usize> = (0..n)
        .map(|j| (0..k).max_by(|&a, &b| fw.probs[j * k + a].total_cmp(&fw.probs[j * k + b])).expect("k >= 1"))
        .collect();
    let transforms = sub.transforms(&p);
    let e = lay.e;
    let mut full = vec![0.0; lay.len()];
    let tree = KdTree::new(&sub_centers);
    for (i, c) in centers.iter().enumerate() {
        let (a, b) = (problem.sources[i], problem.targets[i]);
        let label = (0..k)
            .min_by(|&x, &y| {
                let rx = (transforms[x].apply(&a) - b).norm();
                let ry = (transforms[y].apply(&a) - b).norm();
                rx.total_cmp(&ry)
            })
            .expect("k >= 1");
        let (j, _) = tree
            .nearest_filtered(c, |j| sub_labels[j] == label)
            .or_else(|| tree.nearest(c))
            .expect("subset is non-empty");
        full[i * e..(i + 1) * e].copy_from_slice(&p[j * e..(j + 1) * e]);
    }
    full[lay.w()..].copy_from_slice(&p[sub.w()..]);
    Ok((records, Some(full)))
}

/// Seed of exploratory start `s`; start 0 uses the configured seed.
pub fn start_seed(seed: u64, s: usize) -> u64 {
    seed.wrapping_add((s as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// `steps` Adam updates from `params`; returns the final parameters and
/// the total loss at the last evaluated step.
fn descend(
    problem: &Problem,
    mut params: Vec<f64>,
    coef: &Coefficients,
    cfg: &TrainConfig,
    lr: f64,
    steps: usize,
    mut history: Option<&mut Vec<LossRecord>>,
) -> Result<(Vec<f64>, f64)> {
    let lay = problem.layout;
    let mut adam = Adam::new(lay.len(), lr, cfg.adam_betas, cfg.adam_eps);
    let mut grad = vec![0.0; lay.len()];
    let mut last = f64::INFINITY;
    for step in 0..steps {
        let (loss, _) = problem.evaluate(&params, coef, None, Some(&mut grad))?;
        check_finite(&loss, step)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { component: "gradient".into(), step: Some(step) });
        }
        last = loss.total;
        if let Some(h) = history.as_deref_mut() {
            h.push(LossRecord { step, loss, grad_norm });
            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                log::debug!("step {step} total {:.6e} art {:.6e} part {:.4e}", loss.total, loss.art, loss.part);
            }
        }
        adam.step(&mut params, &grad);
        for c in 0..lay.k {
            let o = lay.q() + 4 * c;
            let q = normalize4(&[params[o], params[o + 1], params[o + 2], params[o + 3]]);
            params[o..o + 4].copy_from_slice(&q);
        }
    }
    Ok((params, last))
}

/// Initial parameter vector: small random embeddings and projection, the
/// static slot at the identity and movable slots at small random rotations.
pub fn init_params(lay: &Layout, static_slot: Option<usize>, cfg: &TrainConfig) -> Vec<f64> {
    let mut params = vec![0.0; lay.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let emb = Embeddings::random(&mut rng, lay.m, lay.e, cfg.embedding_std);
    params[..lay.w()].copy_from_slice(&emb.data);
    rng.set_stream(2);
    let proj = PartProjection::random(&mut rng, lay.k, lay.e);
    params[lay.w()..lay.b()].copy_from_slice(&proj.weights);
    rng.set_stream(3);
    let max_angle = cfg.init_max_angle_deg.to_radians();
    for c in 0..lay.k {
        let q = if Some(c) == static_slot {
            [1.0, 0.0, 0.0, 0.0]
        } else {
            quat_to_wxyz(&random_rotation_within(&mut rng, max_angle))
        };
        params[lay.q() + 4 * c..lay.q() + 4 * c + 4].copy_from_slice(&q);
    }
    params
}

/// Provisional static/movable split from matched displacement, used only to
/// place repel points.
pub fn provisional_labels(sources: &[Vec3], targets: &[Vec3], tol: f64) -> Vec<usize> {
    sources.iter().zip(targets).map(|(a, b)| usize::from((b - a).norm() >= tol)).collect()
}

/// Fuse the two states and optimize the part field and transforms.
pub fn fit(state0: &SceneState, state1: &SceneState, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if state0.is_empty() || state1.is_empty() {
        return Err(Error::EmptyInput("both states need gaussians"));
    }
    let fusion = fuse_states(state0, state1, &cfg.fusion)?;
    let pairs = fusion.pairs.clone();
    if pairs.len() < 2 {
        return Err(Error::EmptyInput("need at least two matched gaussians"));
    }
    let sources: Vec<Vec3> = pairs.iter().map(|&(i, _)| state0.gaussians[i].center).collect();
    let targets: Vec<Vec3> = pairs.iter().map(|&(_, j)| state1.gaussians[j].center).collect();
    let canonical_centers = fusion.canonical.centers();
    let graph = build_knn(&canonical_centers, cfg.knn_k)?;

    let repel_seed = cfg.seed.wrapping_add(0x9e37_79b9);
    let repel = if cfg.repel.enabled && cfg.weights.lambda_art > 0.0 {
        let labels = provisional_labels(&sources, &targets, cfg.repel.static_disp_tol);
        match init_repel(&canonical_centers, &labels, 0, cfg.repel.threshold, cfg.repel.n_r, repel_seed, &cfg.repel) {
            Ok(f) => f,
            Err(Error::EmptyInput(_)) => {
                let mut f = RepelField::empty(&cfg.repel, repel_seed);
                f.diagnostic = Some("no static gaussians found for repel initialization".into());
                f
            }
            Err(e) => return Err(e),
        }
    } else {
        RepelField::empty(&cfg.repel, repel_seed)
    };
    if let Some(d) = &repel.diagnostic {
        log::warn!("repel field is empty: {d}");
    }

    let problem = Problem::new(sources, targets, graph, Some(repel.kernel()), cfg.k_parts, cfg.embedding_dim)?;
    let lay = problem.layout;
    let coef = Coefficients::from_weights(&cfg.weights);
    let mut params = init_params(&lay, problem.static_slot, cfg);
    let mut starts = Vec::new();
    if cfg.explore.starts > 1 && cfg.explore.steps > 0 {
        match explore(&problem, &canonical_centers, &coef, cfg)? {
            (records, Some(p)) => {
                starts = records;
                params = p;
            }
            (records, None) => {
                starts = records;
                log::warn!("every exploratory start diverged, using the default initialization");
            }
        }
    }
    let mut history = Vec::with_capacity(cfg.steps);
    let (params, _) = descend(&problem, params, &coef, cfg, cfg.learning_rate, cfg.steps, Some(&mut history))?;
    let (final_loss, _) = problem.evaluate(&params, &coef, None, None)?;
    check_finite(&final_loss, cfg.steps)?;

    let projection = lay.projection(&params);
    let emb = lay.embeddings(&params);
    let mut canonical = fusion.canonical.clone();
    for (i, g) in canonical.gaussians.iter_mut().enumerate() {
        g.embedding = emb.row(i).to_vec();
    }
    let assignment = crate::part_field::assignment(&emb, &projection)?;
    let labels = hard_assign(&assignment);
    Ok(TrainedModel {
        config: cfg.clone(),
        fusion,
        pairs,
        canonical,
        projection,
        assignment,
        labels,
        transforms: lay.transforms(&params),
        static_slot: problem.static_slot,
        repel,
        loss_history: history,
        final_loss,
        starts,
    })
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    /// `max_i |g_i − fd_i| / max(max_i |fd_i|, 1e-8)`, worst over trials.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

pub const GRADCHECK_LOSSES: [&str; 6] = ["part", "art", "contact", "velocity", "vector", "total"];

/// Random small instance with parts moving rigidly plus noise and a repel
/// field strong enough to engage the force clamp.
pub fn random_problem(rng: &mut ChaCha8Rng, m: usize, k: usize, e: usize) -> Result<(Problem, Vec<f64>)> {
    let labels: Vec<usize> = (0..m).map(|i| i % k).collect();
    let sources: Vec<Vec3> = (0..m)
        .map(|i| {
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                + Vec3::x() * labels[i] as f64
        })
        .collect();
    let motions: Vec<PartTransform> = (0..k)
        .map(|c| {
            if c == 0 {
                PartTransform::identity()
            } else {
                PartTransform::new(
                    random_rotation_within(rng, 0.6),
                    Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
                )
            }
        })
        .collect();
    let targets: Vec<Vec3> = sources
        .iter()
        .zip(&labels)
        .map(|(a, &l)| {
            motions[l].apply(a) + Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0)
        })
        .collect();
    let graph = build_knn(&sources, 6)?;
    let repel_points: Vec<Vec3> =
        (0..12).map(|_| sources[rng.random_range(0..m)] + Vec3::new(0.1, -0.05, 0.08)).collect();
    let cfg = RepelConfig { tau_max: 0.05, k_r: 5e-4, ..Default::default() };
    let kernel = RepelField::new(repel_points, &cfg, 0).kernel();
    let problem = Problem::new(sources, targets, graph, Some(kernel), k, e)?;
    let lay = problem.layout;
    let mut params = vec![0.0; lay.len()];
    for v in &mut params[..lay.q()] {
        *v = rng.random_range(-1.0..1.0);
    }
    for c in 0..k {
        let q = if Some(c) == problem.static_slot {
            [1.0, 0.0, 0.0, 0.0]
        } else {
            let mut q = quat_to_wxyz(&random_rotation_within(rng, 0.8));
            // unnormalized raw values exercise the normalization gradient
            let s = rng.random_range(0.7..1.3);
            q.iter_mut().for_each(|v| *v *= s);
            q
        };
        params[lay.q() + 4 * c..lay.q() + 4 * c + 4].copy_from_slice(&q);
        for d in 0..3 {
            params[lay.t() + 3 * c + d] = if Some(c) == problem.static_slot { 0.0 } else { rng.random_range(-0.3..0.3) };
        }
    }
    Ok((problem, params))
}

/// Compares analytic and central finite-difference gradients at one point.
pub fn gradcheck_at(problem: &Problem, params: &[f64], coef: &Coefficients, h: f64) -> Result<GradcheckReport> {
    let mut grad = vec![0.0; params.len()];
    let (_, frozen) = problem.evaluate(params, coef, None, Some(&mut grad))?;
    let mask = problem.free_mask();
    let mut work = params.to_vec();
    let mut fd = vec![0.0; params.len()];
    for idx in 0..params.len() {
        if !mask[idx] {
            continue;
        }
        work[idx] = params[idx] + h;
        let (lp, _) = problem.evaluate(&work, coef, Some(&frozen), None)?;
        work[idx] = params[idx] - h;
        let (lm, _) = problem.evaluate(&work, coef, Some(&frozen), None)?;
        work[idx] = params[idx];
        fd[idx] = (lp.total - lm.total) / (2.0 * h);
    }
    let scale = fd.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-8);
    let abs = (0..params.len()).filter(|&i| mask[i]).map(|i| (grad[i] - fd[i]).abs()).fold(0.0, f64::max);
    Ok(GradcheckReport { max_rel_err: abs / scale, max_abs_err: abs })
}

/// Gradient check of one loss (`part`, `art`, `contact`, `velocity`,
/// `vector` or `total`) over random instances with `M ≤ 50` and `K ≤ 4`.
pub fn gradcheck(loss_name: &str, cfg: &TrainConfig, trials: usize) -> Result<GradcheckReport> {
    let coef = Coefficients::single(loss_name, cfg.weights.lambda_rot)
        .ok_or_else(|| Error::InvalidParameter(format!("unknown loss `{loss_name}`")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = GradcheckReport { max_rel_err: 0.0, max_abs_err: 0.0 };
    for _ in 0..trials {
        let m = rng.random_range(20..=50);
        let k = rng.random_range(2..=4);
        let e = rng.random_range(2..=cfg.embedding_dim.clamp(2, 8));
        let (problem, params) = random_problem(&mut rng, m, k, e)?;
        let r = gradcheck_at(&problem, &params, &coef, 1e-5)?;
        worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
        worst.max_abs_err = worst.max_abs_err.max(r.max_abs_err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::articulation::{
        articulation_loss, contact_loss_parts, soft_positions, vector_field_loss, velocity_loss, ObservationTargets,
    };
    use crate::part_field::part_loss;

    #[test]
    fn objective_matches_reference_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let (problem, params) = random_problem(&mut rng, 40, 3, 4).unwrap();
            let lay = problem.layout;
            let coef = Coefficients::from_weights(&LossWeights::default());
            let (got, frozen) = problem.evaluate(&params, &coef, None, None).unwrap();
            let field = crate::part_field::assignment(&lay.embeddings(&params), &lay.projection(&params)).unwrap();
            let tfs = lay.transforms(&params);
            assert!((got.part - part_loss(&field, &problem.graph).unwrap()).abs() < 1e-12);
            let targets = ObservationTargets {
                target_centers: problem.targets.clone(),
                target_rotations: frozen.rot_targets.iter().map(|q| q.map(|q| quat_from_wxyz(&q))).collect(),
            };
            let art = articulation_loss(
                &problem.sources,
                &field,
                &tfs,
                problem.kernel.as_ref(),
                &targets,
                coef.lambda_rot,
                problem.static_slot,
            )
            .unwrap();
            assert!((got.art - art).abs() < 1e-10 * art.max(1.0), "{} vs {art}", got.art);
            let vec = vector_field_loss(&problem.sources, &problem.targets, &field, &tfs).unwrap();
            assert!((got.vector - vec).abs() < 1e-10 * vec.max(1.0));
            let vel = velocity_loss(&problem.displacements, &field).unwrap();
            assert!((got.velocity - vel).abs() < 1e-12);
            let x = soft_positions(&problem.sources, &field, &tfs);
            let contact = contact_loss_parts(&x, &hard_assign(&field), 0, 3).unwrap();
            assert!((got.contact - contact).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = TrainConfig::default();
        for name in GRADCHECK_LOSSES {
            let r = gradcheck(name, &cfg, 3).unwrap();
            assert!(r.max_rel_err < 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut adam = Adam::new(2, 0.05, [0.9, 0.999], 1e-8);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 8.0 * p[1]];
            adam.step(&mut p, &g);
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3);
    }

    #[test]
    fn layout_is_contiguous() {
        let lay = Layout { m: 5, k: 3, e: 4 };
        assert_eq!(lay.len(), 5 * 4 + 3 * 4 + 3 + 12 + 9);
        assert_eq!(lay.t() + 9, lay.len());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { k_parts: 0, ..Default::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
        let text = serde_json::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, TrainConfig::default());
        let partial: TrainConfig = serde_json::from_str(r#"{"k_parts": 5}"#).unwrap();
        assert_eq!(partial.k_parts, 5);
        assert_eq!(partial.steps, 5000);
    }

    fn small_door() -> crate::synth::SynthObject {
        use crate::synth::{make_object, JointSpec, ObjectSpec, PartSpec};
        let spec = ObjectSpec::new(
            vec![
                PartSpec::new("body", [-0.5, -0.5, 0.0], [0.5, 0.5, 1.0], 80, None),
                PartSpec::new(
                    "door",
                    [0.5, -0.5, 0.0],
                    [0.54, 0.5, 1.0],
                    80,
                    Some(JointSpec::revolute(-Vec3::z(), Vec3::new(0.54, -0.5, 0.0), 0.5)),
                ),
            ],
            1,
        );
        make_object(&spec).unwrap()
    }

    #[test]
    fn exploration_is_recorded_and_deterministic() {
        let obj = small_door();
        let cfg = TrainConfig {
            steps: 20,
            explore: ExploreConfig { starts: 3, steps: 15, max_gaussians: 64, ..Default::default() },
            ..Default::default()
        };
        let a = fit(&obj.state0, &obj.state1, &cfg).unwrap();
        let b = fit(&obj.state0, &obj.state1, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.starts.len(), 3);
        assert_eq!(a.starts[0].seed, cfg.seed);
        assert!(a.starts.iter().all(|s| s.total.is_finite()));
        assert_eq!(a.loss_history.len(), 20);
    }

    #[test]
    fn single_start_skips_exploration() {
        let obj = small_door();
        let cfg = TrainConfig { steps: 5, explore: ExploreConfig { starts: 1, ..Default::default() }, ..Default::default() };
        let m = fit(&obj.state0, &obj.state1, &cfg).unwrap();
        assert!(m.starts.is_empty());
        assert!(TrainConfig { explore: ExploreConfig { starts: 0, ..Default::default() }, ..Default::default() }
            .validate()
            .is_err());
    }
}
