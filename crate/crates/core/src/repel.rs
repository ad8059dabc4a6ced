//! Fixed repel points and the clamped inverse-power force field.

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use crate::spatial::KdTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Force-law parameters and the repel-point sampling procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepelConfig {
    pub enabled: bool,
    pub k_r: f64,
    pub epsilon: f64,
    pub tau_max: f64,
    /// Power of the clamped distance in the denominator.
    pub exponent: f64,
    /// `+1` applies `(r - μ)` as written; `-1` flips the direction.
    pub sign: f64,
    pub n_r: usize,
    /// Movable centers within this distance of a static center seed repel points.
    pub threshold: f64,
    /// Matched displacement below which a Gaussian counts as static when
    /// choosing the repel candidates.
    pub static_disp_tol: f64,
}

impl Default for RepelConfig {
    fn default() -> Self {
        RepelConfig {
            enabled: true,
            k_r: 5e-4,
            epsilon: 1e-5,
            tau_max: 1e-3,
            exponent: 3.0,
            sign: 1.0,
            n_r: 2000,
            threshold: 1.5,
            static_disp_tol: 0.02,
        }
    }
}

impl RepelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_r >= 0.0 && self.k_r.is_finite()) {
            return Err(Error::InvalidParameter(format!("k_r {}", self.k_r)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("epsilon {}", self.epsilon)));
        }
        if !(self.tau_max > 0.0 && self.tau_max.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau_max {}", self.tau_max)));
        }
        if !(self.exponent >= 1.0 && self.exponent.is_finite()) {
            return Err(Error::InvalidParameter(format!("exponent {}", self.exponent)));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::InvalidParameter(format!("threshold {}", self.threshold)));
        }
        if self.sign != 1.0 && self.sign != -1.0 {
            return Err(Error::InvalidParameter(format!("sign must be +1 or -1, got {}", self.sign)));
        }
        Ok(())
    }
}

/// Immutable set of repel points with their force law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepelField {
    pub points: Vec<Vec3>,
    pub k_r: f64,
    pub epsilon: f64,
    pub tau_max: f64,
    pub exponent: f64,
    pub sign: f64,
    pub seed: u64,
    /// Set when initialization found no proximity region.
    pub diagnostic: Option<String>,
}

impl RepelField {
    pub fn new(points: Vec<Vec3>, cfg: &RepelConfig, seed: u64) -> Self {
        RepelField {
            points,
            k_r: cfg.k_r,
            epsilon: cfg.epsilon,
            tau_max: cfg.tau_max,
            exponent: cfg.exponent,
            sign: cfg.sign,
            seed,
            diagnostic: None,
        }
    }

    pub fn empty(cfg: &RepelConfig, seed: u64) -> Self {
        Self::new(Vec::new(), cfg, seed)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Deduplicated structure-of-arrays view used by the batched evaluator.
    pub fn kernel(&self) -> ForceKernel {
        ForceKernel::new(self)
    }
}

/// Samples repel points among movable centers that lie within `threshold`
/// of a static center.
pub fn init_repel(
    centers: &[Vec3],
    labels: &[usize],
    static_part: usize,
    threshold: f64,
    n_r: usize,
    seed: u64,
    cfg: &RepelConfig,
) -> Result<RepelField> {
    if centers.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} centers, {} labels", centers.len(), labels.len())));
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidParameter(format!("threshold {threshold}")));
    }
    let statics: Vec<Vec3> = centers.iter().zip(labels).filter(|(_, &l)| l == static_part).map(|(c, _)| *c).collect();
    if statics.is_empty() {
        return Err(Error::EmptyInput("no static gaussians for repel initialization"));
    }
    let tree = KdTree::new(&statics);
    let candidates: Vec<Vec3> = centers
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != static_part)
        .filter(|(c, _)| tree.nearest(c).is_some_and(|(_, d)| d <= threshold))
        .map(|(c, _)| *c)
        .collect();
    let mut field = RepelField::empty(cfg, seed);
    field.tau_max = cfg.tau_max;
    if candidates.is_empty() {
        field.diagnostic = Some(format!("no movable gaussian within {threshold} of the static part"));
        return Ok(field);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    field.points = (0..n_r).map(|_| candidates[rng.random_range(0..candidates.len())]).collect();
    Ok(field)
}

/// `v · min(1, τ/‖v‖)`.
pub fn clip(v: &Vec3, tau: f64) -> Vec3 {
    let n = v.norm();
    if n > tau {
        v * (tau / n)
    } else {
        *v
    }
}

/// Pulls a gradient on the clipped vector back onto its input.
pub fn clip_vjp(v: &Vec3, tau: f64, g: &Vec3) -> Vec3 {
    let n = v.norm();
    if n > tau {
        let u = v / n;
        (g - u * u.dot(g)) * (tau / n)
    } else {
        *g
    }
}

/// Clamped repel force at `mu`.
pub fn repel_force(mu: &Vec3, field: &RepelField) -> Vec3 {
    if field.is_empty() {
        return Vec3::zeros();
    }
    let mut f = Vec3::zeros();
    for r in &field.points {
        let d = r - mu;
        let dist = d.norm().max(field.epsilon);
        f += d / dist.powf(field.exponent);
    }
    clip(&(f * (field.sign * field.k_r)), field.tau_max)
}

/// Repel points merged by position, each with its multiplicity, laid out as
/// separate coordinate arrays.
#[derive(Debug, Clone)]
pub struct ForceKernel {
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
    ws: Vec<f64>,
    coef: f64,
    epsilon: f64,
    exponent: f64,
    pub tau_max: f64,
}

impl ForceKernel {
    fn new(field: &RepelField) -> Self {
        let mut index: HashMap<[u64; 3], usize> = HashMap::new();
        let (mut xs, mut ys, mut zs, mut ws) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for p in &field.points {
            let key = [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
            match index.get(&key) {
                Some(&i) => ws[i] += 1.0,
                None => {
                    index.insert(key, xs.len());
                    xs.push(p.x);
                    ys.push(p.y);
                    zs.push(p.z);
                    ws.push(1.0);
                }
            }
        }
        ForceKernel {
            xs,
            ys,
            zs,
            ws,
            coef: field.sign * field.k_r,
            epsilon: field.epsilon,
            exponent: field.exponent,
            tau_max: field.tau_max,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn unique_points(&self) -> usize {
        self.xs.len()
    }

    /// Unclipped force `G(x)` and its Jacobian `∂G/∂x`.
    pub fn raw_with_jacobian(&self, x: &Vec3) -> (Vec3, Mat3) {
        let (mut gx, mut gy, mut gz) = (0.0, 0.0, 0.0);
        let mut diag = 0.0;
        let (mut sxx, mut sxy, mut sxz, mut syy, mut syz, mut szz) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let eps = self.epsilon;
        let p = self.exponent;
        let cube = p == 3.0;
        for j in 0..self.xs.len() {
            let dx = self.xs[j] - x.x;
            let dy = self.ys[j] - x.y;
            let dz = self.zs[j] - x.z;
            let d2 = dx * dx + dy * dy + dz * dz;
            let d = d2.sqrt();
            let big = d > eps;
            let dd = if big { d } else { eps };
            let inv = 1.0 / dd;
            let invp = if cube { inv * inv * inv } else { inv.powf(p) };
            let a = self.ws[j] * invp;
            gx += a * dx;
            gy += a * dy;
            gz += a * dz;
            diag += a;
            let b = if big { p * a * inv * inv } else { 0.0 };
            sxx += b * dx * dx;
            sxy += b * dx * dy;
            sxz += b * dx * dz;
            syy += b * dy * dy;
            syz += b * dy * dz;
            szz += b * dz * dz;
        }
        let c = self.coef;
        let g = Vec3::new(gx, gy, gz) * c;
        let jac = Mat3::new(
            sxx - diag,
            sxy,
            sxz,
            sxy,
            syy - diag,
            syz,
            sxz,
            syz,
            szz - diag,
        ) * c;
        (g, jac)
    }

    /// Unclipped force only.
    pub fn raw(&self, x: &Vec3) -> Vec3 {
        let (mut gx, mut gy, mut gz) = (0.0, 0.0, 0.0);
        for j in 0..self.xs.len() {
            let dx = self.xs[j] - x.x;
            let dy = self.ys[j] - x.y;
            let dz = self.zs[j] - x.z;
            let d = (dx * dx + dy * dy + dz * dz).sqrt().max(self.epsilon);
            let inv = 1.0 / d;
            let a = self.ws[j] * if self.exponent == 3.0 { inv * inv * inv } else { inv.powf(self.exponent) };
            gx += a * dx;
            gy += a * dy;
            gz += a * dz;
        }
        Vec3::new(gx, gy, gz) * self.coef
    }

    pub fn force(&self, x: &Vec3) -> Vec3 {
        if self.is_empty() {
            return Vec3::zeros();
        }
        clip(&self.raw(x), self.tau_max)
    }
}
