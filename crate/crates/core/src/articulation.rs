//! Per-part rigid transforms and the articulation and physics losses.
//!
//! The functions here evaluate each loss directly from its definition. The
//! trainer's fused objective computes the same quantities together with
//! their gradients and is tested against these.

use crate::error::{Error, Result};
use crate::gaussian::{LossWeights, PartTransform};
use crate::math::{geodesic_angle, quat_to_wxyz, Mat3, Vec3};
use crate::part_field::AssignmentField;
use crate::repel::ForceKernel;
use crate::spatial::KdTree;
use nalgebra::{Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

/// Matched observations the transforms are fit against.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTargets {
    /// Observed position of every Gaussian at the other joint state.
    pub target_centers: Vec<Vec3>,
    /// Per-part target rotation, `None` when it could not be estimated.
    pub target_rotations: Vec<Option<UnitQuaternion<f64>>>,
}

/// `Σ_k p_k (R_k μ + t_k) + force`.
pub fn apply_soft(mu: &Vec3, probs: &[f64], transforms: &[PartTransform], force: &Vec3) -> Vec3 {
    let mut x = *force;
    for (p, tf) in probs.iter().zip(transforms) {
        if *p != 0.0 {
            x += tf.apply(mu) * *p;
        }
    }
    x
}

/// Geodesic angle between two rotations in degrees.
pub fn rotation_angle(q1: &UnitQuaternion<f64>, q2: &UnitQuaternion<f64>) -> f64 {
    let r = q1.to_rotation_matrix().into_inner() * q2.to_rotation_matrix().into_inner().transpose();
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Weighted least-squares rigid fit `b ≈ R a + t` (Kabsch with a proper
/// rotation enforced).
pub fn procrustes_target(a: &[Vec3], b: &[Vec3], w: &[f64]) -> Result<PartTransform> {
    if a.len() != b.len() || a.len() != w.len() {
        return Err(Error::DimensionMismatch(format!("{} / {} / {} pairs and weights", a.len(), b.len(), w.len())));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate("procrustes weights sum to zero".into()));
    }
    let mut ca = Vec3::zeros();
    let mut cb = Vec3::zeros();
    for ((p, q), wi) in a.iter().zip(b).zip(w) {
        ca += p * *wi;
        cb += q * *wi;
    }
    ca /= total;
    cb /= total;
    let mut h = Mat3::zeros();
    for ((p, q), wi) in a.iter().zip(b).zip(w) {
        h += (p - ca) * (q - cb).transpose() * *wi;
    }
    kabsch_rotation(&h).map(|r| {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        PartTransform::new(q, cb - q * ca)
    })
}

/// Proper rotation maximizing `tr(R H)` for a cross-covariance `H = Σ a bᵀ`.
pub fn kabsch_rotation(h: &Mat3) -> Result<Mat3> {
    let svd = h.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return Err(Error::Degenerate("svd failed".into()));
    };
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    if !(sv[order[0]] > 0.0) || sv[order[1]] <= 1e-12 * sv[order[0]] {
        return Err(Error::Degenerate("cross-covariance has rank < 2".into()));
    }
    let v = vt.transpose();
    // reflection fix goes on the smallest singular direction
    let mut diag = Vec3::repeat(1.0);
    diag[order[2]] = (v * u.transpose()).determinant().signum();
    Ok(v * Mat3::from_diagonal(&diag) * u.transpose())
}

/// Soft position of every Gaussian before the repel force.
pub fn soft_positions(sources: &[Vec3], field: &AssignmentField, transforms: &[PartTransform]) -> Vec<Vec3> {
    sources
        .iter()
        .enumerate()
        .map(|(i, a)| apply_soft(a, field.row(i), transforms, &Vec3::zeros()))
        .collect()
}

/// Whether slot `k` carries the repel force and the rotation term.
fn movable(k: usize, static_slot: Option<usize>) -> bool {
    Some(k) != static_slot
}

/// `Σ_i Σ_k p_ik ‖R_k a_i + t_k + [k movable] F_i − ŷ_i‖² + λ_rot Σ_k Angle(R_k, R̂_k)`,
/// with `F_i` evaluated at the soft position and the angle in radians.
pub fn articulation_loss(
    sources: &[Vec3],
    field: &AssignmentField,
    transforms: &[PartTransform],
    repel: Option<&ForceKernel>,
    targets: &ObservationTargets,
    lambda_rot: f64,
    static_slot: Option<usize>,
) -> Result<f64> {
    check_sizes(sources, field, transforms)?;
    if targets.target_centers.len() != sources.len() {
        return Err(Error::DimensionMismatch("targets and sources differ in length".into()));
    }
    let mut pos = 0.0;
    for (i, a) in sources.iter().enumerate() {
        let p = field.row(i);
        let force = match repel {
            Some(kern) if !kern.is_empty() => {
                kern.force(&apply_soft(a, p, transforms, &Vec3::zeros()))
            }
            _ => Vec3::zeros(),
        };
        for (k, tf) in transforms.iter().enumerate() {
            let f = if movable(k, static_slot) { force } else { Vec3::zeros() };
            pos += p[k] * (tf.apply(a) + f - targets.target_centers[i]).norm_squared();
        }
    }
    let mut rot = 0.0;
    if lambda_rot != 0.0 {
        for (k, tf) in transforms.iter().enumerate() {
            if !movable(k, static_slot) {
                continue;
            }
            if let Some(Some(target)) = targets.target_rotations.get(k) {
                rot += geodesic_angle(&quat_to_wxyz(&tf.rotation), &quat_to_wxyz(target));
            }
        }
    }
    Ok(pos + lambda_rot * rot)
}

/// Mean hinge `max(0, −cos φ)` between each movable center's offset to its
/// nearest static center and its offset to the static centroid.
pub fn contact_loss(movable_centers: &[Vec3], static_centers: &[Vec3], static_centroid: &Vec3) -> Result<f64> {
    if static_centers.is_empty() {
        return Err(Error::EmptyInput("static centers for contact loss"));
    }
    if movable_centers.is_empty() {
        return Ok(0.0);
    }
    let tree = KdTree::new(static_centers);
    let mut total = 0.0;
    for x in movable_centers {
        let (j, _) = tree.nearest(x).expect("non-empty tree");
        total += contact_hinge(&(x - static_centers[j]), &(x - static_centroid));
    }
    Ok(total / movable_centers.len() as f64)
}

/// `max(0, −cos φ)`, zero when either vector vanishes.
pub fn contact_hinge(d_near: &Vec3, d_centroid: &Vec3) -> f64 {
    let n = d_near.norm() * d_centroid.norm();
    if n == 0.0 {
        return 0.0;
    }
    (-(d_near.dot(d_centroid) / n)).max(0.0)
}

/// Contact loss summed over movable parts, with membership given by hard labels.
pub fn contact_loss_parts(positions: &[Vec3], labels: &[usize], static_slot: usize, k: usize) -> Result<f64> {
    let statics: Vec<Vec3> = positions.iter().zip(labels).filter(|(_, &l)| l == static_slot).map(|(x, _)| *x).collect();
    if statics.is_empty() {
        return Ok(0.0);
    }
    let centroid = statics.iter().sum::<Vec3>() / statics.len() as f64;
    let mut total = 0.0;
    for part in (0..k).filter(|&c| c != static_slot) {
        let mov: Vec<Vec3> = positions.iter().zip(labels).filter(|(_, &l)| l == part).map(|(x, _)| *x).collect();
        total += contact_loss(&mov, &statics, &centroid)?;
    }
    Ok(total)
}

/// `Σ_k` trace of the `p_·k`-weighted covariance of the displacements.
pub fn velocity_loss(displacements: &[Vec3], field: &AssignmentField) -> Result<f64> {
    if displacements.len() != field.m {
        return Err(Error::DimensionMismatch("displacements vs assignment rows".into()));
    }
    let mut total = 0.0;
    for k in 0..field.k {
        let w: f64 = (0..field.m).map(|i| field.row(i)[k]).sum();
        if !(w > 0.0) {
            continue;
        }
        let mean = (0..field.m).map(|i| displacements[i] * field.row(i)[k]).sum::<Vec3>() / w;
        let var: f64 = (0..field.m).map(|i| field.row(i)[k] * (displacements[i] - mean).norm_squared()).sum::<f64>() / w;
        total += var;
    }
    Ok(total)
}

/// `Σ_k Σ_i p_ik ‖R_k a_i + t_k − ŷ_i‖²`.
pub fn vector_field_loss(
    sources: &[Vec3],
    observed: &[Vec3],
    field: &AssignmentField,
    transforms: &[PartTransform],
) -> Result<f64> {
    check_sizes(sources, field, transforms)?;
    if observed.len() != sources.len() {
        return Err(Error::DimensionMismatch("observed and sources differ in length".into()));
    }
    let mut total = 0.0;
    for (i, a) in sources.iter().enumerate() {
        for (k, tf) in transforms.iter().enumerate() {
            total += field.row(i)[k] * (tf.apply(a) - observed[i]).norm_squared();
        }
    }
    Ok(total)
}

fn check_sizes(sources: &[Vec3], field: &AssignmentField, transforms: &[PartTransform]) -> Result<()> {
    if field.m != sources.len() || field.k != transforms.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} sources and {} transforms vs a {}x{} assignment",
            sources.len(),
            transforms.len(),
            field.m,
            field.k
        )));
    }
    Ok(())
}

/// Individual loss values and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub render: f64,
    pub part: f64,
    pub art: f64,
    pub contact: f64,
    pub velocity: f64,
    pub vector: f64,
    pub total: f64,
}

/// `L_render + λ_part L_part + λ_art L_art + λ_phys (L_contact + L_velocity + L_vector)`.
pub fn total_loss(mut c: LossBreakdown, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("render", c.render),
        ("part", c.part),
        ("art", c.art),
        ("contact", c.contact),
        ("velocity", c.velocity),
        ("vector", c.vector),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name.into(), step: None });
        }
    }
    c.total = c.render + w.lambda_part * c.part + w.lambda_art * c.art + w.lambda_phys * (c.contact + c.velocity + c.vector);
    Ok(c)
}
