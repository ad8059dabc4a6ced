//! Gaussian records, scene states, covariance construction and opacity.

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EMBEDDING_DIM: usize = 8;

/// One anisotropic Gaussian primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianRecord {
    pub center: Vec3,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vec3,
    pub opacity: f64,
    /// Degree-0 RGB appearance in `[0, 1]`.
    pub color: Vec3,
    /// Part-identity embedding.
    pub embedding: Vec<f64>,
}

impl GaussianRecord {
    /// Isotropic, identity-rotated Gaussian with a zero embedding.
    pub fn isotropic(center: Vec3, scale: f64, embed_dim: usize) -> Self {
        GaussianRecord {
            center,
            rotation: UnitQuaternion::identity(),
            scale: Vec3::repeat(scale),
            opacity: 1.0,
            color: Vec3::repeat(0.5),
            embedding: vec![0.0; embed_dim],
        }
    }

    pub fn covariance(&self) -> Result<Mat3> {
        build_covariance(&self.rotation, &self.scale)
    }

    /// Checks the record invariants (unit quaternion, positive scale, opacity range).
    pub fn validate(&self) -> Result<()> {
        let qn = self.rotation.quaternion().norm();
        if (qn - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("quaternion norm {qn}")));
        }
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-positive scale {:?}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::InvalidParameter(format!("opacity {} outside [0,1]", self.opacity)));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidParameter("non-finite center".into()));
        }
        Ok(())
    }
}

/// A rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for PartTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl PartTransform {
    pub fn identity() -> Self {
        PartTransform { rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        PartTransform { rotation, translation }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &PartTransform) -> PartTransform {
        PartTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PartTransform {
        let inv = self.rotation.inverse();
        PartTransform { rotation: inv, translation: -(inv * self.translation) }
    }
}

/// A Gaussian field observed at one joint state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub gaussians: Vec<GaussianRecord>,
    pub state_tag: u8,
    #[serde(default)]
    pub gt_labels: Option<Vec<usize>>,
    #[serde(default)]
    pub gt_transforms: Option<Vec<PartTransform>>,
}

impl SceneState {
    pub fn new(gaussians: Vec<GaussianRecord>, state_tag: u8) -> Self {
        SceneState { gaussians, state_tag, gt_labels: None, gt_transforms: None }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.gaussians.iter().map(|g| g.center).collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.gaussians.first().map_or(0, |g| g.embedding.len())
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.gaussians {
            g.validate()?;
        }
        if let Some(labels) = &self.gt_labels {
            if labels.len() != self.gaussians.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} labels for {} gaussians",
                    labels.len(),
                    self.gaussians.len()
                )));
            }
            if let Some(tf) = &self.gt_transforms {
                if let Some(bad) = labels.iter().find(|&&l| l >= tf.len()) {
                    return Err(Error::IndexOutOfRange(format!("label {bad} with {} parts", tf.len())));
                }
            }
        }
        Ok(())
    }

    /// Mean over all Gaussians of the mean scale component.
    pub fn mean_scale(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 0.0;
        }
        self.gaussians.iter().map(|g| g.scale.mean()).sum::<f64>() / self.gaussians.len() as f64
    }
}

/// Weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// D-SSIM mixing weight of the photometric metric.
    pub lambda_render: f64,
    pub lambda_part: f64,
    pub lambda_art: f64,
    pub lambda_phys: f64,
    pub lambda_rot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_render: 0.2, lambda_part: 0.1, lambda_art: 1.0, lambda_phys: 0.5, lambda_rot: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_render, self.lambda_part, self.lambda_art, self.lambda_phys, self.lambda_rot];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn build_covariance(rotation: &UnitQuaternion<f64>, scale: &Vec3) -> Result<Mat3> {
    let q = rotation.quaternion();
    if !q.coords.iter().all(|c| c.is_finite()) || !scale.iter().all(|s| s.is_finite()) {
        return Err(Error::InvalidParameter("non-finite rotation or scale".into()));
    }
    if scale.iter().any(|s| *s <= 0.0) {
        return Err(Error::InvalidParameter(format!("scale must be positive, got {scale:?}")));
    }
    let r = rotation.to_rotation_matrix().into_inner();
    let rs = r * Mat3::from_diagonal(scale);
    let sigma = rs * rs.transpose();
    // exact symmetry
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// `σ · exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
///
/// The quadratic form is evaluated in the Gaussian's local frame, where the
/// inverse covariance is diagonal.
pub fn eval_opacity(g: &GaussianRecord, x: &Vec3) -> Result<f64> {
    if !x.iter().all(|c| c.is_finite()) || !g.center.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidParameter("non-finite position".into()));
    }
    if g.scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParameter(format!("scale must be positive, got {:?}", g.scale)));
    }
    let local = g.rotation.inverse() * (x - g.center);
    let m = (local.x / g.scale.x).powi(2) + (local.y / g.scale.y).powi(2) + (local.z / g.scale.z).powi(2);
    Ok(g.opacity * (-0.5 * m).exp())
}
