//! Synthetic two-state articulated objects built from boxes.

use crate::error::{Error, Result};
use crate::gaussian::{GaussianRecord, PartTransform, SceneState, DEFAULT_EMBEDDING_DIM};
use crate::math::{axis_angle, Vec3};
use nalgebra::UnitQuaternion;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// A single-DoF joint. `magnitude` is an angle in radians for revolute
/// joints and a length for prismatic ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub kind: JointKind,
    pub axis: Vec3,
    #[serde(default = "Vec3::zeros")]
    pub pivot: Vec3,
    pub magnitude: f64,
}

impl JointSpec {
    pub fn revolute(axis: Vec3, pivot: Vec3, angle: f64) -> Self {
        JointSpec { kind: JointKind::Revolute, axis: axis.normalize(), pivot, magnitude: angle }
    }

    pub fn prismatic(axis: Vec3, distance: f64) -> Self {
        JointSpec { kind: JointKind::Prismatic, axis: axis.normalize(), pivot: Vec3::zeros(), magnitude: distance }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.axis.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("joint axis norm {n}, expected 1")));
        }
        if !self.magnitude.is_finite() || !self.pivot.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidParameter("non-finite joint parameter".into()));
        }
        if self.kind == JointKind::Revolute && !(self.magnitude > -PI && self.magnitude <= PI) {
            return Err(Error::InvalidParameter(format!("revolute angle {} outside (-pi, pi]", self.magnitude)));
        }
        Ok(())
    }

    /// The rigid motion taking the part from state 0 to state 1.
    pub fn transform(&self) -> PartTransform {
        match self.kind {
            JointKind::Revolute => {
                let r = axis_angle(&self.axis, self.magnitude);
                PartTransform::new(r, self.pivot - r * self.pivot)
            }
            JointKind::Prismatic => PartTransform::new(UnitQuaternion::identity(), self.axis * self.magnitude),
        }
    }
}

/// One axis-aligned box part. `joint: None` marks the static base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    #[serde(default)]
    pub name: String,
    pub min: Vec3,
    pub max: Vec3,
    pub samples: usize,
    #[serde(default)]
    pub joint: Option<JointSpec>,
    #[serde(default)]
    pub color: Option<[f64; 3]>,
}

impl PartSpec {
    pub fn new(name: &str, min: [f64; 3], max: [f64; 3], samples: usize, joint: Option<JointSpec>) -> Self {
        PartSpec { name: name.into(), min: Vec3::from(min), max: Vec3::from(max), samples, joint, color: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub parts: Vec<PartSpec>,
    #[serde(default = "default_scale")]
    pub gaussian_scale: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
}

fn default_scale() -> f64 {
    0.01
}

fn default_embedding_dim() -> usize {
    DEFAULT_EMBEDDING_DIM
}

impl ObjectSpec {
    pub fn new(parts: Vec<PartSpec>, seed: u64) -> Self {
        ObjectSpec { parts, gaussian_scale: default_scale(), noise_sigma: 0.0, seed, embedding_dim: DEFAULT_EMBEDDING_DIM }
    }

    pub fn validate(&self) -> Result<()> {
        let statics = self.parts.iter().filter(|p| p.joint.is_none()).count();
        if statics != 1 {
            return Err(Error::InvalidParameter(format!("object needs exactly one static part, found {statics}")));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if p.samples == 0 {
                return Err(Error::InvalidParameter(format!("part {i} has no samples")));
            }
            if !(p.min.iter().zip(p.max.iter()).all(|(a, b)| a.is_finite() && b.is_finite() && a <= b)) {
                return Err(Error::InvalidParameter(format!("part {i} has an invalid box")));
            }
            if (p.max - p.min).iter().filter(|e| **e > 0.0).count() < 2 {
                return Err(Error::InvalidParameter(format!("part {i} has zero surface area")));
            }
            if let Some(j) = &p.joint {
                j.validate()?;
            }
        }
        if !(self.gaussian_scale > 0.0 && self.gaussian_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("gaussian scale {}", self.gaussian_scale)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn static_part(&self) -> usize {
        self.parts.iter().position(|p| p.joint.is_none()).unwrap_or(0)
    }

    pub fn total_samples(&self) -> usize {
        self.parts.iter().map(|p| p.samples).sum()
    }
}

/// Ground truth for one generated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub part_names: Vec<String>,
    pub static_part: usize,
    pub joints: Vec<Option<JointSpec>>,
    pub transforms: Vec<PartTransform>,
}

impl GroundTruth {
    pub fn num_parts(&self) -> usize {
        self.transforms.len()
    }
}

#[derive(Debug, Clone)]
pub struct SynthObject {
    pub state0: SceneState,
    pub state1: SceneState,
    pub gt: GroundTruth,
    /// Non-fatal problems such as overlapping part volumes.
    pub warnings: Vec<String>,
}

const PALETTE: [[f64; 3]; 8] = [
    [0.6, 0.6, 0.6],
    [0.85, 0.3, 0.2],
    [0.2, 0.5, 0.85],
    [0.3, 0.75, 0.3],
    [0.9, 0.75, 0.2],
    [0.6, 0.3, 0.7],
    [0.2, 0.7, 0.7],
    [0.9, 0.5, 0.7],
];

/// Area-weighted uniform samples on the surface of an axis-aligned box.
pub fn sample_box_surface<R: Rng + ?Sized>(rng: &mut R, min: &Vec3, max: &Vec3, n: usize) -> Vec<Vec3> {
    let e = max - min;
    // faces normal to x, y, z (each appears twice)
    let areas = [e.y * e.z, e.x * e.z, e.x * e.y];
    let total = 2.0 * areas.iter().sum::<f64>();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut face = 5;
            for f in 0..6 {
                let a = areas[f / 2];
                if pick < a {
                    face = f;
                    break;
                }
                pick -= a;
            }
            let axis = face / 2;
            let mut p = Vec3::new(
                min.x + rng.random::<f64>() * e.x,
                min.y + rng.random::<f64>() * e.y,
                min.z + rng.random::<f64>() * e.z,
            );
            p[axis] = if face % 2 == 0 { min[axis] } else { max[axis] };
            p
        })
        .collect()
}

fn overlap_volume(a: &PartSpec, b: &PartSpec) -> f64 {
    let lo = a.min.sup(&b.min);
    let hi = a.max.inf(&b.max);
    let d = hi - lo;
    if d.iter().all(|v| *v > 0.0) {
        d.x * d.y * d.z
    } else {
        0.0
    }
}

pub fn make_object(spec: &ObjectSpec) -> Result<SynthObject> {
    spec.validate()?;
    let mut warnings = Vec::new();
    for i in 0..spec.parts.len() {
        for j in i + 1..spec.parts.len() {
            let v = overlap_volume(&spec.parts[i], &spec.parts[j]);
            if v > 0.0 {
                warnings.push(format!("parts {i} and {j} overlap by volume {v:.3e} in state 0"));
            }
        }
    }
    let transforms: Vec<PartTransform> = spec
        .parts
        .iter()
        .map(|p| p.joint.map_or_else(PartTransform::identity, |j| j.transform()))
        .collect();

    let mut g0 = Vec::with_capacity(spec.total_samples());
    let mut g1 = Vec::with_capacity(spec.total_samples());
    let mut labels = Vec::with_capacity(spec.total_samples());
    for (k, part) in spec.parts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k as u64 + 1);
        let color = Vec3::from(part.color.unwrap_or(PALETTE[k % PALETTE.len()]));
        let tf = &transforms[k];
        for p in sample_box_surface(&mut rng, &part.min, &part.max, part.samples) {
            let mut g = GaussianRecord::isotropic(p, spec.gaussian_scale, spec.embedding_dim);
            g.color = color;
            let mut moved = g.clone();
            if part.joint.is_some() {
                moved.center = tf.apply(&p);
                moved.rotation = tf.rotation * g.rotation;
            }
            g0.push(g);
            g1.push(moved);
            labels.push(k);
        }
    }

    let mut state0 = SceneState::new(g0, 0);
    let mut state1 = SceneState::new(g1, 1);
    for s in [&mut state0, &mut state1] {
        s.gt_labels = Some(labels.clone());
        s.gt_transforms = Some(transforms.clone());
    }
    if spec.noise_sigma > 0.0 {
        state0 = perturb(&state0, spec.noise_sigma, spec.seed ^ 0x5eed_0000)?;
        state1 = perturb(&state1, spec.noise_sigma, spec.seed ^ 0x5eed_0001)?;
    }
    let gt = GroundTruth {
        part_names: spec.parts.iter().map(|p| p.name.clone()).collect(),
        static_part: spec.static_part(),
        joints: spec.parts.iter().map(|p| p.joint).collect(),
        transforms,
    };
    Ok(SynthObject { state0, state1, gt, warnings })
}

/// Adds i.i.d. isotropic Gaussian noise to every center.
pub fn perturb(state: &SceneState, sigma: f64, seed: u64) -> Result<SceneState> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise sigma {sigma}")));
    }
    let mut out = state.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in &mut out.gaussians {
        for c in 0..3 {
            let n: f64 = rng.sample(StandardNormal);
            g.center[c] += sigma * n;
        }
    }
    Ok(out)
}

/// Named synthetic objects.
pub mod presets {
    use super::*;

    /// Cabinet with a door hinged on a vertical edge, opening 30°.
    pub fn door(seed: u64) -> ObjectSpec {
        door_with_angle(seed, PI / 6.0)
    }

    pub fn door_with_angle(seed: u64, angle: f64) -> ObjectSpec {
        ObjectSpec::new(
            vec![
                PartSpec::new("body", [-0.5, -0.5, 0.0], [0.5, 0.5, 1.0], 1000, None),
                PartSpec::new(
                    "door",
                    [0.5, -0.5, 0.0],
                    [0.54, 0.5, 1.0],
                    1000,
                    Some(JointSpec::revolute(-Vec3::z(), Vec3::new(0.54, -0.5, 0.0), angle)),
                ),
            ],
            seed,
        )
    }

    /// Cabinet with a drawer sliding 0.5 units along +x.
    pub fn drawer(seed: u64) -> ObjectSpec {
        drawer_with_slide(seed, 0.5)
    }

    pub fn drawer_with_slide(seed: u64, slide: f64) -> ObjectSpec {
        ObjectSpec::new(
            vec![
                PartSpec::new("body", [-0.5, -0.5, 0.0], [0.5, 0.5, 1.0], 1000, None),
                PartSpec::new(
                    "drawer",
                    [0.5, -0.4, 0.2],
                    [0.9, 0.4, 0.6],
                    1000,
                    Some(JointSpec::prismatic(Vec3::x(), slide)),
                ),
            ],
            seed,
        )
    }

    /// Drawer that opens only slightly, so it stays close to the body.
    pub fn flush_drawer(seed: u64) -> ObjectSpec {
        drawer_with_slide(seed, 0.05)
    }

    /// Static frame with two drawers and two doors on its vertical faces.
    pub fn table5(seed: u64) -> ObjectSpec {
        ObjectSpec::new(
            vec![
                PartSpec::new("frame", [-0.6, -0.5, 0.0], [0.6, 0.5, 1.0], 400, None),
                PartSpec::new(
                    "drawer_a",
                    [0.6, -0.4, 0.3],
                    [0.9, 0.4, 0.7],
                    400,
                    Some(JointSpec::prismatic(Vec3::x(), 0.25)),
                ),
                PartSpec::new(
                    "drawer_b",
                    [-0.9, -0.4, 0.3],
                    [-0.6, 0.4, 0.7],
                    400,
                    Some(JointSpec::prismatic(-Vec3::x(), 0.2)),
                ),
                PartSpec::new(
                    "door_c",
                    [-0.5, 0.5, 0.05],
                    [0.5, 0.53, 0.95],
                    400,
                    Some(JointSpec::revolute(Vec3::z(), Vec3::new(-0.5, 0.53, 0.0), 35f64.to_radians())),
                ),
                PartSpec::new(
                    "door_d",
                    [-0.5, -0.53, 0.05],
                    [0.5, -0.5, 0.95],
                    400,
                    Some(JointSpec::revolute(-Vec3::z(), Vec3::new(-0.5, -0.53, 0.0), 30f64.to_radians())),
                ),
            ],
            seed,
        )
    }

    pub fn by_name(name: &str, seed: u64) -> Option<ObjectSpec> {
        Some(match name {
            "door" => door(seed),
            "drawer" => drawer(seed),
            "flush_drawer" => flush_drawer(seed),
            "table5" => table5(seed),
            _ => return None,
        })
    }

    pub const NAMES: [&str; 4] = ["door", "drawer", "flush_drawer", "table5"];
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_angle_door_is_static() {
        let obj = make_object(&presets::door_with_angle(3, 0.0)).unwrap();
        assert_eq!(obj.state0.gaussians, obj.state1.gaussians);
    }

    #[test]
    fn drawer_translates_rigidly() {
        let obj = make_object(&presets::drawer(1)).unwrap();
        let labels = obj.state0.gt_labels.as_ref().unwrap();
        for ((a, b), l) in obj.state0.gaussians.iter().zip(&obj.state1.gaussians).zip(labels) {
            if *l == 1 {
                assert_eq!(b.center, a.center + Vec3::new(0.5, 0.0, 0.0));
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn door_matches_analytic_rotation() {
        let obj = make_object(&presets::door(2)).unwrap();
        let p = Vec3::new(0.54, -0.5, 0.0);
        let (c, s) = ((-PI / 6.0).cos(), (-PI / 6.0).sin());
        let labels = obj.state0.gt_labels.as_ref().unwrap();
        for ((a, b), l) in obj.state0.gaussians.iter().zip(&obj.state1.gaussians).zip(labels) {
            if *l != 1 {
                continue;
            }
            // rotation about -z by +30° is rotation about +z by -30°
            let d = a.center - p;
            let want = Vec3::new(c * d.x - s * d.y, s * d.x + c * d.y, d.z) + p;
            assert!((b.center - want).norm() < 1e-12);
        }
    }

    #[test]
    fn gt_transforms_reproduce_state1() {
        for name in presets::NAMES {
            let obj = make_object(&presets::by_name(name, 7).unwrap()).unwrap();
            let labels = obj.state0.gt_labels.as_ref().unwrap();
            for ((a, b), l) in obj.state0.gaussians.iter().zip(&obj.state1.gaussians).zip(labels) {
                assert!((obj.gt.transforms[*l].apply(&a.center) - b.center).norm() < 1e-10);
            }
            assert!(obj.warnings.is_empty(), "{name}: {:?}", obj.warnings);
            obj.state0.validate().unwrap();
            obj.state1.validate().unwrap();
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = make_object(&presets::table5(11)).unwrap();
        let b = make_object(&presets::table5(11)).unwrap();
        assert_eq!(a.state0, b.state0);
        assert_eq!(a.state1, b.state1);
        let c = make_object(&presets::table5(12)).unwrap();
        assert_ne!(a.state0, c.state0);
    }

    #[test]
    fn samples_lie_on_box_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lo, hi) = (Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 2.0, 0.5));
        for p in sample_box_surface(&mut rng, &lo, &hi, 500) {
            let on_face = (0..3).any(|a| p[a] == lo[a] || p[a] == hi[a]);
            let inside = (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]);
            assert!(on_face && inside);
        }
    }

    #[test]
    fn face_sampling_is_area_weighted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (lo, hi) = (Vec3::zeros(), Vec3::new(1.0, 1.0, 0.1));
        let pts = sample_box_surface(&mut rng, &lo, &hi, 20000);
        // the two z faces carry 2 / 2.4 of the total area
        let zf = pts.iter().filter(|p| p.z == 0.0 || p.z == 0.1).count() as f64 / 20000.0;
        assert!((zf - 2.0 / 2.4).abs() < 0.01, "{zf}");
    }

    #[test]
    fn overlap_is_reported() {
        let mut spec = presets::drawer(0);
        spec.parts[1].min.x = 0.4;
        let obj = make_object(&spec).unwrap();
        assert_eq!(obj.warnings.len(), 1);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = presets::drawer(0);
        spec.parts[1].joint = None;
        assert!(make_object(&spec).is_err());
        let mut spec = presets::drawer(0);
        spec.parts[0].samples = 0;
        assert!(make_object(&spec).is_err());
        let mut spec = presets::door(0);
        spec.parts[1].joint.as_mut().unwrap().axis = Vec3::new(0.0, 0.0, 2.0);
        assert!(make_object(&spec).is_err());
        let mut spec = presets::door(0);
        spec.parts[1].joint.as_mut().unwrap().magnitude = -PI;
        assert!(make_object(&spec).is_err());
    }

    #[test]
    fn perturb_zero_is_identity() {
        let obj = make_object(&presets::door(0)).unwrap();
        assert_eq!(perturb(&obj.state0, 0.0, 5).unwrap(), obj.state0);
    }

    #[test]
    fn perturb_statistics_and_determinism() {
        let spec = ObjectSpec::new(vec![PartSpec::new("b", [0.0; 3], [1.0; 3], 10_000, None)], 0);
        let s = make_object(&spec).unwrap().state0;
        let p = perturb(&s, 0.01, 9).unwrap();
        assert_eq!(p, perturb(&s, 0.01, 9).unwrap());
        for axis in 0..3 {
            let d: Vec<f64> = s.gaussians.iter().zip(&p.gaussians).map(|(a, b)| b.center[axis] - a.center[axis]).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
            assert!((std - 0.01).abs() < 0.001, "{std}");
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = presets::table5(4);
        let text = serde_json::to_string(&spec).unwrap();
        let back: ObjectSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
