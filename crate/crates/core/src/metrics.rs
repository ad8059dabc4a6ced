//! Joint extraction from learned transforms and evaluation against ground truth.

use crate::error::{Error, Result};
use crate::gaussian::{PartTransform, SceneState};
use crate::hungarian::linear_assignment;
use crate::math::Vec3;
use crate::repel::ForceKernel;
use crate::spatial::KdTree;
use crate::synth::{GroundTruth, JointKind, JointSpec};
use crate::trainer::TrainedModel;
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Rotations below this angle (radians) are read as prismatic joints.
pub const PRISMATIC_THRESHOLD_RAD: f64 = 1e-3;
/// Sentinel angular error when an estimate has no comparable axis.
pub const MISSING_AXIS_ERR_DEG: f64 = 90.0;
pub const CD_CONVENTION: &str = "symmetric mean squared nearest-neighbor distance x1000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatedKind {
    Revolute,
    Prismatic,
    /// Neither rotation nor translation: the axis is undefined.
    NoMotion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointEstimate {
    pub kind: EstimatedKind,
    pub axis: Vec3,
    /// A point on the rotation axis (revolute only).
    pub pivot: Vec3,
    /// Degrees for revolute joints, length for prismatic ones.
    pub motion: f64,
}

pub fn extract_joint(t: &PartTransform) -> JointEstimate {
    let theta = t.rotation.angle();
    if theta >= PRISMATIC_THRESHOLD_RAD {
        let axis = t.rotation.axis().map_or(Vec3::z(), |a| a.into_inner());
        let a = Matrix3::identity() - t.rotation_matrix();
        // (I − R) is singular along the axis; the pseudoinverse returns the
        // solution orthogonal to it.
        let pivot = a
            .pseudo_inverse(1e-12)
            .map(|pinv| pinv * t.translation)
            .unwrap_or_else(|_| Vec3::zeros());
        let pivot = pivot - axis * axis.dot(&pivot);
        return JointEstimate { kind: EstimatedKind::Revolute, axis, pivot, motion: theta.to_degrees() };
    }
    let n = t.translation.norm();
    if n < 1e-9 {
        return JointEstimate { kind: EstimatedKind::NoMotion, axis: Vec3::zeros(), pivot: Vec3::zeros(), motion: 0.0 };
    }
    JointEstimate { kind: EstimatedKind::Prismatic, axis: t.translation / n, pivot: Vec3::zeros(), motion: n }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointErrors {
    /// Degrees.
    pub ang_err: f64,
    /// Line-to-line distance, revolute joints only.
    pub pos_err: Option<f64>,
    /// Degrees (revolute) or length (prismatic).
    pub motion_err: f64,
    /// `motion_err` divided by the ground-truth motion magnitude.
    pub relative_motion_err: f64,
    pub kind_match: bool,
}

/// Angle in degrees between two lines, ignoring direction.
pub fn axis_angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    let c = (a.dot(b).abs() / (a.norm() * b.norm())).min(1.0);
    // acos loses precision near 1, atan2 does not
    let s = a.cross(b).norm() / (a.norm() * b.norm());
    s.atan2(c).to_degrees()
}

/// Minimum distance between lines `p1 + s·d1` and `p2 + s·d2`.
pub fn line_distance(p1: &Vec3, d1: &Vec3, p2: &Vec3, d2: &Vec3) -> f64 {
    let (d1, d2) = (d1.normalize(), d2.normalize());
    let w = p2 - p1;
    let n = d1.cross(&d2);
    let nn = n.norm();
    if nn < 1e-9 {
        (w - d1 * w.dot(&d1)).norm()
    } else {
        w.dot(&n).abs() / nn
    }
}

pub fn joint_errors(est: &JointEstimate, gt: &JointSpec) -> JointErrors {
    let gt_motion = match gt.kind {
        JointKind::Revolute => gt.magnitude.abs().to_degrees(),
        JointKind::Prismatic => gt.magnitude.abs(),
    };
    let relative = |err: f64| if gt_motion > 0.0 { err / gt_motion } else { err };
    let matched = matches!(
        (est.kind, gt.kind),
        (EstimatedKind::Revolute, JointKind::Revolute) | (EstimatedKind::Prismatic, JointKind::Prismatic)
    );
    if !matched {
        return JointErrors {
            ang_err: MISSING_AXIS_ERR_DEG,
            pos_err: None,
            motion_err: gt_motion,
            relative_motion_err: relative(gt_motion),
            kind_match: false,
        };
    }
    let ang_err = axis_angle_deg(&est.axis, &gt.axis);
    match gt.kind {
        JointKind::Revolute => {
            let err = (est.motion - gt_motion).abs();
            JointErrors {
                ang_err,
                pos_err: Some(line_distance(&est.pivot, &est.axis, &gt.pivot, &gt.axis)),
                motion_err: err,
                relative_motion_err: relative(err),
                kind_match: true,
            }
        }
        JointKind::Prismatic => {
            let err = (est.axis * est.motion - gt.axis * gt.magnitude).norm();
            JointErrors { ang_err, pos_err: None, motion_err: err, relative_motion_err: relative(err), kind_match: true }
        }
    }
}

fn mean_nn_sq(from: &[Vec3], tree: &KdTree, to: &[Vec3]) -> f64 {
    from.par_iter()
        .map(|p| {
            let (j, _) = tree.nearest(p).expect("non-empty tree");
            (p - to[j]).norm_squared()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric Chamfer distance, mean squared and scaled by 1000.
pub fn chamfer(x: &[Vec3], y: &[Vec3]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput("chamfer needs two non-empty point sets"));
    }
    let tx = KdTree::new(x);
    let ty = KdTree::new(y);
    Ok((mean_nn_sq(x, &ty, y) + mean_nn_sq(y, &tx, x)) * 1000.0)
}

/// Best-permutation agreement between predicted and true labels together
/// with the predicted slot chosen for every true part.
pub fn part_accuracy(pred: &[usize], k_pred: usize, truth: &[usize], k_true: usize) -> Result<(f64, Vec<usize>)> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!("{} predicted labels, {} true", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    let mut conf = vec![0.0f64; k_true * k_pred];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k_pred || t >= k_true {
            return Err(Error::IndexOutOfRange(format!("label pair ({p}, {t})")));
        }
        conf[t * k_pred + p] += 1.0;
    }
    let cost: Vec<f64> = conf.iter().map(|c| -c).collect();
    let pairs = linear_assignment(&cost, k_true, k_pred)?;
    let mut mapping: Vec<Option<usize>> = vec![None; k_true];
    let mut agree = 0.0;
    for (t, p) in pairs {
        mapping[t] = Some(p);
        agree += conf[t * k_pred + p];
    }
    let mapping = mapping
        .into_iter()
        .enumerate()
        .map(|(t, m)| {
            m.unwrap_or_else(|| {
                (0..k_pred).max_by(|&a, &b| conf[t * k_pred + a].total_cmp(&conf[t * k_pred + b])).unwrap_or(0)
            })
        })
        .collect();
    Ok((agree / pred.len() as f64, mapping))
}

/// Mean over movable points of `max(0, δ − distance to the nearest static point)`.
pub fn penetration(movable: &[Vec3], statics: &[Vec3], delta: f64) -> f64 {
    if movable.is_empty() || statics.is_empty() {
        return 0.0;
    }
    let tree = KdTree::new(statics);
    let depth: Vec<f64> = movable
        .par_iter()
        .map(|p| (delta - tree.nearest(p).map_or(f64::INFINITY, |(_, d)| d)).max(0.0))
        .collect();
    depth.iter().sum::<f64>() / movable.len() as f64
}

/// Predicted state-1 position of every canonical Gaussian: its hard slot's
/// transform applied to the state-0 source plus the repel displacement for
/// movable slots.
pub fn predicted_positions(model: &TrainedModel, state0: &SceneState) -> Result<Vec<Vec3>> {
    let kernel: Option<ForceKernel> = (!model.repel.is_empty()).then(|| model.repel.kernel());
    model
        .pairs
        .iter()
        .zip(&model.labels)
        .map(|(&(i, _), &l)| {
            let g = state0
                .gaussians
                .get(i)
                .ok_or_else(|| Error::DimensionMismatch(format!("pair index {i} outside state 0")))?;
            let tf = model.transforms.get(l).ok_or_else(|| Error::IndexOutOfRange(format!("slot {l}")))?;
            let mut x = tf.apply(&g.center);
            if let (Some(kern), true) = (&kernel, Some(l) != model.static_slot) {
                x += kern.force(&x);
            }
            Ok(x)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub part: usize,
    pub name: String,
    pub slot: usize,
    pub gt_kind: JointKind,
    pub estimate: JointEstimate,
    pub errors: JointErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub joints: Vec<JointReport>,
    pub cd_static: f64,
    pub cd_movable: f64,
    pub cd_whole: f64,
    pub part_accuracy: f64,
    pub penetration: f64,
    pub penetration_delta: f64,
    /// Predicted slot for each ground-truth part.
    pub part_mapping: Vec<usize>,
    pub cd_convention: String,
}

impl EvalReport {
    pub fn mean_ang_err(&self) -> f64 {
        mean(self.joints.iter().map(|j| j.errors.ang_err))
    }

    pub fn max_ang_err(&self) -> f64 {
        self.joints.iter().map(|j| j.errors.ang_err).fold(0.0, f64::max)
    }

    pub fn mean_pos_err(&self) -> f64 {
        mean(self.joints.iter().filter_map(|j| j.errors.pos_err))
    }

    pub fn mean_motion_err(&self) -> f64 {
        mean(self.joints.iter().map(|j| j.errors.motion_err))
    }

    pub fn mean_relative_motion_err(&self) -> f64 {
        mean(self.joints.iter().map(|j| j.errors.relative_motion_err))
    }

    pub const CSV_HEADER: &'static str = "label,ang_err,pos_err,motion_err,rel_motion_err,cd_static,cd_movable,cd_whole,part_accuracy,penetration";

    /// One CSV row of aggregate metrics.
    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{label},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.mean_ang_err(),
            self.mean_pos_err(),
            self.mean_motion_err(),
            self.mean_relative_motion_err(),
            self.cd_static,
            self.cd_movable,
            self.cd_whole,
            self.part_accuracy,
            self.penetration
        )
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn evaluate(model: &TrainedModel, state0: &SceneState, state1: &SceneState, gt: &GroundTruth) -> Result<EvalReport> {
    let labels0 = state0.gt_labels.as_ref().ok_or(Error::MissingGroundTruth("state 0 labels"))?;
    let labels1 = state1.gt_labels.as_ref().ok_or(Error::MissingGroundTruth("state 1 labels"))?;
    if labels0.len() != state0.len() || labels1.len() != state1.len() {
        return Err(Error::DimensionMismatch("label count differs from gaussian count".into()));
    }
    let k_true = gt.num_parts();
    if gt.joints.len() != k_true || gt.static_part >= k_true {
        return Err(Error::DimensionMismatch("ground truth joints and parts disagree".into()));
    }
    if model.fusion.count0 != state0.len() || model.fusion.count1 != state1.len() {
        return Err(Error::DimensionMismatch(format!(
            "model was trained on {}/{} gaussians, states have {}/{}",
            model.fusion.count0,
            model.fusion.count1,
            state0.len(),
            state1.len()
        )));
    }
    if model.labels.len() != model.pairs.len() {
        return Err(Error::DimensionMismatch("model labels and pairs differ in length".into()));
    }
    let k_pred = model.transforms.len();
    let truth: Vec<usize> = model
        .pairs
        .iter()
        .map(|&(i, _)| labels0.get(i).copied().ok_or_else(|| Error::DimensionMismatch(format!("pair index {i}"))))
        .collect::<Result<_>>()?;
    let (accuracy, mapping) = part_accuracy(&model.labels, k_pred, &truth, k_true)?;

    let x = predicted_positions(model, state0)?;
    let target_of = |part: usize| -> Vec<Vec3> {
        state1.gaussians.iter().zip(labels1).filter(|(_, &l)| l == part).map(|(g, _)| g.center).collect()
    };
    let predicted_of = |part: usize| -> Vec<Vec3> {
        let slot = mapping[part];
        let by_label: Vec<Vec3> = x.iter().zip(&model.labels).filter(|(_, &l)| l == slot).map(|(p, _)| *p).collect();
        if !by_label.is_empty() {
            return by_label;
        }
        // nothing predicted for this part: move its true members by the slot
        model
            .pairs
            .iter()
            .zip(&truth)
            .filter(|(_, &t)| t == part)
            .map(|(&(i, _), _)| model.transforms[slot].apply(&state0.gaussians[i].center))
            .collect()
    };

    let cd_static = chamfer(&predicted_of(gt.static_part), &target_of(gt.static_part))?;
    let movable_parts: Vec<usize> = (0..k_true).filter(|&p| p != gt.static_part).collect();
    let mut cd_mov = Vec::with_capacity(movable_parts.len());
    for &p in &movable_parts {
        cd_mov.push(chamfer(&predicted_of(p), &target_of(p))?);
    }
    let cd_movable = mean(cd_mov.into_iter());
    let cd_whole = chamfer(&x, &state1.centers())?;

    let static_slot = model.static_slot.unwrap_or(mapping[gt.static_part]);
    let (statics, movers): (Vec<(Vec3, usize)>, Vec<(Vec3, usize)>) =
        x.iter().copied().zip(model.labels.iter().copied()).partition(|(_, l)| *l == static_slot);
    let delta = 2.0 * model.canonical.mean_scale();
    let pen = penetration(
        &movers.iter().map(|(p, _)| *p).collect::<Vec<_>>(),
        &statics.iter().map(|(p, _)| *p).collect::<Vec<_>>(),
        delta,
    );

    let mut joints = Vec::new();
    for &p in &movable_parts {
        let Some(spec) = gt.joints[p] else { continue };
        let slot = mapping[p];
        let estimate = extract_joint(&model.transforms[slot]);
        joints.push(JointReport {
            part: p,
            name: gt.part_names.get(p).cloned().unwrap_or_default(),
            slot,
            gt_kind: spec.kind,
            estimate,
            errors: joint_errors(&estimate, &spec),
        });
    }
    Ok(EvalReport {
        joints,
        cd_static,
        cd_movable,
        cd_whole,
        part_accuracy: accuracy,
        penetration: pen,
        penetration_delta: delta,
        part_mapping: mapping,
        cd_convention: CD_CONVENTION.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{axis_angle, random_unit_vector};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pure_translation_is_prismatic() {
        let e = extract_joint(&PartTransform::new(nalgebra::UnitQuaternion::identity(), Vec3::new(1.0, 0.0, 0.0)));
        assert_eq!(e.kind, EstimatedKind::Prismatic);
        assert!((e.axis - Vec3::x()).norm() < 1e-15);
        assert!((e.motion - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_is_no_motion() {
        assert_eq!(extract_joint(&PartTransform::identity()).kind, EstimatedKind::NoMotion);
    }

    #[test]
    fn revolute_about_offset_pivot() {
        let spec = JointSpec::revolute(Vec3::z(), Vec3::new(2.0, 0.0, 0.0), 30f64.to_radians());
        let e = extract_joint(&spec.transform());
        assert_eq!(e.kind, EstimatedKind::Revolute);
        assert!((e.axis - Vec3::z()).norm() < 1e-12);
        assert!((e.pivot.x - 2.0).abs() < 1e-12 && e.pivot.y.abs() < 1e-12);
        assert!((e.motion - 30.0).abs() < 1e-10);
        let err = joint_errors(&e, &spec);
        assert!(err.ang_err < 1e-9 && err.pos_err.unwrap() < 1e-9 && err.motion_err < 1e-9);
    }

    #[test]
    fn flipped_axis_has_no_angular_error() {
        let spec = JointSpec::revolute(Vec3::y(), Vec3::zeros(), 0.4);
        let mut e = extract_joint(&spec.transform());
        e.axis = -e.axis;
        assert!(joint_errors(&e, &spec).ang_err < 1e-12);
    }

    #[test]
    fn parallel_axes_offset() {
        let spec = JointSpec::revolute(Vec3::z(), Vec3::zeros(), 0.5);
        let est = JointEstimate {
            kind: EstimatedKind::Revolute,
            axis: Vec3::z(),
            pivot: Vec3::new(0.2, 0.0, 5.0),
            motion: 0.5f64.to_degrees(),
        };
        assert!((joint_errors(&est, &spec).pos_err.unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn skew_line_distance() {
        // x axis and the line through (0,0,3) along y
        let d = line_distance(&Vec3::zeros(), &Vec3::x(), &Vec3::new(5.0, 0.0, 3.0), &Vec3::y());
        assert!((d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn kind_mismatch_uses_sentinels() {
        let spec = JointSpec::revolute(Vec3::z(), Vec3::zeros(), 0.5);
        let est = extract_joint(&PartTransform::identity());
        let err = joint_errors(&est, &spec);
        assert!(!err.kind_match);
        assert_eq!(err.ang_err, MISSING_AXIS_ERR_DEG);
        assert!(err.pos_err.is_none());
        assert!((err.relative_motion_err - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prismatic_motion_error() {
        let spec = JointSpec::prismatic(Vec3::x(), 0.5);
        let est = extract_joint(&PartTransform::new(nalgebra::UnitQuaternion::identity(), Vec3::new(0.49, 0.0, 0.0)));
        let err = joint_errors(&est, &spec);
        assert!((err.motion_err - 0.01).abs() < 1e-12);
        assert!(err.ang_err < 1e-12);
    }

    #[test]
    fn chamfer_examples() {
        let x = vec![Vec3::zeros()];
        let y = vec![Vec3::new(0.1, 0.0, 0.0)];
        assert!((chamfer(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(chamfer(&y, &y).unwrap(), 0.0);
        assert!(chamfer(&[], &y).is_err());
    }

    #[test]
    fn accuracy_ignores_label_permutation() {
        let truth = vec![0, 0, 1, 1, 2, 2, 2];
        let pred = vec![2, 2, 0, 1, 1, 1, 1];
        let (a, map) = part_accuracy(&pred, 3, &truth, 3).unwrap();
        assert!((a - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(map, vec![2, 0, 1]);
        let relabeled: Vec<usize> = pred.iter().map(|l| (l + 1) % 3).collect();
        assert_eq!(part_accuracy(&relabeled, 3, &truth, 3).unwrap().0, a);
    }

    #[test]
    fn accuracy_with_fewer_slots() {
        let truth = vec![0, 0, 1, 1, 2];
        let pred = vec![0, 0, 0, 0, 0];
        let (a, map) = part_accuracy(&pred, 1, &truth, 3).unwrap();
        assert!((a - 0.4).abs() < 1e-12);
        assert_eq!(map, vec![0, 0, 0]);
    }

    #[test]
    fn penetration_band() {
        let statics = vec![Vec3::zeros()];
        let movable = vec![Vec3::new(0.01, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        assert!((penetration(&movable, &statics, 0.02) - 0.005).abs() < 1e-12);
        assert_eq!(penetration(&[], &statics, 0.02), 0.0);
    }

    fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        use rand::Rng;
        (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
    }

    proptest! {
        #[test]
        fn revolute_roundtrip(seed in 0u64..1000, deg in 1.0f64..179.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let axis = random_unit_vector(&mut rng);
            let pivot = random_unit_vector(&mut rng) * 2.0;
            let spec = JointSpec::revolute(axis, pivot, deg.to_radians());
            let e = extract_joint(&spec.transform());
            prop_assert_eq!(e.kind, EstimatedKind::Revolute);
            let err = joint_errors(&e, &spec);
            prop_assert!(err.ang_err < 1e-6, "{}", err.ang_err);
            prop_assert!(err.pos_err.unwrap() < 1e-9, "{:?}", err.pos_err);
        }

        #[test]
        fn errors_ignore_axis_sign(seed in 0u64..1000, deg in 1.0f64..179.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = JointSpec::revolute(random_unit_vector(&mut rng), Vec3::zeros(), deg.to_radians());
            let est = extract_joint(&PartTransform::new(axis_angle(&random_unit_vector(&mut rng), 0.3), Vec3::zeros()));
            let flipped_gt = JointSpec { axis: -spec.axis, ..spec };
            let flipped_est = JointEstimate { axis: -est.axis, ..est };
            let base = joint_errors(&est, &spec);
            prop_assert!((joint_errors(&est, &flipped_gt).ang_err - base.ang_err).abs() < 1e-9);
            prop_assert!((joint_errors(&flipped_est, &spec).ang_err - base.ang_err).abs() < 1e-9);
        }

        #[test]
        fn chamfer_symmetric_and_monotone(seed in 0u64..500, n in 1usize..30, m in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = points(&mut rng, n);
            let y = points(&mut rng, m);
            prop_assert_eq!(chamfer(&x, &y).unwrap(), chamfer(&y, &x).unwrap());
            prop_assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
            // growing y with points of x never increases the distance
            let mut grown = y.clone();
            grown.extend_from_slice(&x[..n / 2 + 1]);
            prop_assert!(chamfer(&x, &grown).unwrap() <= chamfer(&x, &y).unwrap() + 1e-12);
        }
    }
}
