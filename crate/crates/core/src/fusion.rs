//! Cross-state matching, motion richness and the motion-aware canonical field.

use crate::error::{Error, Result};
use crate::gaussian::{GaussianRecord, SceneState};
use crate::hungarian::linear_assignment;
use crate::math::Vec3;
use crate::spatial::KdTree;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_HUNGARIAN_CUTOFF: usize = 2000;

/// Per-pair cost minimized by the assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCost {
    /// Euclidean distance between centers.
    #[default]
    Distance,
    /// Squared Euclidean distance.
    SquaredDistance,
}

impl MatchCost {
    pub fn eval(self, a: &Vec3, b: &Vec3) -> f64 {
        match self {
            MatchCost::Distance => (a - b).norm(),
            MatchCost::SquaredDistance => (a - b).norm_squared(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub cost: MatchCost,
    /// Largest point count solved exactly; bigger inputs use greedy mutual-NN.
    pub hungarian_cutoff: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { cost: MatchCost::Distance, hungarian_cutoff: DEFAULT_HUNGARIAN_CUTOFF }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(index in a, index in b)`, sorted by the `a` index.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the configured cost over all pairs.
    pub total_cost: f64,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
    /// True when the exact solver was used.
    pub exact: bool,
}

pub fn match_states(a: &[Vec3], b: &[Vec3]) -> Result<MatchResult> {
    match_states_with(a, b, &MatchConfig::default())
}

/// One-to-one matching of `a` to `b`, exact up to the configured cutoff.
///
/// Above the cutoff, pairs are formed in rounds: every remaining point finds
/// its nearest remaining partner and mutual nearest neighbors are accepted.
/// The globally closest remaining pair is always mutual, so each round makes
/// progress.
pub fn match_states_with(a: &[Vec3], b: &[Vec3], cfg: &MatchConfig) -> Result<MatchResult> {
    if a.is_empty() {
        return Err(Error::EmptyInput("first point set"));
    }
    if b.is_empty() {
        return Err(Error::EmptyInput("second point set"));
    }
    if !a.iter().chain(b).all(crate::math::is_finite3) {
        return Err(Error::InvalidParameter("non-finite center".into()));
    }
    let exact = a.len().max(b.len()) <= cfg.hungarian_cutoff;
    let mut pairs = if exact {
        let cols = b.len();
        let mut cost = vec![0.0; a.len() * cols];
        cost.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
            for (j, c) in row.iter_mut().enumerate() {
                *c = cfg.cost.eval(&a[i], &b[j]);
            }
        });
        linear_assignment(&cost, a.len(), cols)?
    } else {
        greedy_mutual(a, b)
    };
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cfg.cost.eval(&a[i], &b[j])).sum();
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    for &(i, j) in &pairs {
        used_a[i] = true;
        used_b[j] = true;
    }
    let unmatched_a = (0..a.len()).filter(|&i| !used_a[i]).collect();
    let unmatched_b = (0..b.len()).filter(|&j| !used_b[j]).collect();
    Ok(MatchResult { pairs, total_cost, unmatched_a, unmatched_b, exact })
}

fn greedy_mutual(a: &[Vec3], b: &[Vec3]) -> Vec<(usize, usize)> {
    let mut free_a: Vec<usize> = (0..a.len()).collect();
    let mut free_b: Vec<usize> = (0..b.len()).collect();
    let mut pairs = Vec::with_capacity(a.len().min(b.len()));
    while !free_a.is_empty() && !free_b.is_empty() {
        let pa: Vec<Vec3> = free_a.iter().map(|&i| a[i]).collect();
        let pb: Vec<Vec3> = free_b.iter().map(|&j| b[j]).collect();
        let ta = KdTree::new(&pa);
        let tb = KdTree::new(&pb);
        let a_to_b: Vec<usize> = pa.par_iter().map(|p| tb.nearest(p).map_or(0, |(j, _)| j)).collect();
        let b_to_a: Vec<usize> = pb.par_iter().map(|p| ta.nearest(p).map_or(0, |(i, _)| i)).collect();
        let mut taken_a = vec![false; pa.len()];
        let mut taken_b = vec![false; pb.len()];
        for (ia, &jb) in a_to_b.iter().enumerate() {
            if b_to_a[jb] == ia {
                pairs.push((free_a[ia], free_b[jb]));
                taken_a[ia] = true;
                taken_b[jb] = true;
            }
        }
        free_a = free_a.into_iter().zip(taken_a).filter(|(_, t)| !t).map(|(i, _)| i).collect();
        free_b = free_b.into_iter().zip(taken_b).filter(|(_, t)| !t).map(|(j, _)| j).collect();
    }
    pairs
}

/// Mean distance from each point of `a` to its nearest point in `b`.
pub fn motion_richness(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if b.is_empty() {
        return Err(Error::EmptyInput("target point set"));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let tree = KdTree::new(b);
    let d: Vec<f64> = a.par_iter().map(|p| tree.nearest(p).map_or(0.0, |(_, d)| d)).collect();
    Ok(d.iter().sum::<f64>() / a.len() as f64)
}

/// `d01 / (d01 + d10)`, or `0.5` when both are zero.
pub fn compute_beta(d01: f64, d10: f64) -> Result<f64> {
    if !(d01 >= 0.0 && d10 >= 0.0) || !d01.is_finite() || !d10.is_finite() {
        return Err(Error::InvalidParameter(format!("motion richness must be finite and >= 0, got {d01}, {d10}")));
    }
    let s = d01 + d10;
    Ok(if s > 0.0 { d01 / s } else { 0.5 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub d01: f64,
    pub d10: f64,
    pub beta: f64,
    pub count0: usize,
    pub count1: usize,
    pub matched: usize,
    pub match_cost: f64,
    pub exact_match: bool,
    #[serde(skip)]
    pub canonical: SceneState,
    #[serde(skip)]
    pub pairs: Vec<(usize, usize)>,
}

fn lerp(a: f64, b: f64, beta: f64) -> f64 {
    beta * a + (1.0 - beta) * b
}

fn lerp3(a: &Vec3, b: &Vec3, beta: f64) -> Vec3 {
    a * beta + b * (1.0 - beta)
}

/// Interpolates each matched pair with weight `beta` on the state-0 member.
pub fn fuse_pair(g0: &GaussianRecord, g1: &GaussianRecord, beta: f64) -> GaussianRecord {
    let t = 1.0 - beta;
    let rotation = if beta == 1.0 {
        g0.rotation
    } else if beta == 0.0 {
        g1.rotation
    } else {
        // antipodal rotations have no unique geodesic; keep the state-0 one
        g0.rotation.try_slerp(&g1.rotation, t, 1e-12).unwrap_or(g0.rotation)
    };
    GaussianRecord {
        center: lerp3(&g0.center, &g1.center, beta),
        rotation,
        scale: lerp3(&g0.scale, &g1.scale, beta),
        opacity: lerp(g0.opacity, g1.opacity, beta).clamp(0.0, 1.0),
        color: lerp3(&g0.color, &g1.color, beta),
        embedding: g0.embedding.clone(),
    }
}

pub fn fuse(state0: &SceneState, state1: &SceneState, m: &MatchResult, beta: f64) -> Result<FusionReport> {
    let d01 = motion_richness(&state0.centers(), &state1.centers())?;
    let d10 = motion_richness(&state1.centers(), &state0.centers())?;
    fuse_with_richness(state0, state1, m, beta, d01, d10)
}

fn fuse_with_richness(
    state0: &SceneState,
    state1: &SceneState,
    m: &MatchResult,
    beta: f64,
    d01: f64,
    d10: f64,
) -> Result<FusionReport> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidParameter(format!("beta {beta} outside [0,1]")));
    }
    let mut gaussians = Vec::with_capacity(m.pairs.len());
    for &(i, j) in &m.pairs {
        let (Some(g0), Some(g1)) = (state0.gaussians.get(i), state1.gaussians.get(j)) else {
            return Err(Error::IndexOutOfRange(format!("pair ({i}, {j}) for states of {} and {}", state0.len(), state1.len())));
        };
        gaussians.push(fuse_pair(g0, g1, beta));
    }
    let gt_labels = state0.gt_labels.as_ref().map(|l| m.pairs.iter().map(|&(i, _)| l[i]).collect());
    let canonical = SceneState {
        gaussians,
        state_tag: 0,
        gt_labels,
        gt_transforms: state0.gt_transforms.clone(),
    };
    Ok(FusionReport {
        d01,
        d10,
        beta,
        count0: state0.len(),
        count1: state1.len(),
        matched: m.pairs.len(),
        match_cost: m.total_cost,
        exact_match: m.exact,
        canonical,
        pairs: m.pairs.clone(),
    })
}

/// Options of the whole fusion stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub matching: MatchConfig,
    /// Use the motion-aware β; otherwise fuse at the midpoint.
    pub adaptive_beta: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { matching: MatchConfig::default(), adaptive_beta: true }
    }
}

/// Match, score motion richness, pick β and fuse.
pub fn fuse_states(state0: &SceneState, state1: &SceneState, cfg: &FusionConfig) -> Result<FusionReport> {
    let c0 = state0.centers();
    let c1 = state1.centers();
    let m = match_states_with(&c0, &c1, &cfg.matching)?;
    let d01 = motion_richness(&c0, &c1)?;
    let d10 = motion_richness(&c1, &c0)?;
    let beta = if cfg.adaptive_beta { compute_beta(d01, d10)? } else { 0.5 };
    fuse_with_richness(state0, state1, &m, beta, d01, d10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_object, presets};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn coincident_sets_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_points(&mut rng, 30);
        let m = match_states(&a, &a).unwrap();
        assert_eq!(m.total_cost, 0.0);
        assert!(m.pairs.iter().all(|(i, j)| i == j));
    }

    #[test]
    fn permuted_duplicate() {
        let a = [Vec3::zeros(), Vec3::new(10.0, 0.0, 0.0)];
        let b = [Vec3::new(10.0, 0.0, 0.0), Vec3::zeros()];
        let m = match_states(&a, &b).unwrap();
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn brute_force_small_instances_both_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cost in [MatchCost::Distance, MatchCost::SquaredDistance] {
            let cfg = MatchConfig { cost, ..Default::default() };
            for n in 1..=6 {
                let a = random_points(&mut rng, n);
                let b = random_points(&mut rng, n);
                let best = permutations(n)
                    .iter()
                    .map(|p| p.iter().enumerate().map(|(i, &j)| cost.eval(&a[i], &b[j])).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                let m = match_states_with(&a, &b, &cfg).unwrap();
                assert!((m.total_cost - best).abs() <= 1e-12 * best.max(1.0));
            }
        }
    }

    #[test]
    fn costs_can_disagree() {
        // the two metrics do not always select the same bijection
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let squared = MatchConfig { cost: MatchCost::SquaredDistance, ..Default::default() };
        let differing = (0..200)
            .filter(|_| {
                let a = random_points(&mut rng, 4);
                let b = random_points(&mut rng, 4);
                match_states(&a, &b).unwrap().pairs != match_states_with(&a, &b, &squared).unwrap().pairs
            })
            .count();
        assert!(differing > 0);
    }

    #[test]
    fn unequal_counts_report_leftovers() {
        let a = [Vec3::zeros(), Vec3::new(5.0, 0.0, 0.0), Vec3::new(9.0, 0.0, 0.0)];
        let b = [Vec3::new(5.1, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.0)];
        let m = match_states(&a, &b).unwrap();
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(m.unmatched_a, vec![2]);
        assert!(m.unmatched_b.is_empty());
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(match_states(&[], &[Vec3::zeros()]).is_err());
        assert!(match_states(&[Vec3::zeros()], &[]).is_err());
        assert!(motion_richness(&[Vec3::zeros()], &[]).is_err());
    }

    #[test]
    fn greedy_above_cutoff_is_injective_and_exact_on_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_points(&mut rng, 400);
        let b: Vec<Vec3> = a.iter().rev().map(|p| p + Vec3::repeat(1e-4)).collect();
        let cfg = MatchConfig { hungarian_cutoff: 10, ..Default::default() };
        let m = match_states_with(&a, &b, &cfg).unwrap();
        assert!(!m.exact);
        assert_eq!(m.pairs.len(), 400);
        assert!(m.pairs.iter().all(|&(i, j)| j == 399 - i));
        let c = random_points(&mut rng, 333);
        let m = match_states_with(&a, &c, &cfg).unwrap();
        let mut seen = vec![false; 333];
        for &(_, j) in &m.pairs {
            assert!(!seen[j]);
            seen[j] = true;
        }
        assert_eq!(m.pairs.len(), 333);
        assert_eq!(m.unmatched_a.len(), 67);
    }

    #[test]
    fn richness_examples() {
        assert_eq!(motion_richness(&[Vec3::zeros()], &[Vec3::x()]).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_points(&mut rng, 120);
        let b = random_points(&mut rng, 70);
        let scan = a
            .iter()
            .map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64;
        assert!((motion_richness(&a, &b).unwrap() - scan).abs() < 1e-12);
        assert_eq!(motion_richness(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn beta_examples() {
        assert_eq!(compute_beta(2.0, 2.0).unwrap(), 0.5);
        assert_eq!(compute_beta(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(compute_beta(3.0, 1.0).unwrap(), 0.75);
        assert_eq!(compute_beta(0.0, 0.0).unwrap(), 0.5);
        assert!(compute_beta(-1.0, 1.0).is_err());
    }

    #[test]
    fn fuse_endpoints_and_midpoint() {
        let mut g0 = GaussianRecord::isotropic(Vec3::zeros(), 0.1, 2);
        g0.embedding = vec![1.0, 2.0];
        let g1 = GaussianRecord::isotropic(Vec3::new(2.0, 0.0, 0.0), 0.3, 2);
        let s0 = SceneState::new(vec![g0.clone()], 0);
        let s1 = SceneState::new(vec![g1.clone()], 1);
        let m = match_states(&s0.centers(), &s1.centers()).unwrap();
        assert_eq!(fuse(&s0, &s1, &m, 1.0).unwrap().canonical.gaussians[0], g0);
        let mid = fuse(&s0, &s1, &m, 0.5).unwrap().canonical.gaussians[0].clone();
        assert_eq!(mid.center, Vec3::new(1.0, 0.0, 0.0));
        assert!((mid.scale.x - 0.2).abs() < 1e-15);
        assert_eq!(mid.embedding, vec![1.0, 2.0]);
        let mut bad = m.clone();
        bad.pairs = vec![(0, 3)];
        assert!(fuse(&s0, &s1, &bad, 0.5).is_err());
        assert!(fuse(&s0, &s1, &m, 1.5).is_err());
    }

    #[test]
    fn door_canonical_on_segments() {
        let obj = make_object(&presets::door(0)).unwrap();
        let rep = fuse_states(&obj.state0, &obj.state1, &FusionConfig::default()).unwrap();
        assert!(rep.beta > 0.0 && rep.beta < 1.0);
        for (c, &(i, j)) in rep.canonical.gaussians.iter().zip(&rep.pairs) {
            let p = obj.state0.gaussians[i].center;
            let q = obj.state1.gaussians[j].center;
            let along = (c.center - q).norm() + (c.center - p).norm();
            assert!((along - (p - q).norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn slerp_handles_rotations() {
        let mut g0 = GaussianRecord::isotropic(Vec3::zeros(), 0.1, 0);
        let mut g1 = g0.clone();
        g0.rotation = crate::math::axis_angle(&Vec3::z(), 0.0);
        g1.rotation = crate::math::axis_angle(&Vec3::z(), 1.0);
        let f = fuse_pair(&g0, &g1, 0.25);
        assert!((f.rotation.angle() - 0.75).abs() < 1e-12);
        f.validate().unwrap();
    }

    proptest! {
        #[test]
        fn beta_symmetry(x in 0.0f64..100.0, y in 0.0f64..100.0) {
            prop_assume!(x + y > 0.0);
            let s = compute_beta(x, y).unwrap() + compute_beta(y, x).unwrap();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn richness_zero_iff_covered(seed in 0u64..200, n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_points(&mut rng, n);
            let mut a: Vec<Vec3> = b.iter().take(n.div_ceil(2)).copied().collect();
            prop_assert_eq!(motion_richness(&a, &b).unwrap(), 0.0);
            a.push(Vec3::repeat(5.0));
            prop_assert!(motion_richness(&a, &b).unwrap() > 0.0);
        }
    }
}
