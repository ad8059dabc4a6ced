//! Small quaternion and rotation helpers shared across modules.
//!
//! Raw quaternions are stored as `[w, x, y, z]` arrays when they are
//! optimizer parameters; everything else goes through nalgebra types.

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Convert a `[w, x, y, z]` array to a unit quaternion (normalizing it).
pub fn quat_from_wxyz(q: &[f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

pub fn quat_to_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Rotation matrix of a quaternion given as `[w, x, y, z]`.
///
/// The quaternion must already be unit-norm; the polynomial form is used so
/// that [`rotation_matrix_vjp`] is its exact derivative.
pub fn rotation_matrix(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pull a gradient `g = dL/dR` back onto the quaternion components of
/// [`rotation_matrix`].
pub fn rotation_matrix_vjp(q: &[f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

pub fn norm4(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn normalize4(q: &[f64; 4]) -> [f64; 4] {
    let n = norm4(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Gradient through `q / |q|`: `(I - n nᵀ) g / |q|`.
pub fn normalize4_vjp(raw: &[f64; 4], g: &[f64; 4]) -> [f64; 4] {
    let len = norm4(raw);
    let n = [raw[0] / len, raw[1] / len, raw[2] / len, raw[3] / len];
    let dot = n[0] * g[0] + n[1] * g[1] + n[2] * g[2] + n[3] * g[3];
    [
        (g[0] - n[0] * dot) / len,
        (g[1] - n[1] * dot) / len,
        (g[2] - n[2] * dot) / len,
        (g[3] - n[3] * dot) / len,
    ]
}

/// Geodesic angle in radians between two unit quaternions.
pub fn geodesic_angle(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]).abs().min(1.0);
    2.0 * dot.acos()
}

/// Gradient of [`geodesic_angle`] with respect to the unit quaternion `a`.
///
/// Zero at (and numerically near) coincidence, where the angle has a kink.
pub fn geodesic_angle_grad(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
    let c = dot.abs();
    let s2 = 1.0 - c * c;
    if s2 <= 1e-24 {
        return [0.0; 4];
    }
    let scale = -2.0 * dot.signum() / s2.sqrt();
    [scale * b[0], scale * b[1], scale * b[2], scale * b[3]]
}

/// Rotation by `angle` radians about `axis` (need not be unit).
pub fn axis_angle(axis: &Vec3, angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Unit::new_normalize(*axis), angle)
}

/// Uniformly random axis with an angle drawn uniformly from `[0, max_angle]`.
pub fn random_rotation_within<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> UnitQuaternion<f64> {
    let axis = random_unit_vector(rng);
    let angle = rng.random_range(0.0..=max_angle);
    axis_angle(&axis, angle)
}

pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Uniformly random rotation (Shoemake).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    UnitQuaternion::from_quaternion(Quaternion::new(a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos()))
}

pub fn is_finite3(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn polynomial_matrix_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random_rotation(&mut rng);
            let m = rotation_matrix(&quat_to_wxyz(&q));
            let diff = (m - q.to_rotation_matrix().into_inner()).abs().max();
            assert!(diff < 1e-14, "{diff}");
        }
    }

    #[test]
    fn matrix_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = quat_to_wxyz(&random_rotation(&mut rng));
        let g = Mat3::from_fn(|r, c| ((r * 3 + c) as f64 * 0.37).sin());
        let analytic = rotation_matrix_vjp(&q, &g);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fp = rotation_matrix(&qp).component_mul(&g).sum();
            let fm = rotation_matrix(&qm).component_mul(&g).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-8, "{k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn geodesic_angle_of_quarter_turn() {
        let a = quat_to_wxyz(&UnitQuaternion::identity());
        let b = quat_to_wxyz(&axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2));
        assert!((geodesic_angle(&a, &b) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        // double cover
        let nb = [-b[0], -b[1], -b[2], -b[3]];
        assert!((geodesic_angle(&a, &nb) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
