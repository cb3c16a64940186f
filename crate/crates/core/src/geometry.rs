//! Rotation and translation representations, error metrics and quaternion
//! averaging.
//!
//! Poses live in a flat 9-dimensional space: the first two columns of the
//! rotation matrix (the continuous 6D representation) followed by the
//! translation. Angles are radians internally and degrees at the API edge.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type RotationMatrix = Matrix3<f64>;

/// Dimension of the flat pose vector.
pub const POSE_DIM: usize = 9;

const DEGENERATE_EPS: f64 = 1e-8;
const EIGEN_GAP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),
    #[error("degenerate quaternion average: top eigenvalues {0} and {1} coincide")]
    DegenerateAverage(f64, f64),
    #[error("cannot average an empty set of quaternions")]
    EmptyAverage,
}

/// Unit quaternion stored in the canonical hemisphere (`w >= 0`, ties broken
/// by the first nonzero vector component being positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes and canonicalizes. Returns `None` for a (near) zero input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !(n > 1e-12) || !n.is_finite() {
            return None;
        }
        Some(Self { w: w / n, x: x / n, y: y / n, z: z / n }.canonical())
    }

    /// Wraps components that are already unit norm and canonical, as read
    /// back from a dataset file. No renormalization so round-trips are exact.
    pub(crate) fn from_raw(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    fn canonical(self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            self
        }
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    /// Components in `[w, x, y, z]` order.
    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    fn to_vector4(self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn from_axis_angle(axis: &Vec3, angle_rad: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle_rad).sin_cos();
        Self::new(c, s * a.x, s * a.y, s * a.z).expect("unit axis")
    }

    pub fn to_matrix(&self) -> RotationMatrix {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
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

    /// Shepperd's method: branch on the largest of the four squared
    /// components to keep the division well conditioned.
    pub fn from_matrix(r: &RotationMatrix) -> Self {
        let tr = r.trace();
        let (w, x, y, z);
        if tr > r[(0, 0)] && tr > r[(1, 1)] && tr > r[(2, 2)] {
            let s = (1.0 + tr).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Self::new(w, x, y, z).expect("rotation matrix yields a nonzero quaternion")
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }
}

/// First two columns of a rotation matrix, before orthonormalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D {
    pub a1: Vec3,
    pub a2: Vec3,
}

impl Rotation6D {
    pub fn from_matrix(r: &RotationMatrix) -> Self {
        Self { a1: r.column(0).into_owned(), a2: r.column(1).into_owned() }
    }

    pub fn to_matrix(&self) -> Result<RotationMatrix, GeometryError> {
        rot6d_to_matrix(self)
    }
}

/// Gram-Schmidt decode of the 6D representation.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<RotationMatrix, GeometryError> {
    let n1 = r.a1.norm();
    if !(n1 > DEGENERATE_EPS) {
        return Err(GeometryError::DegenerateRotation("first column has vanishing norm"));
    }
    let b1 = r.a1 / n1;
    let u2 = r.a2 - b1 * b1.dot(&r.a2);
    let n2 = u2.norm();
    if !(n2 > DEGENERATE_EPS * r.a2.norm().max(1.0)) {
        return Err(GeometryError::DegenerateRotation("second column parallel to the first"));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Rotation plus translation, flattened as `[a1, a2, t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rot: Rotation6D,
    pub t: Vec3,
}

impl Pose {
    pub fn from_rotation(r: &RotationMatrix, t: Vec3) -> Self {
        Self { rot: Rotation6D::from_matrix(r), t }
    }

    pub fn from_quaternion(q: &UnitQuaternion, t: Vec3) -> Self {
        Self::from_rotation(&q.to_matrix(), t)
    }

    pub fn from_vector(v: &[f64]) -> Self {
        assert_eq!(v.len(), POSE_DIM, "pose vectors have {POSE_DIM} entries");
        Self {
            rot: Rotation6D { a1: Vec3::new(v[0], v[1], v[2]), a2: Vec3::new(v[3], v[4], v[5]) },
            t: Vec3::new(v[6], v[7], v[8]),
        }
    }

    pub fn to_vector(&self) -> [f64; POSE_DIM] {
        let (a1, a2, t) = (&self.rot.a1, &self.rot.a2, &self.t);
        [a1.x, a1.y, a1.z, a2.x, a2.y, a2.z, t.x, t.y, t.z]
    }

    pub fn rotation_matrix(&self) -> Result<RotationMatrix, GeometryError> {
        rot6d_to_matrix(&self.rot)
    }

    pub fn quaternion(&self) -> Result<UnitQuaternion, GeometryError> {
        Ok(UnitQuaternion::from_matrix(&self.rotation_matrix()?))
    }
}

/// Rodrigues rotation about `axis` (normalized internally).
pub fn rotation_about(axis: &Vec3, angle_rad: f64) -> RotationMatrix {
    let k = axis.normalize();
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    let (s, c) = angle_rad.sin_cos();
    Matrix3::identity() + kx * s + kx * kx * (1.0 - c)
}

/// Largest deviation of `RᵀR` from identity, and `det R`.
pub fn orthonormality_defect(r: &RotationMatrix) -> (f64, f64) {
    let e = r.transpose() * r - Matrix3::identity();
    (e.abs().max(), r.determinant())
}

/// Geodesic angle on SO(3) in degrees, in `[0, 180]`.
pub fn geodesic_angle_deg(r1: &RotationMatrix, r2: &RotationMatrix) -> f64 {
    let c = (((r1.transpose() * r2).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Angle in degrees between the images of `axis` under both rotations. Spins
/// about `axis` do not change it.
pub fn symmetry_aware_angle_deg(r1: &RotationMatrix, r2: &RotationMatrix, axis: &Vec3) -> f64 {
    let v1 = r1 * axis;
    let v2 = r2 * axis;
    v1.cross(&v2).norm().atan2(v1.dot(&v2)).to_degrees()
}

pub fn translation_error(t1: &Vec3, t2: &Vec3) -> f64 {
    (t1 - t2).norm()
}

/// Eigen-decomposition of a symmetric 4x4 matrix by cyclic Jacobi sweeps.
/// Returns eigenvalues and the matching eigenvectors (as columns), unsorted.
pub fn jacobi_eigen_sym4(m: &Matrix4<f64>) -> (Vector4<f64>, Matrix4<f64>) {
    let mut a = *m;
    let mut v = Matrix4::<f64>::identity();
    let scale = a.abs().max().max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..4 {
            for q in (p + 1)..4 {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-17 * scale {
            break;
        }
        for p in 0..4 {
            for q in (p + 1)..4 {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..4 {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (a.diagonal(), v)
}

/// The scatter matrix `(1/n) Σ qᵢqᵢᵀ` after aligning every quaternion to
/// the hemisphere of the first. Negating any input leaves it bit-identical.
pub fn quaternion_scatter(qs: &[Vector4<f64>]) -> Matrix4<f64> {
    let mut m = Matrix4::<f64>::zeros();
    let Some(first) = qs.first() else {
        return m;
    };
    for q in qs {
        let v = if q.dot(first) < 0.0 { -q } else { *q };
        m += v * v.transpose();
    }
    m / qs.len() as f64
}

/// Rotation average as the dominant eigenvector of the quaternion scatter
/// matrix.
pub fn average_quaternions(qs: &[UnitQuaternion]) -> Result<UnitQuaternion, GeometryError> {
    let vs: Vec<Vector4<f64>> = qs.iter().map(|q| q.to_vector4()).collect();
    average_quaternion_vectors(&vs)
}

/// As [`average_quaternions`], on unit 4-vectors `(w, x, y, z)` in either
/// hemisphere.
pub fn average_quaternion_vectors(qs: &[Vector4<f64>]) -> Result<UnitQuaternion, GeometryError> {
    if qs.is_empty() {
        return Err(GeometryError::EmptyAverage);
    }
    let m = quaternion_scatter(qs);
    let (vals, vecs) = jacobi_eigen_sym4(&m);
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    let (top, second) = (vals[order[0]], vals[order[1]]);
    if top - second <= EIGEN_GAP_EPS {
        return Err(GeometryError::DegenerateAverage(top, second));
    }
    let e = vecs.column(order[0]);
    Ok(UnitQuaternion::new(e[0], e[1], e[2], e[3]).expect("eigenvectors are unit norm"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut impl Rng) -> Vec3 {
        loop {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() < 1.0 {
                return v.normalize();
            }
        }
    }

    #[test]
    fn canonical_basis_decodes_to_identity() {
        let r = Rotation6D { a1: Vec3::x(), a2: Vec3::y() };
        assert_eq!(r.to_matrix().unwrap(), Matrix3::identity());
        let scaled = Rotation6D { a1: Vec3::x() * 2.0, a2: Vec3::y() * 3.0 };
        assert_eq!(scaled.to_matrix().unwrap(), Matrix3::identity());
    }

    #[test]
    fn degenerate_6d_is_rejected() {
        let zero = Rotation6D { a1: Vec3::zeros(), a2: Vec3::y() };
        assert!(matches!(zero.to_matrix(), Err(GeometryError::DegenerateRotation(_))));
        let parallel = Rotation6D { a1: Vec3::x(), a2: Vec3::x() * 4.0 };
        assert!(matches!(parallel.to_matrix(), Err(GeometryError::DegenerateRotation(_))));
    }

    #[test]
    fn decoded_rotation_is_proper_and_keeps_first_direction() {
        let r = Rotation6D { a1: Vec3::new(0.3, -2.0, 0.7), a2: Vec3::new(1.0, 0.2, 0.4) };
        let m = r.to_matrix().unwrap();
        let (defect, det) = orthonormality_defect(&m);
        assert!(defect < 1e-12);
        assert_abs_diff_eq!(det, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.column(0).into_owned(), r.a1.normalize(), epsilon = 1e-15);
    }

    #[test]
    fn quaternion_canonical_hemisphere() {
        let q = UnitQuaternion::new(-0.5, 0.5, -0.5, 0.5).unwrap();
        assert!(q.w() > 0.0);
        let tie = UnitQuaternion::new(0.0, -1.0, 0.0, 0.0).unwrap();
        assert_eq!(tie.to_array(), [0.0, 1.0, 0.0, 0.0]);
        let tie_y = UnitQuaternion::new(0.0, 0.0, -3.0, 4.0).unwrap();
        assert_eq!(tie_y.to_array(), [0.0, 0.0, 0.6, -0.8]);
        assert!(UnitQuaternion::new(0.0, 0.0, 0.0, 0.0).is_none());
    }

    #[test]
    fn quaternion_and_its_negation_decode_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let axis = random_unit(&mut rng);
            let q = UnitQuaternion::from_axis_angle(&axis, rng.random_range(0.0..3.1));
            let neg = UnitQuaternion::from_raw(-q.w(), -q.x(), -q.y(), -q.z());
            assert_eq!(q.to_matrix(), neg.to_matrix());
        }
    }

    #[test]
    fn matrix_quaternion_round_trip_across_branches() {
        // 180 degree turns exercise each of the Shepperd branches.
        for axis in [Vec3::x(), Vec3::y(), Vec3::z(), Vec3::new(1.0, 1.0, 0.0)] {
            for angle in [0.0, 0.4, 2.0, std::f64::consts::PI] {
                let r = rotation_about(&axis, angle);
                let back = UnitQuaternion::from_matrix(&r).to_matrix();
                assert!((back - r).norm() < 1e-12, "axis {axis:?} angle {angle}");
            }
        }
    }

    #[test]
    fn geodesic_angle_cases() {
        let r = rotation_about(&Vec3::new(0.2, 0.5, -1.0), 0.8);
        assert!(geodesic_angle_deg(&r, &r) < 1e-5);
        let half_turn = rotation_about(&Vec3::z(), std::f64::consts::PI);
        assert_abs_diff_eq!(geodesic_angle_deg(&Matrix3::identity(), &half_turn), 180.0, epsilon = 1e-9);
    }

    #[test]
    fn symmetry_aware_angle_ignores_spin_about_axis() {
        let r1 = rotation_about(&Vec3::new(1.0, -0.3, 0.2), 1.1);
        let spun = r1 * rotation_about(&Vec3::z(), 57f64.to_radians());
        assert!(symmetry_aware_angle_deg(&r1, &spun, &Vec3::z()) < 1e-12);
        assert!(symmetry_aware_angle_deg(&r1, &r1, &Vec3::z()) < 1e-12);
        // Tilt about an axis orthogonal to the symmetry axis moves it by the
        // full tilt angle.
        let tilted = r1 * rotation_about(&Vec3::x(), 23f64.to_radians());
        assert_abs_diff_eq!(symmetry_aware_angle_deg(&r1, &tilted, &Vec3::z()), 23.0, epsilon = 1e-10);
    }

    #[test]
    fn translation_error_cases() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(translation_error(&v, &v), 0.0);
        assert_abs_diff_eq!(translation_error(&Vec3::zeros(), &Vec3::new(0.03, 0.04, 0.0)), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn average_of_repeated_quaternion() {
        let q = UnitQuaternion::from_axis_angle(&Vec3::new(0.3, 0.1, -0.9), 0.7);
        let avg = average_quaternions(&[q, q, q]).unwrap();
        assert_abs_diff_eq!(avg.dot(&q).abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn average_of_antipodal_pair_is_same_rotation() {
        let q = UnitQuaternion::from_axis_angle(&Vec3::new(0.3, 0.1, -0.9), 0.7);
        let neg = UnitQuaternion::from_raw(-q.w(), -q.x(), -q.y(), -q.z());
        let avg = average_quaternions(&[q, neg]).unwrap();
        assert!((avg.to_matrix() - q.to_matrix()).norm() < 1e-12);
    }

    #[test]
    fn degenerate_average_is_reported() {
        // Two rotations 180 degrees apart: the scatter matrix has a doubled
        // top eigenvalue.
        let a = UnitQuaternion::IDENTITY;
        let b = UnitQuaternion::new(0.0, 0.0, 0.0, 1.0).unwrap();
        assert!(matches!(average_quaternions(&[a, b]), Err(GeometryError::DegenerateAverage(..))));
        assert_eq!(average_quaternions(&[]), Err(GeometryError::EmptyAverage));
    }

    #[test]
    fn jacobi_diagonalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let m = b + b.transpose();
        let (vals, vecs) = jacobi_eigen_sym4(&m);
        let recon = vecs * Matrix4::from_diagonal(&vals) * vecs.transpose();
        assert!((recon - m).norm() < 1e-12);
        assert!((vecs.transpose() * vecs - Matrix4::identity()).norm() < 1e-12);
    }
}
