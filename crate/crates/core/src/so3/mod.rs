//! Rotation representations, the three pose-head parameterizations, Haar
//! sampling, geodesic distance and gauge alignment of pose sets.
//!
//! Matrices are row-major `[[f64; 3]; 3]`. A rotation `R` acts on column
//! vectors; the s2s2 head places its orthonormal frame in the columns.

pub mod dual;

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use dual::{matrix_jacobian, Scalar};

pub type Mat3 = [[f64; 3]; 3];

/// Threshold below which s2s2 inputs count as degenerate.
pub const S2S2_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum So3Error {
    NonUnitQuaternion { norm: f64 },
    /// s2s2 input with a (near-)zero first vector or collinear second vector.
    Degenerate,
    EmptyPoseSet,
    LengthMismatch { est: usize, gt: usize },
}

impl fmt::Display for So3Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            So3Error::NonUnitQuaternion { norm } => {
                write!(f, "quaternion norm {norm} is not 1 within 1e-6")
            }
            So3Error::Degenerate => f.write_str("degenerate s2s2 parameters"),
            So3Error::EmptyPoseSet => f.write_str("pose set is empty"),
            So3Error::LengthMismatch { est, gt } => {
                write!(f, "pose sets differ in length ({est} vs {gt})")
            }
        }
    }
}

impl core::error::Error for So3Error {}

/// Which parameterization turns the encoder's raw output into a rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Euler,
    Quaternion,
    S2s2,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Euler, HeadKind::Quaternion, HeadKind::S2s2];

    pub fn raw_dim(self) -> usize {
        match self {
            HeadKind::Euler | HeadKind::Quaternion => 3,
            HeadKind::S2s2 => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Euler => "euler",
            HeadKind::Quaternion => "quaternion",
            HeadKind::S2s2 => "s2s2",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(Mat3);

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix =
        RotationMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Wraps a matrix the caller knows to be a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        RotationMatrix(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn about_z(angle: f64) -> Self {
        RotationMatrix(rz(angle))
    }

    pub fn about_y(angle: f64) -> Self {
        RotationMatrix(ry(angle))
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(transpose(&self.0))
    }

    pub fn compose(&self, rhs: &RotationMatrix) -> Self {
        RotationMatrix(matmul3(&self.0, &rhs.0))
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        apply3(&self.0, v)
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.0)
    }

    pub fn det(&self) -> f64 {
        det3(&self.0)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.orthonormality_error() <= tol && (self.det() - 1.0).abs() <= tol
    }

    /// Unit quaternion with non-negative scalar part (Shepperd's method).
    pub fn to_quaternion(&self) -> UnitQuaternion {
        let m = &self.0;
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > 0.0 {
            let s = libm::sqrt(tr + 1.0) * 2.0;
            [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = libm::sqrt(1.0 + m[0][0] - m[1][1] - m[2][2]) * 2.0;
            [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
        } else if m[1][1] > m[2][2] {
            let s = libm::sqrt(1.0 + m[1][1] - m[0][0] - m[2][2]) * 2.0;
            [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
        } else {
            let s = libm::sqrt(1.0 + m[2][2] - m[0][0] - m[1][1]) * 2.0;
            [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
        };
        let q = if q[0] < 0.0 { q.map(|x| -x) } else { q };
        UnitQuaternion::normalized(q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// `q = (q1, q2, q3, q4)` with `q1` the scalar part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion([f64; 4]);

impl UnitQuaternion {
    /// Accepts `q` if its norm is within 1e-6 of one, then renormalizes.
    pub fn new(q: [f64; 4]) -> Result<Self, So3Error> {
        let norm = norm4(&q);
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(So3Error::NonUnitQuaternion { norm });
        }
        Ok(Self::normalized(q))
    }

    /// Keeps `q` verbatim when its norm is within 1e-12 of one, so stored
    /// quaternions reload bit for bit; otherwise behaves like [`Self::new`].
    pub fn from_stored(q: [f64; 4]) -> Result<Self, So3Error> {
        if (norm4(&q) - 1.0).abs() <= 1e-12 {
            Ok(UnitQuaternion(q))
        } else {
            Self::new(q)
        }
    }

    pub fn normalized(q: [f64; 4]) -> Self {
        let n = norm4(&q);
        UnitQuaternion(q.map(|x| x / n))
    }

    pub fn components(&self) -> [f64; 4] {
        self.0
    }

    pub fn neg(&self) -> Self {
        UnitQuaternion(self.0.map(|x| -x))
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        let [a1, b1, c1, d1] = self.0;
        let [a2, b2, c2, d2] = rhs.0;
        UnitQuaternion([
            a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
        ])
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> UnitQuaternion {
        let n = norm3(&axis);
        let s = libm::sin(angle / 2.0) / n;
        UnitQuaternion([libm::cos(angle / 2.0), axis[0] * s, axis[1] * s, axis[2] * s])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct S2S2Param {
    pub v1: [f64; 3],
    pub v2: [f64; 3],
}

// ---- generic maps (shared by the plain API and the autodiff heads) -------

fn rz_g<S: Scalar>(t: S) -> [[S; 3]; 3] {
    let (c, s) = (t.cos(), t.sin());
    let (o, z) = (S::cst(1.0), S::cst(0.0));
    [[c, -s, z], [s, c, z], [z, z, o]]
}

fn ry_g<S: Scalar>(t: S) -> [[S; 3]; 3] {
    let (c, s) = (t.cos(), t.sin());
    let (o, z) = (S::cst(1.0), S::cst(0.0));
    [[c, z, s], [z, o, z], [-s, z, c]]
}

fn matmul_g<S: Scalar>(a: &[[S; 3]; 3], b: &[[S; 3]; 3]) -> [[S; 3]; 3] {
    let mut out = [[S::cst(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// ZYZ Euler angles: `Rz(a) Ry(b) Rz(c)`.
pub fn euler_g<S: Scalar>(e: [S; 3]) -> [[S; 3]; 3] {
    matmul_g(&matmul_g(&rz_g(e[0]), &ry_g(e[1])), &rz_g(e[2]))
}

/// Exponential map from an axis-angle 3-vector to a unit quaternion. Small
/// angles use the Taylor series in `|v|^2`, which stays differentiable at 0.
pub fn expmap_g<S: Scalar>(v: [S; 3]) -> [S; 4] {
    let t2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let (c, k) = if t2.val() < 1e-6 {
        let t4 = t2 * t2;
        (
            S::cst(1.0) - t2 / S::cst(8.0) + t4 / S::cst(384.0) - t4 * t2 / S::cst(46080.0),
            S::cst(0.5) - t2 / S::cst(48.0) + t4 / S::cst(3840.0) - t4 * t2 / S::cst(645120.0),
        )
    } else {
        let t = t2.sqrt();
        let h = t / S::cst(2.0);
        (h.cos(), h.sin() / t)
    };
    [c, k * v[0], k * v[1], k * v[2]]
}

pub fn quat_matrix_g<S: Scalar>(q: [S; 4]) -> [[S; 3]; 3] {
    let [w, x, y, z] = q;
    let one = S::cst(1.0);
    let two = S::cst(2.0);
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// Gram-Schmidt on `(v1, v2)`; columns of the result are `w1, w2, w1 x w2`.
pub fn s2s2_g<S: Scalar>(p: [S; 6]) -> Result<[[S; 3]; 3], So3Error> {
    let v1 = [p[0], p[1], p[2]];
    let v2 = [p[3], p[4], p[5]];
    let n1 = (v1[0] * v1[0] + v1[1] * v1[1] + v1[2] * v1[2]).sqrt();
    if !(n1.val() > S2S2_EPS) {
        return Err(So3Error::Degenerate);
    }
    let w1 = [v1[0] / n1, v1[1] / n1, v1[2] / n1];
    let d = v2[0] * w1[0] + v2[1] * w1[1] + v2[2] * w1[2];
    let u = [v2[0] - d * w1[0], v2[1] - d * w1[1], v2[2] - d * w1[2]];
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if !(nu.val() > S2S2_EPS) {
        return Err(So3Error::Degenerate);
    }
    let w2 = [u[0] / nu, u[1] / nu, u[2] / nu];
    let w3 = [
        w1[1] * w2[2] - w1[2] * w2[1],
        w1[2] * w2[0] - w1[0] * w2[2],
        w1[0] * w2[1] - w1[1] * w2[0],
    ];
    Ok([[w1[0], w2[0], w3[0]], [w1[1], w2[1], w3[1]], [w1[2], w2[2], w3[2]]])
}

/// Routes a raw head output through the matching parameterization.
pub fn head_matrix<S: Scalar>(kind: HeadKind, raw: &[S]) -> Result<[[S; 3]; 3], So3Error> {
    assert_eq!(raw.len(), kind.raw_dim(), "{} head expects {} values", kind.name(), kind.raw_dim());
    match kind {
        HeadKind::Euler => Ok(euler_g([raw[0], raw[1], raw[2]])),
        HeadKind::Quaternion => Ok(quat_matrix_g(expmap_g([raw[0], raw[1], raw[2]]))),
        HeadKind::S2s2 => s2s2_g([raw[0], raw[1], raw[2], raw[3], raw[4], raw[5]]),
    }
}

/// Row-major `9 x raw_dim` Jacobian of [`head_matrix`] at `raw`.
pub fn head_jacobian(kind: HeadKind, raw: &[f64]) -> Result<Vec<f64>, So3Error> {
    let flat = |rows: &[[f64; 6]], k: usize| -> Vec<f64> {
        rows.iter().flat_map(|r| r[..k].iter().copied()).collect()
    };
    match kind {
        HeadKind::Euler | HeadKind::Quaternion => {
            let j = matrix_jacobian(
                |x| head_matrix(kind, &x).expect("3-parameter heads are total"),
                [raw[0], raw[1], raw[2]],
            );
            let rows: Vec<[f64; 6]> =
                j.iter().map(|r| [r[0], r[1], r[2], 0.0, 0.0, 0.0]).collect();
            Ok(flat(&rows, 3))
        }
        HeadKind::S2s2 => {
            s2s2_g([raw[0], raw[1], raw[2], raw[3], raw[4], raw[5]])?;
            let j = matrix_jacobian(
                |x| s2s2_g(x).expect("checked non-degenerate above"),
                [raw[0], raw[1], raw[2], raw[3], raw[4], raw[5]],
            );
            Ok(flat(&j, 6))
        }
    }
}

// ---- plain API ------------------------------------------------------------

pub fn euler_to_matrix(e: &EulerAngles) -> RotationMatrix {
    RotationMatrix(euler_g([e.alpha, e.beta, e.gamma]))
}

pub fn raw3_to_quaternion(v: [f64; 3]) -> UnitQuaternion {
    UnitQuaternion::normalized(expmap_g(v))
}

pub fn quaternion_to_matrix(q: &UnitQuaternion) -> RotationMatrix {
    RotationMatrix(quat_matrix_g(q.0))
}

pub fn s2s2_to_matrix(p: &S2S2Param) -> Result<RotationMatrix, So3Error> {
    let [a, b, c] = p.v1;
    let [d, e, f] = p.v2;
    s2s2_g([a, b, c, d, e, f]).map(RotationMatrix)
}

/// Haar-uniform rotation from a normalized 4D Gaussian quaternion.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
    loop {
        let q: [f64; 4] = core::array::from_fn(|_| StandardNormal.sample(rng));
        if norm4(&q) > 1e-6 {
            return quaternion_to_matrix(&UnitQuaternion::normalized(q));
        }
    }
}

/// Rotation angle of `R1^T R2` in radians, in `[0, pi]`.
///
/// Evaluated as `atan2(sin w, cos w)`, which equals the clamped
/// `arccos((tr - 1) / 2)` but keeps full precision near 0 and pi.
pub fn geodesic_distance(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    let r = matmul3(&transpose(&a.0), &b.0);
    let cos = ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let sx = r[2][1] - r[1][2];
    let sy = r[0][2] - r[2][0];
    let sz = r[1][0] - r[0][1];
    let sin = 0.5 * libm::sqrt(sx * sx + sy * sy + sz * sz);
    libm::atan2(sin, cos)
}

/// Best right-multiplied gauge `G` minimizing `sum |est_i G - gt_i|_F^2`
/// (orthogonal Procrustes with determinant correction) and the resulting
/// mean geodesic error in degrees.
pub fn align_pose_sets(
    est: &[RotationMatrix],
    gt: &[RotationMatrix],
) -> Result<(RotationMatrix, f64), So3Error> {
    if est.len() != gt.len() {
        return Err(So3Error::LengthMismatch { est: est.len(), gt: gt.len() });
    }
    if est.is_empty() {
        return Err(So3Error::EmptyPoseSet);
    }
    let mut m = Matrix3::<f64>::zeros();
    for (e, g) in est.iter().zip(gt) {
        m += to_na(&e.0).transpose() * to_na(&g.0);
    }
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let vt = svd.v_t.expect("svd computed with v_t");
    let d = if (u * vt).determinant() < 0.0 { -1.0 } else { 1.0 };
    let g = u * Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d)) * vt;
    let gauge = RotationMatrix(from_na(&g));
    let mae = mean_error_deg(est, gt, &gauge);
    Ok((gauge, mae))
}

/// Mean geodesic distance in degrees between `est_i G` and `gt_i`.
pub fn mean_error_deg(est: &[RotationMatrix], gt: &[RotationMatrix], gauge: &RotationMatrix) -> f64 {
    let total: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| geodesic_distance(&e.compose(gauge), g))
        .sum();
    total / est.len() as f64 * 180.0 / PI
}

/// `J R J` with `J = diag(1, 1, -1)`: the pose a mirrored map needs in order
/// to produce the same z-projection as `R` does for the original map.
pub fn mirror_conjugate(r: &RotationMatrix) -> RotationMatrix {
    let mut m = r.0;
    m[0][2] = -m[0][2];
    m[1][2] = -m[1][2];
    m[2][0] = -m[2][0];
    m[2][1] = -m[2][1];
    RotationMatrix(m)
}

// ---- small matrix helpers ----------------------------------------------------

pub fn rz(t: f64) -> Mat3 {
    rz_g(t)
}

pub fn ry(t: f64) -> Mat3 {
    ry_g(t)
}

pub fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    matmul_g(a, b)
}

pub fn transpose(m: &Mat3) -> Mat3 {
    core::array::from_fn(|i| core::array::from_fn(|j| m[j][i]))
}

pub fn apply3(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    core::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Max-abs entry of `M^T M - I`.
pub fn orthonormality_error(m: &Mat3) -> f64 {
    let p = matmul3(&transpose(m), m);
    let mut err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((p[i][j] - target).abs());
        }
    }
    err
}

fn norm3(v: &[f64; 3]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

fn norm4(q: &[f64; 4]) -> f64 {
    libm::sqrt(q.iter().map(|x| x * x).sum())
}

fn to_na(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

fn from_na(m: &Matrix3<f64>) -> Mat3 {
    core::array::from_fn(|i| core::array::from_fn(|j| m[(i, j)]))
}

#[cfg(test)]
pub(crate) mod tests;
