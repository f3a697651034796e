//! Rigid and similarity transforms.
//!
//! A [`Pose`] stores a camera-to-world transform as a full 3×3 rotation
//! matrix plus a translation. World points map into camera `t` through the
//! inverse, and the relative pose taking frame `t` camera coordinates to an
//! anchor frame `x` is `inverse(c_x) * c_t`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::KdTree;

/// Number of compositions after which the rotation block is projected back
/// onto SO(3).
pub const REORTHONORMALIZE_EVERY: u32 = 64;

/// `trace(R)` at or below `-1 + LOG_NEAR_PI_MARGIN` is rejected by [`log_map`].
pub const LOG_NEAR_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle too close to pi for a unique logarithm (trace = {trace})")]
    LogNearPi { trace: f64 },
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    #[serde(skip)]
    chain: u32,
}

/// Compares rotation and translation; the composition counter is ignored.
impl PartialEq for Pose {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            chain: 0,
        }
    }

    /// Builds a pose from a rotation matrix, projecting it onto SO(3).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: nearest_rotation(&rotation),
            translation,
            chain: 0,
        }
    }

    /// Builds a pose without re-projecting the rotation. The caller guarantees
    /// that `rotation` is already orthonormal.
    pub fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            chain: 0,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::from_parts_unchecked(Matrix3::identity(), translation)
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Camera-to-world pose for a camera at `eye` whose optical axis (+z)
    /// points at `target`. `up` fixes the roll; the camera's -y axis is
    /// aligned with it as far as possible.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = (-up).cross(&z);
        if x.norm() < 1e-12 {
            x = Vector3::x().cross(&z);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Self::from_parts_unchecked(rotation, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
            chain: self.chain,
        }
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let chain = self.chain.max(other.chain) + 1;
        let mut out = Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            chain,
        };
        if chain >= REORTHONORMALIZE_EVERY {
            out.rotation = nearest_rotation(&out.rotation);
            out.chain = 0;
        }
        out
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// `‖RᵀR − I‖_F`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// `compose(a, b)` applies `b` first.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

pub fn transform_point(p: &Pose, x: &Vector3<f64>) -> Vector3<f64> {
    p.transform_point(x)
}

/// Relative pose taking camera-`t` coordinates to anchor camera-`x`
/// coordinates, from two camera-to-world poses: `inverse(c_x) * c_t`.
pub fn relative_pose(c_t: &Pose, c_x: &Pose) -> Pose {
    c_x.inverse().compose(c_t)
}

/// Six-dimensional tangent: rotation vector `omega` and translational part
/// `upsilon`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseTangent {
    pub omega: Vector3<f64>,
    pub upsilon: Vector3<f64>,
}

impl PoseTangent {
    pub fn new(omega: Vector3<f64>, upsilon: Vector3<f64>) -> Self {
        Self { omega, upsilon }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            omega: Vector3::new(v[0], v[1], v[2]),
            upsilon: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.upsilon.x,
            self.upsilon.y,
            self.upsilon.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = hat(omega);
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3): `exp(omega + d) ≈ exp(J_l(omega) d) exp(omega)`.
pub fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = hat(omega);
    let (b, c) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * b + k * k * c
}

fn so3_left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = hat(omega);
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = 0.5 * vee(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Rotation vector of `r`. Accurate up to the [`log_map`] cutoff near pi.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let trace = r.trace();
    if trace <= -1.0 + LOG_NEAR_PI_MARGIN {
        return Err(GeometryError::LogNearPi { trace });
    }
    let v = vee(&(r - r.transpose()));
    let theta = rotation_angle(r);
    if theta < 1e-6 {
        return Ok(v * (0.5 * (1.0 + theta * theta / 6.0)));
    }
    if theta < 3.0 {
        return Ok(v * (theta / (2.0 * theta.sin())));
    }
    // Close to pi the antisymmetric part is tiny; recover the axis from the
    // symmetric part and the sign from `v`.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * theta.cos();
    let (mut best, mut best_val) = (0, sym[(0, 0)]);
    for i in 1..3 {
        if sym[(i, i)] > best_val {
            best = i;
            best_val = sym[(i, i)];
        }
    }
    let mut axis = sym.column(best).into_owned().normalize();
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Exponential map of SE(3).
pub fn exp_map(t: &PoseTangent) -> Pose {
    let r = so3_exp(&t.omega);
    let v = so3_left_jacobian(&t.omega);
    Pose::from_parts_unchecked(r, v * t.upsilon)
}

/// Logarithm of SE(3); fails when the rotation angle is within numerical
/// reach of pi.
pub fn log_map(p: &Pose) -> Result<PoseTangent, GeometryError> {
    let omega = so3_log(p.rotation())?;
    let upsilon = so3_left_jacobian_inverse(&omega) * p.translation();
    Ok(PoseTangent { omega, upsilon })
}

/// Nearest rotation in Frobenius norm (orthogonal polar factor with the
/// determinant forced to +1).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

/// `x -> s R x + t` with `s > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        Self {
            scale: inv_s,
            rotation: rt,
            translation: -(rt * self.translation) * inv_s,
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Similarity) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }

    pub fn rigid(&self) -> Pose {
        Pose::from_parts_unchecked(self.rotation, self.translation)
    }
}

/// Relative eigenvalue floor below which a centered cloud counts as
/// collinear.
const COLLINEAR_RATIO: f64 = 1e-12;

/// Closed-form least-squares similarity (or rigid transform when
/// `with_scale` is false) mapping `src` onto `dst`.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Similarity, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "point count mismatch: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "need at least 3 point pairs, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mu_src = src.iter().fold(Vector3::zeros(), |a, p| a + p) * inv_n;
    let mu_dst = dst.iter().fold(Vector3::zeros(), |a, p| a + p) * inv_n;

    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_src;
        let dc = d - mu_dst;
        cov += dc * sc.transpose();
        src_cov += sc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov *= inv_n;
    src_cov *= inv_n;
    var_src *= inv_n;

    let mut eig = src_cov.symmetric_eigenvalues().as_slice().to_vec();
    eig.sort_by(|a, b| b.total_cmp(a));
    if eig[0] <= 1e-24 {
        return Err(GeometryError::DegenerateConfiguration(
            "source points coincide".into(),
        ));
    }
    if eig[1] <= COLLINEAR_RATIO * eig[0] {
        return Err(GeometryError::DegenerateConfiguration(
            "source points are collinear".into(),
        ));
    }

    // Identical inputs: the exact optimum, without SVD rounding.
    if src == dst {
        return Ok(Similarity::identity());
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        let d = svd.singular_values;
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_src
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "non-positive scale {scale}"
        )));
    }
    let translation = mu_dst - rotation * mu_src * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the mean nearest-neighbour residual changes by less.
    pub tolerance: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            tolerance: 1e-6,
        }
    }
}

/// Point-to-point ICP refining `init` (which maps `src` towards `dst`).
/// Scale stays fixed at the initial value; only the rigid part is refined.
pub fn icp_refine(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    init: Similarity,
    cfg: &IcpConfig,
) -> Result<Similarity, GeometryError> {
    if dst.is_empty() || src.len() < 3 {
        return Err(GeometryError::DegenerateConfiguration(
            "ICP needs at least 3 source points and a non-empty target".into(),
        ));
    }
    let tree = KdTree::new(dst);
    let mut current = init;
    let mut prev_residual = f64::INFINITY;
    let mut moved = vec![Vector3::zeros(); src.len()];
    let mut matched = vec![Vector3::zeros(); src.len()];
    for _ in 0..cfg.max_iterations {
        let mut residual = 0.0;
        for (k, p) in src.iter().enumerate() {
            moved[k] = current.apply(p);
            let (idx, d2) = tree.nearest(&moved[k]);
            matched[k] = dst[idx];
            residual += d2.sqrt();
        }
        residual /= src.len() as f64;
        if (prev_residual - residual).abs() < cfg.tolerance {
            break;
        }
        prev_residual = residual;
        let step = match umeyama(&moved, &matched, false) {
            Ok(s) => s,
            Err(_) => break,
        };
        current = step.compose(&current);
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let w = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        let t = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        Pose::from_parts_unchecked(so3_exp(&w), t)
    }

    fn rz(deg: f64) -> Matrix3<f64> {
        so3_exp(&Vector3::new(0.0, 0.0, deg.to_radians()))
    }

    fn max_abs(m: &Matrix4<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn compose_identity_and_inverse() {
        let i = Pose::identity();
        assert_eq!(compose(&i, &i).to_homogeneous(), Matrix4::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let e = compose(&p, &inverse(&p)).to_homogeneous() - Matrix4::identity();
            assert!(max_abs(&e) < 1e-9);
        }
    }

    #[test]
    fn compose_quarter_turns_matches_matrix_product() {
        let a = Pose::from_parts_unchecked(rz(90.0), Vector3::new(1.0, 0.0, 0.0));
        let b = Pose::from_parts_unchecked(rz(90.0), Vector3::new(0.0, 1.0, 0.0));
        let c = compose(&a, &b);
        let oracle = a.to_homogeneous() * b.to_homogeneous();
        assert!(max_abs(&(c.to_homogeneous() - oracle)) < 1e-15);
        // Rz(90)·(0,1,0) + (1,0,0) = (0,0,0)
        assert_abs_diff_eq!(c.translation(), &Vector3::new(0.0, 0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(c.rotation(), &rz(180.0), epsilon = 1e-15);
    }

    #[test]
    fn relative_pose_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let pt = random_pose(&mut rng);
            let px = random_pose(&mut rng);
            let same = relative_pose(&pt, &pt).to_homogeneous() - Matrix4::identity();
            assert!(max_abs(&same) < 1e-12);
            let anchor_only = relative_pose(&Pose::identity(), &px);
            assert!(max_abs(&(anchor_only.to_homogeneous() - px.inverse().to_homogeneous())) < 1e-15);
            let oracle = px.to_homogeneous().try_inverse().unwrap() * pt.to_homogeneous();
            assert!(max_abs(&(relative_pose(&pt, &px).to_homogeneous() - oracle)) < 1e-12);
            let back = relative_pose(&px, &pt).compose(&relative_pose(&pt, &px));
            assert!(max_abs(&(back.to_homogeneous() - Matrix4::identity())) < 1e-9);
        }
    }

    #[test]
    fn transform_point_cases() {
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_point(&Pose::identity(), &x), x);
        let p = Pose::from_translation(Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(transform_point(&p, &Vector3::zeros()), Vector3::new(0.0, 0.0, 5.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = random_pose(&mut rng);
            let x = Vector3::new(rng.random(), rng.random(), rng.random());
            let h = p.to_homogeneous() * x.push(1.0);
            assert_abs_diff_eq!(transform_point(&p, &x), h.xyz(), epsilon = 1e-14);
        }
    }

    #[test]
    fn exp_log_roundtrip() {
        assert_eq!(exp_map(&PoseTangent::zero()).to_homogeneous(), Matrix4::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let omega = dir * rng.random_range(0.0..3.0);
            let upsilon = Vector3::new(rng.random(), rng.random(), rng.random());
            let v = PoseTangent::new(omega, upsilon);
            let back = log_map(&exp_map(&v)).unwrap();
            assert!((back.to_vector() - v.to_vector()).norm() < 1e-9, "{v:?} -> {back:?}");
        }
    }

    #[test]
    fn exp_small_angle_taylor() {
        // exp(ξ) = I + ξ^ + O(|ξ|²) in homogeneous form.
        for &eps in &[1e-2, 1e-3, 1e-4] {
            let v = PoseTangent::new(Vector3::new(0.3, -0.5, 0.8) * eps, Vector3::new(1.0, 2.0, -1.0) * eps);
            let mut first_order = Matrix4::identity();
            first_order.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() + hat(&v.omega)));
            first_order.fixed_view_mut::<3, 1>(0, 3).copy_from(&v.upsilon);
            let err = max_abs(&(exp_map(&v).to_homogeneous() - first_order));
            assert!(err < 5.0 * eps * eps, "eps {eps}: {err}");
        }
    }

    #[test]
    fn log_rejects_near_pi() {
        let r = so3_exp(&(Vector3::new(0.0, 1.0, 0.0) * std::f64::consts::PI));
        let err = log_map(&Pose::from_rotation(r)).unwrap_err();
        assert!(matches!(err, GeometryError::LogNearPi { .. }));
    }

    #[test]
    fn long_composition_chain_stays_orthonormal() {
        let step = exp_map(&PoseTangent::new(
            Vector3::new(0.0123, -0.0456, 0.0789),
            Vector3::new(0.01, 0.0, 0.0),
        ));
        let mut p = Pose::identity();
        for _ in 0..10_000 {
            p = p.compose(&step);
        }
        assert!(p.orthonormality_error() < 1e-9);
        assert!((p.rotation().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let l = compose(&compose(&a, &b), &c).to_homogeneous();
            let r = compose(&a, &compose(&b, &c)).to_homogeneous();
            assert!(max_abs(&(l - r)) < 1e-9);
        }
    }

    #[test]
    fn left_jacobian_first_order() {
        let omega = Vector3::new(0.4, -1.1, 0.7);
        let d = Vector3::new(1e-6, -2e-6, 0.5e-6);
        let lhs = so3_exp(&(omega + d));
        let rhs = so3_exp(&(so3_left_jacobian(&omega) * d)) * so3_exp(&omega);
        assert!((lhs - rhs).norm() < 1e-11);
    }

    #[test]
    fn similarity_inverse_roundtrip() {
        let s = Similarity {
            scale: 2.5,
            rotation: rz(33.0),
            translation: Vector3::new(1.0, -2.0, 0.5),
        };
        let x = Vector3::new(0.3, 0.2, -0.9);
        assert_abs_diff_eq!(s.inverse().apply(&s.apply(&x)), x, epsilon = 1e-12);
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn umeyama_identity_and_exact_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = cloud(&mut rng, 20);
        let s = umeyama(&src, &src, true).unwrap();
        assert_abs_diff_eq!(s.scale, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.translation, Vector3::zeros(), epsilon = 1e-12);

        let truth = Similarity {
            scale: 2.0,
            rotation: rz(45.0),
            translation: Vector3::new(1.0, 1.0, 1.0),
        };
        let dst: Vec<_> = src.iter().map(|p| truth.apply(p)).collect();
        let s = umeyama(&src, &dst, true).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-9);
        assert!(rotation_angle(&(s.rotation.transpose() * truth.rotation)) < 1e-9);
        assert!((s.translation - truth.translation).norm() < 1e-9);
    }

    #[test]
    fn umeyama_rejects_degenerate() {
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(umeyama(&line, &line, true), Err(GeometryError::DegenerateConfiguration(_))));
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 5];
        assert!(matches!(umeyama(&same, &same, true), Err(GeometryError::DegenerateConfiguration(_))));
        let two = vec![Vector3::zeros(), Vector3::x()];
        assert!(umeyama(&two, &two, true).is_err());
    }

    #[test]
    fn umeyama_beats_random_candidates_on_noisy_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = cloud(&mut rng, 12);
        let truth = Similarity {
            scale: 1.3,
            rotation: so3_exp(&Vector3::new(0.2, 0.1, -0.4)),
            translation: Vector3::new(0.5, 0.0, -0.2),
        };
        let dst: Vec<_> = src
            .iter()
            .map(|p| truth.apply(p) + Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
            .collect();
        let cost = |s: &Similarity| -> f64 { src.iter().zip(&dst).map(|(a, b)| (b - s.apply(a)).norm_squared()).sum() };
        let best = cost(&umeyama(&src, &dst, true).unwrap());
        for _ in 0..100_000 {
            let cand = Similarity {
                scale: truth.scale + rng.random_range(-0.1..0.1),
                rotation: so3_exp(&Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))) * truth.rotation,
                translation: truth.translation + Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
            };
            assert!(best <= cost(&cand) + 1e-12);
        }
    }

    #[test]
    fn umeyama_scale_invariant_to_common_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let src = cloud(&mut rng, 15);
        let dst: Vec<_> = cloud(&mut rng, 15).iter().zip(&src).map(|(n, p)| p * 1.7 + n * 0.1).collect();
        let base = umeyama(&src, &dst, true).unwrap().scale;
        for _ in 0..20 {
            let g = random_pose(&mut rng);
            let s2: Vec<_> = src.iter().map(|p| g.transform_point(p)).collect();
            let d2: Vec<_> = dst.iter().map(|p| g.transform_point(p)).collect();
            assert!((umeyama(&s2, &d2, true).unwrap().scale - base).abs() < 1e-9);
        }
    }

    #[test]
    fn icp_recovers_small_misalignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut src = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                let (x, y) = (i as f64 * 0.1, j as f64 * 0.1);
                src.push(Vector3::new(x, y, 0.3 * (3.0 * x).sin() * (2.0 * y).cos()));
            }
        }
        let truth = Pose::from_parts_unchecked(so3_exp(&Vector3::new(0.0, 0.0, 0.02)), Vector3::new(0.01, -0.01, 0.0));
        let dst: Vec<_> = src.iter().map(|p| truth.transform_point(p)).collect();
        let _ = &mut rng;
        let out = icp_refine(&src, &dst, Similarity::identity(), &IcpConfig::default()).unwrap();
        let err: f64 = src.iter().zip(&dst).map(|(a, b)| (out.apply(a) - b).norm()).sum::<f64>() / src.len() as f64;
        assert!(err < 1e-3, "{err}");
    }
}
