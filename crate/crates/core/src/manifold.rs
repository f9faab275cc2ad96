//! State blocks and the SE(2) composition operators.
//!
//! Poses and motion deltas share the same (translation, heading) layout. The
//! tangent convention is additive with the angle wrapped, so every Jacobian in
//! this module is taken with respect to `(x, y, theta)` perturbations applied
//! through [`block_plus`] / [`delta_plus`].

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Wraps an angle into `(-pi, pi]`. Non-finite input is passed through.
pub fn wrap_angle(a: f64) -> f64 {
    if !a.is_finite() {
        return a;
    }
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = a - TAU * ((a - PI) / TAU).ceil();
    // ceil can land one period off for values within an ulp of the boundary
    if r > PI {
        r -= TAU;
    } else if r <= -PI {
        r += TAU;
    }
    r
}

/// Checked variant of [`wrap_angle`].
pub fn normalize_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::InvalidValue(format!("angle {a} is not finite")));
    }
    Ok(wrap_angle(a))
}

pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// dR/dtheta.
pub fn rotation_derivative(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

/// Parametrization of a state block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Euclidean(usize),
    Angle,
}

impl BlockKind {
    pub fn dim(&self) -> usize {
        match self {
            BlockKind::Euclidean(n) => *n,
            BlockKind::Angle => 1,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        self.dim()
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Euclidean(n) => write!(f, "R{n}"),
            BlockKind::Angle => write!(f, "SO2"),
        }
    }
}

/// Minimal estimable unit of the problem state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBlock {
    values: Vec<f64>,
    kind: BlockKind,
    pub fixed: bool,
}

impl StateBlock {
    pub fn new(kind: BlockKind, values: Vec<f64>, fixed: bool) -> Result<Self> {
        if values.len() != kind.dim() {
            return Err(Error::ContractViolation(format!(
                "{kind} block needs {} values, got {}",
                kind.dim(),
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("block value {v} is not finite")));
        }
        let values = match kind {
            BlockKind::Angle => vec![wrap_angle(values[0])],
            BlockKind::Euclidean(_) => values,
        };
        Ok(Self { values, kind, fixed })
    }

    pub fn euclidean(values: &[f64]) -> Self {
        Self::new(BlockKind::Euclidean(values.len()), values.to_vec(), false).expect("finite euclidean values")
    }

    pub fn angle(theta: f64) -> Self {
        Self::new(BlockKind::Angle, vec![theta], false).expect("finite angle")
    }

    pub fn with_fixed(mut self, fixed: bool) -> Self {
        self.fixed = fixed;
        self
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Overwrites the values, keeping the kind. Angle values are wrapped.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        let updated = StateBlock::new(self.kind, values.to_vec(), self.fixed)?;
        self.values = updated.values;
        Ok(())
    }

    pub fn tangent_dim(&self) -> usize {
        self.kind.tangent_dim()
    }
}

/// Applies a tangent increment to a block, returning the new values.
pub fn block_plus(block: &StateBlock, dx: &[f64]) -> Result<Vec<f64>> {
    kind_plus(block.kind, &block.values, dx)
}

pub(crate) fn kind_plus(kind: BlockKind, values: &[f64], dx: &[f64]) -> Result<Vec<f64>> {
    if dx.len() != kind.tangent_dim() {
        return Err(Error::ContractViolation(format!(
            "tangent step of length {} for a {kind} block",
            dx.len()
        )));
    }
    Ok(match kind {
        BlockKind::Euclidean(_) => values.iter().zip(dx).map(|(v, d)| v + d).collect(),
        BlockKind::Angle => vec![wrap_angle(values[0] + dx[0])],
    })
}

/// Robot (or sensor) pose in the plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose2 {
    pub p: Vector2<f64>,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            p: Vector2::new(x, y),
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn from_parts(p: &[f64], theta: f64) -> Self {
        Self::new(p[0], p[1], theta)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.p.x, self.p.y, self.theta)
    }

    pub fn as_delta(&self) -> Delta2 {
        Delta2 {
            dp: self.p,
            dtheta: self.theta,
        }
    }

    pub fn inverse(&self) -> Pose2 {
        let p = -(rotation(self.theta).transpose() * self.p);
        Pose2::new(p.x, p.y, -self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().all(|v| v.is_finite()) && self.theta.is_finite()
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, q: &Vector2<f64>) -> Vector2<f64> {
        self.p + rotation(self.theta) * q
    }
}

impl fmt::Display for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6}, {:.6})", self.p.x, self.p.y, self.theta)
    }
}

/// Motion delta expressed in the frame of its origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Delta2 {
    pub dp: Vector2<f64>,
    pub dtheta: f64,
}

impl Delta2 {
    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        Self {
            dp: Vector2::new(dx, dy),
            dtheta: wrap_angle(dtheta),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.dp.x, self.dp.y, self.dtheta)
    }

    pub fn as_pose(&self) -> Pose2 {
        Pose2 {
            p: self.dp,
            theta: self.dtheta,
        }
    }
}

/// Additive tangent increment `(tx, ty, ttheta)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tangent2(pub Vector3<f64>);

impl Tangent2 {
    pub fn new(tx: f64, ty: f64, ttheta: f64) -> Self {
        Self(Vector3::new(tx, ty, ttheta))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

fn compose_raw(
    p: &Vector2<f64>,
    theta: f64,
    dp: &Vector2<f64>,
    dtheta: f64,
) -> (Vector2<f64>, f64, Matrix3<f64>, Matrix3<f64>) {
    let r = rotation(theta);
    let rd = rotation_derivative(theta) * dp;
    let out_p = p + r * dp;
    let out_theta = wrap_angle(theta + dtheta);
    let j_a = Matrix3::new(1.0, 0.0, rd.x, 0.0, 1.0, rd.y, 0.0, 0.0, 1.0);
    let j_b = Matrix3::new(r[(0, 0)], r[(0, 1)], 0.0, r[(1, 0)], r[(1, 1)], 0.0, 0.0, 0.0, 1.0);
    (out_p, out_theta, j_a, j_b)
}

/// `a ⊞ b`: applies a delta to a pose. Returns the result and the Jacobians
/// with respect to `a` and `b`.
pub fn pose_compose(a: &Pose2, b: &Delta2) -> (Pose2, Matrix3<f64>, Matrix3<f64>) {
    let (p, theta, j_a, j_b) = compose_raw(&a.p, a.theta, &b.dp, b.dtheta);
    (Pose2 { p, theta }, j_a, j_b)
}

/// `a ∘ b` on two deltas; same formula as [`pose_compose`].
pub fn delta_compose(a: &Delta2, b: &Delta2) -> (Delta2, Matrix3<f64>, Matrix3<f64>) {
    let (dp, dtheta, j_a, j_b) = compose_raw(&a.dp, a.dtheta, &b.dp, b.dtheta);
    (Delta2 { dp, dtheta }, j_a, j_b)
}

/// `xj ⊟ xi`: the delta taking `xi` to `xj`, with Jacobians w.r.t. `xi` and `xj`.
pub fn pose_between(xi: &Pose2, xj: &Pose2) -> (Delta2, Matrix3<f64>, Matrix3<f64>) {
    let rt = rotation(xi.theta).transpose();
    let diff = xj.p - xi.p;
    let dp = rt * diff;
    let d_rt = rotation_derivative(xi.theta).transpose() * diff;
    let delta = Delta2 {
        dp,
        dtheta: wrap_angle(xj.theta - xi.theta),
    };
    let j_xi = Matrix3::new(
        -rt[(0, 0)],
        -rt[(0, 1)],
        d_rt.x,
        -rt[(1, 0)],
        -rt[(1, 1)],
        d_rt.y,
        0.0,
        0.0,
        -1.0,
    );
    let j_xj = Matrix3::new(rt[(0, 0)], rt[(0, 1)], 0.0, rt[(1, 0)], rt[(1, 1)], 0.0, 0.0, 0.0, 1.0);
    (delta, j_xi, j_xj)
}

/// `d ⊕ t`.
pub fn delta_plus(d: &Delta2, t: &Tangent2) -> Delta2 {
    Delta2 {
        dp: d.dp + Vector2::new(t.0.x, t.0.y),
        dtheta: wrap_angle(d.dtheta + t.0.z),
    }
}

/// `d2 ⊖ d1`.
pub fn delta_minus(d2: &Delta2, d1: &Delta2) -> Tangent2 {
    let dp = d2.dp - d1.dp;
    Tangent2::new(dp.x, dp.y, wrap_angle(d2.dtheta - d1.dtheta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    const FD_STEP: f64 = 1e-6;
    const FD_TOL: f64 = 1e-5;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose2 {
        Pose2::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-PI..PI),
        )
    }

    fn perturb(v: &Vector3<f64>, k: usize, h: f64) -> Vector3<f64> {
        let mut out = *v;
        out[k] += h;
        out
    }

    // central differences of a (pose,pose)->tangent-ish map, wrapping the angle row
    fn fd_jacobian(f: impl Fn(&Vector3<f64>) -> Vector3<f64>, at: &Vector3<f64>) -> Matrix3<f64> {
        let mut j = Matrix3::zeros();
        for k in 0..3 {
            let plus = f(&perturb(at, k, FD_STEP));
            let minus = f(&perturb(at, k, -FD_STEP));
            let mut col = (plus - minus) / (2.0 * FD_STEP);
            col.z = wrap_angle(plus.z - minus.z) / (2.0 * FD_STEP);
            j.set_column(k, &col);
        }
        j
    }

    fn max_abs(m: &Matrix3<f64>) -> f64 {
        m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    #[test]
    fn normalize_angle_examples() {
        assert_eq!(normalize_angle(0.0).unwrap(), 0.0);
        assert_eq!(normalize_angle(PI).unwrap(), PI);
        assert!((normalize_angle(3.0 * PI).unwrap() - PI).abs() < 1e-12);
        assert!((normalize_angle(-PI).unwrap() - PI).abs() < 1e-12);
        assert!(matches!(normalize_angle(f64::NAN), Err(Error::InvalidValue(_))));
        assert!(normalize_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn compose_examples() {
        let (r, _, _) = pose_compose(&Pose2::identity(), &Delta2::new(1.0, 2.0, 0.3));
        assert!((r.to_vector() - Vector3::new(1.0, 2.0, 0.3)).norm() < 1e-15);

        let (r, _, _) = pose_compose(&Pose2::new(1.0, 0.0, FRAC_PI_2), &Delta2::new(1.0, 0.0, 0.0));
        assert!((r.to_vector() - Vector3::new(1.0, 1.0, FRAC_PI_2)).norm() < 1e-12);
    }

    #[test]
    fn between_examples() {
        let (d, _, _) = pose_between(&Pose2::identity(), &Pose2::new(1.0, 2.0, PI / 4.0));
        assert!((d.to_vector() - Vector3::new(1.0, 2.0, PI / 4.0)).norm() < 1e-15);

        let (d, _, _) = pose_between(&Pose2::new(1.0, 1.0, FRAC_PI_2), &Pose2::new(1.0, 2.0, FRAC_PI_2));
        assert!((d.to_vector() - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn delta_plus_minus_examples() {
        let d = Delta2::new(1.0, 0.0, 0.1);
        assert_eq!(delta_plus(&d, &Tangent2::zero()), d);

        let r = delta_plus(&Delta2::new(0.0, 0.0, PI), &Tangent2::new(0.0, 0.0, FRAC_PI_2));
        assert!((r.dtheta + FRAC_PI_2).abs() < 1e-12);

        assert_eq!(delta_minus(&d, &d), Tangent2::zero());
        let t = delta_minus(&Delta2::new(1.0, 1.0, 0.2), &Delta2::new(1.0, 0.0, 0.1));
        assert!((t.0 - Vector3::new(0.0, 1.0, 0.1)).norm() < 1e-15);
    }

    #[test]
    fn block_plus_examples() {
        let b = StateBlock::euclidean(&[1.0, 2.0]);
        assert_eq!(block_plus(&b, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);

        let a = StateBlock::angle(PI);
        let r = block_plus(&a, &[0.2]).unwrap();
        assert!((r[0] - (-PI + 0.2)).abs() < 1e-12);
        assert!((r[0] + 2.9416).abs() < 1e-4);

        let s = StateBlock::euclidean(&[0.0]);
        assert_eq!(block_plus(&s, &[3.0]).unwrap(), vec![3.0]);

        assert!(matches!(block_plus(&b, &[1.0]), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn state_block_construction_checks() {
        assert!(StateBlock::new(BlockKind::Euclidean(2), vec![1.0], false).is_err());
        assert!(StateBlock::new(BlockKind::Euclidean(1), vec![f64::NAN], false).is_err());
        let a = StateBlock::new(BlockKind::Angle, vec![3.0 * PI], true).unwrap();
        assert!((a.values()[0] - PI).abs() < 1e-12);
        assert!(a.fixed);
    }

    #[test]
    fn compose_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng).as_delta();
            let (_, j_a, j_b) = pose_compose(&a, &b);
            let fa = |v: &Vector3<f64>| pose_compose(&Pose2::new(v.x, v.y, v.z), &b).0.to_vector();
            let fb = |v: &Vector3<f64>| pose_compose(&a, &Delta2::new(v.x, v.y, v.z)).0.to_vector();
            assert!(max_abs(&(fd_jacobian(fa, &a.to_vector()) - j_a)) < FD_TOL);
            assert!(max_abs(&(fd_jacobian(fb, &b.to_vector()) - j_b)) < FD_TOL);
        }
    }

    #[test]
    fn between_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let xi = random_pose(&mut rng);
            let xj = random_pose(&mut rng);
            let (_, j_i, j_j) = pose_between(&xi, &xj);
            let fi = |v: &Vector3<f64>| pose_between(&Pose2::new(v.x, v.y, v.z), &xj).0.to_vector();
            let fj = |v: &Vector3<f64>| pose_between(&xi, &Pose2::new(v.x, v.y, v.z)).0.to_vector();
            assert!(max_abs(&(fd_jacobian(fi, &xi.to_vector()) - j_i)) < FD_TOL);
            assert!(max_abs(&(fd_jacobian(fj, &xj.to_vector()) - j_j)) < FD_TOL);
        }
    }

    #[test]
    fn between_inverts_compose_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let xi = random_pose(&mut rng);
            let xj = random_pose(&mut rng);
            let (d, _, _) = pose_between(&xi, &xj);
            let (back, _, _) = pose_compose(&xi, &d);
            assert!((back.p - xj.p).norm() < 1e-12);
            assert!(wrap_angle(back.theta - xj.theta).abs() < 1e-12);
        }
    }

    fn arb_pose() -> impl Strategy<Value = Pose2> {
        (-10.0..10.0_f64, -10.0..10.0_f64, -PI..PI).prop_map(|(x, y, t)| Pose2::new(x, y, t))
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(a in -1e3..1e3_f64) {
            let once = wrap_angle(a);
            prop_assert!(once > -PI && once <= PI);
            prop_assert_eq!(wrap_angle(once), once);
            let k = ((a - once) / TAU).round();
            prop_assert!((a - once - k * TAU).abs() < 1e-9);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let (ab, _, _) = pose_compose(&a, &b.as_delta());
            let (ab_c, _, _) = pose_compose(&ab, &c.as_delta());
            let (bc, _, _) = delta_compose(&b.as_delta(), &c.as_delta());
            let (a_bc, _, _) = pose_compose(&a, &bc);
            prop_assert!((ab_c.p - a_bc.p).norm() < 1e-12);
            prop_assert!(wrap_angle(ab_c.theta - a_bc.theta).abs() < 1e-12);
        }

        #[test]
        fn delta_plus_inverts_minus(d in arb_pose(), e in arb_pose()) {
            let (d, e) = (d.as_delta(), e.as_delta());
            let back = delta_plus(&d, &delta_minus(&e, &d));
            prop_assert!((back.dp - e.dp).norm() < 1e-12);
            prop_assert!(wrap_angle(back.dtheta - e.dtheta).abs() < 1e-12);
            let t = delta_minus(&e, &d);
            prop_assert!(t.0.z > -PI && t.0.z <= PI);
        }
    }
}
