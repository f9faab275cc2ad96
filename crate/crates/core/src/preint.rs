//! Generic motion pre-integration with calibration Jacobians.
//!
//! The pipeline is written against a [`MotionModel`], which supplies the
//! calibration function `v = f(u, c)`, the delta function `delta = g(v)`, the
//! delta composition and the state plus. [`DiffDrive`] is the differential
//! drive instance used by the motion processor.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Matrix3x2, Vector2};

use crate::error::{Error, Result};
use crate::manifold::{delta_compose, delta_plus, pose_compose, Delta2, Pose2, Tangent2};
use crate::tree::NodeId;

/// Raw motion sample: increments `u` measured at time `t` with covariance `q_u`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMotion {
    pub t: f64,
    pub u: DVector<f64>,
    pub q_u: DMatrix<f64>,
}

impl RawMotion {
    pub fn new(t: f64, u: &[f64], q_u: DMatrix<f64>) -> Self {
        Self {
            t,
            u: DVector::from_column_slice(u),
            q_u,
        }
    }

    /// Wheel increments with independent per-wheel noise `tick_std` (rad).
    pub fn wheel_ticks(t: f64, left: f64, right: f64, tick_std: f64) -> Self {
        let var = tick_std * tick_std;
        Self::new(t, &[left, right], DMatrix::from_diagonal_element(2, 2, var))
    }
}

/// Calibration parameter vector. For the differential drive this is
/// `(r_left, r_right, separation)` in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibParams(pub DVector<f64>);

impl CalibParams {
    pub fn new(values: &[f64]) -> Self {
        Self(DVector::from_column_slice(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Output of the calibration function together with its Jacobians.
#[derive(Clone, Debug)]
pub struct Precalibrated {
    pub v: DVector<f64>,
    pub j_v_u: DMatrix<f64>,
    pub j_v_c: DMatrix<f64>,
}

pub trait MotionModel: Clone {
    fn precalibrate(&self, u: &DVector<f64>, c: &CalibParams) -> Result<Precalibrated>;

    /// Returns `delta = g(v)` and `d delta / d v`.
    fn compute_delta(&self, v: &DVector<f64>) -> (Delta2, DMatrix<f64>);

    fn compose(&self, a: &Delta2, b: &Delta2) -> (Delta2, Matrix3<f64>, Matrix3<f64>) {
        delta_compose(a, b)
    }

    fn plus(&self, x: &Pose2, d: &Delta2) -> Pose2 {
        pose_compose(x, d).0
    }
}

/// Calibrates wheel increments into (arc length, heading change).
pub fn precalibrate(u: &Vector2<f64>, c: &[f64]) -> Result<(Vector2<f64>, Matrix2<f64>, Matrix2x3<f64>)> {
    if c.len() != 3 {
        return Err(Error::InvalidCalibration(format!(
            "differential drive needs 3 parameters, got {}",
            c.len()
        )));
    }
    let (rl, rr, d) = (c[0], c[1], c[2]);
    if !(rl > 0.0 && rr > 0.0 && d > 0.0) {
        return Err(Error::InvalidCalibration(format!(
            "radii and separation must be positive, got ({rl}, {rr}, {d})"
        )));
    }
    let (pl, pr) = (u.x, u.y);
    let arc = 0.5 * (rl * pl + rr * pr);
    let dtheta_num = rr * pr - rl * pl;
    let v = Vector2::new(arc, dtheta_num / d);
    let j_v_u = Matrix2::new(0.5 * rl, 0.5 * rr, -rl / d, rr / d);
    let j_v_c = Matrix2x3::new(0.5 * pl, 0.5 * pr, 0.0, -pl / d, pr / d, -dtheta_num / (d * d));
    Ok((v, j_v_u, j_v_c))
}

/// Midpoint-chord motion delta for an arc of length `s` turning by `w`.
pub fn compute_delta(v: &Vector2<f64>) -> (Delta2, Matrix3x2<f64>) {
    let (s, w) = (v.x, v.y);
    let (sh, ch) = (0.5 * w).sin_cos();
    let delta = Delta2::new(s * ch, s * sh, w);
    let j = Matrix3x2::new(ch, -0.5 * s * sh, sh, 0.5 * s * ch, 0.0, 1.0);
    (delta, j)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DiffDrive;

impl MotionModel for DiffDrive {
    fn precalibrate(&self, u: &DVector<f64>, c: &CalibParams) -> Result<Precalibrated> {
        if u.len() != 2 {
            return Err(Error::ContractViolation(format!(
                "differential drive expects 2 wheel increments, got {}",
                u.len()
            )));
        }
        let (v, j_v_u, j_v_c) = precalibrate(&Vector2::new(u[0], u[1]), c.as_slice())?;
        Ok(Precalibrated {
            v: DVector::from_column_slice(v.as_slice()),
            j_v_u: DMatrix::from_column_slice(2, 2, j_v_u.as_slice()),
            j_v_c: DMatrix::from_column_slice(2, 3, j_v_c.as_slice()),
        })
    }

    fn compute_delta(&self, v: &DVector<f64>) -> (Delta2, DMatrix<f64>) {
        let (delta, j) = compute_delta(&Vector2::new(v[0], v[1]));
        (delta, DMatrix::from_column_slice(3, 2, j.as_slice()))
    }
}

#[derive(Clone, Debug)]
pub struct PreintEntry {
    pub motion: RawMotion,
    pub v: DVector<f64>,
    pub delta: Delta2,
    pub delta_bar: Delta2,
    pub q_delta: Matrix3<f64>,
    pub j_delta_c: DMatrix<f64>,
}

impl PreintEntry {
    pub fn t(&self) -> f64 {
        self.motion.t
    }

    /// First-order calibration correction of this entry's pre-integrated delta.
    pub fn corrected(&self, c: &CalibParams, c_bar: &CalibParams) -> Result<Delta2> {
        correct_delta(&self.delta_bar, &self.j_delta_c, c, c_bar)
    }
}

/// `Delta(c) = Delta_bar ⊕ J_c (c - c_bar)`.
pub fn correct_delta(
    delta_bar: &Delta2,
    j_delta_c: &DMatrix<f64>,
    c: &CalibParams,
    c_bar: &CalibParams,
) -> Result<Delta2> {
    if c.len() != c_bar.len() || j_delta_c.ncols() != c.len() || j_delta_c.nrows() != 3 {
        return Err(Error::ContractViolation(format!(
            "calibration correction with |c| = {}, |c_bar| = {}, J is {}x{}",
            c.len(),
            c_bar.len(),
            j_delta_c.nrows(),
            j_delta_c.ncols()
        )));
    }
    let step = j_delta_c * (&c.0 - &c_bar.0);
    Ok(delta_plus(delta_bar, &Tangent2::new(step[0], step[1], step[2])))
}

/// Pre-integration working set between two keyframes.
#[derive(Clone, Debug)]
pub struct PreintBuffer<M: MotionModel = DiffDrive> {
    model: M,
    pub origin_frame: Option<NodeId>,
    pub origin_t: f64,
    pub c_bar: CalibParams,
    entries: Vec<PreintEntry>,
}

impl<M: MotionModel> PreintBuffer<M> {
    pub fn new(model: M, origin_frame: Option<NodeId>, origin_t: f64, c_bar: CalibParams) -> Self {
        Self {
            model,
            origin_frame,
            origin_t,
            c_bar,
            entries: Vec::new(),
        }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn entries(&self) -> &[PreintEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_t(&self) -> f64 {
        self.entries.last().map_or(self.origin_t, PreintEntry::t)
    }

    pub fn delta_bar(&self) -> Delta2 {
        self.entries.last().map_or_else(Delta2::identity, |e| e.delta_bar)
    }

    pub fn q_delta(&self) -> Matrix3<f64> {
        self.entries.last().map_or_else(Matrix3::zeros, |e| e.q_delta)
    }

    pub fn j_delta_c(&self) -> DMatrix<f64> {
        self.entries
            .last()
            .map_or_else(|| DMatrix::zeros(3, self.c_bar.len()), |e| e.j_delta_c.clone())
    }

    /// Runs one step of the pipeline and appends the resulting entry.
    pub fn integrate_step(&mut self, motion: RawMotion) -> Result<&PreintEntry> {
        if !(motion.t > self.last_t()) {
            return Err(Error::Ordering(format!(
                "sample at t = {} does not follow t = {}",
                motion.t,
                self.last_t()
            )));
        }
        let pre = self.model.precalibrate(&motion.u, &self.c_bar)?;
        if motion.q_u.nrows() != motion.u.len() || motion.q_u.ncols() != motion.u.len() {
            return Err(Error::ContractViolation(format!(
                "raw covariance is {}x{} for {} raw values",
                motion.q_u.nrows(),
                motion.q_u.ncols(),
                motion.u.len()
            )));
        }
        let (delta, j_delta_v) = self.model.compute_delta(&pre.v);
        let prev_bar = self.delta_bar();
        let (delta_bar, j_bar_bar, j_bar_delta) = self.model.compose(&prev_bar, &delta);

        let j_bar_delta = DMatrix::from_column_slice(3, 3, j_bar_delta.as_slice());
        let j_bar_v = &j_bar_delta * &j_delta_v;
        let j_bar_u = &j_bar_v * &pre.j_v_u;
        let noise = &j_bar_u * &motion.q_u * j_bar_u.transpose();
        let noise = Matrix3::from_iterator(noise.iter().copied());

        let q_prev = self.q_delta();
        let q = j_bar_bar * q_prev * j_bar_bar.transpose() + noise;
        let q_delta = 0.5 * (q + q.transpose());

        let j_bar_bar_dyn = DMatrix::from_column_slice(3, 3, j_bar_bar.as_slice());
        let j_delta_c = &j_bar_bar_dyn * self.j_delta_c() + &j_bar_v * &pre.j_v_c;

        self.entries.push(PreintEntry {
            motion,
            v: pre.v,
            delta,
            delta_bar,
            q_delta,
            j_delta_c,
        });
        Ok(self.entries.last().expect("just pushed"))
    }

    /// High-rate state `x_t = x_origin ⊞ Delta_bar(origin..t)`.
    pub fn state_at_high_rate(&self, x_origin: &Pose2, t: f64) -> Result<Pose2> {
        if t < self.origin_t {
            return Err(Error::Range(format!(
                "query t = {t} precedes buffer origin {}",
                self.origin_t
            )));
        }
        let n = self.entries.partition_point(|e| e.t() <= t);
        if n == 0 {
            return Ok(*x_origin);
        }
        Ok(self.model.plus(x_origin, &self.entries[n - 1].delta_bar))
    }

    /// Candidate split point nearest to `t`: 0 denotes the origin, `k` the
    /// k-th entry. Ties resolve to the earlier candidate.
    pub fn nearest_split(&self, t: f64) -> (usize, f64) {
        let mut best = (0, (self.origin_t - t).abs());
        for (k, e) in self.entries.iter().enumerate() {
            let gap = (e.t() - t).abs();
            if gap < best.1 {
                best = (k + 1, gap);
            }
        }
        best
    }

    /// Splits at the sample nearest to `t_split`. The first part keeps the
    /// integrated entries; the second is re-integrated from a fresh origin at
    /// `t_split` with the same `c_bar`.
    pub fn split(&self, t_split: f64, tol: f64) -> Result<(PreintBuffer<M>, PreintBuffer<M>)> {
        let (k, gap) = self.nearest_split(t_split);
        if gap > tol {
            return Err(Error::JoinTolerance { t: t_split, tol });
        }
        let first = PreintBuffer {
            model: self.model.clone(),
            origin_frame: self.origin_frame,
            origin_t: self.origin_t,
            c_bar: self.c_bar.clone(),
            entries: self.entries[..k].to_vec(),
        };
        let mut second = PreintBuffer::new(self.model.clone(), None, t_split, self.c_bar.clone());
        for e in &self.entries[k..] {
            second.integrate_step(e.motion.clone())?;
        }
        Ok((first, second))
    }
}

/// Free-function form of [`PreintBuffer::split`].
pub fn split_buffer<M: MotionModel>(
    buf: &PreintBuffer<M>,
    t_split: f64,
    tol: f64,
) -> Result<(PreintBuffer<M>, PreintBuffer<M>)> {
    buf.split(t_split, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::delta_minus;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    const C_BAR: [f64; 3] = [0.1, 0.1, 0.5];

    fn buffer() -> PreintBuffer {
        PreintBuffer::new(DiffDrive, None, 0.0, CalibParams::new(&C_BAR))
    }

    fn random_ticks(rng: &mut ChaCha8Rng, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)))
            .collect()
    }

    fn integrate(ticks: &[(f64, f64)], c: &[f64], std: f64) -> PreintBuffer {
        let mut buf = PreintBuffer::new(DiffDrive, None, 0.0, CalibParams::new(c));
        for (k, (l, r)) in ticks.iter().enumerate() {
            buf.integrate_step(RawMotion::wheel_ticks(0.1 * (k + 1) as f64, *l, *r, std))
                .unwrap();
        }
        buf
    }

    #[test]
    fn precalibrate_examples() {
        let (v, _, _) = precalibrate(&Vector2::new(1.0, 1.0), &C_BAR).unwrap();
        assert!((v - Vector2::new(0.1, 0.0)).norm() < 1e-15);
        let (v, _, _) = precalibrate(&Vector2::zeros(), &[0.3, 0.2, 0.7]).unwrap();
        assert_eq!(v, Vector2::zeros());
        assert!(matches!(
            precalibrate(&Vector2::zeros(), &[0.1, 0.1, 0.0]),
            Err(Error::InvalidCalibration(_))
        ));
        assert!(precalibrate(&Vector2::zeros(), &[-0.1, 0.1, 0.5]).is_err());
    }

    #[test]
    fn precalibrate_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..1000 {
            let u = Vector2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let c = [
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.3..0.8),
            ];
            let (_, ju, jc) = precalibrate(&u, &c).unwrap();
            for k in 0..2 {
                let mut up = u;
                let mut um = u;
                up[k] += h;
                um[k] -= h;
                let col = (precalibrate(&up, &c).unwrap().0 - precalibrate(&um, &c).unwrap().0) / (2.0 * h);
                assert!((col - ju.column(k)).amax() < 1e-5);
            }
            for k in 0..3 {
                let mut cp = c;
                let mut cm = c;
                cp[k] += h;
                cm[k] -= h;
                let col = (precalibrate(&u, &cp).unwrap().0 - precalibrate(&u, &cm).unwrap().0) / (2.0 * h);
                assert!((col - jc.column(k)).amax() < 1e-5);
            }
        }
    }

    #[test]
    fn compute_delta_examples() {
        let (d, _) = compute_delta(&Vector2::new(0.1, 0.0));
        assert!((d.to_vector() - nalgebra::Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-15);
        let (d, _) = compute_delta(&Vector2::new(0.0, FRAC_PI_2));
        assert!((d.to_vector() - nalgebra::Vector3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-15);
        let (d, _) = compute_delta(&Vector2::new(1.0, PI));
        assert!((d.to_vector() - nalgebra::Vector3::new(0.0, 1.0, PI)).norm() < 1e-15);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut buf = buffer();
        let e = buf
            .integrate_step(RawMotion::wheel_ticks(0.1, 1.0, 1.0, 0.0))
            .unwrap()
            .clone();
        assert!((e.delta_bar.to_vector() - nalgebra::Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(e.q_delta, Matrix3::zeros());
        let (_, _, jvc) = precalibrate(&Vector2::new(1.0, 1.0), &C_BAR).unwrap();
        let (_, jdv) = compute_delta(&Vector2::new(0.1, 0.0));
        let (_, _, jbd) = delta_compose(&Delta2::identity(), &e.delta);
        let expected = jbd * jdv * jvc;
        for i in 0..3 {
            for j in 0..3 {
                assert!((expected[(i, j)] - e.j_delta_c[(i, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_straight_steps_accumulate() {
        let mut buf = buffer();
        buf.integrate_step(RawMotion::wheel_ticks(0.1, 1.0, 1.0, 0.01)).unwrap();
        buf.integrate_step(RawMotion::wheel_ticks(0.2, 1.0, 1.0, 0.01)).unwrap();
        assert!((buf.delta_bar().to_vector() - nalgebra::Vector3::new(0.2, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn non_monotonic_sample_is_rejected() {
        let mut buf = buffer();
        buf.integrate_step(RawMotion::wheel_ticks(0.1, 1.0, 1.0, 0.01)).unwrap();
        assert!(matches!(
            buf.integrate_step(RawMotion::wheel_ticks(0.1, 1.0, 1.0, 0.01)),
            Err(Error::Ordering(_))
        ));
        let mut fresh = buffer();
        assert!(fresh
            .integrate_step(RawMotion::wheel_ticks(0.0, 1.0, 1.0, 0.01))
            .is_err());
    }

    #[test]
    fn covariance_stays_symmetric_psd_and_zero_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ticks = random_ticks(&mut rng, 50);
        let noisy = integrate(&ticks, &C_BAR, 0.01);
        for e in noisy.entries() {
            assert_eq!(e.q_delta, e.q_delta.transpose());
            let eig = e.q_delta.symmetric_eigenvalues();
            assert!(eig.iter().all(|l| *l > -1e-15));
        }
        let clean = integrate(&ticks, &C_BAR, 0.0);
        assert!(clean.entries().iter().all(|e| e.q_delta == Matrix3::zeros()));
    }

    #[test]
    fn correct_delta_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let buf = integrate(&random_ticks(&mut rng, 10), &C_BAR, 0.01);
        let tail = buf.entries().last().unwrap();
        let c_bar = CalibParams::new(&C_BAR);
        assert_eq!(tail.corrected(&c_bar, &c_bar).unwrap(), tail.delta_bar);

        let zero_j = DMatrix::zeros(3, 3);
        let other = CalibParams::new(&[0.2, 0.3, 0.9]);
        assert_eq!(
            correct_delta(&tail.delta_bar, &zero_j, &other, &c_bar).unwrap(),
            tail.delta_bar
        );
        assert!(matches!(
            correct_delta(&tail.delta_bar, &zero_j, &CalibParams::new(&[0.1]), &c_bar),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn high_rate_queries() {
        let mut buf = buffer();
        for k in 1..=5 {
            buf.integrate_step(RawMotion::wheel_ticks(0.1 * k as f64, 1.0, 1.0, 0.0))
                .unwrap();
        }
        let x0 = Pose2::new(1.0, 2.0, FRAC_PI_2);
        assert_eq!(buf.state_at_high_rate(&x0, 0.0).unwrap(), x0);
        assert_eq!(buf.state_at_high_rate(&x0, 0.05).unwrap(), x0);
        let x3 = buf.state_at_high_rate(&x0, 0.1 * 3.0).unwrap();
        assert!((x3.p - Vector2::new(1.0, 2.3)).norm() < 1e-12);
        let last = buf.state_at_high_rate(&x0, 100.0).unwrap();
        assert!((last.p - Vector2::new(1.0, 2.5)).norm() < 1e-12);
        assert!(matches!(buf.state_at_high_rate(&x0, -0.1), Err(Error::Range(_))));
    }

    #[test]
    fn split_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let buf = integrate(&random_ticks(&mut rng, 6), &C_BAR, 0.01);
        let t3 = buf.entries()[2].t();
        let (a, b) = buf.split(t3, 1e-3).unwrap();
        assert_eq!((a.len(), b.len()), (3, 3));
        let (joined, _, _) = delta_compose(&a.delta_bar(), &b.delta_bar());
        let err = delta_minus(&joined, &buf.delta_bar());
        assert!(err.0.amax() < 1e-12);

        let (a, b) = buf.split(0.01, 0.02).unwrap();
        assert_eq!((a.len(), b.len()), (0, 6));

        assert!(matches!(buf.split(0.15, 0.01), Err(Error::JoinTolerance { .. })));
        // equidistant from 0.1 and 0.2: earlier wins
        let (a, _) = buf.split(0.15, 0.06).unwrap();
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn split_then_compose_matches_calibration_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let buf = integrate(&random_ticks(&mut rng, 30), &C_BAR, 0.01);
        for k in [1, 7, 15, 29] {
            let (a, b) = buf.split(buf.entries()[k - 1].t(), 1e-6).unwrap();
            let (_, ja, jb) = delta_compose(&a.delta_bar(), &b.delta_bar());
            let ja = DMatrix::from_column_slice(3, 3, ja.as_slice());
            let jb = DMatrix::from_column_slice(3, 3, jb.as_slice());
            let jc = ja * a.j_delta_c() + jb * b.j_delta_c();
            assert!((jc - buf.j_delta_c()).amax() < 1e-12);
        }
    }

    #[test]
    fn wheel_tick_pipeline_chain_matches_finite_differences() {
        // one-step map u -> Delta_bar ∘ g(f(u, c_bar))
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..200 {
            let ticks = random_ticks(&mut rng, 3);
            let base = integrate(&ticks, &C_BAR, 0.0);
            let u = Vector2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let step = |u: &Vector2<f64>| {
                let (v, _, _) = precalibrate(u, &C_BAR).unwrap();
                let (d, _) = compute_delta(&v);
                delta_compose(&base.delta_bar(), &d).0
            };
            let (v, jvu, _) = precalibrate(&u, &C_BAR).unwrap();
            let (d, jdv) = compute_delta(&v);
            let (_, _, jbd) = delta_compose(&base.delta_bar(), &d);
            let chain = jbd * jdv * jvu;
            for k in 0..2 {
                let mut up = u;
                let mut um = u;
                up[k] += h;
                um[k] -= h;
                let col = delta_minus(&step(&up), &step(&um)).0 / (2.0 * h);
                assert!((col - chain.column(k)).amax() < 1e-5);
            }
        }
    }
}
