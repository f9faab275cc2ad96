//! Residuals, analytic Jacobians, whitening and robust loss.
//!
//! Every residual is whitened by an upper-triangular square-root information
//! matrix `U` with `UᵀU = Q⁻¹`. Jacobians are returned one block per
//! constrained state block, in the factor's constraint order.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};

use crate::error::{Error, Result};
use crate::manifold::{
    delta_minus, pose_between, rotation, rotation_derivative, wrap_angle, BlockKind, Delta2, Pose2, StateBlock,
};
use crate::preint::{correct_delta, CalibParams};
use crate::tree::BlockRef;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Motion,
    RangeBearing,
    PriorPose,
    PriorBlock,
    RelativePose,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Loss {
    None,
    Huber(f64),
}

/// Pre-integrated quantities frozen into a motion factor at keyframe time.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionAux {
    pub delta_bar: Delta2,
    pub q_delta: Matrix3<f64>,
    pub j_delta_c: DMatrix<f64>,
    pub c_bar: CalibParams,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FactorAux {
    None,
    Motion(MotionAux),
    PriorBlock(BlockKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub z: DVector<f64>,
    pub sqrt_info: DMatrix<f64>,
    pub loss: Loss,
    pub constrained: Vec<BlockRef>,
    pub aux: FactorAux,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub r: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

/// Upper-triangular `U` with `UᵀU = Q⁻¹`.
pub fn whiten(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !q.is_square() {
        return Err(Error::Decomposition(format!(
            "covariance is {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    let sym = 0.5 * (q + q.transpose());
    let chol = sym
        .cholesky()
        .ok_or_else(|| Error::Decomposition("covariance is not positive definite".into()))?;
    let info = chol.inverse();
    let info = 0.5 * (&info + info.transpose());
    let l = info
        .cholesky()
        .ok_or_else(|| Error::Decomposition("information matrix is not positive definite".into()))?
        .unpack();
    Ok(l.transpose())
}

/// Returns `(rho, weight)` for the Huber loss applied to a squared norm.
pub fn huber(k: f64, s: f64) -> (f64, f64) {
    if s <= k * k {
        (s, 1.0)
    } else {
        let n = s.sqrt();
        (2.0 * k * n - k * k, k / n)
    }
}

impl Loss {
    pub fn evaluate(&self, s: f64) -> (f64, f64) {
        match self {
            Loss::None => (s, 1.0),
            Loss::Huber(k) => huber(*k, s),
        }
    }
}

fn check_sqrt_info(u: &DMatrix<f64>, dim: usize) -> Result<()> {
    if u.nrows() != dim || u.ncols() != dim {
        return Err(Error::ContractViolation(format!(
            "square-root information is {}x{}, expected {dim}x{dim}",
            u.nrows(),
            u.ncols()
        )));
    }
    for i in 0..dim {
        if !(u[(i, i)] > 0.0) {
            return Err(Error::ContractViolation(
                "square-root information needs a positive diagonal".into(),
            ));
        }
        for j in 0..i {
            if u[(i, j)] != 0.0 {
                return Err(Error::ContractViolation(
                    "square-root information must be upper triangular".into(),
                ));
            }
        }
    }
    Ok(())
}

fn to_dyn3(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

/// Splits a 3-column pose Jacobian into its `p` (2 columns) and `o` (1 column) parts.
fn split_pose(j: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    (j.columns(0, 2).into_owned(), j.columns(2, 1).into_owned())
}

impl Factor {
    pub fn motion(aux: MotionAux, sqrt_info: DMatrix<f64>, constrained: [BlockRef; 5]) -> Result<Self> {
        check_sqrt_info(&sqrt_info, 3)?;
        if aux.j_delta_c.nrows() != 3 || aux.j_delta_c.ncols() != aux.c_bar.len() {
            return Err(Error::ContractViolation("calibration Jacobian shape".into()));
        }
        Ok(Self {
            kind: FactorKind::Motion,
            z: DVector::from_column_slice(aux.delta_bar.to_vector().as_slice()),
            sqrt_info,
            loss: Loss::None,
            constrained: constrained.to_vec(),
            aux: FactorAux::Motion(aux),
        })
    }

    pub fn range_bearing(
        z: Vector2<f64>,
        sqrt_info: DMatrix<f64>,
        loss: Loss,
        constrained: [BlockRef; 5],
    ) -> Result<Self> {
        check_sqrt_info(&sqrt_info, 2)?;
        Ok(Self {
            kind: FactorKind::RangeBearing,
            z: DVector::from_column_slice(z.as_slice()),
            sqrt_info,
            loss,
            constrained: constrained.to_vec(),
            aux: FactorAux::None,
        })
    }

    pub fn prior_pose(z: Pose2, sqrt_info: DMatrix<f64>, p: BlockRef, o: BlockRef) -> Result<Self> {
        check_sqrt_info(&sqrt_info, 3)?;
        Ok(Self {
            kind: FactorKind::PriorPose,
            z: DVector::from_column_slice(z.to_vector().as_slice()),
            sqrt_info,
            loss: Loss::None,
            constrained: vec![p, o],
            aux: FactorAux::None,
        })
    }

    pub fn prior_block(z: &[f64], kind: BlockKind, sqrt_info: DMatrix<f64>, block: BlockRef) -> Result<Self> {
        if z.len() != kind.dim() {
            return Err(Error::ContractViolation(format!(
                "prior of length {} on a {kind} block",
                z.len()
            )));
        }
        check_sqrt_info(&sqrt_info, kind.tangent_dim())?;
        Ok(Self {
            kind: FactorKind::PriorBlock,
            z: DVector::from_column_slice(z),
            sqrt_info,
            loss: Loss::None,
            constrained: vec![block],
            aux: FactorAux::PriorBlock(kind),
        })
    }

    pub fn relative_pose(z: Delta2, sqrt_info: DMatrix<f64>, constrained: [BlockRef; 4]) -> Result<Self> {
        check_sqrt_info(&sqrt_info, 3)?;
        Ok(Self {
            kind: FactorKind::RelativePose,
            z: DVector::from_column_slice(z.to_vector().as_slice()),
            sqrt_info,
            loss: Loss::None,
            constrained: constrained.to_vec(),
            aux: FactorAux::None,
        })
    }

    pub fn with_loss(mut self, loss: Loss) -> Self {
        self.loss = loss;
        self
    }

    pub fn dim(&self) -> usize {
        self.sqrt_info.nrows()
    }

    /// Evaluates the residual given the constrained blocks, in constraint order.
    pub fn evaluate(&self, blocks: &[&StateBlock]) -> Result<Residual> {
        if blocks.len() != self.constrained.len() {
            return Err(Error::ContractViolation(format!(
                "{:?} factor expects {} blocks, got {}",
                self.kind,
                self.constrained.len(),
                blocks.len()
            )));
        }
        let pose = |p: &StateBlock, o: &StateBlock| Pose2::from_parts(p.values(), o.values()[0]);
        match self.kind {
            FactorKind::Motion => residual_motion(
                &pose(blocks[0], blocks[1]),
                &pose(blocks[2], blocks[3]),
                &CalibParams::new(blocks[4].values()),
                self,
            ),
            FactorKind::RangeBearing => {
                let l = blocks[4].values();
                residual_range_bearing(
                    &pose(blocks[0], blocks[1]),
                    &pose(blocks[2], blocks[3]),
                    &Vector2::new(l[0], l[1]),
                    self,
                )
            }
            FactorKind::PriorPose | FactorKind::PriorBlock => residual_prior(blocks, self),
            FactorKind::RelativePose => {
                residual_relative_pose(&pose(blocks[0], blocks[1]), &pose(blocks[2], blocks[3]), self)
            }
        }
    }
}

fn expect_kind(f: &Factor, kinds: &[FactorKind]) -> Result<()> {
    if kinds.contains(&f.kind) {
        Ok(())
    } else {
        Err(Error::ContractViolation(format!(
            "{:?} factor passed to a {:?} residual",
            f.kind, kinds
        )))
    }
}

/// `r = U (Delta(c) ⊖ (xj ⊟ xi))`. Jacobians: `xi.p, xi.o, xj.p, xj.o, c`.
pub fn residual_motion(xi: &Pose2, xj: &Pose2, c: &CalibParams, f: &Factor) -> Result<Residual> {
    expect_kind(f, &[FactorKind::Motion])?;
    let FactorAux::Motion(aux) = &f.aux else {
        return Err(Error::ContractViolation(
            "motion factor without pre-integration data".into(),
        ));
    };
    let corrected = correct_delta(&aux.delta_bar, &aux.j_delta_c, c, &aux.c_bar)?;
    let (between, j_i, j_j) = pose_between(xi, xj);
    let err = delta_minus(&corrected, &between);
    let u = &f.sqrt_info;
    let r = u * DVector::from_column_slice(err.0.as_slice());
    let (ji_p, ji_o) = split_pose(-(u * to_dyn3(&j_i)));
    let (jj_p, jj_o) = split_pose(-(u * to_dyn3(&j_j)));
    let j_c = u * &aux.j_delta_c;
    Ok(Residual {
        r,
        jacobians: vec![ji_p, ji_o, jj_p, jj_o, j_c],
    })
}

/// Predicted (range, bearing) of landmark `l` seen from robot `x` through
/// sensor extrinsics `ext`, with Jacobians w.r.t. `x.p, x.o, ext.p, ext.o, l`.
pub fn predict_range_bearing(x: &Pose2, ext: &Pose2, l: &Vector2<f64>) -> Result<(Vector2<f64>, [DMatrix<f64>; 5])> {
    let rx = rotation(x.theta);
    let drx = rotation_derivative(x.theta);
    let s_p = x.p + rx * ext.p;
    let s_theta = x.theta + ext.theta;
    let rs_t = rotation(s_theta).transpose();
    let drs_t = rotation_derivative(s_theta).transpose();
    let d = l - s_p;
    let ls = rs_t * d;
    let rho = ls.norm();
    if rho < 1e-9 {
        return Err(Error::SingularObservation);
    }
    let h = Vector2::new(rho, ls.y.atan2(ls.x));
    let dh_dls = Matrix2::new(ls.x / rho, ls.y / rho, -ls.y / (rho * rho), ls.x / (rho * rho));
    let dls_dstheta = drs_t * d;
    let dls_dxp = -rs_t;
    let dls_dxo = -rs_t * drx * ext.p + dls_dstheta;
    let dls_dep = -rs_t * rx;
    let dls_deo = dls_dstheta;
    let dls_dl = rs_t;
    let dyn2 = |j: &Matrix2<f64>| DMatrix::from_column_slice(2, 2, (dh_dls * j).as_slice());
    let dyn1 = |j: &Vector2<f64>| DMatrix::from_column_slice(2, 1, (dh_dls * j).as_slice());
    Ok((
        h,
        [
            dyn2(&dls_dxp),
            dyn1(&dls_dxo),
            dyn2(&dls_dep),
            dyn1(&dls_deo),
            dyn2(&dls_dl),
        ],
    ))
}

/// `r = U (z - h(x, ext, l))` with the bearing difference wrapped.
pub fn residual_range_bearing(x: &Pose2, ext: &Pose2, l: &Vector2<f64>, f: &Factor) -> Result<Residual> {
    expect_kind(f, &[FactorKind::RangeBearing])?;
    let (h, jh) = predict_range_bearing(x, ext, l)?;
    let err = DVector::from_vec(vec![f.z[0] - h.x, wrap_angle(f.z[1] - h.y)]);
    let u = &f.sqrt_info;
    Ok(Residual {
        r: u * err,
        jacobians: jh.into_iter().map(|j| -(u * j)).collect(),
    })
}

/// Pose prior (`U (x ⊟ z)`) or single-block prior (`U (x - z)`).
pub fn residual_prior(blocks: &[&StateBlock], f: &Factor) -> Result<Residual> {
    expect_kind(f, &[FactorKind::PriorPose, FactorKind::PriorBlock])?;
    let u = &f.sqrt_info;
    match f.kind {
        FactorKind::PriorPose => {
            if blocks.len() != 2 {
                return Err(Error::ContractViolation("pose prior needs p and o blocks".into()));
            }
            let z = Pose2::new(f.z[0], f.z[1], f.z[2]);
            let x = Pose2::from_parts(blocks[0].values(), blocks[1].values()[0]);
            let (d, _, j_x) = pose_between(&z, &x);
            let r = u * DVector::from_column_slice(d.to_vector().as_slice());
            let (jp, jo) = split_pose(u * to_dyn3(&j_x));
            Ok(Residual {
                r,
                jacobians: vec![jp, jo],
            })
        }
        _ => {
            let [b] = blocks else {
                return Err(Error::ContractViolation("block prior needs exactly one block".into()));
            };
            if b.values().len() != f.z.len() {
                return Err(Error::ContractViolation("block prior dimension mismatch".into()));
            }
            let mut err = DVector::from_column_slice(b.values()) - &f.z;
            if b.kind() == BlockKind::Angle {
                err[0] = wrap_angle(err[0]);
            }
            Ok(Residual {
                r: u * err,
                jacobians: vec![u.clone()],
            })
        }
    }
}

/// `r = U (z ⊖ (xj ⊟ xi))`. Jacobians: `xi.p, xi.o, xj.p, xj.o`.
pub fn residual_relative_pose(xi: &Pose2, xj: &Pose2, f: &Factor) -> Result<Residual> {
    expect_kind(f, &[FactorKind::RelativePose])?;
    let z = Delta2::new(f.z[0], f.z[1], f.z[2]);
    let (between, j_i, j_j) = pose_between(xi, xj);
    let err = delta_minus(&z, &between);
    let u = &f.sqrt_info;
    let r = u * DVector::from_column_slice(err.0.as_slice());
    let (ji_p, ji_o) = split_pose(-(u * to_dyn3(&j_i)));
    let (jj_p, jj_o) = split_pose(-(u * to_dyn3(&j_j)));
    Ok(Residual {
        r,
        jacobians: vec![ji_p, ji_o, jj_p, jj_o],
    })
}

/// Central-difference Jacobians of `residual` w.r.t. each block's tangent
/// coordinates, stepping through the block's own plus operator.
pub fn numeric_jacobian<F>(residual: F, blocks: &[StateBlock], step: f64) -> Result<Vec<DMatrix<f64>>>
where
    F: Fn(&[StateBlock]) -> Result<DVector<f64>>,
{
    let mut out = Vec::with_capacity(blocks.len());
    let mut work = blocks.to_vec();
    for (i, block) in blocks.iter().enumerate() {
        let dim = block.tangent_dim();
        let mut cols: Vec<DVector<f64>> = Vec::with_capacity(dim);
        for k in 0..dim {
            let mut dx = vec![0.0; dim];
            dx[k] = step;
            work[i].set_values(&crate::manifold::block_plus(block, &dx)?)?;
            let plus = residual(&work)?;
            dx[k] = -step;
            work[i].set_values(&crate::manifold::block_plus(block, &dx)?)?;
            let minus = residual(&work)?;
            work[i] = block.clone();
            cols.push((plus - minus) / (2.0 * step));
        }
        out.push(DMatrix::from_columns(&cols));
    }
    Ok(out)
}

/// Diagonal square-root information from standard deviations.
pub fn sqrt_info_from_sigmas(sigmas: &[f64]) -> Result<DMatrix<f64>> {
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidValue(format!("standard deviation {s} must be positive")));
    }
    Ok(DMatrix::from_diagonal(&DVector::from_iterator(
        sigmas.len(),
        sigmas.iter().map(|s| 1.0 / s),
    )))
}
