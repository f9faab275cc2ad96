//! Trajectory and calibration error metrics.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::Pose2;

const MATCH_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibError {
    pub abs: Vec<f64>,
    pub rel: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ate_rmse: f64,
    pub calibration: Option<CalibError>,
    pub final_cost: f64,
    pub keyframes: usize,
    pub wall_time_s: f64,
}

/// RMS position error of the estimated keyframes against ground truth, with
/// no alignment. Truth poses must be sorted by time.
pub fn compute_ate(estimate: &[(f64, Vector2<f64>)], truth: &[(f64, Pose2)]) -> Result<f64> {
    if estimate.is_empty() {
        return Err(Error::Association("no keyframes to evaluate".into()));
    }
    let mut sum = 0.0;
    for (t, p) in estimate {
        let i = truth.partition_point(|(tt, _)| *tt < t - MATCH_TOL);
        let gt = truth
            .get(i)
            .filter(|(tt, _)| (tt - t).abs() <= MATCH_TOL)
            .ok_or_else(|| Error::Association(format!("no ground-truth pose within {MATCH_TOL} s of t={t}")))?;
        sum += (p - gt.1.p).norm_squared();
    }
    Ok((sum / estimate.len() as f64).sqrt())
}

pub fn compute_calib_error(estimated: &[f64], truth: &[f64]) -> Result<CalibError> {
    if estimated.len() != truth.len() {
        return Err(Error::ContractViolation(format!(
            "calibration has {} components, truth has {}",
            estimated.len(),
            truth.len()
        )));
    }
    let abs: Vec<f64> = estimated.iter().zip(truth).map(|(e, c)| (e - c).abs()).collect();
    let rel = abs.iter().zip(truth).map(|(a, c)| a / c.abs()).collect();
    Ok(CalibError { abs, rel })
}
