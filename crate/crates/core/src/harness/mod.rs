//! Simulation, log replay and evaluation.

mod metrics;
mod runner;
mod sim;

pub use metrics::{compute_ate, compute_calib_error, CalibError, MetricsReport};
pub use runner::{run, FeedReport, RunError, RunOutput, Runner, Stage};
pub use sim::{simulate, LandmarkField, NoiseLevels, SimScenario, Twist};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::manifold::Pose2;
use crate::processors::{CaptureData, RangeBearing, RawCapture};
use crate::sensors::{DIFF_DRIVE, RANGE_BEARING_2D};

/// Sensor name of ground-truth pose records, data `[x, y, theta]`.
pub const TRUTH: &str = "truth";
/// Ground-truth intrinsic parameters of the odometry, data `[r_l, r_r, d]`.
pub const TRUTH_INTRINSIC: &str = "truth_intrinsic";
/// Ground-truth landmark positions, data `[id, x, y]`.
pub const TRUTH_LANDMARK: &str = "truth_landmark";

/// One line of a capture or ground-truth log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub t: f64,
    pub sensor: String,
    pub data: Value,
}

impl CaptureRecord {
    pub fn new(t: f64, sensor: impl Into<String>, data: Value) -> Self {
        Self {
            t,
            sensor: sensor.into(),
            data,
        }
    }

    /// Decodes the payload for a sensor of type `sensor_type`.
    pub fn to_raw(&self, sensor_type: &str) -> Result<RawCapture> {
        let bad = |msg: &str| Error::InvalidValue(format!("record at t={} for '{}': {msg}", self.t, self.sensor));
        let data = match sensor_type {
            DIFF_DRIVE => {
                let v = numbers(&self.data).ok_or_else(|| bad("expected [left, right]"))?;
                if v.len() != 2 {
                    return Err(bad("expected [left, right]"));
                }
                CaptureData::WheelTicks {
                    left: v[0],
                    right: v[1],
                }
            }
            RANGE_BEARING_2D => {
                let items = self
                    .data
                    .as_array()
                    .ok_or_else(|| bad("expected a list of measurements"))?;
                let mut scan = Vec::with_capacity(items.len());
                for item in items {
                    let v = numbers(item).ok_or_else(|| bad("measurement must be numeric"))?;
                    let m = match v.as_slice() {
                        [range, bearing] => RangeBearing {
                            id: None,
                            range: *range,
                            bearing: *bearing,
                        },
                        [id, range, bearing] if id.fract() == 0.0 => RangeBearing {
                            id: Some(*id as i64),
                            range: *range,
                            bearing: *bearing,
                        },
                        _ => return Err(bad("measurement must be [range, bearing] or [id, range, bearing]")),
                    };
                    scan.push(m);
                }
                CaptureData::Scan(scan)
            }
            other => return Err(bad(&format!("no decoder for sensor type '{other}'"))),
        };
        Ok(RawCapture { t: self.t, data })
    }
}

fn numbers(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(Value::as_f64).collect()
}

/// Parses JSON Lines, skipping blank lines.
pub fn read_records(text: &str) -> Result<Vec<CaptureRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_records<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Ground-truth poses `(t, pose)` from a truth log.
pub fn truth_poses(records: &[CaptureRecord]) -> Result<Vec<(f64, Pose2)>> {
    records
        .iter()
        .filter(|r| r.sensor == TRUTH)
        .map(|r| match numbers(&r.data).as_deref() {
            Some([x, y, th]) => Ok((r.t, Pose2::new(*x, *y, *th))),
            _ => Err(Error::InvalidValue(format!(
                "truth record at t={} must be [x, y, theta]",
                r.t
            ))),
        })
        .collect()
}

/// Ground-truth odometry intrinsics, when the truth log carries them.
pub fn truth_intrinsic(records: &[CaptureRecord]) -> Option<Vec<f64>> {
    records
        .iter()
        .find(|r| r.sensor == TRUTH_INTRINSIC)
        .and_then(|r| numbers(&r.data))
}

/// One line of an estimate file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EstimateRecord {
    Frame {
        t: f64,
        p: [f64; 2],
        o: f64,
    },
    Landmark {
        id: Option<i64>,
        p: [f64; 2],
    },
    Calibration {
        sensor: String,
        block: String,
        values: Vec<f64>,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn decodes_wheel_ticks() {
        let r = CaptureRecord::new(0.1, "odom", json!([1.0, 2]));
        assert_eq!(
            r.to_raw(DIFF_DRIVE).unwrap().data,
            CaptureData::WheelTicks { left: 1.0, right: 2.0 }
        );
        assert!(CaptureRecord::new(0.1, "odom", json!([1.0]))
            .to_raw(DIFF_DRIVE)
            .is_err());
    }

    #[test]
    fn decodes_scans_with_and_without_ids() {
        let r = CaptureRecord::new(0.0, "lidar", json!([[3, 1.5, 0.1], [2.0, -0.2]]));
        let CaptureData::Scan(scan) = r.to_raw(RANGE_BEARING_2D).unwrap().data else {
            panic!("not a scan")
        };
        assert_eq!(scan[0].id, Some(3));
        assert_eq!(
            scan[1],
            RangeBearing {
                id: None,
                range: 2.0,
                bearing: -0.2
            }
        );
        let bad = CaptureRecord::new(0.0, "lidar", json!([[1, 2, 3, 4]]));
        assert!(bad.to_raw(RANGE_BEARING_2D).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![
            CaptureRecord::new(0.0, "lidar", json!([[1, 2.0, 0.5]])),
            CaptureRecord::new(0.1, "odom", json!([0.25, 0.5])),
        ];
        let text = write_records(&recs).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_records(&format!("{text}\n")).unwrap(), recs);
    }

    #[test]
    fn bad_line_is_reported() {
        let err = read_records("{\"t\":0,\"sensor\":\"a\",\"data\":[]}\nnot json\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn estimate_records_are_tagged() {
        let r = EstimateRecord::Frame {
            t: 1.0,
            p: [0.0, 1.0],
            o: 0.5,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.starts_with("{\"type\":\"frame\""), "{s}");
        assert_eq!(serde_json::from_str::<EstimateRecord>(&s).unwrap(), r);
    }
}
