//! Deterministic diff-drive + range-bearing simulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{CaptureRecord, TRUTH, TRUTH_INTRINSIC, TRUTH_LANDMARK};
use crate::error::{Error, Result};
use crate::manifold::{pose_compose, wrap_angle, Pose2};
use crate::preint::compute_delta;

fn ten() -> f64 {
    10.0
}

fn yes() -> bool {
    true
}

fn odom() -> String {
    "odom".into()
}

fn lidar() -> String {
    "lidar".into()
}

/// Constant body twist held for `duration` seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub duration: f64,
    pub v: f64,
    pub w: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseLevels {
    pub tick_std: f64,
    pub range_std: f64,
    pub bearing_std: f64,
}

/// Landmarks drawn uniformly in `area = [x_min, y_min, x_max, y_max]`, or
/// given explicitly by `points`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkField {
    #[serde(default)]
    pub count: usize,
    #[serde(default)]
    pub area: [f64; 4],
    #[serde(default)]
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub seed: u64,
    pub duration: f64,
    #[serde(default = "ten")]
    pub odom_rate: f64,
    /// Scans are taken every `round(odom_rate / scan_rate)` odometry steps.
    #[serde(default = "ten")]
    pub scan_rate: f64,
    pub c_true: [f64; 3],
    #[serde(default)]
    pub extrinsic: [f64; 3],
    #[serde(default)]
    pub start: [f64; 3],
    pub landmarks: LandmarkField,
    /// Twist segments, repeated cyclically.
    pub control: Vec<Twist>,
    #[serde(default)]
    pub noise: NoiseLevels,
    pub max_range: f64,
    /// Full field of view, rad.
    pub fov: f64,
    #[serde(default = "yes")]
    pub emit_ids: bool,
    #[serde(default = "odom")]
    pub odom_sensor: String,
    #[serde(default = "lidar")]
    pub scan_sensor: String,
}

impl SimScenario {
    pub fn from_yaml(text: &str) -> Result<Self> {
        let s: Self = serde_yaml::from_str(text).map_err(|e| Error::Parse {
            line: e.location().map_or(0, |l| l.line()),
            msg: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("duration", self.duration),
            ("odom_rate", self.odom_rate),
            ("scan_rate", self.scan_rate),
            ("max_range", self.max_range),
            ("fov", self.fov),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("must be > 0, got {v}")));
            }
        }
        if self.c_true.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::config("c_true", "radii and separation must be > 0"));
        }
        let n = self.noise;
        for (k, v) in [
            ("noise.tick_std", n.tick_std),
            ("noise.range_std", n.range_std),
            ("noise.bearing_std", n.bearing_std),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(k, format!("must be >= 0, got {v}")));
            }
        }
        if self.control.is_empty() || self.control.iter().any(|s| !(s.duration > 0.0)) {
            return Err(Error::config("control", "needs at least one segment with duration > 0"));
        }
        if self.landmarks.points.is_empty() && self.landmarks.count > 0 {
            let [x0, y0, x1, y1] = self.landmarks.area;
            if !(x1 > x0 && y1 > y0) {
                return Err(Error::config("landmarks.area", "expected [x_min, y_min, x_max, y_max]"));
            }
        }
        Ok(())
    }

    fn twist_at(&self, t: f64) -> Twist {
        let cycle: f64 = self.control.iter().map(|s| s.duration).sum();
        let mut rem = t.rem_euclid(cycle);
        for s in &self.control {
            if rem < s.duration {
                return *s;
            }
            rem -= s.duration;
        }
        self.control[self.control.len() - 1]
    }

    fn landmark_points(&self, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
        if !self.landmarks.points.is_empty() {
            return self.landmarks.points.clone();
        }
        let [x0, y0, x1, y1] = self.landmarks.area;
        (0..self.landmarks.count)
            .map(|_| [rng.gen_range(x0..x1), rng.gen_range(y0..y1)])
            .collect()
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated std")
}

/// Returns the capture log and the ground-truth log.
pub fn simulate(sc: &SimScenario) -> Result<(Vec<CaptureRecord>, Vec<CaptureRecord>)> {
    sc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let lmks = sc.landmark_points(&mut rng);
    let tick = normal(sc.noise.tick_std);
    let range = normal(sc.noise.range_std);
    let bearing = normal(sc.noise.bearing_std);
    let [rl, rr, d] = sc.c_true;
    let ext = Pose2::new(sc.extrinsic[0], sc.extrinsic[1], sc.extrinsic[2]);
    let scan_every = ((sc.odom_rate / sc.scan_rate).round() as usize).max(1);
    let steps = (sc.duration * sc.odom_rate + 1e-9).floor() as usize;

    let mut x = Pose2::new(sc.start[0], sc.start[1], wrap_angle(sc.start[2]));
    let mut log = Vec::new();
    let mut truth = vec![CaptureRecord::new(0.0, TRUTH_INTRINSIC, json!(sc.c_true))];
    for (i, p) in lmks.iter().enumerate() {
        truth.push(CaptureRecord::new(0.0, TRUTH_LANDMARK, json!([i, p[0], p[1]])));
    }
    truth.push(CaptureRecord::new(0.0, TRUTH, json!([x.p.x, x.p.y, x.theta])));

    let scan = |t: f64, x: &Pose2, rng: &mut ChaCha8Rng| {
        let s = pose_compose(x, &ext.as_delta()).0;
        let (sin, cos) = s.theta.sin_cos();
        let mut meas = Vec::new();
        for (i, l) in lmks.iter().enumerate() {
            let (dx, dy) = (l[0] - s.p.x, l[1] - s.p.y);
            let (lx, ly) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let r = lx.hypot(ly);
            let b = ly.atan2(lx);
            if r > sc.max_range || b.abs() > 0.5 * sc.fov {
                continue;
            }
            let r = r + range.sample(rng);
            let b = wrap_angle(b + bearing.sample(rng));
            meas.push(if sc.emit_ids { json!([i, r, b]) } else { json!([r, b]) });
        }
        CaptureRecord::new(t, sc.scan_sensor.clone(), json!(meas))
    };

    log.push(scan(0.0, &x, &mut rng));
    for k in 1..=steps {
        let t = k as f64 / sc.odom_rate;
        let dt = 1.0 / sc.odom_rate;
        let tw = sc.twist_at(t - 0.5 * dt);
        let (arc, dtheta) = (tw.v * dt, tw.w * dt);
        let (delta, _) = compute_delta(&nalgebra::Vector2::new(arc, dtheta));
        x = pose_compose(&x, &delta).0;
        let left = (arc - 0.5 * d * dtheta) / rl + tick.sample(&mut rng);
        let right = (arc + 0.5 * d * dtheta) / rr + tick.sample(&mut rng);
        log.push(CaptureRecord::new(t, sc.odom_sensor.clone(), json!([left, right])));
        truth.push(CaptureRecord::new(t, TRUTH, json!([x.p.x, x.p.y, x.theta])));
        if k % scan_every == 0 {
            log.push(scan(t, &x, &mut rng));
        }
    }
    Ok((log, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{truth_poses, write_records};
    use std::f64::consts::PI;

    fn scenario() -> SimScenario {
        SimScenario {
            seed: 7,
            duration: 1.0,
            odom_rate: 10.0,
            scan_rate: 10.0,
            c_true: [0.1, 0.12, 0.5],
            extrinsic: [0.0; 3],
            start: [0.0; 3],
            landmarks: LandmarkField {
                count: 0,
                area: [0.0; 4],
                points: vec![[2.0, 0.0], [-2.0, 0.0]],
            },
            control: vec![Twist {
                duration: 10.0,
                v: 1.0,
                w: 0.0,
            }],
            noise: NoiseLevels::default(),
            max_range: 10.0,
            fov: PI,
            emit_ids: true,
            odom_sensor: "odom".into(),
            scan_sensor: "lidar".into(),
        }
    }

    #[test]
    fn straight_line_inverse_kinematics() {
        let (log, truth) = simulate(&scenario()).unwrap();
        let odom: Vec<_> = log.iter().filter(|r| r.sensor == "odom").collect();
        assert_eq!(odom.len(), 10);
        for r in odom {
            let v = r.data.as_array().unwrap();
            assert!((v[0].as_f64().unwrap() - 0.1 / 0.1).abs() < 1e-12);
            assert!((v[1].as_f64().unwrap() - 0.1 / 0.12).abs() < 1e-12);
        }
        let end = truth_poses(&truth).unwrap().last().copied().unwrap();
        assert!((end.0 - 1.0).abs() < 1e-12);
        assert!((end.1.p.x - 1.0).abs() < 1e-12 && end.1.p.y.abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut sc = scenario();
        sc.noise = NoiseLevels {
            tick_std: 0.01,
            range_std: 0.02,
            bearing_std: 0.01,
        };
        sc.landmarks = LandmarkField {
            count: 20,
            area: [-5.0, -5.0, 5.0, 5.0],
            points: vec![],
        };
        let (a, ta) = simulate(&sc).unwrap();
        let (b, tb) = simulate(&sc).unwrap();
        assert_eq!(write_records(&a).unwrap(), write_records(&b).unwrap());
        assert_eq!(write_records(&ta).unwrap(), write_records(&tb).unwrap());
        sc.seed += 1;
        assert_ne!(
            write_records(&simulate(&sc).unwrap().0).unwrap(),
            write_records(&a).unwrap()
        );
    }

    #[test]
    fn landmark_behind_is_not_seen() {
        let (log, _) = simulate(&scenario()).unwrap();
        for r in log.iter().filter(|r| r.sensor == "lidar") {
            let ids: Vec<i64> = r
                .data
                .as_array()
                .unwrap()
                .iter()
                .map(|m| m[0].as_i64().unwrap())
                .collect();
            assert_eq!(ids, vec![0], "at t={}", r.t);
        }
    }

    #[test]
    fn scan_follows_odometry_at_equal_time() {
        let (log, _) = simulate(&scenario()).unwrap();
        assert_eq!(log[0].sensor, "lidar");
        assert_eq!(log[0].t, 0.0);
        for w in log[1..].chunks(2) {
            assert_eq!(w[0].sensor, "odom");
            assert_eq!(w[1].sensor, "lidar");
            assert_eq!(w[0].t, w[1].t);
        }
    }

    #[test]
    fn measurements_match_geometry() {
        let mut sc = scenario();
        sc.extrinsic = [0.2, 0.1, 0.3];
        sc.control = vec![Twist {
            duration: 10.0,
            v: 0.5,
            w: 0.4,
        }];
        sc.fov = 2.0 * PI;
        let (log, truth) = simulate(&sc).unwrap();
        let poses = truth_poses(&truth).unwrap();
        let ext = Pose2::new(0.2, 0.1, 0.3);
        for r in log.iter().filter(|r| r.sensor == "lidar") {
            let x = poses.iter().find(|(t, _)| *t == r.t).unwrap().1;
            let s = x.transform_point(&ext.p);
            for m in r.data.as_array().unwrap() {
                let id = m[0].as_u64().unwrap() as usize;
                let l = nalgebra::Vector2::from(sc.landmarks.points[id]);
                let range = (l - s).norm();
                let bearing = wrap_angle((l.y - s.y).atan2(l.x - s.x) - x.theta - ext.theta);
                assert!((m[1].as_f64().unwrap() - range).abs() < 1e-12);
                assert!(wrap_angle(m[2].as_f64().unwrap() - bearing).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn controls_cycle() {
        let mut sc = scenario();
        sc.control = vec![
            Twist {
                duration: 1.0,
                v: 1.0,
                w: 0.0,
            },
            Twist {
                duration: 2.0,
                v: 0.0,
                w: 1.0,
            },
        ];
        assert_eq!(sc.twist_at(0.5).v, 1.0);
        assert_eq!(sc.twist_at(1.5).w, 1.0);
        assert_eq!(sc.twist_at(3.5).v, 1.0);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut sc = scenario();
        sc.odom_rate = 0.0;
        assert!(simulate(&sc).is_err());
        let mut sc = scenario();
        sc.noise.range_std = -1.0;
        assert!(sc.validate().is_err());
        let mut sc = scenario();
        sc.control.clear();
        assert!(sc.validate().is_err());
    }
}
