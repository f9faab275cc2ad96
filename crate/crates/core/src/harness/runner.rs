//! Replays a capture log through a configured problem.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use log::{debug, info};
use nalgebra::Vector2;

use super::{
    compute_ate, compute_calib_error, truth_intrinsic, truth_poses, CaptureRecord, EstimateRecord, MetricsReport,
};
use crate::config::{auto_setup, ParameterServer, Setup};
use crate::error::{Error, Result};
use crate::sensors::{sensor_info, INTRINSIC};
use crate::solver::SolveReport;
use crate::tree::{NodeId, Payload, ProblemTree};

/// What a single [`Runner::feed`] call did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeedReport {
    /// Keyframes created while processing this record.
    pub keyframes: usize,
    /// Solve of the previous timestamp group, run before this record.
    pub solve: Option<SolveReport>,
}

/// Sequential replay driver. Records sharing a timestamp form a group; after
/// a group that created keyframes the window policy is applied and the
/// problem is solved.
pub struct Runner {
    setup: Setup,
    sensors: HashMap<String, (NodeId, String)>,
    last_t: f64,
    dirty: bool,
    keyframes: usize,
    last_cost: f64,
}

impl Runner {
    pub fn new(server: &ParameterServer) -> Result<Self> {
        Self::from_setup(auto_setup(server)?)
    }

    pub fn from_setup(mut setup: Setup) -> Result<Self> {
        let mut sensors = HashMap::new();
        for s in setup.tree.sensors() {
            let info = sensor_info(&setup.tree, s)?;
            sensors.insert(info.name.clone(), (s, info.sensor_type.clone()));
        }
        let last_t = setup.tree.timestamp(setup.first_frame)?;
        setup.solver.sync(&mut setup.tree)?;
        let last_cost = setup.solver.total_cost(&setup.tree)?;
        Ok(Self {
            setup,
            sensors,
            last_t,
            dirty: false,
            keyframes: 0,
            last_cost,
        })
    }

    pub fn tree(&self) -> &ProblemTree {
        &self.setup.tree
    }

    pub fn setup(&self) -> &Setup {
        &self.setup
    }

    /// Keyframes created so far, excluding the initial frame.
    pub fn keyframes(&self) -> usize {
        self.keyframes
    }

    pub fn final_cost(&self) -> f64 {
        self.last_cost
    }

    pub fn feed(&mut self, rec: &CaptureRecord) -> Result<FeedReport> {
        if !rec.t.is_finite() || rec.t < self.last_t {
            return Err(Error::Ordering(format!(
                "record for '{}' at t={} follows t={}",
                rec.sensor, rec.t, self.last_t
            )));
        }
        let (sensor, sensor_type) = self
            .sensors
            .get(&rec.sensor)
            .cloned()
            .ok_or_else(|| Error::Binding(format!("log references unknown sensor '{}'", rec.sensor)))?;
        if !self.setup.pipeline.is_bound(sensor) {
            return Err(Error::Binding(format!(
                "no processor is bound to sensor '{}'",
                rec.sensor
            )));
        }
        let raw = rec.to_raw(&sensor_type)?;
        let mut report = FeedReport::default();
        if rec.t > self.last_t && self.dirty {
            report.solve = Some(self.solve()?);
        }
        self.last_t = rec.t;
        let dispatch = self.setup.pipeline.dispatch(&mut self.setup.tree, sensor, &raw)?;
        report.keyframes = dispatch.keyframes.len();
        if report.keyframes > 0 {
            self.keyframes += report.keyframes;
            self.dirty = true;
        }
        Ok(report)
    }

    fn solve(&mut self) -> Result<SolveReport> {
        let setup = &mut self.setup;
        if let Some(w) = &setup.window {
            setup.tree.enforce_window(w)?;
        }
        setup.solver.sync(&mut setup.tree)?;
        let report = setup.solver.lm_solve(&mut setup.tree)?;
        debug!(
            "solved {} frames: cost {:.3e} -> {:.3e} in {} iterations",
            setup.tree.frames().len(),
            report.initial_cost,
            report.final_cost,
            report.iterations
        );
        self.last_cost = report.final_cost;
        self.dirty = false;
        Ok(report)
    }

    /// Applies any pending window step and runs the final solve.
    pub fn finish(&mut self) -> Result<SolveReport> {
        self.solve()
    }

    pub fn estimate(&self) -> Result<Vec<EstimateRecord>> {
        let tree = &self.setup.tree;
        let mut out = Vec::new();
        for f in tree.frames() {
            let x = tree.frame_pose(f)?;
            out.push(EstimateRecord::Frame {
                t: tree.timestamp(f)?,
                p: [x.p.x, x.p.y],
                o: x.theta,
            });
        }
        for l in tree.landmarks() {
            let node = tree.node(l)?;
            let Some(p) = node.blocks.get("p") else { continue };
            let id = match &node.payload {
                Payload::Landmark(info) => info.external_id,
                _ => None,
            };
            out.push(EstimateRecord::Landmark {
                id,
                p: [p.values()[0], p.values()[1]],
            });
        }
        for s in tree.sensors() {
            let node = tree.node(s)?;
            let name = sensor_info(tree, s)?.name.clone();
            for (block, b) in &node.blocks {
                out.push(EstimateRecord::Calibration {
                    sensor: name.clone(),
                    block: block.clone(),
                    values: b.values().to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Estimated intrinsics of the first sensor that has them.
    pub fn intrinsic(&self) -> Option<Vec<f64>> {
        let tree = &self.setup.tree;
        tree.sensors()
            .into_iter()
            .find_map(|s| tree.node(s).ok()?.blocks.get(INTRINSIC).map(|b| b.values().to_vec()))
    }

    pub fn metrics(&self, truth: &[CaptureRecord], wall_time_s: f64) -> Result<MetricsReport> {
        let tree = &self.setup.tree;
        let gt = truth_poses(truth)?;
        let est = tree
            .frames()
            .into_iter()
            .map(|f| Ok((tree.timestamp(f)?, tree.frame_pose(f)?.p)))
            .collect::<Result<Vec<(f64, Vector2<f64>)>>>()?;
        let calibration = match (self.intrinsic(), truth_intrinsic(truth)) {
            (Some(c), Some(c_true)) => Some(compute_calib_error(&c, &c_true)?),
            _ => None,
        };
        Ok(MetricsReport {
            ate_rmse: compute_ate(&est, &gt)?,
            calibration,
            final_cost: self.last_cost,
            keyframes: tree.frames().len(),
            wall_time_s,
        })
    }
}

/// Phase in which a run failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
}

#[derive(Debug)]
pub struct RunError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for RunError {}

pub struct RunOutput {
    pub estimate: Vec<EstimateRecord>,
    pub metrics: Option<MetricsReport>,
    pub runner: Runner,
}

/// Sets up from `server`, replays `log`, and evaluates against `truth` when given.
pub fn run(
    server: &ParameterServer,
    log: &[CaptureRecord],
    truth: Option<&[CaptureRecord]>,
) -> std::result::Result<RunOutput, RunError> {
    let start = Instant::now();
    let config = |error| RunError {
        stage: Stage::Config,
        error,
    };
    let data = |error| RunError {
        stage: Stage::Data,
        error,
    };
    let mut runner = Runner::new(server).map_err(config)?;
    for rec in log {
        runner.feed(rec).map_err(data)?;
    }
    runner.finish().map_err(data)?;
    let wall = start.elapsed().as_secs_f64();
    info!(
        "replayed {} records: {} keyframes, final cost {:.3e}, {:.2} s",
        log.len(),
        runner.keyframes(),
        runner.final_cost(),
        wall
    );
    let estimate = runner.estimate().map_err(data)?;
    let metrics = truth.map(|t| runner.metrics(t, wall)).transpose().map_err(data)?;
    Ok(RunOutput {
        estimate,
        metrics,
        runner,
    })
}
