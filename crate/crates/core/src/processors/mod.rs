//! Front-end processors and the keyframe broadcast/join protocol.
//!
//! A [`Pipeline`] owns the installed processors in installation order. When a
//! processor creates a keyframe, it finishes its own bookkeeping first and the
//! event is then offered to every other processor, in order, through
//! [`Processor::on_keyframe`].

mod loop_closure;
mod motion;
mod tracker;

pub use loop_closure::{align_points, LoopCloser, LoopPolicy};
pub use motion::MotionProcessor;
pub use tracker::{Association, LandmarkTracker, TrackerOptions};

use log::debug;

use crate::error::{Error, Result};
use crate::manifold::Pose2;
use crate::tree::{NodeId, ProblemTree};

/// One raw sensor packet as delivered to a processor.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCapture {
    pub t: f64,
    pub data: CaptureData,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CaptureData {
    /// Left and right wheel angle increments, rad.
    WheelTicks {
        left: f64,
        right: f64,
    },
    Scan(Vec<RangeBearing>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeBearing {
    pub id: Option<i64>,
    pub range: f64,
    pub bearing: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframeEvent {
    pub frame: NodeId,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JoinResult {
    Joined,
    /// Nothing of this processor's lies within its tolerance of the keyframe.
    Declined {
        gap: f64,
    },
    /// The processor does not attach data to broadcast keyframes.
    Ignored,
}

/// Keyframe voting thresholds; `None` disables a criterion.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyframePolicy {
    pub max_dist: Option<f64>,
    pub max_angle: Option<f64>,
    pub max_time: Option<f64>,
    pub min_tracks: Option<usize>,
}

impl KeyframePolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("max_dist", self.max_dist),
            ("max_angle", self.max_angle),
            ("max_time", self.max_time),
        ] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(Error::InvalidValue(format!("keyframe.{name} must be > 0, got {v}")));
                }
            }
        }
        if self.min_tracks == Some(0) {
            return Err(Error::InvalidValue("keyframe.min_tracks must be > 0".into()));
        }
        Ok(())
    }

    /// Motion vote on the pre-integrated delta since the last keyframe.
    pub fn motion_vote(&self, dist: f64, angle: f64, elapsed: f64) -> bool {
        self.max_dist.is_some_and(|m| dist > m)
            || self.max_angle.is_some_and(|m| angle.abs() > m)
            || self.max_time.is_some_and(|m| elapsed > m)
    }

    pub fn track_vote(&self, matched: usize) -> bool {
        self.min_tracks.is_some_and(|m| matched < m)
    }
}

/// Extra information available to a processor while handling a capture.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProcessContext {
    /// High-rate pose estimate at the capture time, when some processor can provide one.
    pub pose_hint: Option<Pose2>,
}

pub trait Processor {
    fn name(&self) -> &str;

    /// Sensor whose captures this processor consumes.
    fn sensor(&self) -> NodeId;

    fn time_tolerance(&self) -> f64;

    /// Called once with the first keyframe before any capture is processed.
    fn init(&mut self, tree: &mut ProblemTree, first_frame: NodeId) -> Result<()>;

    fn process(
        &mut self,
        tree: &mut ProblemTree,
        capture: &RawCapture,
        ctx: &ProcessContext,
    ) -> Result<Option<KeyframeEvent>>;

    fn on_keyframe(&mut self, tree: &mut ProblemTree, kf: NodeId, t: f64) -> Result<JoinResult>;

    /// High-rate pose at `t`, for processors that integrate motion.
    fn pose_at(&self, _tree: &ProblemTree, _t: f64) -> Option<Pose2> {
        None
    }
}

/// Installed processors, in installation order.
#[derive(Default)]
pub struct Pipeline {
    processors: Vec<Box<dyn Processor>>,
}

/// Outcome of dispatching one capture.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DispatchReport {
    pub keyframes: Vec<KeyframeEvent>,
    /// `(processor name, result)` for every broadcast delivery.
    pub joins: Vec<(String, JoinResult)>,
}

impl Pipeline {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn install(&mut self, p: Box<dyn Processor>) {
        self.processors.push(p);
    }

    pub fn len(&self) -> usize {
        self.processors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.processors.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.processors.iter().map(|p| p.name()).collect()
    }

    pub fn is_bound(&self, sensor: NodeId) -> bool {
        self.processors.iter().any(|p| p.sensor() == sensor)
    }

    pub fn init(&mut self, tree: &mut ProblemTree, first_frame: NodeId) -> Result<()> {
        for p in &mut self.processors {
            p.init(tree, first_frame)?;
        }
        Ok(())
    }

    pub fn pose_at(&self, tree: &ProblemTree, t: f64) -> Option<Pose2> {
        self.processors.iter().find_map(|p| p.pose_at(tree, t))
    }

    /// Hands `capture` to every processor bound to `sensor`, broadcasting any
    /// keyframe it creates to the others.
    pub fn dispatch(&mut self, tree: &mut ProblemTree, sensor: NodeId, capture: &RawCapture) -> Result<DispatchReport> {
        let mut report = DispatchReport::default();
        for i in 0..self.processors.len() {
            if self.processors[i].sensor() != sensor {
                continue;
            }
            let ctx = ProcessContext {
                pose_hint: self.pose_at(tree, capture.t),
            };
            if let Some(ev) = self.processors[i].process(tree, capture, &ctx)? {
                debug!(
                    "{} created keyframe {} at t={}",
                    self.processors[i].name(),
                    ev.frame,
                    ev.t
                );
                self.broadcast(tree, i, ev, &mut report)?;
                report.keyframes.push(ev);
            }
        }
        Ok(report)
    }

    fn broadcast(
        &mut self,
        tree: &mut ProblemTree,
        creator: usize,
        ev: KeyframeEvent,
        report: &mut DispatchReport,
    ) -> Result<()> {
        for (j, p) in self.processors.iter_mut().enumerate() {
            if j == creator {
                continue;
            }
            let res = p.on_keyframe(tree, ev.frame, ev.t)?;
            debug!("{} on {}: {:?}", p.name(), ev.frame, res);
            report.joins.push((p.name().to_string(), res));
        }
        Ok(())
    }
}
