//! Landmark tracker for 2D range-bearing scans.
//!
//! Scans are associated against the map on arrival, but features, landmarks
//! and factors are only attached when the scan lands on a keyframe: either one
//! this tracker votes, one created by another processor within tolerance, or
//! one broadcast while the scan is pending.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, Vector2};

use super::{
    CaptureData, JoinResult, KeyframeEvent, KeyframePolicy, ProcessContext, Processor, RangeBearing, RawCapture,
};
use crate::error::{Error, Result};
use crate::factors::{Factor, Loss};
use crate::manifold::{Pose2, StateBlock};
use crate::sensors::{extrinsic, noise, BEARING_STD, EXTRINSIC_O, EXTRINSIC_P, RANGE_STD};
use crate::tree::{BlockRef, CaptureInfo, FeatureInfo, LandmarkInfo, NodeId, Payload, ProblemTree};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Association {
    /// Match on identifiers carried by the measurements.
    Id,
    /// Nearest landmark within a Euclidean gate (m) in world coordinates.
    Gate(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerOptions {
    pub association: Association,
    /// Landmarks last observed more than this many keyframes ago are not
    /// eligible for association.
    pub window: Option<usize>,
    pub huber: Option<f64>,
    pub policy: KeyframePolicy,
    pub time_tolerance: f64,
}

impl Default for TrackerOptions {
    fn default() -> Self {
        Self {
            association: Association::Gate(0.5),
            window: None,
            huber: None,
            policy: KeyframePolicy::default(),
            time_tolerance: 0.05,
        }
    }
}

pub struct LandmarkTracker {
    name: String,
    sensor: NodeId,
    opts: TrackerOptions,
    last_seen: BTreeMap<NodeId, usize>,
    by_id: HashMap<i64, NodeId>,
    keyframes: usize,
    attached: Option<NodeId>,
    pending: Option<(f64, Vec<RangeBearing>)>,
}

/// World position of a range-bearing measurement taken from robot pose `x`
/// through sensor extrinsics `ext`.
pub fn invert_measurement(x: &Pose2, ext: &Pose2, range: f64, bearing: f64) -> Vector2<f64> {
    let local = Vector2::new(range * bearing.cos(), range * bearing.sin());
    x.transform_point(&ext.transform_point(&local))
}

impl LandmarkTracker {
    pub fn new(name: impl Into<String>, sensor: NodeId, opts: TrackerOptions) -> Result<Self> {
        if !(opts.time_tolerance > 0.0) {
            return Err(Error::InvalidValue(format!(
                "time tolerance must be > 0, got {}",
                opts.time_tolerance
            )));
        }
        if let Association::Gate(g) = opts.association {
            if !(g > 0.0) {
                return Err(Error::InvalidValue(format!("association gate must be > 0, got {g}")));
            }
        }
        if opts.window == Some(0) {
            return Err(Error::InvalidValue("association window must be > 0".into()));
        }
        opts.policy.validate()?;
        Ok(Self {
            name: name.into(),
            sensor,
            opts,
            last_seen: BTreeMap::new(),
            by_id: HashMap::new(),
            keyframes: 0,
            attached: None,
            pending: None,
        })
    }

    pub fn known_landmarks(&self) -> usize {
        self.last_seen.len()
    }

    fn eligible(&self, l: NodeId) -> bool {
        match (self.last_seen.get(&l), self.opts.window) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(&seen), Some(w)) => self.keyframes + 1 - seen <= w,
        }
    }

    /// Landmark matched by each measurement, or `None` for a new one.
    pub fn associate(&self, tree: &ProblemTree, x: &Pose2, scan: &[RangeBearing]) -> Result<Vec<Option<NodeId>>> {
        let mut used: Vec<NodeId> = Vec::new();
        let mut out = Vec::with_capacity(scan.len());
        match self.opts.association {
            Association::Id => {
                for m in scan {
                    let id = m.id.ok_or_else(|| {
                        Error::Association(format!("processor '{}' needs landmark ids in the data", self.name))
                    })?;
                    let hit = self
                        .by_id
                        .get(&id)
                        .copied()
                        .filter(|l| tree.contains(*l) && self.eligible(*l) && !used.contains(l));
                    if let Some(l) = hit {
                        used.push(l);
                    }
                    out.push(hit);
                }
            }
            Association::Gate(gate) => {
                let ext = extrinsic(tree, self.sensor)?;
                let candidates: Vec<(NodeId, Vector2<f64>)> = self
                    .last_seen
                    .keys()
                    .filter(|l| self.eligible(**l))
                    .filter_map(|l| {
                        let b = tree.node(*l).ok()?.blocks.get("p")?;
                        Some((*l, Vector2::new(b.values()[0], b.values()[1])))
                    })
                    .collect();
                for m in scan {
                    let w = invert_measurement(x, &ext, m.range, m.bearing);
                    let mut best: Option<(f64, NodeId)> = None;
                    for (l, p) in &candidates {
                        if used.contains(l) {
                            continue;
                        }
                        let d = (p - w).norm();
                        if d > gate {
                            continue;
                        }
                        // candidates iterate in ascending id: strict < keeps the lowest on ties
                        if best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, *l));
                        }
                    }
                    let hit = best.map(|(_, l)| l);
                    if let Some(l) = hit {
                        used.push(l);
                    }
                    out.push(hit);
                }
            }
        }
        Ok(out)
    }

    fn attach(&mut self, tree: &mut ProblemTree, frame: NodeId, t: f64, scan: &[RangeBearing]) -> Result<()> {
        let x = tree.frame_pose(frame)?;
        let matches = self.associate(tree, &x, scan)?;
        let ext = extrinsic(tree, self.sensor)?;
        let u = DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0 / noise(tree, self.sensor, RANGE_STD)?,
            1.0 / noise(tree, self.sensor, BEARING_STD)?,
        ]));
        let loss = self.opts.huber.map_or(Loss::None, Loss::Huber);
        self.keyframes += 1;
        let data: Vec<f64> = scan.iter().flat_map(|m| [m.range, m.bearing]).collect();
        let capture = tree.emplace_capture(
            frame,
            self.sensor,
            t,
            CaptureInfo {
                label: "scan".into(),
                data,
            },
        )?;
        for (m, hit) in scan.iter().zip(matches) {
            let landmark = match hit {
                Some(l) => l,
                None => {
                    let w = invert_measurement(&x, &ext, m.range, m.bearing);
                    let l =
                        tree.emplace_landmark(StateBlock::euclidean(w.as_slice()), LandmarkInfo { external_id: m.id })?;
                    if let Some(id) = m.id {
                        self.by_id.insert(id, l);
                    }
                    l
                }
            };
            self.last_seen.insert(landmark, self.keyframes);
            let feature = tree.emplace_feature(
                capture,
                FeatureInfo {
                    measurement: DVector::from_vec(vec![m.range, m.bearing]),
                    external_id: m.id,
                },
            )?;
            let factor = Factor::range_bearing(
                Vector2::new(m.range, m.bearing),
                u.clone(),
                loss,
                [
                    BlockRef::new(frame, "p"),
                    BlockRef::new(frame, "o"),
                    BlockRef::new(self.sensor, EXTRINSIC_P),
                    BlockRef::new(self.sensor, EXTRINSIC_O),
                    BlockRef::new(landmark, "p"),
                ],
            )?;
            tree.emplace_factor(feature, factor)?;
        }
        self.attached = Some(frame);
        self.pending = None;
        Ok(())
    }
}

impl Processor for LandmarkTracker {
    fn name(&self) -> &str {
        &self.name
    }

    fn sensor(&self) -> NodeId {
        self.sensor
    }

    fn time_tolerance(&self) -> f64 {
        self.opts.time_tolerance
    }

    fn init(&mut self, tree: &mut ProblemTree, _first_frame: NodeId) -> Result<()> {
        let node = tree.node(self.sensor)?;
        if !node.blocks.contains_key(EXTRINSIC_P) || !node.blocks.contains_key(EXTRINSIC_O) {
            return Err(Error::Reference(format!(
                "processor '{}': sensor {} has no extrinsic blocks",
                self.name, self.sensor
            )));
        }
        for l in tree.landmarks() {
            self.last_seen.insert(l, 0);
            if let Payload::Landmark(LandmarkInfo { external_id: Some(id) }) = tree.node(l)?.payload {
                self.by_id.insert(id, l);
            }
        }
        Ok(())
    }

    fn process(
        &mut self,
        tree: &mut ProblemTree,
        capture: &RawCapture,
        ctx: &ProcessContext,
    ) -> Result<Option<KeyframeEvent>> {
        let CaptureData::Scan(scan) = &capture.data else {
            return Err(Error::ContractViolation(format!(
                "processor '{}' expects scans",
                self.name
            )));
        };
        let t = capture.t;
        if let Some(last) = tree.last_frame() {
            let t_last = tree.timestamp(last)?;
            if (t_last - t).abs() <= self.opts.time_tolerance && self.attached != Some(last) {
                self.attach(tree, last, t, scan)?;
                return Ok(None);
            }
        }
        let x = match (ctx.pose_hint, tree.last_frame()) {
            (Some(x), _) => x,
            (None, Some(f)) => tree.frame_pose(f)?,
            (None, None) => {
                return Err(Error::NotReady(format!(
                    "processor '{}' has no pose estimate",
                    self.name
                )));
            }
        };
        let matched = self.associate(tree, &x, scan)?.iter().filter(|m| m.is_some()).count();
        if self.opts.policy.track_vote(matched) {
            let kf = tree.emplace_frame(t, &x, false)?;
            self.attach(tree, kf, t, scan)?;
            return Ok(Some(KeyframeEvent { frame: kf, t }));
        }
        self.pending = Some((t, scan.clone()));
        Ok(None)
    }

    fn on_keyframe(&mut self, tree: &mut ProblemTree, kf: NodeId, t: f64) -> Result<JoinResult> {
        let gap = self.pending.as_ref().map_or(f64::INFINITY, |(tp, _)| (tp - t).abs());
        if gap > self.opts.time_tolerance {
            return Ok(JoinResult::Declined { gap });
        }
        let (tp, scan) = self.pending.take().expect("pending scan within tolerance");
        self.attach(tree, kf, tp, &scan)?;
        Ok(JoinResult::Joined)
    }
}
