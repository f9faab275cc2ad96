//! Differential-drive motion processor: pre-integrates wheel increments
//! between keyframes and emits one motion factor per segment.

use nalgebra::{DMatrix, DVector, Matrix3};

use super::{CaptureData, JoinResult, KeyframeEvent, KeyframePolicy, ProcessContext, Processor, RawCapture};
use crate::error::{Error, Result};
use crate::factors::{whiten, Factor, MotionAux};
use crate::manifold::{Pose2, StateBlock};
use crate::preint::{CalibParams, DiffDrive, PreintBuffer, RawMotion};
use crate::sensors::{DELTA_FLOOR_STD, INTRINSIC, TICK_STD};
use crate::tree::{BlockRef, CaptureInfo, FeatureInfo, NodeId, ProblemTree};

/// Blocks this processor needs on every keyframe it touches.
const REQUIRED_BLOCKS: [&str; 2] = ["p", "o"];

pub struct MotionProcessor {
    name: String,
    sensor: NodeId,
    tol: f64,
    policy: KeyframePolicy,
    buffer: Option<PreintBuffer<DiffDrive>>,
}

impl MotionProcessor {
    pub fn new(name: impl Into<String>, sensor: NodeId, tol: f64, policy: KeyframePolicy) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::InvalidValue(format!("time tolerance must be > 0, got {tol}")));
        }
        policy.validate()?;
        Ok(Self {
            name: name.into(),
            sensor,
            tol,
            policy,
            buffer: None,
        })
    }

    pub fn buffer(&self) -> Option<&PreintBuffer<DiffDrive>> {
        self.buffer.as_ref()
    }

    fn buffer_ref(&self) -> Result<&PreintBuffer<DiffDrive>> {
        self.buffer
            .as_ref()
            .ok_or_else(|| Error::NotReady(format!("processor '{}' has no origin keyframe", self.name)))
    }

    fn calib(&self, tree: &ProblemTree) -> Result<CalibParams> {
        let node = tree.node(self.sensor)?;
        let block = node
            .blocks
            .get(INTRINSIC)
            .ok_or_else(|| Error::Reference(format!("sensor {} has no '{INTRINSIC}' block", self.sensor)))?;
        Ok(CalibParams::new(block.values()))
    }

    fn fresh_buffer(&self, tree: &ProblemTree, origin: NodeId, t: f64) -> Result<PreintBuffer<DiffDrive>> {
        Ok(PreintBuffer::new(DiffDrive, Some(origin), t, self.calib(tree)?))
    }

    fn origin_pose(&self, tree: &ProblemTree, buf: &PreintBuffer<DiffDrive>) -> Result<Pose2> {
        let origin = buf
            .origin_frame
            .ok_or_else(|| Error::NotReady(format!("processor '{}' has no origin keyframe", self.name)))?;
        tree.frame_pose(origin)
    }

    /// Emplaces Capture, Feature and motion Factor for `buf` on `kf`.
    fn emplace_segment(&self, tree: &mut ProblemTree, buf: &PreintBuffer<DiffDrive>, kf: NodeId) -> Result<NodeId> {
        let origin = buf
            .origin_frame
            .ok_or_else(|| Error::ContractViolation("motion segment without origin frame".into()))?;
        let floor = crate::sensors::noise_or(tree, self.sensor, DELTA_FLOOR_STD, 0.0)?;
        let q = buf.q_delta() + Matrix3::identity() * (floor * floor);
        let u = whiten(&DMatrix::from_column_slice(3, 3, q.as_slice()))?;
        let delta = buf.delta_bar();
        let aux = MotionAux {
            delta_bar: delta,
            q_delta: buf.q_delta(),
            j_delta_c: buf.j_delta_c(),
            c_bar: buf.c_bar.clone(),
        };
        let factor = Factor::motion(
            aux,
            u,
            [
                BlockRef::new(origin, "p"),
                BlockRef::new(origin, "o"),
                BlockRef::new(kf, "p"),
                BlockRef::new(kf, "o"),
                BlockRef::new(self.sensor, INTRINSIC),
            ],
        )?;
        let t = tree.timestamp(kf)?;
        let dv = delta.to_vector();
        let capture = tree.emplace_capture(
            kf,
            self.sensor,
            t,
            CaptureInfo {
                label: "motion".into(),
                data: dv.as_slice().to_vec(),
            },
        )?;
        let feature = tree.emplace_feature(
            capture,
            FeatureInfo {
                measurement: DVector::from_column_slice(dv.as_slice()),
                external_id: None,
            },
        )?;
        tree.emplace_factor(feature, factor)
    }
}

impl Processor for MotionProcessor {
    fn name(&self) -> &str {
        &self.name
    }

    fn sensor(&self) -> NodeId {
        self.sensor
    }

    fn time_tolerance(&self) -> f64 {
        self.tol
    }

    fn init(&mut self, tree: &mut ProblemTree, first_frame: NodeId) -> Result<()> {
        let t = tree.timestamp(first_frame)?;
        self.buffer = Some(self.fresh_buffer(tree, first_frame, t)?);
        Ok(())
    }

    fn process(
        &mut self,
        tree: &mut ProblemTree,
        capture: &RawCapture,
        _ctx: &ProcessContext,
    ) -> Result<Option<KeyframeEvent>> {
        let CaptureData::WheelTicks { left, right } = capture.data else {
            return Err(Error::ContractViolation(format!(
                "processor '{}' expects wheel increments",
                self.name
            )));
        };
        let tick_std = crate::sensors::noise_or(tree, self.sensor, TICK_STD, 0.0)?;
        let buf = self
            .buffer
            .as_mut()
            .ok_or_else(|| Error::NotReady(format!("processor '{}' has no origin keyframe", self.name)))?;
        buf.integrate_step(RawMotion::wheel_ticks(capture.t, left, right, tick_std))?;

        let delta = buf.delta_bar();
        if !self
            .policy
            .motion_vote(delta.dp.norm(), delta.dtheta, capture.t - buf.origin_t)
        {
            return Ok(None);
        }
        let buf = self.buffer.take().expect("buffer checked above");
        let pose = buf.state_at_high_rate(&self.origin_pose(tree, &buf)?, capture.t)?;
        let kf = tree.emplace_frame(capture.t, &pose, false)?;
        self.emplace_segment(tree, &buf, kf)?;
        self.buffer = Some(self.fresh_buffer(tree, kf, capture.t)?);
        Ok(Some(KeyframeEvent {
            frame: kf,
            t: capture.t,
        }))
    }

    fn on_keyframe(&mut self, tree: &mut ProblemTree, kf: NodeId, t: f64) -> Result<JoinResult> {
        let buf = self.buffer_ref()?;
        if buf.origin_frame == Some(kf) {
            return Ok(JoinResult::Joined);
        }
        let (idx, gap) = buf.nearest_split(t);
        if gap > self.tol || idx == 0 {
            return Ok(JoinResult::Declined { gap });
        }
        let (first, mut second) = buf.split(t, self.tol)?;
        let origin_pose = self.origin_pose(tree, &first)?;
        let node = tree.node(kf)?;
        let missing: Vec<&str> = REQUIRED_BLOCKS
            .iter()
            .copied()
            .filter(|b| !node.blocks.contains_key(*b))
            .collect();
        if !missing.is_empty() {
            let pose = first.state_at_high_rate(&origin_pose, t)?;
            for name in missing {
                let block = match name {
                    "p" => StateBlock::euclidean(pose.p.as_slice()),
                    _ => StateBlock::angle(pose.theta),
                };
                tree.add_block_to_frame(kf, name, block)?;
            }
        }
        self.emplace_segment(tree, &first, kf)?;
        second.origin_frame = Some(kf);
        self.buffer = Some(second);
        Ok(JoinResult::Joined)
    }

    fn pose_at(&self, tree: &ProblemTree, t: f64) -> Option<Pose2> {
        let buf = self.buffer.as_ref()?;
        let origin = self.origin_pose(tree, buf).ok()?;
        buf.state_at_high_rate(&origin, t).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::FactorKind;
    use crate::manifold::{pose_between, wrap_angle};
    use crate::sensors::{emplace_sensor, SensorSpec, DIFF_DRIVE};
    use crate::tree::{NodeKind, NodeSpec};
    use std::collections::BTreeMap;

    const C: [f64; 3] = [0.1, 0.1, 0.5];

    fn setup(policy: KeyframePolicy) -> (ProblemTree, MotionProcessor, NodeId) {
        let mut tree = ProblemTree::new();
        let sensor = emplace_sensor(
            &mut tree,
            SensorSpec {
                name: "odom".into(),
                sensor_type: DIFF_DRIVE.into(),
                extrinsic: None,
                intrinsic: Some((C.to_vec(), true)),
                noise: BTreeMap::from([(TICK_STD.to_string(), 0.01), (DELTA_FLOOR_STD.to_string(), 1e-4)]),
            },
        )
        .unwrap();
        let f0 = tree.emplace_frame(0.0, &Pose2::identity(), false).unwrap();
        let mut p = MotionProcessor::new("motion", sensor, 0.01, policy).unwrap();
        p.init(&mut tree, f0).unwrap();
        (tree, p, f0)
    }

    fn ticks(t: f64, l: f64, r: f64) -> RawCapture {
        RawCapture {
            t,
            data: CaptureData::WheelTicks { left: l, right: r },
        }
    }

    #[test]
    fn distance_vote_at_first_exceedance() {
        let policy = KeyframePolicy {
            max_dist: Some(1.0),
            ..Default::default()
        };
        let (mut tree, mut p, f0) = setup(policy);
        let ctx = ProcessContext::default();
        let mut created = None;
        for k in 1..=15 {
            // 1 rad on each wheel of radius 0.1: 0.1 m forward
            if let Some(ev) = p.process(&mut tree, &ticks(0.1 * k as f64, 1.0, 1.0), &ctx).unwrap() {
                created = Some((k, ev));
                break;
            }
        }
        let (k, ev) = created.expect("keyframe");
        assert_eq!(k, 11);
        assert_eq!(p.buffer().unwrap().delta_bar(), crate::manifold::Delta2::identity());
        assert_eq!(p.buffer().unwrap().origin_frame, Some(ev.frame));

        let pose = tree.frame_pose(ev.frame).unwrap();
        assert!((pose.p.x - 1.1).abs() < 1e-12);

        let factors = tree.factors_under(ev.frame);
        assert_eq!(factors.len(), 1);
        let f = tree.factor(factors[0]).unwrap();
        assert_eq!(f.kind, FactorKind::Motion);
        assert_eq!(f.constrained[0].node, f0);
        assert_eq!(f.constrained[2].node, ev.frame);
        assert_eq!(f.constrained[4].name, INTRINSIC);
    }

    #[test]
    fn time_vote_when_stationary() {
        let policy = KeyframePolicy {
            max_time: Some(5.0),
            ..Default::default()
        };
        let (mut tree, mut p, _) = setup(policy);
        let ctx = ProcessContext::default();
        let mut t_kf = None;
        for k in 1..=100 {
            let t = 0.1 * k as f64;
            if p.process(&mut tree, &ticks(t, 0.0, 0.0), &ctx).unwrap().is_some() {
                t_kf = Some(t);
                break;
            }
        }
        let t = t_kf.unwrap();
        assert!(t > 5.0 && t - 0.1 <= 5.0 + 1e-12, "{t}");
    }

    #[test]
    fn no_vote_below_thresholds() {
        let policy = KeyframePolicy {
            max_dist: Some(1.0),
            max_angle: Some(0.5),
            max_time: Some(100.0),
            ..Default::default()
        };
        let (mut tree, mut p, _) = setup(policy);
        let ctx = ProcessContext::default();
        for k in 1..=10 {
            assert!(p
                .process(&mut tree, &ticks(0.1 * k as f64, 0.99, 0.99), &ctx)
                .unwrap()
                .is_none());
        }
    }

    #[test]
    fn ordering_error_propagates() {
        let (mut tree, mut p, _) = setup(KeyframePolicy::default());
        let ctx = ProcessContext::default();
        p.process(&mut tree, &ticks(0.2, 1.0, 1.0), &ctx).unwrap();
        assert!(matches!(
            p.process(&mut tree, &ticks(0.1, 1.0, 1.0), &ctx),
            Err(Error::Ordering(_))
        ));
    }

    #[test]
    fn join_within_tolerance() {
        let (mut tree, mut p, f0) = setup(KeyframePolicy::default());
        let ctx = ProcessContext::default();
        for t in [0.25, 0.5, 0.75, 1.005, 1.25] {
            p.process(&mut tree, &ticks(t, 1.0, 1.2), &ctx).unwrap();
        }
        let expected = p.pose_at(&tree, 1.005).unwrap();
        let kf = tree.emplace_frame(1.0, &expected, false).unwrap();
        assert_eq!(p.on_keyframe(&mut tree, kf, 1.0).unwrap(), JoinResult::Joined);
        let factors = tree.factors_under(kf);
        assert_eq!(factors.len(), 1);
        let f = tree.factor(factors[0]).unwrap();
        assert_eq!(f.constrained[0].node, f0);
        let buf = p.buffer().unwrap();
        assert_eq!(buf.origin_frame, Some(kf));
        assert_eq!(buf.len(), 1);
        // motion factor is consistent with the seeded pose
        let (between, _, _) = pose_between(&Pose2::identity(), &expected);
        let z = f.z.clone();
        assert!((z[0] - between.dp.x).abs() < 1e-12);
        assert!(wrap_angle(z[2] - between.dtheta).abs() < 1e-12);
    }

    #[test]
    fn decline_leaves_tree_untouched() {
        let (mut tree, mut p, _) = setup(KeyframePolicy::default());
        let ctx = ProcessContext::default();
        for t in [0.5, 1.02] {
            p.process(&mut tree, &ticks(t, 1.0, 1.0), &ctx).unwrap();
        }
        let kf = tree.emplace_frame(1.0, &Pose2::identity(), false).unwrap();
        tree.drain_notifications();
        let before = tree.print_tree();
        let res = p.on_keyframe(&mut tree, kf, 1.0).unwrap();
        assert!(matches!(res, JoinResult::Declined { gap } if (gap - 0.02).abs() < 1e-12));
        assert_eq!(tree.print_tree(), before);
        assert!(!tree.has_pending_notifications());
        assert_eq!(p.buffer().unwrap().len(), 2);
    }

    #[test]
    fn join_adds_missing_blocks() {
        let (mut tree, mut p, _) = setup(KeyframePolicy::default());
        let ctx = ProcessContext::default();
        for t in [0.5, 1.0] {
            p.process(&mut tree, &ticks(t, 1.0, 1.0), &ctx).unwrap();
        }
        let kf = tree
            .emplace_node(
                NodeSpec::new(NodeKind::Frame, tree.trajectory())
                    .timestamp(1.0)
                    .block("p", StateBlock::euclidean(&[0.2, 0.0])),
            )
            .unwrap();
        assert_eq!(p.on_keyframe(&mut tree, kf, 1.0).unwrap(), JoinResult::Joined);
        let node = tree.node(kf).unwrap();
        assert!(node.blocks.contains_key("o"));
        assert!(tree.check_consistency().is_empty());
    }
}
