//! Loop closure by landmark co-visibility and 2D point-set alignment.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DVector, Vector2};

use super::{JoinResult, KeyframeEvent, ProcessContext, Processor, RawCapture};
use crate::error::{Error, Result};
use crate::factors::{sqrt_info_from_sigmas, Factor, FactorKind};
use crate::manifold::{pose_compose, Pose2};
use crate::sensors::extrinsic;
use crate::tree::{BlockRef, CaptureInfo, FeatureInfo, NodeId, Payload, ProblemTree};

#[derive(Clone, Debug, PartialEq)]
pub struct LoopPolicy {
    pub radius: f64,
    pub min_frame_gap: usize,
    pub min_shared_landmarks: usize,
    pub sigma_p: f64,
    pub sigma_o: f64,
}

impl Default for LoopPolicy {
    fn default() -> Self {
        Self {
            radius: 2.0,
            min_frame_gap: 10,
            min_shared_landmarks: 3,
            sigma_p: 0.05,
            sigma_o: 0.02,
        }
    }
}

impl LoopPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.min_frame_gap == 0 || self.min_shared_landmarks == 0 {
            return Err(Error::InvalidValue(
                "loop radius, min_frame_gap and min_shared_landmarks must be > 0".into(),
            ));
        }
        if !(self.sigma_p > 0.0 && self.sigma_o > 0.0) {
            return Err(Error::InvalidValue("loop sigmas must be > 0".into()));
        }
        Ok(())
    }
}

/// Identity of an observed landmark: the id carried by the data when
/// present, otherwise the landmark node the tracker associated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Key {
    External(i64),
    Node(u64),
}

/// Rigid transform `T` minimizing `Σ ‖a_k − T b_k‖²`.
pub fn align_points(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> Result<Pose2> {
    if a.len() != b.len() {
        return Err(Error::Alignment(format!("{} vs {} points", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Alignment(format!("{} shared points, need at least 2", a.len())));
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector2<f64>>() / n;
    let cb = b.iter().sum::<Vector2<f64>>() / n;
    let (mut dot, mut cross, mut spread_a, mut spread_b) = (0.0, 0.0, 0.0, 0.0);
    for (pa, pb) in a.iter().zip(b) {
        let da = pa - ca;
        let db = pb - cb;
        dot += db.dot(&da);
        cross += db.x * da.y - db.y * da.x;
        spread_a += da.norm_squared();
        spread_b += db.norm_squared();
    }
    if spread_a < 1e-12 || spread_b < 1e-12 {
        return Err(Error::Alignment("shared points have no spread".into()));
    }
    let theta = cross.atan2(dot);
    let t = ca - crate::manifold::rotation(theta) * cb;
    Ok(Pose2::new(t.x, t.y, theta))
}

pub struct LoopCloser {
    name: String,
    sensor: NodeId,
    tol: f64,
    policy: LoopPolicy,
    pending: Vec<NodeId>,
    closures: Vec<NodeId>,
}

impl LoopCloser {
    pub fn new(name: impl Into<String>, sensor: NodeId, tol: f64, policy: LoopPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            name: name.into(),
            sensor,
            tol,
            policy,
            pending: Vec::new(),
            closures: Vec::new(),
        })
    }

    /// Loop-closure factors created so far.
    pub fn closures(&self) -> &[NodeId] {
        &self.closures
    }

    fn observations(&self, tree: &ProblemTree, frame: NodeId) -> Result<BTreeMap<Key, Vector2<f64>>> {
        let mut out = BTreeMap::new();
        for &c in &tree.node(frame)?.children {
            let cap = tree.node(c)?;
            if cap.capture_sensor() != Some(self.sensor) {
                continue;
            }
            for &f in &cap.children {
                let feat = tree.node(f)?;
                let Payload::Feature(info) = &feat.payload else {
                    continue;
                };
                let landmark = feat.children.iter().find_map(|id| {
                    let factor = tree.factor(*id).ok()?;
                    (factor.kind == FactorKind::RangeBearing).then(|| factor.constrained[4].node)
                });
                let Some(landmark) = landmark else { continue };
                let key = info.external_id.map_or(Key::Node(landmark.index), Key::External);
                let (r, b) = (info.measurement[0], info.measurement[1]);
                out.insert(key, Vector2::new(r * b.cos(), r * b.sin()));
            }
        }
        Ok(out)
    }

    /// Searches past frames for a loop with `kf` and emplaces a relative-pose
    /// factor against the best candidate.
    pub fn detect_and_close_loop(&mut self, tree: &mut ProblemTree, kf: NodeId) -> Result<Option<NodeId>> {
        let frames = tree.frames();
        let Some(j) = frames.iter().position(|f| *f == kf) else {
            return Ok(None);
        };
        if j < self.policy.min_frame_gap {
            return Ok(None);
        }
        let current = self.observations(tree, kf)?;
        if current.len() < self.policy.min_shared_landmarks {
            return Ok(None);
        }
        let xj = tree.frame_pose(kf)?;
        let mut best: Option<(usize, f64, usize)> = None;
        for (i, &f) in frames[..=j - self.policy.min_frame_gap].iter().enumerate() {
            let xi = tree.frame_pose(f)?;
            let dist = (xi.p - xj.p).norm();
            if dist > self.policy.radius {
                continue;
            }
            let obs = self.observations(tree, f)?;
            let shared = current.keys().filter(|k| obs.contains_key(k)).count();
            if shared < self.policy.min_shared_landmarks {
                continue;
            }
            let better = match best {
                None => true,
                Some((bs, bd, _)) => shared > bs || (shared == bs && dist < bd),
            };
            if better {
                best = Some((shared, dist, i));
            }
        }
        let Some((_, _, i)) = best else {
            return Ok(None);
        };
        let old = frames[i];
        let past = self.observations(tree, old)?;
        let (a, b): (Vec<_>, Vec<_>) = current
            .iter()
            .filter_map(|(k, pb)| past.get(k).map(|pa| (*pa, *pb)))
            .unzip();
        let t = align_points(&a, &b)?;
        let e = extrinsic(tree, self.sensor)?;
        let (et, _, _) = pose_compose(&e, &t.as_delta());
        let (z, _, _) = pose_compose(&et, &e.inverse().as_delta());
        let z = z.as_delta();
        let factor = Factor::relative_pose(
            z,
            sqrt_info_from_sigmas(&[self.policy.sigma_p, self.policy.sigma_p, self.policy.sigma_o])?,
            [
                BlockRef::new(old, "p"),
                BlockRef::new(old, "o"),
                BlockRef::new(kf, "p"),
                BlockRef::new(kf, "o"),
            ],
        )?;
        let t_kf = tree.timestamp(kf)?;
        let capture = tree.emplace_capture(
            kf,
            self.sensor,
            t_kf,
            CaptureInfo {
                label: "loop".into(),
                data: vec![old.index as f64],
            },
        )?;
        let zv = z.to_vector();
        let feature = tree.emplace_feature(
            capture,
            FeatureInfo {
                measurement: DVector::from_column_slice(zv.as_slice()),
                external_id: None,
            },
        )?;
        let id = tree.emplace_factor(feature, factor)?;
        log::info!("{}: loop {} -> {} ({} shared)", self.name, old, kf, a.len());
        self.closures.push(id);
        Ok(Some(id))
    }

    fn check_pending(&mut self, tree: &mut ProblemTree) -> Result<()> {
        let pending = std::mem::take(&mut self.pending);
        for kf in pending {
            if !tree.contains(kf) {
                continue;
            }
            if self.observations(tree, kf)?.is_empty() {
                self.pending.push(kf);
                continue;
            }
            match self.detect_and_close_loop(tree, kf) {
                Ok(_) => {}
                Err(e @ Error::Alignment(_)) => warn!("{}: {e}", self.name),
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

impl Processor for LoopCloser {
    fn name(&self) -> &str {
        &self.name
    }

    fn sensor(&self) -> NodeId {
        self.sensor
    }

    fn time_tolerance(&self) -> f64 {
        self.tol
    }

    fn init(&mut self, _tree: &mut ProblemTree, _first_frame: NodeId) -> Result<()> {
        Ok(())
    }

    fn process(
        &mut self,
        tree: &mut ProblemTree,
        _capture: &RawCapture,
        _ctx: &ProcessContext,
    ) -> Result<Option<KeyframeEvent>> {
        self.check_pending(tree)?;
        Ok(None)
    }

    fn on_keyframe(&mut self, tree: &mut ProblemTree, kf: NodeId, _t: f64) -> Result<JoinResult> {
        self.pending.push(kf);
        self.check_pending(tree)?;
        Ok(JoinResult::Ignored)
    }
}
