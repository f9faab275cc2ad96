//! The problem tree.
//!
//! ```text
//! Problem
//! ├── Hardware ── Sensor, Processor
//! ├── Trajectory ── Frame ── Capture ── Feature ── Factor
//! └── Map ── Landmark
//! ```
//!
//! Parent/child links are bidirectional. Two kinds of cross-branch reference
//! exist: a Capture points at the Sensor that produced it, and a Factor points
//! at every node owning a state block it constrains. Every block or factor
//! that enters or leaves the tree is queued as a [`Notification`] for the
//! solver.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector, Matrix3};

use crate::error::{Error, Result};
use crate::factors::{Factor, FactorKind};
use crate::manifold::{Pose2, StateBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Problem,
    Hardware,
    Trajectory,
    Map,
    Sensor,
    Processor,
    Frame,
    Capture,
    Feature,
    Factor,
    Landmark,
}

impl NodeKind {
    fn tag(self) -> &'static str {
        match self {
            NodeKind::Problem => "P",
            NodeKind::Hardware => "H",
            NodeKind::Trajectory => "T",
            NodeKind::Map => "M",
            NodeKind::Sensor => "S",
            NodeKind::Processor => "p",
            NodeKind::Frame => "F",
            NodeKind::Capture => "C",
            NodeKind::Feature => "f",
            NodeKind::Factor => "c",
            NodeKind::Landmark => "L",
        }
    }

    fn legal_parent(self) -> Option<NodeKind> {
        match self {
            NodeKind::Sensor | NodeKind::Processor => Some(NodeKind::Hardware),
            NodeKind::Frame => Some(NodeKind::Trajectory),
            NodeKind::Capture => Some(NodeKind::Frame),
            NodeKind::Feature => Some(NodeKind::Capture),
            NodeKind::Factor => Some(NodeKind::Feature),
            NodeKind::Landmark => Some(NodeKind::Map),
            NodeKind::Problem | NodeKind::Hardware | NodeKind::Trajectory | NodeKind::Map => None,
        }
    }

    fn is_branch_root(self) -> bool {
        matches!(
            self,
            NodeKind::Problem | NodeKind::Hardware | NodeKind::Trajectory | NodeKind::Map
        )
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Node identifier. Indices increase monotonically and are never reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub index: u64,
    pub kind: NodeKind,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.tag(), self.index)
    }
}

/// A named state block owned by a node.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockRef {
    pub node: NodeId,
    pub name: String,
}

impl BlockRef {
    pub fn new(node: NodeId, name: impl Into<String>) -> Self {
        Self {
            node,
            name: name.into(),
        }
    }
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.node, self.name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CrossRole {
    CaptureSensor,
    FactorConstrains,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CrossRef {
    pub from: NodeId,
    pub to: NodeId,
    pub role: CrossRole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorInfo {
    pub name: String,
    pub sensor_type: String,
    pub noise: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessorInfo {
    pub name: String,
    pub processor_type: String,
    pub sensor: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureInfo {
    pub label: String,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureInfo {
    pub measurement: DVector<f64>,
    /// Externally supplied landmark identifier, when the data carries one.
    pub external_id: Option<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkInfo {
    pub external_id: Option<i64>,
}

#[derive(Clone, Debug, Default)]
pub enum Payload {
    #[default]
    None,
    Sensor(SensorInfo),
    Processor(ProcessorInfo),
    Capture(CaptureInfo),
    Feature(FeatureInfo),
    Factor(Box<Factor>),
    Landmark(LandmarkInfo),
}

#[derive(Clone, Debug)]
pub struct TreeNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub blocks: IndexMap<String, StateBlock>,
    pub timestamp: Option<f64>,
    pub payload: Payload,
    refs_out: Vec<CrossRef>,
    refs_in: Vec<CrossRef>,
}

impl TreeNode {
    pub fn refs_out(&self) -> &[CrossRef] {
        &self.refs_out
    }

    pub fn refs_in(&self) -> &[CrossRef] {
        &self.refs_in
    }

    /// The sensor a capture was produced by.
    pub fn capture_sensor(&self) -> Option<NodeId> {
        self.refs_out
            .iter()
            .find(|r| r.role == CrossRole::CaptureSensor)
            .map(|r| r.to)
    }

    pub fn factor(&self) -> Option<&Factor> {
        match &self.payload {
            Payload::Factor(f) => Some(f),
            _ => None,
        }
    }

    pub fn is_fully_fixed(&self) -> bool {
        self.blocks.values().all(|b| b.fixed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Notification {
    AddBlock(BlockRef),
    RemoveBlock(BlockRef),
    AddFactor(NodeId),
    RemoveFactor(NodeId),
}

impl Notification {
    fn cancels(&self, later: &Notification) -> bool {
        match (self, later) {
            (Notification::AddBlock(a), Notification::RemoveBlock(b)) => a == b,
            (Notification::AddFactor(a), Notification::RemoveFactor(b)) => a == b,
            _ => false,
        }
    }
}

/// Everything needed to emplace a node.
#[derive(Clone, Debug)]
pub struct NodeSpec {
    pub kind: NodeKind,
    pub parent: NodeId,
    pub timestamp: Option<f64>,
    pub payload: Payload,
    pub blocks: Vec<(String, StateBlock)>,
    pub cross_refs: Vec<(NodeId, CrossRole)>,
}

impl NodeSpec {
    pub fn new(kind: NodeKind, parent: NodeId) -> Self {
        Self {
            kind,
            parent,
            timestamp: None,
            payload: Payload::None,
            blocks: Vec::new(),
            cross_refs: Vec::new(),
        }
    }

    pub fn timestamp(mut self, t: f64) -> Self {
        self.timestamp = Some(t);
        self
    }

    pub fn payload(mut self, payload: Payload) -> Self {
        self.payload = payload;
        self
    }

    pub fn block(mut self, name: impl Into<String>, block: StateBlock) -> Self {
        self.blocks.push((name.into(), block));
        self
    }

    pub fn cross_ref(mut self, to: NodeId, role: CrossRole) -> Self {
        self.cross_refs.push((to, role));
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub message: String,
    pub nodes: Vec<NodeId>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.nodes.iter().map(NodeId::to_string).collect();
        write!(f, "{} [{}]", self.message, ids.join(", "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WindowVariant {
    FixOldest,
    RemoveOldestWithPrior,
}

/// Sliding-window tree manager policy.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPolicy {
    pub variant: WindowVariant,
    pub n_frames: usize,
    /// Square-root information of the pose prior pinned on the oldest
    /// surviving frame when no earlier prior is available.
    pub default_prior_sqrt_info: Matrix3<f64>,
}

impl WindowPolicy {
    pub fn new(variant: WindowVariant, n_frames: usize) -> Result<Self> {
        if n_frames < 2 {
            return Err(Error::InvalidValue(format!(
                "sliding window needs n_frames >= 2, got {n_frames}"
            )));
        }
        Ok(Self {
            variant,
            n_frames,
            default_prior_sqrt_info: Matrix3::from_diagonal(&nalgebra::Vector3::new(10.0, 10.0, 10.0)),
        })
    }

    pub fn with_prior_sigmas(mut self, sigma_p: f64, sigma_o: f64) -> Self {
        self.default_prior_sqrt_info =
            Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0 / sigma_p, 1.0 / sigma_p, 1.0 / sigma_o));
        self
    }
}

#[derive(Clone, Debug)]
pub struct ProblemTree {
    nodes: BTreeMap<u64, TreeNode>,
    next_index: u64,
    queue: Vec<Notification>,
    problem: NodeId,
    hardware: NodeId,
    trajectory: NodeId,
    map: NodeId,
}

impl Default for ProblemTree {
    fn default() -> Self {
        Self::new()
    }
}

impl ProblemTree {
    pub fn new() -> Self {
        let mut tree = Self {
            nodes: BTreeMap::new(),
            next_index: 0,
            queue: Vec::new(),
            problem: NodeId {
                index: 0,
                kind: NodeKind::Problem,
            },
            hardware: NodeId {
                index: 1,
                kind: NodeKind::Hardware,
            },
            trajectory: NodeId {
                index: 2,
                kind: NodeKind::Trajectory,
            },
            map: NodeId {
                index: 3,
                kind: NodeKind::Map,
            },
        };
        let problem = tree.insert_raw(NodeKind::Problem, None);
        for kind in [NodeKind::Hardware, NodeKind::Trajectory, NodeKind::Map] {
            tree.insert_raw(kind, Some(problem));
        }
        tree
    }

    fn insert_raw(&mut self, kind: NodeKind, parent: Option<NodeId>) -> NodeId {
        let id = NodeId {
            index: self.next_index,
            kind,
        };
        self.next_index += 1;
        self.nodes.insert(
            id.index,
            TreeNode {
                id,
                parent,
                children: Vec::new(),
                blocks: IndexMap::new(),
                timestamp: None,
                payload: Payload::None,
                refs_out: Vec::new(),
                refs_in: Vec::new(),
            },
        );
        if let Some(p) = parent {
            self.nodes.get_mut(&p.index).expect("parent").children.push(id);
        }
        id
    }

    pub fn problem(&self) -> NodeId {
        self.problem
    }

    pub fn hardware(&self) -> NodeId {
        self.hardware
    }

    pub fn trajectory(&self) -> NodeId {
        self.trajectory
    }

    pub fn map(&self) -> NodeId {
        self.map
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.get(&id.index).is_some_and(|n| n.id == id)
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode> {
        self.nodes
            .get(&id.index)
            .filter(|n| n.id == id)
            .ok_or_else(|| Error::not_found(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut TreeNode> {
        self.nodes
            .get_mut(&id.index)
            .filter(|n| n.id == id)
            .ok_or_else(|| Error::not_found(id))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.values()
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> impl Iterator<Item = &TreeNode> {
        self.nodes.values().filter(move |n| n.id.kind == kind)
    }

    pub fn block(&self, r: &BlockRef) -> Result<&StateBlock> {
        self.node(r.node)?
            .blocks
            .get(&r.name)
            .ok_or_else(|| Error::NotFound(r.to_string()))
    }

    pub fn block_mut(&mut self, r: &BlockRef) -> Result<&mut StateBlock> {
        self.node_mut(r.node)?
            .blocks
            .get_mut(&r.name)
            .ok_or_else(|| Error::NotFound(r.to_string()))
    }

    pub fn set_block_values(&mut self, r: &BlockRef, values: &[f64]) -> Result<()> {
        self.block_mut(r)?.set_values(values)
    }

    pub fn set_fixed(&mut self, r: &BlockRef, fixed: bool) -> Result<()> {
        self.block_mut(r)?.fixed = fixed;
        Ok(())
    }

    pub fn factor(&self, id: NodeId) -> Result<&Factor> {
        self.node(id)?
            .factor()
            .ok_or_else(|| Error::Structure(format!("{id} is not a factor")))
    }

    /// Live frames ordered by (timestamp, index).
    pub fn frames(&self) -> Vec<NodeId> {
        let mut frames: Vec<(f64, NodeId)> = self
            .nodes_of_kind(NodeKind::Frame)
            .map(|n| (n.timestamp.unwrap_or(f64::NEG_INFINITY), n.id))
            .collect();
        frames.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        frames.into_iter().map(|(_, id)| id).collect()
    }

    pub fn last_frame(&self) -> Option<NodeId> {
        self.frames().last().copied()
    }

    pub fn timestamp(&self, id: NodeId) -> Result<f64> {
        self.node(id)?
            .timestamp
            .ok_or_else(|| Error::Structure(format!("{id} has no timestamp")))
    }

    /// Pose assembled from a node's `p` and `o` blocks.
    pub fn frame_pose(&self, id: NodeId) -> Result<Pose2> {
        self.pose_from_blocks(id, "p", "o")
    }

    pub fn pose_from_blocks(&self, id: NodeId, p: &str, o: &str) -> Result<Pose2> {
        let p = self.block(&BlockRef::new(id, p))?.values().to_vec();
        let o = self.block(&BlockRef::new(id, o))?.values()[0];
        Ok(Pose2::from_parts(&p, o))
    }

    pub fn sensors(&self) -> Vec<NodeId> {
        self.node(self.hardware)
            .map(|h| {
                h.children
                    .iter()
                    .copied()
                    .filter(|c| c.kind == NodeKind::Sensor)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn find_sensor(&self, name: &str) -> Option<NodeId> {
        self.sensors()
            .into_iter()
            .find(|s| matches!(self.node(*s).map(|n| &n.payload), Ok(Payload::Sensor(info)) if info.name == name))
    }

    pub fn landmarks(&self) -> Vec<NodeId> {
        self.node(self.map).map(|m| m.children.clone()).unwrap_or_default()
    }

    pub fn factors(&self) -> impl Iterator<Item = (NodeId, &Factor)> {
        self.nodes.values().filter_map(|n| n.factor().map(|f| (n.id, f)))
    }

    /// Factor nodes in the subtree of `root`.
    pub fn factors_under(&self, root: NodeId) -> Vec<NodeId> {
        self.subtree(root)
            .into_iter()
            .filter(|id| id.kind == NodeKind::Factor)
            .collect()
    }

    /// Preorder listing of `root` and its descendants.
    pub fn subtree(&self, root: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if let Ok(node) = self.node(id) {
                out.push(id);
                stack.extend(node.children.iter().rev().copied());
            }
        }
        out
    }

    pub fn has_pending_notifications(&self) -> bool {
        !self.queue.is_empty()
    }

    // ------------------------------------------------------------------
    // mutation

    pub fn emplace_node(&mut self, spec: NodeSpec) -> Result<NodeId> {
        let parent = self.node(spec.parent)?;
        let parent_kind = parent.id.kind;
        match spec.kind.legal_parent() {
            Some(k) if k == parent_kind => {}
            _ => {
                return Err(Error::Structure(format!(
                    "{} cannot be emplaced under {}",
                    spec.kind, spec.parent
                )))
            }
        }
        if matches!(spec.kind, NodeKind::Frame | NodeKind::Capture) && spec.timestamp.is_none() {
            return Err(Error::Structure(format!("{} requires a timestamp", spec.kind)));
        }
        let mut names = BTreeSet::new();
        for (name, _) in &spec.blocks {
            if !names.insert(name.as_str()) {
                return Err(Error::Conflict(format!("duplicate block name '{name}'")));
            }
        }

        let mut refs: Vec<(NodeId, CrossRole)> = spec.cross_refs.clone();
        if let Payload::Factor(factor) = &spec.payload {
            if spec.kind != NodeKind::Factor {
                return Err(Error::Structure("factor payload on a non-factor node".into()));
            }
            for b in &factor.constrained {
                self.block(b)
                    .map_err(|_| Error::Reference(format!("factor constrains missing block {b}")))?;
                if !refs.contains(&(b.node, CrossRole::FactorConstrains)) {
                    refs.push((b.node, CrossRole::FactorConstrains));
                }
            }
        } else if spec.kind == NodeKind::Factor {
            return Err(Error::Structure("factor node without factor payload".into()));
        }

        for (to, role) in &refs {
            let target = self
                .node(*to)
                .map_err(|_| Error::Reference(format!("cross reference to missing node {to}")))?;
            match role {
                CrossRole::CaptureSensor => {
                    if spec.kind != NodeKind::Capture || to.kind != NodeKind::Sensor {
                        return Err(Error::Reference(format!(
                            "capture_sensor must link a Capture to a Sensor, got {} -> {to}",
                            spec.kind
                        )));
                    }
                }
                CrossRole::FactorConstrains => {
                    if spec.kind != NodeKind::Factor {
                        return Err(Error::Reference(format!(
                            "factor_constrains from non-factor {}",
                            spec.kind
                        )));
                    }
                    if target.blocks.is_empty() {
                        return Err(Error::Reference(format!(
                            "factor references {to}, which owns no state block"
                        )));
                    }
                }
            }
        }
        if spec.kind == NodeKind::Capture && !refs.iter().any(|(_, r)| *r == CrossRole::CaptureSensor) {
            return Err(Error::Reference("capture without a sensor reference".into()));
        }

        let id = self.insert_raw(spec.kind, Some(spec.parent));
        let node = self.nodes.get_mut(&id.index).expect("inserted");
        node.timestamp = spec.timestamp;
        node.payload = spec.payload;
        for (name, block) in spec.blocks {
            self.queue.push(Notification::AddBlock(BlockRef::new(id, name.clone())));
            node.blocks.insert(name, block);
        }
        for (to, role) in refs {
            let r = CrossRef { from: id, to, role };
            node.refs_out.push(r);
        }
        let outgoing = node.refs_out.clone();
        for r in outgoing {
            self.nodes.get_mut(&r.to.index).expect("validated").refs_in.push(r);
        }
        if id.kind == NodeKind::Factor {
            self.queue.push(Notification::AddFactor(id));
        }
        Ok(id)
    }

    pub fn emplace_frame(&mut self, t: f64, pose: &Pose2, fixed: bool) -> Result<NodeId> {
        self.emplace_node(
            NodeSpec::new(NodeKind::Frame, self.trajectory)
                .timestamp(t)
                .block("p", StateBlock::euclidean(pose.p.as_slice()).with_fixed(fixed))
                .block("o", StateBlock::angle(pose.theta).with_fixed(fixed)),
        )
    }

    pub fn emplace_capture(&mut self, frame: NodeId, sensor: NodeId, t: f64, info: CaptureInfo) -> Result<NodeId> {
        self.emplace_node(
            NodeSpec::new(NodeKind::Capture, frame)
                .timestamp(t)
                .payload(Payload::Capture(info))
                .cross_ref(sensor, CrossRole::CaptureSensor),
        )
    }

    pub fn emplace_feature(&mut self, capture: NodeId, info: FeatureInfo) -> Result<NodeId> {
        self.emplace_node(NodeSpec::new(NodeKind::Feature, capture).payload(Payload::Feature(info)))
    }

    pub fn emplace_factor(&mut self, feature: NodeId, factor: Factor) -> Result<NodeId> {
        self.emplace_node(NodeSpec::new(NodeKind::Factor, feature).payload(Payload::Factor(Box::new(factor))))
    }

    pub fn emplace_landmark(&mut self, position: StateBlock, info: LandmarkInfo) -> Result<NodeId> {
        self.emplace_node(
            NodeSpec::new(NodeKind::Landmark, self.map)
                .block("p", position)
                .payload(Payload::Landmark(info)),
        )
    }

    pub fn add_block_to_frame(&mut self, frame: NodeId, name: &str, block: StateBlock) -> Result<()> {
        let node = self.node_mut(frame)?;
        if node.id.kind != NodeKind::Frame {
            return Err(Error::Structure(format!("{frame} is not a frame")));
        }
        if node.blocks.contains_key(name) {
            return Err(Error::Conflict(format!("{frame} already has block '{name}'")));
        }
        node.blocks.insert(name.to_string(), block);
        self.queue.push(Notification::AddBlock(BlockRef::new(frame, name)));
        Ok(())
    }

    /// Removes `id` with its subtree and every factor elsewhere that
    /// constrains a removed node.
    pub fn remove_node(&mut self, id: NodeId) -> Result<()> {
        let node = self.node(id)?;
        if node.id.kind.is_branch_root() {
            return Err(Error::Structure(format!("cannot remove branch root {id}")));
        }
        let subtree = self.subtree(id);
        let mut removed: BTreeSet<NodeId> = subtree.iter().copied().collect();
        for n in &subtree {
            for r in &self.nodes[&n.index].refs_in {
                if r.role == CrossRole::FactorConstrains {
                    removed.insert(r.from);
                }
            }
        }

        for f in removed.iter().filter(|n| n.kind == NodeKind::Factor) {
            self.queue.push(Notification::RemoveFactor(*f));
        }
        for n in &removed {
            for name in self.nodes[&n.index].blocks.keys() {
                self.queue
                    .push(Notification::RemoveBlock(BlockRef::new(*n, name.clone())));
            }
        }

        for n in &removed {
            let node = self.nodes.remove(&n.index).expect("collected from live nodes");
            for r in node.refs_out {
                if let Some(target) = self.nodes.get_mut(&r.to.index) {
                    target.refs_in.retain(|x| *x != r);
                }
            }
            if let Some(parent) = node.parent {
                if let Some(p) = self.nodes.get_mut(&parent.index) {
                    p.children.retain(|c| c != n);
                }
            }
        }
        Ok(())
    }

    /// Pending notifications in emission order, with add/remove pairs for the
    /// same target collapsed.
    pub fn drain_notifications(&mut self) -> Vec<Notification> {
        let mut out: Vec<Notification> = Vec::with_capacity(self.queue.len());
        for n in self.queue.drain(..) {
            if let Some(pos) = out.iter().rposition(|prev| prev.cancels(&n)) {
                out.remove(pos);
            } else {
                out.push(n);
            }
        }
        out
    }

    /// Block values of the latest frame at or before `t` (or the last frame).
    pub fn state_at(&self, t: Option<f64>) -> Result<BTreeMap<String, Vec<f64>>> {
        let frames = self.frames();
        let frame = match t {
            None => frames.last().copied(),
            Some(t) => frames
                .iter()
                .rev()
                .find(|f| self.nodes[&f.index].timestamp.is_some_and(|ft| ft <= t))
                .copied(),
        }
        .ok_or_else(|| Error::NotFound(format!("frame at or before t = {t:?}")))?;
        Ok(self.nodes[&frame.index]
            .blocks
            .iter()
            .map(|(k, b)| (k.clone(), b.values().to_vec()))
            .collect())
    }

    pub fn check_consistency(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut v = |message: String, nodes: Vec<NodeId>| out.push(Violation { message, nodes });

        for (index, node) in &self.nodes {
            if node.id.index != *index {
                v(format!("node stored under index {index}"), vec![node.id]);
            }
            for c in &node.children {
                match self.nodes.get(&c.index) {
                    Some(child) if child.id == *c && child.parent == Some(node.id) => {}
                    Some(child) if child.id == *c => {
                        v("child does not link back to its parent".into(), vec![node.id, *c])
                    }
                    _ => v("child link to missing node".into(), vec![node.id, *c]),
                }
            }
            if let Some(p) = node.parent {
                match self.nodes.get(&p.index) {
                    Some(parent) if parent.id == p && parent.children.contains(&node.id) => {}
                    Some(parent) if parent.id == p => v("parent does not list this child".into(), vec![p, node.id]),
                    _ => v("parent link to missing node".into(), vec![node.id, p]),
                }
            } else if node.id != self.problem {
                v("non-root node without parent".into(), vec![node.id]);
            }
            if node.id.kind == NodeKind::Capture {
                match node.capture_sensor() {
                    Some(s) if self.contains(s) && s.kind == NodeKind::Sensor => {}
                    Some(s) => v("capture references a dead sensor".into(), vec![node.id, s]),
                    None => v("capture without sensor reference".into(), vec![node.id]),
                }
            }
            if node.id.kind == NodeKind::Factor {
                for r in &node.refs_out {
                    match self.nodes.get(&r.to.index) {
                        Some(t) if t.id == r.to && !t.blocks.is_empty() => {
                            if !t.refs_in.contains(r) {
                                v("constrained node lacks back reference".into(), vec![node.id, r.to]);
                            }
                        }
                        Some(t) if t.id == r.to => v("factor references a block-less node".into(), vec![node.id, r.to]),
                        _ => v("factor references a removed node".into(), vec![node.id, r.to]),
                    }
                }
                if let Some(f) = node.factor() {
                    for b in &f.constrained {
                        if self.block(b).is_err() && self.contains(b.node) {
                            v(
                                format!("factor constrains missing block '{}'", b.name),
                                vec![node.id, b.node],
                            );
                        }
                    }
                }
            }
            for r in &node.refs_in {
                if !self.nodes.get(&r.from.index).is_some_and(|n| n.refs_out.contains(r)) {
                    v("dangling incoming reference".into(), vec![node.id, r.from]);
                }
            }
        }
        out
    }

    /// Applies the sliding-window policy. The newest frame is never touched.
    /// Removing frames also removes unfixed landmarks left without factors.
    pub fn enforce_window(&mut self, policy: &WindowPolicy) -> Result<()> {
        let frames = self.frames();
        if frames.len() <= policy.n_frames {
            return Ok(());
        }
        let split = frames.len() - policy.n_frames;
        let (old, kept) = frames.split_at(split);
        match policy.variant {
            WindowVariant::FixOldest => {
                for f in old {
                    for b in self.node_mut(*f)?.blocks.values_mut() {
                        b.fixed = true;
                    }
                }
            }
            WindowVariant::RemoveOldestWithPrior => {
                let survivor = kept[0];
                let inherited = old.iter().rev().find_map(|f| self.pose_prior_under(*f).map(|(_, u)| u));
                for f in old {
                    self.remove_node(*f)?;
                }
                if self.pose_prior_under(survivor).is_none() {
                    let sqrt_info = inherited
                        .unwrap_or_else(|| DMatrix::from_column_slice(3, 3, policy.default_prior_sqrt_info.as_slice()));
                    let pose = self.frame_pose(survivor)?;
                    self.emplace_pose_prior(survivor, &pose, sqrt_info)?;
                }
                for l in self.landmarks() {
                    let node = self.node(l)?;
                    let observed = node.refs_in.iter().any(|r| r.role == CrossRole::FactorConstrains);
                    if !observed && !node.is_fully_fixed() {
                        self.remove_node(l)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn pose_prior_under(&self, frame: NodeId) -> Option<(NodeId, DMatrix<f64>)> {
        self.factors_under(frame).into_iter().find_map(|id| {
            let f = self.factor(id).ok()?;
            (f.kind == FactorKind::PriorPose && f.constrained.iter().all(|b| b.node == frame))
                .then(|| (id, f.sqrt_info.clone()))
        })
    }

    /// Sensor that synthetic prior captures are attached to.
    pub fn prior_sensor(&self) -> Result<NodeId> {
        self.sensors()
            .first()
            .copied()
            .ok_or_else(|| Error::Reference("no sensor installed to anchor a prior capture".into()))
    }

    /// Emplaces Capture, Feature and PriorPose factor pinning `frame` at `pose`.
    pub fn emplace_pose_prior(&mut self, frame: NodeId, pose: &Pose2, sqrt_info: DMatrix<f64>) -> Result<NodeId> {
        let sensor = self.prior_sensor()?;
        let t = self.timestamp(frame)?;
        let capture = self.emplace_capture(
            frame,
            sensor,
            t,
            CaptureInfo {
                label: "prior".into(),
                data: pose.to_vector().as_slice().to_vec(),
            },
        )?;
        let feature = self.emplace_feature(
            capture,
            FeatureInfo {
                measurement: DVector::from_column_slice(pose.to_vector().as_slice()),
                external_id: None,
            },
        )?;
        let factor = Factor::prior_pose(*pose, sqrt_info, BlockRef::new(frame, "p"), BlockRef::new(frame, "o"))?;
        self.emplace_factor(feature, factor)
    }

    pub fn print_tree(&self) -> String {
        let mut out = String::new();
        let mut stack: Vec<(NodeId, usize)> = vec![(self.problem, 0)];
        while let Some((id, depth)) = stack.pop() {
            let Ok(node) = self.node(id) else { continue };
            let _ = writeln!(out, "{}{}", "  ".repeat(depth), self.describe(node));
            for c in node.children.iter().rev() {
                stack.push((*c, depth + 1));
            }
        }
        out
    }

    fn describe(&self, node: &TreeNode) -> String {
        let mut line = format!("{} {}", node.id, node.id.kind);
        match &node.payload {
            Payload::Sensor(s) => {
                let _ = write!(line, " \"{}\" {}", s.name, s.sensor_type);
            }
            Payload::Processor(p) => {
                let _ = write!(line, " \"{}\" {} sensor={}", p.name, p.processor_type, p.sensor);
            }
            Payload::Capture(c) => {
                let _ = write!(line, " {}", c.label);
            }
            Payload::Feature(f) => {
                if let Some(id) = f.external_id {
                    let _ = write!(line, " id={id}");
                }
            }
            Payload::Factor(f) => {
                let _ = write!(line, " {:?}", f.kind);
            }
            Payload::Landmark(l) => {
                if let Some(id) = l.external_id {
                    let _ = write!(line, " id={id}");
                }
            }
            Payload::None => {}
        }
        if let Some(t) = node.timestamp {
            let _ = write!(line, " t={t:.6}");
        }
        if !node.blocks.is_empty() {
            let names: Vec<String> = node
                .blocks
                .iter()
                .map(|(k, b)| if b.fixed { format!("{k}*") } else { k.clone() })
                .collect();
            let _ = write!(line, " [{}]", names.join(", "));
        }
        if !node.refs_out.is_empty() {
            let targets: Vec<String> = node.refs_out.iter().map(|r| r.to.to_string()).collect();
            let _ = write!(line, " -> {}", targets.join(", "));
        }
        line
    }
}
