//! Sensor nodes and their static parameter blocks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::manifold::{Pose2, StateBlock};
use crate::tree::{NodeId, NodeKind, NodeSpec, Payload, ProblemTree, SensorInfo};

pub const DIFF_DRIVE: &str = "diff_drive";
pub const RANGE_BEARING_2D: &str = "range_bearing_2d";

pub const INTRINSIC: &str = "intrinsic";
pub const EXTRINSIC_P: &str = "extrinsic_p";
pub const EXTRINSIC_O: &str = "extrinsic_o";

/// Noise keys read by the processors.
pub const TICK_STD: &str = "tick_std";
pub const DELTA_FLOOR_STD: &str = "delta_floor_std";
pub const RANGE_STD: &str = "range_std";
pub const BEARING_STD: &str = "bearing_std";

#[derive(Clone, Debug, PartialEq)]
pub struct SensorSpec {
    pub name: String,
    pub sensor_type: String,
    pub extrinsic: Option<(Pose2, bool)>,
    pub intrinsic: Option<(Vec<f64>, bool)>,
    pub noise: BTreeMap<String, f64>,
}

pub fn emplace_sensor(tree: &mut ProblemTree, spec: SensorSpec) -> Result<NodeId> {
    if tree.find_sensor(&spec.name).is_some() {
        return Err(Error::Conflict(format!("sensor '{}' already exists", spec.name)));
    }
    let mut node = NodeSpec::new(NodeKind::Sensor, tree.hardware());
    if let Some((x, fixed)) = spec.extrinsic {
        node = node
            .block(EXTRINSIC_P, StateBlock::euclidean(x.p.as_slice()).with_fixed(fixed))
            .block(EXTRINSIC_O, StateBlock::angle(x.theta).with_fixed(fixed));
    }
    if let Some((c, fixed)) = spec.intrinsic {
        node = node.block(INTRINSIC, StateBlock::euclidean(&c).with_fixed(fixed));
    }
    tree.emplace_node(node.payload(Payload::Sensor(SensorInfo {
        name: spec.name,
        sensor_type: spec.sensor_type,
        noise: spec.noise,
    })))
}

pub fn sensor_info(tree: &ProblemTree, sensor: NodeId) -> Result<&SensorInfo> {
    match &tree.node(sensor)?.payload {
        Payload::Sensor(s) => Ok(s),
        _ => Err(Error::Structure(format!("{sensor} is not a sensor"))),
    }
}

/// Noise parameter `key`, or `default` when absent.
pub fn noise_or(tree: &ProblemTree, sensor: NodeId, key: &str, default: f64) -> Result<f64> {
    Ok(sensor_info(tree, sensor)?.noise.get(key).copied().unwrap_or(default))
}

pub fn noise(tree: &ProblemTree, sensor: NodeId, key: &str) -> Result<f64> {
    let info = sensor_info(tree, sensor)?;
    info.noise
        .get(key)
        .copied()
        .ok_or_else(|| Error::config(format!("noise.{key}"), format!("sensor '{}'", info.name)))
}

/// Extrinsic pose of `sensor` in the robot frame; identity when it has none.
pub fn extrinsic(tree: &ProblemTree, sensor: NodeId) -> Result<Pose2> {
    let node = tree.node(sensor)?;
    match (node.blocks.get(EXTRINSIC_P), node.blocks.get(EXTRINSIC_O)) {
        (Some(p), Some(o)) => Ok(Pose2::from_parts(p.values(), o.values()[0])),
        _ => Ok(Pose2::identity()),
    }
}
