//! YAML configuration: a flat parameter server, creator registries, and
//! automatic problem setup.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::warn;
use nalgebra::DVector;
use serde_yaml::Value;

use crate::error::{Error, Result};
use crate::factors::{sqrt_info_from_sigmas, Factor, FactorKind, Loss};
use crate::manifold::{BlockKind, Pose2, StateBlock};
use crate::processors::{
    Association, KeyframePolicy, LandmarkTracker, LoopCloser, LoopPolicy, MotionProcessor, Pipeline, Processor,
    TrackerOptions,
};
use crate::sensors::{
    emplace_sensor, sensor_info, SensorSpec, BEARING_STD, DIFF_DRIVE, EXTRINSIC_O, EXTRINSIC_P, INTRINSIC,
    RANGE_BEARING_2D, RANGE_STD, TICK_STD,
};
use crate::solver::{SolverOptions, SolverProblem};
use crate::tree::{
    BlockRef, CaptureInfo, FeatureInfo, LandmarkInfo, NodeId, NodeKind, NodeSpec, Payload, ProblemTree, ProcessorInfo,
    WindowPolicy, WindowVariant,
};

#[derive(Clone, Debug, PartialEq)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    List(Vec<f64>),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v}"),
            ParamValue::Bool(v) => write!(f, "{v}"),
            ParamValue::Str(v) => write!(f, "\"{v}\""),
            ParamValue::List(v) => write!(f, "{v:?}"),
        }
    }
}

/// Flat map from dotted key paths to scalar values. Sequences of numbers
/// are kept as lists; any other sequence is flattened with its indices as
/// path segments.
#[derive(Clone, Debug, Default)]
pub struct ParameterServer {
    map: BTreeMap<String, ParamValue>,
    used: RefCell<BTreeSet<String>>,
}

impl PartialEq for ParameterServer {
    fn eq(&self, other: &Self) -> bool {
        self.map == other.map
    }
}

pub fn parse_config(text: &str) -> Result<ParameterServer> {
    let value: Value = serde_yaml::from_str(text).map_err(|e| {
        let line = e.location().map_or(0, |l| l.line());
        let msg = e.to_string();
        if msg.contains("duplicate entry") {
            Error::Conflict(format!("line {line}: {msg}"))
        } else {
            Error::Parse { line, msg }
        }
    })?;
    let mut server = ParameterServer::default();
    match value {
        Value::Null => {}
        Value::Mapping(_) => flatten("", &value, &mut server.map)?,
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "top level must be a mapping".into(),
            })
        }
    }
    Ok(server)
}

fn join(prefix: &str, seg: &str) -> String {
    if prefix.is_empty() {
        seg.to_string()
    } else {
        format!("{prefix}.{seg}")
    }
}

fn scalar_key(v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        other => Err(Error::Parse {
            line: 0,
            msg: format!("unsupported mapping key {other:?}"),
        }),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, ParamValue>) -> Result<()> {
    match v {
        Value::Null => {}
        Value::Bool(b) => {
            out.insert(prefix.to_string(), ParamValue::Bool(*b));
        }
        Value::Number(n) => {
            let pv = match n.as_i64() {
                Some(i) => ParamValue::Int(i),
                None => ParamValue::Float(n.as_f64().unwrap_or(f64::NAN)),
            };
            out.insert(prefix.to_string(), pv);
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), ParamValue::Str(s.clone()));
        }
        Value::Sequence(seq) => {
            if seq.iter().all(|x| matches!(x, Value::Number(_))) {
                let list = seq.iter().filter_map(Value::as_f64).collect();
                out.insert(prefix.to_string(), ParamValue::List(list));
            } else {
                for (i, x) in seq.iter().enumerate() {
                    flatten(&join(prefix, &i.to_string()), x, out)?;
                }
            }
        }
        Value::Mapping(m) => {
            for (k, x) in m {
                let key = join(prefix, &scalar_key(k)?);
                if out.keys().any(|e| e == &key) {
                    return Err(Error::Conflict(format!("duplicate key '{key}'")));
                }
                flatten(&key, x, out)?;
            }
        }
        Value::Tagged(t) => flatten(prefix, &t.value, out)?,
    }
    Ok(())
}

impl ParameterServer {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, ParamValue)>) -> Self {
        Self {
            map: pairs.into_iter().collect(),
            used: RefCell::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamValue)> {
        self.map.iter()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: ParamValue) {
        self.map.insert(key.into(), value);
    }

    pub fn remove(&mut self, key: &str) -> Option<ParamValue> {
        self.map.remove(key)
    }

    pub fn get(&self, key: &str) -> Option<&ParamValue> {
        let v = self.map.get(key);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    /// True when `prefix` is a key or the parent of some key.
    pub fn has_section(&self, prefix: &str) -> bool {
        let dotted = format!("{prefix}.");
        self.map.keys().any(|k| k == prefix || k.starts_with(&dotted))
    }

    /// Number of consecutive indexed children `prefix.0`, `prefix.1`, ...
    pub fn seq_len(&self, prefix: &str) -> usize {
        let mut n = 0;
        while self.has_section(&join(prefix, &n.to_string())) {
            n += 1;
        }
        n
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        match self.get(key) {
            Some(ParamValue::Float(v)) => Ok(*v),
            Some(ParamValue::Int(v)) => Ok(*v as f64),
            Some(other) => Err(Error::config(key, format!("expected a number, found {other}"))),
            None => Err(Error::config(key, "")),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        match self.get(key) {
            Some(ParamValue::Int(v)) if *v >= 0 => Ok(*v as usize),
            Some(other) => Err(Error::config(
                key,
                format!("expected a non-negative integer, found {other}"),
            )),
            None => Err(Error::config(key, "")),
        }
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            Some(ParamValue::Bool(v)) => Ok(*v),
            Some(other) => Err(Error::config(key, format!("expected a boolean, found {other}"))),
            None => Err(Error::config(key, "")),
        }
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        match self.get(key) {
            Some(ParamValue::Str(v)) => Ok(v),
            Some(other) => Err(Error::config(key, format!("expected a string, found {other}"))),
            None => Err(Error::config(key, "")),
        }
    }

    pub fn list(&self, key: &str) -> Result<&[f64]> {
        match self.get(key) {
            Some(ParamValue::List(v)) => Ok(v),
            Some(other) => Err(Error::config(key, format!("expected a list of numbers, found {other}"))),
            None => Err(Error::config(key, "")),
        }
    }

    pub fn list_len(&self, key: &str, n: usize) -> Result<&[f64]> {
        let v = self.list(key)?;
        if v.len() != n {
            return Err(Error::config(key, format!("expected {n} values, found {}", v.len())));
        }
        Ok(v)
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        if self.has(key) {
            self.f64(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        if self.has(key) {
            self.usize(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.opt_usize(key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        if self.has(key) {
            self.bool(key)
        } else {
            Ok(default)
        }
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> Result<&'a str> {
        if self.has(key) {
            self.str(key)
        } else {
            Ok(default)
        }
    }

    /// Numeric values under `prefix.` keyed by the remaining path.
    pub fn numbers_under(&self, prefix: &str) -> Result<BTreeMap<String, f64>> {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self.map.keys().filter(|k| k.starts_with(&dotted)).cloned().collect();
        keys.into_iter()
            .map(|k| Ok((k[dotted.len()..].to_string(), self.f64(&k)?)))
            .collect()
    }

    /// Keys never read since parsing.
    pub fn unused_keys(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.map.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }
}

/// Re-nests the flat map into YAML text.
pub fn emit_yaml(server: &ParameterServer) -> String {
    #[derive(Default)]
    struct Node {
        leaf: Option<Value>,
        children: BTreeMap<String, Node>,
    }
    fn to_value(node: &Node) -> Value {
        if let Some(v) = &node.leaf {
            return v.clone();
        }
        let indexed =
            !node.children.is_empty() && (0..node.children.len()).all(|i| node.children.contains_key(&i.to_string()));
        if indexed {
            Value::Sequence(
                (0..node.children.len())
                    .map(|i| to_value(&node.children[&i.to_string()]))
                    .collect(),
            )
        } else {
            let mut m = serde_yaml::Mapping::new();
            for (k, c) in &node.children {
                m.insert(Value::String(k.clone()), to_value(c));
            }
            Value::Mapping(m)
        }
    }
    let mut root = Node::default();
    for (k, v) in &server.map {
        let mut node = &mut root;
        for seg in k.split('.') {
            node = node.children.entry(seg.to_string()).or_default();
        }
        node.leaf = Some(match v {
            ParamValue::Int(i) => Value::from(*i),
            ParamValue::Float(f) => Value::from(*f),
            ParamValue::Bool(b) => Value::from(*b),
            ParamValue::Str(s) => Value::from(s.clone()),
            ParamValue::List(l) => Value::Sequence(l.iter().map(|x| Value::from(*x)).collect()),
        });
    }
    serde_yaml::to_string(&to_value(&root)).unwrap_or_default()
}

pub type SensorCreator = fn(&ParameterServer, &str) -> Result<SensorSpec>;
pub type ProcessorCreator = fn(&ParameterServer, &str, &ProblemTree, NodeId) -> Result<Box<dyn Processor>>;
pub type TreeManagerCreator = fn(&ParameterServer, &str) -> Result<Option<WindowPolicy>>;
pub type FactorDefaultsCreator = fn(&ParameterServer, &str) -> Result<FactorDefaults>;

/// Per-kind factor settings a processor falls back to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorDefaults {
    pub kind: FactorKind,
    pub loss: Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Category {
    Sensor,
    Processor,
    TreeManager,
    Factor,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Sensor => "sensor",
            Category::Processor => "processor",
            Category::TreeManager => "tree_manager",
            Category::Factor => "factor",
        })
    }
}

/// Named creators per category.
#[derive(Clone, Default)]
pub struct CreatorRegistry {
    sensors: BTreeMap<String, SensorCreator>,
    processors: BTreeMap<String, ProcessorCreator>,
    tree_managers: BTreeMap<String, TreeManagerCreator>,
    factors: BTreeMap<String, FactorDefaultsCreator>,
}

fn register<F>(map: &mut BTreeMap<String, F>, category: Category, name: &str, f: F) -> Result<()> {
    if map.contains_key(name) {
        return Err(Error::Conflict(format!(
            "{category} type '{name}' is already registered"
        )));
    }
    map.insert(name.to_string(), f);
    Ok(())
}

fn lookup<F: Copy>(map: &BTreeMap<String, F>, category: Category, name: &str) -> Result<F> {
    map.get(name).copied().ok_or_else(|| Error::UnknownType {
        category: category.to_string(),
        name: name.to_string(),
        available: map.keys().cloned().collect(),
    })
}

impl CreatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding every built-in type.
    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register_sensor(DIFF_DRIVE, create_diff_drive)
            .expect("fresh registry");
        r.register_sensor(RANGE_BEARING_2D, create_range_bearing)
            .expect("fresh registry");
        r.register_processor("motion_diff_drive", create_motion)
            .expect("fresh registry");
        r.register_processor("tracker_landmark_2d", create_tracker)
            .expect("fresh registry");
        r.register_processor("loop_closure_2d", create_loop_closer)
            .expect("fresh registry");
        r.register_tree_manager("none", |_, _| Ok(None))
            .expect("fresh registry");
        r.register_tree_manager("fix_oldest", |s, p| window(s, p, WindowVariant::FixOldest))
            .expect("fresh registry");
        r.register_tree_manager("remove_with_prior", |s, p| {
            window(s, p, WindowVariant::RemoveOldestWithPrior)
        })
        .expect("fresh registry");
        for (name, kind) in [
            ("motion", FactorKind::Motion),
            ("range_bearing", FactorKind::RangeBearing),
            ("prior_pose", FactorKind::PriorPose),
            ("prior_block", FactorKind::PriorBlock),
            ("relative_pose", FactorKind::RelativePose),
        ] {
            let creator: FactorDefaultsCreator = match kind {
                FactorKind::Motion => |s, p| factor_defaults(s, p, FactorKind::Motion),
                FactorKind::RangeBearing => |s, p| factor_defaults(s, p, FactorKind::RangeBearing),
                FactorKind::PriorPose => |s, p| factor_defaults(s, p, FactorKind::PriorPose),
                FactorKind::PriorBlock => |s, p| factor_defaults(s, p, FactorKind::PriorBlock),
                FactorKind::RelativePose => |s, p| factor_defaults(s, p, FactorKind::RelativePose),
            };
            r.register_factor(name, creator).expect("fresh registry");
        }
        r
    }

    pub fn register_sensor(&mut self, name: &str, f: SensorCreator) -> Result<()> {
        register(&mut self.sensors, Category::Sensor, name, f)
    }

    pub fn register_processor(&mut self, name: &str, f: ProcessorCreator) -> Result<()> {
        register(&mut self.processors, Category::Processor, name, f)
    }

    pub fn register_tree_manager(&mut self, name: &str, f: TreeManagerCreator) -> Result<()> {
        register(&mut self.tree_managers, Category::TreeManager, name, f)
    }

    pub fn register_factor(&mut self, name: &str, f: FactorDefaultsCreator) -> Result<()> {
        register(&mut self.factors, Category::Factor, name, f)
    }

    pub fn names(&self, category: Category) -> Vec<String> {
        match category {
            Category::Sensor => self.sensors.keys().cloned().collect(),
            Category::Processor => self.processors.keys().cloned().collect(),
            Category::TreeManager => self.tree_managers.keys().cloned().collect(),
            Category::Factor => self.factors.keys().cloned().collect(),
        }
    }

    pub fn create_sensor(&self, type_name: &str, server: &ParameterServer, prefix: &str) -> Result<SensorSpec> {
        lookup(&self.sensors, Category::Sensor, type_name)?(server, prefix)
    }

    pub fn create_processor(
        &self,
        type_name: &str,
        server: &ParameterServer,
        prefix: &str,
        tree: &ProblemTree,
        sensor: NodeId,
    ) -> Result<Box<dyn Processor>> {
        lookup(&self.processors, Category::Processor, type_name)?(server, prefix, tree, sensor)
    }

    pub fn create_tree_manager(
        &self,
        type_name: &str,
        server: &ParameterServer,
        prefix: &str,
    ) -> Result<Option<WindowPolicy>> {
        lookup(&self.tree_managers, Category::TreeManager, type_name)?(server, prefix)
    }

    pub fn create_factor_defaults(
        &self,
        type_name: &str,
        server: &ParameterServer,
        prefix: &str,
    ) -> Result<FactorDefaults> {
        lookup(&self.factors, Category::Factor, type_name)?(server, prefix)
    }
}

fn factor_defaults(s: &ParameterServer, prefix: &str, kind: FactorKind) -> Result<FactorDefaults> {
    let loss = match s.opt_f64(&join(prefix, "huber"))? {
        Some(k) if k > 0.0 => Loss::Huber(k),
        Some(k) => return Err(Error::config(join(prefix, "huber"), format!("must be > 0, got {k}"))),
        None => Loss::None,
    };
    Ok(FactorDefaults { kind, loss })
}

fn window(s: &ParameterServer, prefix: &str, variant: WindowVariant) -> Result<Option<WindowPolicy>> {
    let key = join(prefix, "n_frames");
    let n = s.usize(&key)?;
    let mut policy = WindowPolicy::new(variant, n).map_err(|e| Error::config(&key, e.to_string()))?;
    if s.has(&join(prefix, "sigma_p")) || s.has(&join(prefix, "sigma_o")) {
        policy = policy.with_prior_sigmas(s.f64(&join(prefix, "sigma_p"))?, s.f64(&join(prefix, "sigma_o"))?);
    }
    Ok(Some(policy))
}

fn noise_map(s: &ParameterServer, prefix: &str) -> Result<BTreeMap<String, f64>> {
    let noise = s.numbers_under(&join(prefix, "noise"))?;
    for (k, v) in &noise {
        if !(*v >= 0.0) {
            return Err(Error::config(
                format!("{prefix}.noise.{k}"),
                format!("must be >= 0, got {v}"),
            ));
        }
    }
    Ok(noise)
}

fn extrinsic_param(s: &ParameterServer, prefix: &str, required: bool) -> Result<Option<(Pose2, bool)>> {
    let key = join(prefix, "extrinsic.state");
    if !required && !s.has(&key) {
        return Ok(None);
    }
    let v = s.list_len(&key, 3)?;
    let fixed = s.bool_or(&join(prefix, "extrinsic.fixed"), true)?;
    Ok(Some((Pose2::new(v[0], v[1], v[2]), fixed)))
}

fn require_noise(prefix: &str, noise: &BTreeMap<String, f64>, key: &str) -> Result<()> {
    match noise.get(key) {
        Some(v) if *v > 0.0 => Ok(()),
        Some(v) => Err(Error::config(
            format!("{prefix}.noise.{key}"),
            format!("must be > 0, got {v}"),
        )),
        None => Err(Error::config(format!("{prefix}.noise.{key}"), "")),
    }
}

fn create_diff_drive(s: &ParameterServer, prefix: &str) -> Result<SensorSpec> {
    let key = join(prefix, "intrinsic.state");
    let c = s.list_len(&key, 3)?;
    if c.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::config(key, "wheel radii and separation must be > 0"));
    }
    let noise = noise_map(s, prefix)?;
    require_noise(prefix, &noise, TICK_STD)?;
    Ok(SensorSpec {
        name: s.str(&join(prefix, "name"))?.to_string(),
        sensor_type: DIFF_DRIVE.into(),
        extrinsic: extrinsic_param(s, prefix, false)?,
        intrinsic: Some((c.to_vec(), s.bool_or(&join(prefix, "intrinsic.fixed"), true)?)),
        noise,
    })
}

fn create_range_bearing(s: &ParameterServer, prefix: &str) -> Result<SensorSpec> {
    let noise = noise_map(s, prefix)?;
    require_noise(prefix, &noise, RANGE_STD)?;
    require_noise(prefix, &noise, BEARING_STD)?;
    Ok(SensorSpec {
        name: s.str(&join(prefix, "name"))?.to_string(),
        sensor_type: RANGE_BEARING_2D.into(),
        extrinsic: extrinsic_param(s, prefix, true)?,
        intrinsic: None,
        noise,
    })
}

fn sensor_type_is(tree: &ProblemTree, sensor: NodeId, ty: &str, processor: &str) -> Result<()> {
    let info = sensor_info(tree, sensor)?;
    if info.sensor_type != ty {
        return Err(Error::Binding(format!(
            "processor '{processor}' needs a {ty} sensor, '{}' is {}",
            info.name, info.sensor_type
        )));
    }
    Ok(())
}

fn keyframe_policy(s: &ParameterServer, prefix: &str) -> Result<KeyframePolicy> {
    let k = |name: &str| join(prefix, &format!("keyframe.{name}"));
    let policy = KeyframePolicy {
        max_dist: s.opt_f64(&k("max_dist"))?,
        max_angle: s.opt_f64(&k("max_angle"))?,
        max_time: s.opt_f64(&k("max_time"))?,
        min_tracks: s.opt_usize(&k("min_tracks"))?,
    };
    policy
        .validate()
        .map_err(|e| Error::config(join(prefix, "keyframe"), e.to_string()))?;
    Ok(policy)
}

fn create_motion(s: &ParameterServer, prefix: &str, tree: &ProblemTree, sensor: NodeId) -> Result<Box<dyn Processor>> {
    let name = s.str(&join(prefix, "name"))?;
    sensor_type_is(tree, sensor, DIFF_DRIVE, name)?;
    let tol = s.f64(&join(prefix, "time_tolerance"))?;
    let p = MotionProcessor::new(name, sensor, tol, keyframe_policy(s, prefix)?)
        .map_err(|e| Error::config(join(prefix, "time_tolerance"), e.to_string()))?;
    Ok(Box::new(p))
}

fn create_tracker(s: &ParameterServer, prefix: &str, tree: &ProblemTree, sensor: NodeId) -> Result<Box<dyn Processor>> {
    let name = s.str(&join(prefix, "name"))?;
    sensor_type_is(tree, sensor, RANGE_BEARING_2D, name)?;
    let gate = s.f64_or(&join(prefix, "gate"), 0.5)?;
    let association = match s.str_or(&join(prefix, "association"), "gate")? {
        "gate" => Association::Gate(gate),
        "id" => Association::Id,
        other => {
            return Err(Error::config(
                join(prefix, "association"),
                format!("expected \"id\" or \"gate\", found \"{other}\""),
            ))
        }
    };
    let opts = TrackerOptions {
        association,
        window: s.opt_usize(&join(prefix, "window"))?,
        huber: s.opt_f64(&join(prefix, "huber"))?,
        policy: keyframe_policy(s, prefix)?,
        time_tolerance: s.f64(&join(prefix, "time_tolerance"))?,
    };
    let p = LandmarkTracker::new(name, sensor, opts).map_err(|e| Error::config(prefix, e.to_string()))?;
    Ok(Box::new(p))
}

fn create_loop_closer(
    s: &ParameterServer,
    prefix: &str,
    tree: &ProblemTree,
    sensor: NodeId,
) -> Result<Box<dyn Processor>> {
    let name = s.str(&join(prefix, "name"))?;
    sensor_type_is(tree, sensor, RANGE_BEARING_2D, name)?;
    let d = LoopPolicy::default();
    let k = |n: &str| join(prefix, &format!("loop.{n}"));
    let policy = LoopPolicy {
        radius: s.f64_or(&k("radius"), d.radius)?,
        min_frame_gap: s.usize_or(&k("min_frame_gap"), d.min_frame_gap)?,
        min_shared_landmarks: s.usize_or(&k("min_shared_landmarks"), d.min_shared_landmarks)?,
        sigma_p: s.f64_or(&k("sigma_p"), d.sigma_p)?,
        sigma_o: s.f64_or(&k("sigma_o"), d.sigma_o)?,
    };
    let tol = s.f64(&join(prefix, "time_tolerance"))?;
    let p =
        LoopCloser::new(name, sensor, tol, policy).map_err(|e| Error::config(join(prefix, "loop"), e.to_string()))?;
    Ok(Box::new(p))
}

/// A configured problem ready for processing.
pub struct Setup {
    pub tree: ProblemTree,
    pub pipeline: Pipeline,
    pub solver: SolverProblem,
    pub window: Option<WindowPolicy>,
    pub first_frame: NodeId,
    pub factor_defaults: BTreeMap<String, FactorDefaults>,
}

pub fn auto_setup(server: &ParameterServer) -> Result<Setup> {
    auto_setup_with(&CreatorRegistry::with_defaults(), server)
}

pub fn auto_setup_with(registry: &CreatorRegistry, server: &ParameterServer) -> Result<Setup> {
    let s = server;
    if let Some(dim) = s.opt_usize("problem.dimension")? {
        if dim != 2 {
            return Err(Error::config(
                "problem.dimension",
                format!("only 2 is supported, found {dim}"),
            ));
        }
    }

    let d = SolverOptions::default();
    let options = SolverOptions {
        max_iterations: s.usize("solver.max_iterations")?,
        lambda_init: s.f64_or("solver.lambda_init", d.lambda_init)?,
        tol_dx: s.f64_or("solver.tol_dx", d.tol_dx)?,
        tol_grad: s.f64_or("solver.tol_grad", d.tol_grad)?,
        ..d
    };
    for (key, v) in [
        ("solver.lambda_init", options.lambda_init),
        ("solver.tol_dx", options.tol_dx),
        ("solver.tol_grad", options.tol_grad),
    ] {
        if !(v > 0.0) {
            return Err(Error::config(key, format!("must be > 0, got {v}")));
        }
    }

    let mut tree = ProblemTree::new();

    let n_sensors = s.seq_len("sensors");
    if n_sensors == 0 {
        return Err(Error::config("sensors", "at least one sensor is required"));
    }
    let mut intrinsic_priors = Vec::new();
    for i in 0..n_sensors {
        let prefix = format!("sensors.{i}");
        let ty = s.str(&join(&prefix, "type"))?;
        let spec = registry.create_sensor(ty, s, &prefix)?;
        let sensor =
            emplace_sensor(&mut tree, spec).map_err(|e| Error::config(join(&prefix, "name"), e.to_string()))?;
        for (block, key, kind) in [
            (INTRINSIC, "intrinsic.prior_sigma", None),
            (EXTRINSIC_P, "extrinsic.prior_sigma", Some(BlockKind::Euclidean(2))),
        ] {
            let key = join(&prefix, key);
            if s.has(&key) {
                intrinsic_priors.push((sensor, block, kind, key));
            }
        }
    }

    let tm_type = s.str_or("problem.tree_manager.type", "none")?;
    let window = registry.create_tree_manager(tm_type, s, "problem.tree_manager")?;

    let mut factor_defaults = BTreeMap::new();
    for name in registry.names(Category::Factor) {
        let prefix = format!("factors.{name}");
        factor_defaults.insert(name.clone(), registry.create_factor_defaults(&name, s, &prefix)?);
    }

    let p0 = s.list_len("problem.first_frame.p", 2)?;
    let x0 = Pose2::new(p0[0], p0[1], s.f64("problem.first_frame.o")?);
    let t0 = s.f64_or("problem.first_frame.t", 0.0)?;
    let sigma_p = s.f64("problem.first_frame.sigma_p")?;
    let sigma_o = s.f64("problem.first_frame.sigma_o")?;
    let u0 = sqrt_info_from_sigmas(&[sigma_p, sigma_p, sigma_o])
        .map_err(|e| Error::config("problem.first_frame", e.to_string()))?;
    let first_frame = tree.emplace_frame(t0, &x0, false)?;
    tree.emplace_pose_prior(first_frame, &x0, u0)?;

    for (sensor, block, kind, key) in intrinsic_priors {
        emplace_sensor_prior(&mut tree, s, first_frame, t0, sensor, block, kind, &key)?;
    }

    for i in 0..s.seq_len("map.landmarks") {
        let prefix = format!("map.landmarks.{i}");
        let p = s.list_len(&join(&prefix, "p"), 2)?;
        let fixed = s.bool_or(&join(&prefix, "fixed"), false)?;
        let id = match s.get(&join(&prefix, "id")) {
            Some(ParamValue::Int(v)) => Some(*v),
            None => None,
            Some(other) => {
                return Err(Error::config(
                    join(&prefix, "id"),
                    format!("expected an integer, found {other}"),
                ))
            }
        };
        tree.emplace_landmark(
            StateBlock::euclidean(p).with_fixed(fixed),
            LandmarkInfo { external_id: id },
        )?;
    }

    let n_proc = s.seq_len("processors");
    if n_proc == 0 {
        return Err(Error::config("processors", "at least one processor is required"));
    }
    let mut pipeline = Pipeline::new();
    for i in 0..n_proc {
        let prefix = format!("processors.{i}");
        let name = s.str(&join(&prefix, "name"))?.to_string();
        let ty = s.str(&join(&prefix, "type"))?.to_string();
        let sensor_name = s.str(&join(&prefix, "sensor"))?;
        let sensor = tree
            .find_sensor(sensor_name)
            .ok_or_else(|| Error::Binding(format!("processor '{name}' references unknown sensor '{sensor_name}'")))?;
        let proc = registry.create_processor(&ty, s, &prefix, &tree, sensor)?;
        tree.emplace_node(
            NodeSpec::new(NodeKind::Processor, tree.hardware()).payload(Payload::Processor(ProcessorInfo {
                name,
                processor_type: ty,
                sensor,
            })),
        )?;
        pipeline.install(proc);
    }
    pipeline.init(&mut tree, first_frame)?;

    let violations = tree.check_consistency();
    if let Some(v) = violations.first() {
        return Err(Error::Structure(format!("setup produced an inconsistent tree: {v}")));
    }
    for key in s.unused_keys() {
        warn!("unused configuration key '{key}'");
    }
    Ok(Setup {
        tree,
        pipeline,
        solver: SolverProblem::new(options),
        window,
        first_frame,
        factor_defaults,
    })
}

#[allow(clippy::too_many_arguments)]
fn emplace_sensor_prior(
    tree: &mut ProblemTree,
    s: &ParameterServer,
    frame: NodeId,
    t: f64,
    sensor: NodeId,
    block: &str,
    kind: Option<BlockKind>,
    key: &str,
) -> Result<NodeId> {
    let sigmas = s.list(key)?;
    let node = tree.node(sensor)?;
    let target = node
        .blocks
        .get(block)
        .ok_or_else(|| Error::config(key, format!("sensor has no '{block}' block")))?
        .clone();
    let factor = if block == EXTRINSIC_P {
        if sigmas.len() != 3 {
            return Err(Error::config(key, format!("expected 3 values, found {}", sigmas.len())));
        }
        let o = node.blocks[EXTRINSIC_O].values()[0];
        let z = Pose2::from_parts(target.values(), o);
        let u = sqrt_info_from_sigmas(sigmas).map_err(|e| Error::config(key, e.to_string()))?;
        Factor::prior_pose(
            z,
            u,
            BlockRef::new(sensor, EXTRINSIC_P),
            BlockRef::new(sensor, EXTRINSIC_O),
        )?
    } else {
        let kind = kind.unwrap_or(target.kind());
        if sigmas.len() != kind.tangent_dim() {
            return Err(Error::config(
                key,
                format!("expected {} values, found {}", kind.tangent_dim(), sigmas.len()),
            ));
        }
        let u = sqrt_info_from_sigmas(sigmas).map_err(|e| Error::config(key, e.to_string()))?;
        Factor::prior_block(target.values(), kind, u, BlockRef::new(sensor, block))?
    };
    let capture = tree.emplace_capture(
        frame,
        sensor,
        t,
        CaptureInfo {
            label: format!("{block}_prior"),
            data: factor.z.as_slice().to_vec(),
        },
    )?;
    let feature = tree.emplace_feature(
        capture,
        FeatureInfo {
            measurement: DVector::from_column_slice(factor.z.as_slice()),
            external_id: None,
        },
    )?;
    tree.emplace_factor(feature, factor)
}
