//! The four-table scene information database (scenes, frames, ego states,
//! instance states) and its construction from canonical annotations.
//!
//! The database is immutable once built. Lookups go through [`SceneDatabase::query`]
//! or the typed accessors; [`SceneDatabase::instance_at_frame`] resolves the
//! same physical object across keyframes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{DbError, LookupError};
use crate::geometry::{planar_norm, Quaternion, Vec3, MAX_NORM_DRIFT};
use crate::jsonio;

/// Default radius (meters) inside which instances count as important.
pub const DEFAULT_IMPORTANT_RADIUS: f64 = 20.0;

/// Camera image size used for bounding-box sanity checks.
pub const IMAGE_WIDTH: f64 = 1600.0;
pub const IMAGE_HEIGHT: f64 = 900.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TableKind {
    Scene,
    Frame,
    Ego,
    Instance,
}

impl fmt::Display for TableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TableKind::Scene => "scene",
            TableKind::Frame => "frame",
            TableKind::Ego => "ego",
            TableKind::Instance => "instance",
        })
    }
}

/// Camera views. `All` is a query wildcard and never appears in `camera_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    FrontLeft,
    Front,
    FrontRight,
    BackLeft,
    Back,
    BackRight,
    All,
}

impl View {
    pub const CAMERAS: [View; 6] = [
        View::FrontLeft,
        View::Front,
        View::FrontRight,
        View::BackLeft,
        View::Back,
        View::BackRight,
    ];

    pub const QUERYABLE: [View; 7] = [
        View::FrontLeft,
        View::Front,
        View::FrontRight,
        View::BackLeft,
        View::Back,
        View::BackRight,
        View::All,
    ];

    /// Name used inside instruction and response text.
    pub fn label(self) -> &'static str {
        match self {
            View::FrontLeft => "front left",
            View::Front => "front",
            View::FrontRight => "front right",
            View::BackLeft => "back left",
            View::Back => "back",
            View::BackRight => "back right",
            View::All => "all",
        }
    }

    pub fn from_label(label: &str) -> Option<View> {
        let norm: String = label
            .trim()
            .to_ascii_lowercase()
            .split(|c: char| c == '_' || c == '-' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        View::QUERYABLE.into_iter().find(|v| v.label() == norm)
    }

    /// Bearing of the camera axis in the ego frame, degrees (left positive).
    pub fn bearing_deg(self) -> Option<f64> {
        match self {
            View::Front => Some(0.0),
            View::FrontLeft => Some(60.0),
            View::FrontRight => Some(-60.0),
            View::BackLeft => Some(120.0),
            View::BackRight => Some(-120.0),
            View::Back => Some(180.0),
            View::All => None,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn is_well_formed(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn within_image(&self) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= IMAGE_WIDTH && self.y2 <= IMAGE_HEIGHT
    }

    pub fn iou(&self, other: &BBox2D) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene_id: String,
    pub frame_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: String,
    #[serde(deserialize_with = "single_ego_id")]
    pub ego_info_id: String,
    pub instance_info_ids: Vec<String>,
    pub timestamp: f64,
}

/// Accepts either a plain id or a one-element id list; every frame carries
/// exactly one ego state.
fn single_ego_id<'de, D: Deserializer<'de>>(de: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum EgoRef {
        One(String),
        Many(Vec<String>),
    }
    match EgoRef::deserialize(de)? {
        EgoRef::One(id) => Ok(id),
        EgoRef::Many(mut ids) if ids.len() == 1 => Ok(ids.remove(0)),
        EgoRef::Many(ids) => Err(serde::de::Error::custom(format!(
            "expected exactly one ego information id, got {}",
            ids.len()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoInfo {
    pub info_id: String,
    pub pose: Vec3,
    pub rotation: Quaternion,
    pub velocity: f64,
    #[serde(default)]
    pub road_info: BTreeMap<String, String>,
    #[serde(default)]
    pub camera_info: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceInfo {
    pub info_id: String,
    pub instance_id: String,
    pub category: String,
    pub attribute: String,
    pub global_t: Vec3,
    pub global_r: Quaternion,
    pub local_t: Vec3,
    pub local_r: Quaternion,
    pub velocity: f64,
    #[serde(default)]
    pub road_info: BTreeMap<String, String>,
    #[serde(default)]
    pub camera_pos: BTreeMap<View, BBox2D>,
}

impl InstanceInfo {
    pub fn planar_distance(&self) -> f64 {
        planar_norm(self.local_t)
    }

    /// The view used to ground this instance in text: largest box area,
    /// ties going to the earlier view.
    pub fn primary_view(&self) -> Option<(View, BBox2D)> {
        let mut best: Option<(View, BBox2D)> = None;
        for (&view, &bbox) in &self.camera_pos {
            match best {
                Some((_, b)) if b.area() >= bbox.area() => {}
                _ => best = Some((view, bbox)),
            }
        }
        best
    }
}

/// Canonical annotation document: the input to [`build_database`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CanonicalAnnotations {
    pub scenes: Vec<SceneRecord>,
    pub frames: Vec<FrameRecord>,
    pub ego: Vec<EgoInfo>,
    pub instances: Vec<InstanceInfo>,
}

impl CanonicalAnnotations {
    /// Parses an annotation document, reporting schema violations with the
    /// offending record, its frame and the field path.
    pub fn from_json_str(text: &str) -> Result<Self, DbError> {
        let root: Value = serde_json::from_str(text)?;
        Self::from_value(root)
    }

    pub fn from_value(root: Value) -> Result<Self, DbError> {
        let Value::Object(mut top) = root else {
            return Err(DbError::Invalid(
                "annotation document must be a JSON object".into(),
            ));
        };
        let mut take = |key: &str| -> Result<Vec<Value>, DbError> {
            match top.remove(key) {
                Some(Value::Array(items)) => Ok(items),
                Some(_) => Err(DbError::Invalid(format!(
                    "top-level `{key}` must be an array"
                ))),
                None => Err(DbError::Invalid(format!("missing top-level `{key}`"))),
            }
        };
        let scenes = take("scenes")?;
        let frames = take("frames")?;
        let ego = take("ego")?;
        let instances = take("instances")?;

        // Best-effort owner map so errors in ego/instance rows can name their frame.
        let mut owner: HashMap<String, String> = HashMap::new();
        for f in &frames {
            let Some(fid) = f.get("frame_id").and_then(Value::as_str) else {
                continue;
            };
            match f.get("ego_info_id") {
                Some(Value::String(e)) => {
                    owner.insert(e.clone(), fid.to_string());
                }
                Some(Value::Array(es)) => {
                    for e in es.iter().filter_map(Value::as_str) {
                        owner.insert(e.to_string(), fid.to_string());
                    }
                }
                _ => {}
            }
            if let Some(ids) = f.get("instance_info_ids").and_then(Value::as_array) {
                for i in ids.iter().filter_map(Value::as_str) {
                    owner.insert(i.to_string(), fid.to_string());
                }
            }
        }

        Ok(Self {
            scenes: parse_rows(scenes, TableKind::Scene, "scene_id", &owner)?,
            frames: parse_rows(frames, TableKind::Frame, "frame_id", &owner)?,
            ego: parse_rows(ego, TableKind::Ego, "info_id", &owner)?,
            instances: parse_rows(instances, TableKind::Instance, "info_id", &owner)?,
        })
    }

    pub fn to_json_string(&self) -> String {
        jsonio::to_sorted_string(self)
    }
}

fn parse_rows<T: serde::de::DeserializeOwned>(
    rows: Vec<Value>,
    table: TableKind,
    id_key: &str,
    owner: &HashMap<String, String>,
) -> Result<Vec<T>, DbError> {
    rows.into_iter()
        .enumerate()
        .map(|(index, row)| {
            let id = row
                .get(id_key)
                .and_then(Value::as_str)
                .unwrap_or("?")
                .to_string();
            let frame = match table {
                TableKind::Frame => Some(id.clone()),
                TableKind::Scene => None,
                _ => owner.get(&id).cloned(),
            };
            serde_path_to_error::deserialize(row).map_err(|err| {
                let path = err.path().to_string();
                let inner = err.into_inner().to_string();
                let field = if path == "." {
                    // Missing fields are reported at the record root.
                    inner
                        .split('`')
                        .nth(1)
                        .map(str::to_string)
                        .unwrap_or_else(|| path.clone())
                } else {
                    path
                };
                DbError::Schema {
                    table,
                    index,
                    id,
                    frame,
                    field,
                    message: inner,
                }
            })
        })
        .collect()
}

/// Any table row, as returned by [`SceneDatabase::query`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Record<'a> {
    Scene(&'a SceneRecord),
    Frame(&'a FrameRecord),
    Ego(&'a EgoInfo),
    Instance(&'a InstanceInfo),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDatabase {
    important_radius: f64,
    scenes: BTreeMap<String, SceneRecord>,
    frames: BTreeMap<String, FrameRecord>,
    ego: BTreeMap<String, EgoInfo>,
    instances: BTreeMap<String, InstanceInfo>,
    instance_frame_index: BTreeMap<(String, String), String>,
    frame_position: BTreeMap<String, (String, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ingest {
    /// Fresh annotations: renormalize quaternions and apply the radius filter.
    Annotations,
    /// A previously saved database: values are taken verbatim.
    Persisted,
}

/// Builds the database from annotations, dropping instances whose planar
/// distance to the ego car exceeds `important_radius`.
pub fn build_database(
    annotations: CanonicalAnnotations,
    important_radius: f64,
) -> Result<SceneDatabase, DbError> {
    SceneDatabase::assemble(annotations, important_radius, Ingest::Annotations)
}

fn check_quaternion(
    q: &mut Quaternion,
    table: TableKind,
    id: &str,
    frame: Option<&String>,
    field: &'static str,
    ingest: Ingest,
) -> Result<(), DbError> {
    let norm = q.norm();
    let tolerance = match ingest {
        Ingest::Annotations => MAX_NORM_DRIFT,
        Ingest::Persisted => 1e-6,
    };
    if !q.is_finite() || (norm - 1.0).abs() > tolerance {
        return Err(DbError::NonUnitQuaternion {
            table,
            id: id.to_string(),
            frame: frame.cloned(),
            field,
            norm,
        });
    }
    if ingest == Ingest::Annotations {
        *q = q
            .normalized()
            .map_err(|e| DbError::Invalid(format!("{table} '{id}': {e}")))?;
    }
    Ok(())
}

fn invalid_field(
    table: TableKind,
    id: &str,
    frame: Option<&String>,
    field: &str,
    message: &str,
) -> DbError {
    DbError::Schema {
        table,
        index: 0,
        id: id.to_string(),
        frame: frame.cloned(),
        field: field.to_string(),
        message: message.to_string(),
    }
}

impl SceneDatabase {
    fn assemble(
        annotations: CanonicalAnnotations,
        important_radius: f64,
        ingest: Ingest,
    ) -> Result<Self, DbError> {
        if !(important_radius.is_finite() && important_radius > 0.0) {
            return Err(DbError::Invalid(format!(
                "important radius must be a positive number, got {important_radius}"
            )));
        }
        let CanonicalAnnotations {
            scenes,
            frames,
            ego,
            instances,
        } = annotations;

        // Which frame owns each ego/instance row.
        let mut ego_owner: BTreeMap<String, String> = BTreeMap::new();
        let mut instance_owner: BTreeMap<String, String> = BTreeMap::new();
        for f in &frames {
            if let Some(prev) = ego_owner.insert(f.ego_info_id.clone(), f.frame_id.clone()) {
                return Err(DbError::Invalid(format!(
                    "ego information '{}' is shared by frames '{}' and '{}'",
                    f.ego_info_id, prev, f.frame_id
                )));
            }
            let mut seen = BTreeSet::new();
            for iid in &f.instance_info_ids {
                if !seen.insert(iid) {
                    return Err(invalid_field(
                        TableKind::Frame,
                        &f.frame_id,
                        Some(&f.frame_id),
                        "instance_info_ids",
                        &format!("instance information id '{iid}' listed twice"),
                    ));
                }
                if let Some(prev) = instance_owner.insert(iid.clone(), f.frame_id.clone()) {
                    return Err(DbError::Invalid(format!(
                        "instance information '{iid}' is shared by frames '{prev}' and '{}'",
                        f.frame_id
                    )));
                }
            }
        }

        let mut ego_table = BTreeMap::new();
        for mut e in ego {
            let frame = ego_owner.get(&e.info_id);
            check_quaternion(
                &mut e.rotation,
                TableKind::Ego,
                &e.info_id,
                frame,
                "rotation",
                ingest,
            )?;
            if !e.pose.is_finite() {
                return Err(invalid_field(
                    TableKind::Ego,
                    &e.info_id,
                    frame,
                    "pose",
                    "non-finite value",
                ));
            }
            if !(e.velocity.is_finite() && e.velocity >= 0.0) {
                return Err(invalid_field(
                    TableKind::Ego,
                    &e.info_id,
                    frame,
                    "velocity",
                    "must be finite and >= 0",
                ));
            }
            if frame.is_none() {
                return Err(DbError::Invalid(format!(
                    "ego information '{}' is not referenced by any frame",
                    e.info_id
                )));
            }
            let id = e.info_id.clone();
            if ego_table.insert(id.clone(), e).is_some() {
                return Err(DbError::Duplicate {
                    table: TableKind::Ego,
                    id,
                });
            }
        }

        let mut instance_table = BTreeMap::new();
        for mut i in instances {
            let frame = instance_owner.get(&i.info_id);
            check_quaternion(
                &mut i.global_r,
                TableKind::Instance,
                &i.info_id,
                frame,
                "global_r",
                ingest,
            )?;
            check_quaternion(
                &mut i.local_r,
                TableKind::Instance,
                &i.info_id,
                frame,
                "local_r",
                ingest,
            )?;
            for (field, v) in [("global_t", i.global_t), ("local_t", i.local_t)] {
                if !v.is_finite() {
                    return Err(invalid_field(
                        TableKind::Instance,
                        &i.info_id,
                        frame,
                        field,
                        "non-finite value",
                    ));
                }
            }
            if !(i.velocity.is_finite() && i.velocity >= 0.0) {
                return Err(invalid_field(
                    TableKind::Instance,
                    &i.info_id,
                    frame,
                    "velocity",
                    "must be finite and >= 0",
                ));
            }
            if i.camera_pos.contains_key(&View::All) {
                return Err(invalid_field(
                    TableKind::Instance,
                    &i.info_id,
                    frame,
                    "camera_pos.all",
                    "`all` is a query wildcard, not a camera",
                ));
            }
            for (view, bbox) in &i.camera_pos {
                if !bbox.is_well_formed() {
                    return Err(invalid_field(
                        TableKind::Instance,
                        &i.info_id,
                        frame,
                        &format!("camera_pos.{}", serde_view_key(*view)),
                        "bounding box needs finite x1 < x2 and y1 < y2",
                    ));
                }
            }
            if frame.is_none() {
                return Err(DbError::Invalid(format!(
                    "instance information '{}' is not referenced by any frame",
                    i.info_id
                )));
            }
            let id = i.info_id.clone();
            if instance_table.insert(id.clone(), i).is_some() {
                return Err(DbError::Duplicate {
                    table: TableKind::Instance,
                    id,
                });
            }
        }

        // Radius filter.
        let dropped: BTreeSet<String> = match ingest {
            Ingest::Annotations => instance_table
                .iter()
                .filter(|(_, i)| i.planar_distance() > important_radius)
                .map(|(id, _)| id.clone())
                .collect(),
            Ingest::Persisted => {
                if let Some((id, _)) = instance_table
                    .iter()
                    .find(|(_, i)| i.planar_distance() > important_radius)
                {
                    return Err(DbError::Invalid(format!(
                        "instance '{id}' lies outside the stored important radius {important_radius}"
                    )));
                }
                BTreeSet::new()
            }
        };
        instance_table.retain(|id, _| !dropped.contains(id));

        let mut frame_table = BTreeMap::new();
        for mut f in frames {
            if !f.timestamp.is_finite() {
                return Err(invalid_field(
                    TableKind::Frame,
                    &f.frame_id,
                    Some(&f.frame_id),
                    "timestamp",
                    "non-finite value",
                ));
            }
            if !ego_table.contains_key(&f.ego_info_id) {
                return Err(DbError::Dangling {
                    table: TableKind::Frame,
                    owner: f.frame_id.clone(),
                    target: TableKind::Ego,
                    id: f.ego_info_id.clone(),
                });
            }
            for iid in &f.instance_info_ids {
                if !instance_table.contains_key(iid) && !dropped.contains(iid) {
                    return Err(DbError::Dangling {
                        table: TableKind::Frame,
                        owner: f.frame_id.clone(),
                        target: TableKind::Instance,
                        id: iid.clone(),
                    });
                }
            }
            f.instance_info_ids.retain(|iid| !dropped.contains(iid));
            let id = f.frame_id.clone();
            if frame_table.insert(id.clone(), f).is_some() {
                return Err(DbError::Duplicate {
                    table: TableKind::Frame,
                    id,
                });
            }
        }

        let mut scene_table = BTreeMap::new();
        let mut frame_position = BTreeMap::new();
        for s in scenes {
            if s.frame_ids.is_empty() {
                return Err(invalid_field(
                    TableKind::Scene,
                    &s.scene_id,
                    None,
                    "frame_ids",
                    "scene has no frames",
                ));
            }
            for (pos, fid) in s.frame_ids.iter().enumerate() {
                if !frame_table.contains_key(fid) {
                    return Err(DbError::Dangling {
                        table: TableKind::Scene,
                        owner: s.scene_id.clone(),
                        target: TableKind::Frame,
                        id: fid.clone(),
                    });
                }
                if let Some((other, _)) =
                    frame_position.insert(fid.clone(), (s.scene_id.clone(), pos))
                {
                    return Err(DbError::Invalid(format!(
                        "frame '{fid}' appears more than once (scenes '{other}' and '{}')",
                        s.scene_id
                    )));
                }
            }
            let id = s.scene_id.clone();
            if scene_table.insert(id.clone(), s).is_some() {
                return Err(DbError::Duplicate {
                    table: TableKind::Scene,
                    id,
                });
            }
        }
        if let Some(orphan) = frame_table
            .keys()
            .find(|f| !frame_position.contains_key(*f))
        {
            return Err(DbError::Invalid(format!(
                "frame '{orphan}' is not part of any scene"
            )));
        }

        let mut instance_frame_index = BTreeMap::new();
        for f in frame_table.values() {
            for iid in &f.instance_info_ids {
                let inst = &instance_table[iid];
                let key = (inst.instance_id.clone(), f.frame_id.clone());
                if instance_frame_index.insert(key, iid.clone()).is_some() {
                    return Err(invalid_field(
                        TableKind::Frame,
                        &f.frame_id,
                        Some(&f.frame_id),
                        "instance_info_ids",
                        &format!("instance '{}' appears twice in one frame", inst.instance_id),
                    ));
                }
            }
        }

        Ok(Self {
            important_radius,
            scenes: scene_table,
            frames: frame_table,
            ego: ego_table,
            instances: instance_table,
            instance_frame_index,
            frame_position,
        })
    }

    pub fn important_radius(&self) -> f64 {
        self.important_radius
    }

    pub fn query(&self, table: TableKind, id: &str) -> Result<Record<'_>, LookupError> {
        Ok(match table {
            TableKind::Scene => Record::Scene(self.scene(id)?),
            TableKind::Frame => Record::Frame(self.frame(id)?),
            TableKind::Ego => Record::Ego(self.ego(id)?),
            TableKind::Instance => Record::Instance(self.instance(id)?),
        })
    }

    pub fn scene(&self, id: &str) -> Result<&SceneRecord, LookupError> {
        self.scenes
            .get(id)
            .ok_or_else(|| LookupError::new(TableKind::Scene, id))
    }

    pub fn frame(&self, id: &str) -> Result<&FrameRecord, LookupError> {
        self.frames
            .get(id)
            .ok_or_else(|| LookupError::new(TableKind::Frame, id))
    }

    pub fn ego(&self, id: &str) -> Result<&EgoInfo, LookupError> {
        self.ego
            .get(id)
            .ok_or_else(|| LookupError::new(TableKind::Ego, id))
    }

    pub fn instance(&self, id: &str) -> Result<&InstanceInfo, LookupError> {
        self.instances
            .get(id)
            .ok_or_else(|| LookupError::new(TableKind::Instance, id))
    }

    /// Ego state recorded in a frame.
    pub fn ego_at_frame(&self, frame_id: &str) -> Result<&EgoInfo, LookupError> {
        let frame = self.frame(frame_id)?;
        self.ego(&frame.ego_info_id)
    }

    /// Instance rows of a frame, in annotation order.
    pub fn frame_instances(&self, frame_id: &str) -> Result<Vec<&InstanceInfo>, LookupError> {
        let frame = self.frame(frame_id)?;
        frame
            .instance_info_ids
            .iter()
            .map(|id| self.instance(id))
            .collect()
    }

    /// The row describing physical instance `instance_id` in `frame_id`, if
    /// it survived filtering there.
    pub fn instance_at_frame(
        &self,
        instance_id: &str,
        frame_id: &str,
    ) -> Result<Option<&InstanceInfo>, LookupError> {
        self.frame(frame_id)?;
        Ok(self
            .instance_frame_index
            .get(&(instance_id.to_string(), frame_id.to_string()))
            .map(|info| &self.instances[info]))
    }

    /// Scene id and index of a frame within its scene.
    pub fn frame_position(&self, frame_id: &str) -> Result<(&str, usize), LookupError> {
        self.frame_position
            .get(frame_id)
            .map(|(scene, pos)| (scene.as_str(), *pos))
            .ok_or_else(|| LookupError::new(TableKind::Frame, frame_id))
    }

    /// Scenes in canonical (id) order.
    pub fn scenes(&self) -> impl Iterator<Item = &SceneRecord> {
        self.scenes.values()
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameRecord> {
        self.frames.values()
    }

    pub fn instances(&self) -> impl Iterator<Item = &InstanceInfo> {
        self.instances.values()
    }

    pub fn ego_states(&self) -> impl Iterator<Item = &EgoInfo> {
        self.ego.values()
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    /// Entries of the cross-frame index as `((instance_id, frame_id), info_id)`.
    pub fn index_entries(&self) -> impl Iterator<Item = (&(String, String), &String)> {
        self.instance_frame_index.iter()
    }

    pub fn to_annotations(&self) -> CanonicalAnnotations {
        CanonicalAnnotations {
            scenes: self.scenes.values().cloned().collect(),
            frames: self.frames.values().cloned().collect(),
            ego: self.ego.values().cloned().collect(),
            instances: self.instances.values().cloned().collect(),
        }
    }

    /// Persistence document: the annotation schema plus `important_radius`,
    /// with keys in sorted order.
    pub fn to_json_string(&self) -> String {
        let mut value = serde_json::to_value(self.to_annotations()).expect("annotations serialize");
        value.as_object_mut().expect("object").insert(
            "important_radius".into(),
            serde_json::json!(self.important_radius),
        );
        jsonio::value_to_string(&value)
    }

    pub fn from_json_str(text: &str) -> Result<Self, DbError> {
        let mut root: Value = serde_json::from_str(text)?;
        let radius = root
            .as_object_mut()
            .and_then(|o| o.remove("important_radius"))
            .and_then(|v| v.as_f64())
            .ok_or_else(|| {
                DbError::Invalid("database file lacks numeric `important_radius`".into())
            })?;
        let annotations = CanonicalAnnotations::from_value(root)?;
        Self::assemble(annotations, radius, Ingest::Persisted)
    }

    pub fn save(&self, path: &Path) -> Result<(), DbError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DbError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

fn serde_view_key(view: View) -> String {
    serde_json::to_value(view)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}
