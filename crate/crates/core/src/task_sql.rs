//! The seventeen subtask queries over a [`SceneDatabase`]: perception,
//! prediction, the six risk detectors, and planning with reasoning.
//!
//! Every function is a pure read of the database.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LookupError, TaskError};
use crate::geometry::{planar_norm, relative_motion, Vec3};
use crate::scene_db::{InstanceInfo, SceneDatabase, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Perception,
    Prediction,
    Risk,
    PlanningWithReasoning,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::Perception,
        Task::Prediction,
        Task::Risk,
        Task::PlanningWithReasoning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Perception => "perception",
            Task::Prediction => "prediction",
            Task::Risk => "risk",
            Task::PlanningWithReasoning => "planning_with_reasoning",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a subtask is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricFamily {
    Mae,
    Accuracy,
    Map,
    Bleu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    Overtaking,
    OnComing,
    Approaching,
    Crossing,
    Braking,
    LaneChanging,
}

impl RiskKind {
    pub const ALL: [RiskKind; 6] = [
        RiskKind::Overtaking,
        RiskKind::OnComing,
        RiskKind::Approaching,
        RiskKind::Crossing,
        RiskKind::Braking,
        RiskKind::LaneChanging,
    ];

    pub fn subtask(self) -> SubtaskKind {
        match self {
            RiskKind::Overtaking => SubtaskKind::Overtaking,
            RiskKind::OnComing => SubtaskKind::OnComing,
            RiskKind::Approaching => SubtaskKind::Approaching,
            RiskKind::Crossing => SubtaskKind::Crossing,
            RiskKind::Braking => SubtaskKind::Braking,
            RiskKind::LaneChanging => SubtaskKind::LaneChanging,
        }
    }

    /// Whether the predicate reads the instance's state at the next frame.
    fn needs_next_frame(self) -> bool {
        !matches!(self, RiskKind::LaneChanging)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskKind {
    Distance,
    Closest,
    InstanceNumber,
    Speeds,
    Status,
    SameRoad,
    MotionEgo,
    MotionOthers,
    StatusEgo,
    StatusOthers,
    Overtaking,
    OnComing,
    Approaching,
    Crossing,
    Braking,
    LaneChanging,
    PlanningWithReasoning,
}

impl SubtaskKind {
    pub const ALL: [SubtaskKind; 17] = [
        SubtaskKind::Distance,
        SubtaskKind::Closest,
        SubtaskKind::InstanceNumber,
        SubtaskKind::Speeds,
        SubtaskKind::Status,
        SubtaskKind::SameRoad,
        SubtaskKind::MotionEgo,
        SubtaskKind::MotionOthers,
        SubtaskKind::StatusEgo,
        SubtaskKind::StatusOthers,
        SubtaskKind::Overtaking,
        SubtaskKind::OnComing,
        SubtaskKind::Approaching,
        SubtaskKind::Crossing,
        SubtaskKind::Braking,
        SubtaskKind::LaneChanging,
        SubtaskKind::PlanningWithReasoning,
    ];

    pub fn task(self) -> Task {
        use SubtaskKind::*;
        match self {
            Distance | Closest | InstanceNumber | Speeds | Status | SameRoad => Task::Perception,
            MotionEgo | MotionOthers | StatusEgo | StatusOthers => Task::Prediction,
            Overtaking | OnComing | Approaching | Crossing | Braking | LaneChanging => Task::Risk,
            PlanningWithReasoning => Task::PlanningWithReasoning,
        }
    }

    pub fn metric(self) -> MetricFamily {
        use SubtaskKind::*;
        match self {
            Distance | Speeds | InstanceNumber | MotionEgo | MotionOthers => MetricFamily::Mae,
            Closest | Status | SameRoad | StatusEgo | StatusOthers => MetricFamily::Accuracy,
            PlanningWithReasoning => MetricFamily::Bleu,
            _ => MetricFamily::Map,
        }
    }

    pub fn risk_kind(self) -> Option<RiskKind> {
        RiskKind::ALL.into_iter().find(|r| r.subtask() == self)
    }

    pub fn name(self) -> &'static str {
        use SubtaskKind::*;
        match self {
            Distance => "distance",
            Closest => "closest",
            InstanceNumber => "instance_number",
            Speeds => "speeds",
            Status => "status",
            SameRoad => "same_road",
            MotionEgo => "motion_ego",
            MotionOthers => "motion_others",
            StatusEgo => "status_ego",
            StatusOthers => "status_others",
            Overtaking => "overtaking",
            OnComing => "on_coming",
            Approaching => "approaching",
            Crossing => "crossing",
            Braking => "braking",
            LaneChanging => "lane_changing",
            PlanningWithReasoning => "planning_with_reasoning",
        }
    }
}

impl fmt::Display for SubtaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SubtaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        SubtaskKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| format!("unknown subtask '{s}'"))
    }
}

/// Thresholds consumed by the risk detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskThresholds {
    /// Distance to the ego car, meters.
    pub dis: f64,
    /// Longitudinal displacement threshold, meters.
    pub dis_x: f64,
    /// Lateral displacement threshold, meters.
    pub dis_y: f64,
    /// Speed threshold, m/s.
    pub s: f64,
}

impl Default for RiskThresholds {
    fn default() -> Self {
        Self {
            dis: 20.0,
            dis_x: 3.0,
            dis_y: 3.0,
            s: 0.5,
        }
    }
}

impl RiskThresholds {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("dis", self.dis),
            ("dis_x", self.dis_x),
            ("dis_y", self.dis_y),
            ("s", self.s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!(
                    "threshold `{name}` must be a positive number, got {v}"
                ));
            }
        }
        Ok(())
    }
}

/// Which reading of the risk predicates to apply.
///
/// `Literal` evaluates the published pseudocode verbatim: bare (signed)
/// lateral comparisons, and the self-contradictory overtaking clause, which
/// can never fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateMode {
    #[default]
    Corrected,
    Literal,
}

/// Three consecutive keyframes `(i-1, i, i+1)` of one scene.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Window {
    pub prev: String,
    pub current: String,
    pub next: String,
}

impl Window {
    pub fn new(
        prev: impl Into<String>,
        current: impl Into<String>,
        next: impl Into<String>,
    ) -> Self {
        Self {
            prev: prev.into(),
            current: current.into(),
            next: next.into(),
        }
    }

    pub fn frame_ids(&self) -> [&str; 3] {
        [&self.prev, &self.current, &self.next]
    }

    /// Checks that the frames exist and are consecutive in one scene.
    pub fn validate(&self, db: &SceneDatabase) -> Result<(), TaskError> {
        let (scene, p0) = db.frame_position(&self.prev)?;
        let (s1, p1) = db.frame_position(&self.current)?;
        let (s2, p2) = db.frame_position(&self.next)?;
        if s1 != scene || s2 != scene || p1 != p0 + 1 || p2 != p0 + 2 {
            return Err(TaskError::NonConsecutive {
                frames: self.frame_ids().iter().map(|s| s.to_string()).collect(),
            });
        }
        Ok(())
    }
}

/// Planar offset of an instance from the ego car.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distance {
    pub x: f64,
    pub y: f64,
    pub l: f64,
}

pub fn distance(db: &SceneDatabase, instance_info_id: &str) -> Result<Distance, TaskError> {
    let inst = db.instance(instance_info_id)?;
    Ok(Distance {
        x: inst.local_t.x,
        y: inst.local_t.y,
        l: planar_norm(inst.local_t),
    })
}

fn visible_in(inst: &InstanceInfo, view: View) -> bool {
    view == View::All || inst.camera_pos.contains_key(&view)
}

/// Nearest instance per view (including `All`). Views without a visible
/// instance are absent; ties go to the smaller info id.
pub fn closest<'a>(
    db: &'a SceneDatabase,
    frame_id: &str,
) -> Result<BTreeMap<View, &'a InstanceInfo>, TaskError> {
    let instances = db.frame_instances(frame_id)?;
    let mut best: BTreeMap<View, (f64, &InstanceInfo)> = BTreeMap::new();
    for view in View::QUERYABLE {
        for inst in instances.iter().copied().filter(|i| visible_in(i, view)) {
            let d = inst.planar_distance();
            match best.get(&view) {
                Some(&(d_min, cur)) if d > d_min || (d == d_min && inst.info_id >= cur.info_id) => {
                }
                _ => {
                    best.insert(view, (d, inst));
                }
            }
        }
    }
    Ok(best.into_iter().map(|(v, (_, i))| (v, i)).collect())
}

/// Per-view category counts. Every view, `All` included, has an entry; a
/// category missing from a view's map counts as zero.
pub fn instance_number(
    db: &SceneDatabase,
    frame_id: &str,
) -> Result<BTreeMap<View, BTreeMap<String, usize>>, TaskError> {
    let instances = db.frame_instances(frame_id)?;
    let mut counts: BTreeMap<View, BTreeMap<String, usize>> = View::QUERYABLE
        .into_iter()
        .map(|v| (v, BTreeMap::new()))
        .collect();
    for inst in instances {
        for view in View::QUERYABLE {
            if visible_in(inst, view) {
                *counts
                    .get_mut(&view)
                    .unwrap()
                    .entry(inst.category.clone())
                    .or_default() += 1;
            }
        }
    }
    Ok(counts)
}

pub fn speeds(db: &SceneDatabase, instance_info_id: &str) -> Result<f64, TaskError> {
    Ok(db.instance(instance_info_id)?.velocity)
}

pub fn status(db: &SceneDatabase, instance_info_id: &str) -> Result<String, TaskError> {
    Ok(db.instance(instance_info_id)?.attribute.clone())
}

/// Whether the instance's road information equals the ego car's at `frame_id`.
pub fn same_road(
    db: &SceneDatabase,
    instance_info_id: &str,
    frame_id: &str,
) -> Result<bool, TaskError> {
    let inst = db.instance(instance_info_id)?;
    let ego = db.ego_at_frame(frame_id)?;
    Ok(inst.road_info == ego.road_info)
}

/// Ego displacement from `frame_i` to `frame_next`, in the ego frame at `frame_i`.
pub fn motion_ego(db: &SceneDatabase, frame_i: &str, frame_next: &str) -> Result<Vec3, TaskError> {
    let e_i = db.ego_at_frame(frame_i)?;
    let e_n = db.ego_at_frame(frame_next)?;
    Ok(relative_motion(e_i.pose, e_i.rotation, e_n.pose)?)
}

/// Displacement of every instance of `frame_i` that also appears in
/// `frame_other`, expressed in that instance's own frame at `frame_i`.
/// Keyed by the instance's info id at `frame_i`.
pub fn motion_others(
    db: &SceneDatabase,
    frame_i: &str,
    frame_other: &str,
) -> Result<BTreeMap<String, Vec3>, TaskError> {
    db.frame(frame_other)?;
    let mut out = BTreeMap::new();
    for inst in db.frame_instances(frame_i)? {
        if let Some(other) = db.instance_at_frame(&inst.instance_id, frame_other)? {
            out.insert(
                inst.info_id.clone(),
                relative_motion(inst.global_t, inst.global_r, other.global_t)?,
            );
        }
    }
    Ok(out)
}

/// `(v_next - v_i, motion_ego)`.
pub fn status_ego(
    db: &SceneDatabase,
    frame_i: &str,
    frame_next: &str,
) -> Result<(f64, Vec3), TaskError> {
    let motion = motion_ego(db, frame_i, frame_next)?;
    let v_i = db.ego_at_frame(frame_i)?.velocity;
    let v_n = db.ego_at_frame(frame_next)?.velocity;
    Ok((v_n - v_i, motion))
}

pub type SpeedDeltas = BTreeMap<String, f64>;
pub type Motions = BTreeMap<String, Vec3>;

/// Per-instance speed change and motion between two frames; both maps
/// share the same keys.
pub fn status_others(
    db: &SceneDatabase,
    frame_i: &str,
    frame_next: &str,
) -> Result<(SpeedDeltas, Motions), TaskError> {
    let motions = motion_others(db, frame_i, frame_next)?;
    let mut deltas = BTreeMap::new();
    for info_id in motions.keys() {
        let inst = db.instance(info_id)?;
        let next = db
            .instance_at_frame(&inst.instance_id, frame_next)?
            .ok_or_else(|| {
                LookupError::new(crate::scene_db::TableKind::Instance, &inst.instance_id)
            })?;
        deltas.insert(
            info_id.clone(),
            speeds(db, &next.info_id)? - speeds(db, info_id)?,
        );
    }
    Ok((deltas, motions))
}

/// Everything a risk predicate looks at for one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskInputs {
    /// Displacement towards the previous-frame position (own frame at i).
    pub m_prev: Vec3,
    /// Displacement towards the next-frame position; absent when the
    /// instance is missing from the next frame.
    pub m_next: Option<Vec3>,
    pub v_prev: f64,
    pub v_i: f64,
    pub l_prev: f64,
    pub l_i: f64,
    pub same_road_prev: bool,
    pub same_road_i: bool,
}

/// Evaluates one risk predicate. Longitudinal is component 0, lateral 1.
pub fn risk_predicate(
    kind: RiskKind,
    mode: PredicateMode,
    x: &RiskInputs,
    th: &RiskThresholds,
) -> bool {
    let a = x.m_prev;
    let moving = x.v_i > 0.0 && x.v_prev > 0.0;
    let lateral = |v: f64| match mode {
        PredicateMode::Corrected => v.abs(),
        PredicateMode::Literal => v,
    };
    if kind == RiskKind::LaneChanging {
        return x.l_i < x.l_prev
            && x.l_prev < th.dis
            && x.same_road_i
            && !x.same_road_prev
            && x.v_prev > th.s
            && x.v_i > th.s;
    }
    let Some(b) = x.m_next else { return false };
    match kind {
        RiskKind::Overtaking => {
            let flip = match mode {
                PredicateMode::Corrected => a[0] < 0.0 && b[0] > 0.0,
                // Both sign tests read the previous displacement.
                PredicateMode::Literal => false,
            };
            let lat = match mode {
                PredicateMode::Corrected => a[1].abs() < th.dis && b[1].abs() < th.dis,
                PredicateMode::Literal => a[1] < th.dis,
            };
            flip && lat && moving
        }
        RiskKind::OnComing => {
            let ahead = match mode {
                PredicateMode::Corrected => a[0] > 0.0 && b[0] > 0.0,
                PredicateMode::Literal => a[0] > 0.0,
            };
            ahead
                && b[0] < a[0]
                && lateral(a[1]) < th.dis
                && lateral(b[1]) < th.dis
                && (b[1] - a[1]).abs() < th.dis
                && moving
        }
        RiskKind::Approaching => {
            b[0] < a[0]
                && lateral(a[1]) < th.dis
                && lateral(b[1]) < th.dis
                && (b[1] - a[1]).abs() < th.dis
                && moving
        }
        RiskKind::Crossing => {
            x.l_i < th.dis
                && x.l_prev < th.dis
                && (b[0] - a[0]).abs() < th.dis_x
                && (b[1] - a[1]).abs() > th.dis_y
                && moving
        }
        RiskKind::Braking => {
            x.l_i < x.l_prev
                && x.l_prev < th.dis
                && (b[0] - a[0]).abs() > th.dis_x
                && lateral(b[1]) < th.dis_y
                && lateral(a[1]) < th.dis_y
                && x.v_prev > th.s
                && x.v_i < th.s
        }
        RiskKind::LaneChanging => unreachable!(),
    }
}

/// Detections plus the number of frame instances skipped because they were
/// missing from a frame the predicate needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskScan<'a> {
    pub detected: Vec<&'a InstanceInfo>,
    pub skipped: usize,
}

pub fn detect_risk_scan<'a>(
    db: &'a SceneDatabase,
    kind: RiskKind,
    window: &Window,
    th: &RiskThresholds,
    mode: PredicateMode,
) -> Result<RiskScan<'a>, TaskError> {
    window.validate(db)?;
    let m_prev_map = motion_others(db, &window.current, &window.prev)?;
    let m_next_map = motion_others(db, &window.current, &window.next)?;
    let mut detected = Vec::new();
    let mut skipped = 0;
    for inst in db.frame_instances(&window.current)? {
        let Some(prev) = db.instance_at_frame(&inst.instance_id, &window.prev)? else {
            skipped += 1;
            continue;
        };
        let m_next = m_next_map.get(&inst.info_id).copied();
        if kind.needs_next_frame() && m_next.is_none() {
            skipped += 1;
            continue;
        }
        let inputs = RiskInputs {
            m_prev: m_prev_map[&inst.info_id],
            m_next,
            v_prev: speeds(db, &prev.info_id)?,
            v_i: speeds(db, &inst.info_id)?,
            l_prev: distance(db, &prev.info_id)?.l,
            l_i: distance(db, &inst.info_id)?.l,
            same_road_prev: same_road(db, &prev.info_id, &window.prev)?,
            same_road_i: same_road(db, &inst.info_id, &window.current)?,
        };
        if risk_predicate(kind, mode, &inputs, th) {
            detected.push(inst);
        }
    }
    Ok(RiskScan { detected, skipped })
}

/// Instances of the window's middle frame that satisfy `kind`'s predicate.
pub fn detect_risk<'a>(
    db: &'a SceneDatabase,
    kind: RiskKind,
    window: &Window,
    th: &RiskThresholds,
) -> Result<Vec<&'a InstanceInfo>, TaskError> {
    Ok(detect_risk_scan(db, kind, window, th, PredicateMode::Corrected)?.detected)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanningResult<'a> {
    pub risks: BTreeMap<RiskKind, Vec<&'a InstanceInfo>>,
    pub ego_speed_delta: f64,
    pub ego_motion: Vec3,
}

pub fn planning_with_reasoning_mode<'a>(
    db: &'a SceneDatabase,
    window: &Window,
    th: &RiskThresholds,
    mode: PredicateMode,
) -> Result<PlanningResult<'a>, TaskError> {
    window.validate(db)?;
    let (ego_speed_delta, ego_motion) = status_ego(db, &window.current, &window.next)?;
    let mut risks = BTreeMap::new();
    for kind in RiskKind::ALL {
        risks.insert(kind, detect_risk_scan(db, kind, window, th, mode)?.detected);
    }
    Ok(PlanningResult {
        risks,
        ego_speed_delta,
        ego_motion,
    })
}

pub fn planning_with_reasoning<'a>(
    db: &'a SceneDatabase,
    window: &Window,
    th: &RiskThresholds,
) -> Result<PlanningResult<'a>, TaskError> {
    planning_with_reasoning_mode(db, window, th, PredicateMode::Corrected)
}
