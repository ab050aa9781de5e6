//! Window sampling, templated instructions and responses, dataset assembly
//! and pair verification.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::LazyLock;
use std::time::Duration;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GenerationError, TaskError};
use crate::evaluation::tokens;
use crate::geometry::{planar_norm, Vec3};
use crate::jsonio;
use crate::scene_db::{BBox2D, InstanceInfo, SceneDatabase, SceneRecord, View};
use crate::task_sql::{self, PredicateMode, RiskKind, RiskThresholds, SubtaskKind, Task, Window};

pub const DEFAULT_VERIFIER_TIMEOUT_SECS: f64 = 10.0;
pub const DEFAULT_VERIFIER_RETRIES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum VerifierConfig {
    OfflineRules,
    ExternalClient {
        endpoint: String,
        timeout_secs: f64,
        retries: u32,
    },
}

impl VerifierConfig {
    pub fn external(endpoint: impl Into<String>) -> Self {
        VerifierConfig::ExternalClient {
            endpoint: endpoint.into(),
            timeout_secs: DEFAULT_VERIFIER_TIMEOUT_SECS,
            retries: DEFAULT_VERIFIER_RETRIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub master_seed: u64,
    pub windows_per_scene: usize,
    pub max_instances_per_subtask: usize,
    pub thresholds: RiskThresholds,
    pub enabled_subtasks: BTreeSet<SubtaskKind>,
    pub verifier: VerifierConfig,
    #[serde(default)]
    pub predicate_mode: PredicateMode,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            windows_per_scene: 1,
            max_instances_per_subtask: 8,
            thresholds: RiskThresholds::default(),
            enabled_subtasks: SubtaskKind::ALL.into_iter().collect(),
            verifier: VerifierConfig::OfflineRules,
            predicate_mode: PredicateMode::Corrected,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |m: String| Err(GenerationError::InvalidConfig(m));
        if self.windows_per_scene == 0 {
            return bad("windows_per_scene must be at least 1".into());
        }
        if self.max_instances_per_subtask == 0 {
            return bad("max_instances_per_subtask must be at least 1".into());
        }
        if self.enabled_subtasks.is_empty() {
            return bad("no subtasks enabled".into());
        }
        self.thresholds
            .validate()
            .map_err(GenerationError::InvalidConfig)?;
        if let VerifierConfig::ExternalClient {
            endpoint,
            timeout_secs,
            ..
        } = &self.verifier
        {
            if endpoint.is_empty() {
                return bad("verifier endpoint is empty".into());
            }
            if !(timeout_secs.is_finite() && *timeout_secs > 0.0) {
                return bad(format!(
                    "verifier timeout must be positive, got {timeout_secs}"
                ));
            }
        }
        Ok(())
    }
}

/// One box the answer to a risk question points at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionTarget {
    pub view: View,
    pub bbox: BBox2D,
    pub instance_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "value")]
pub enum GroundTruth {
    Numeric(Vec<f64>),
    Label(String),
    Detection(Vec<DetectionTarget>),
    FreeText(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionResponsePair {
    pub pair_id: String,
    pub scene_id: String,
    pub frame_ids: Vec<String>,
    pub task: Task,
    pub subtask: SubtaskKind,
    pub views_used: BTreeSet<View>,
    pub instruction: String,
    pub response: String,
    pub ground_truth: GroundTruth,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds_used: Option<RiskThresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_response: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unverified: bool,
}

impl InstructionResponsePair {
    pub fn window(&self) -> Option<Window> {
        match self.frame_ids.as_slice() {
            [a, b, c] => Some(Window::new(a.clone(), b.clone(), c.clone())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Drop,
    Revise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierVerdict {
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_response: Option<String>,
    #[serde(default)]
    pub reason: String,
}

impl VerifierVerdict {
    pub fn is_well_formed(&self) -> bool {
        (self.verdict == Verdict::Revise) == self.revised_response.is_some()
    }
}

/// Counters and logs collected while generating.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub eligible_scenes: usize,
    pub ineligible_scenes: Vec<String>,
    pub windows: usize,
    /// Instances skipped by a risk scan because a required frame lacked them.
    pub skipped_instances: usize,
    /// Instances with no camera box, which cannot be referenced in text.
    pub ungroundable_instances: usize,
    /// Instances left out by the per-subtask cap.
    pub capped_instances: usize,
    pub pair_failures: Vec<String>,
}

impl Diagnostics {
    fn merge(&mut self, other: Diagnostics) {
        self.eligible_scenes += other.eligible_scenes;
        self.ineligible_scenes.extend(other.ineligible_scenes);
        self.windows += other.windows;
        self.skipped_instances += other.skipped_instances;
        self.ungroundable_instances += other.ungroundable_instances;
        self.capped_instances += other.capped_instances;
        self.pair_failures.extend(other.pair_failures);
    }
}

/// Seeds the per-scene generator from the master seed and the scene id, so
/// scenes can be processed in any order.
pub fn scene_rng(master_seed: u64, scene_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(scene_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn window_at(scene: &SceneRecord, start: usize) -> Window {
    let f = &scene.frame_ids;
    Window::new(f[start].clone(), f[start + 1].clone(), f[start + 2].clone())
}

fn check_eligible(scene: &SceneRecord) -> Result<usize, GenerationError> {
    let n = scene.frame_ids.len();
    if n < 3 {
        return Err(GenerationError::IneligibleScene {
            scene_id: scene.scene_id.clone(),
            frames: n,
        });
    }
    Ok(n - 2)
}

/// One uniformly drawn window of three consecutive keyframes.
pub fn sample_window<R: Rng + ?Sized>(
    scene: &SceneRecord,
    rng: &mut R,
) -> Result<Window, GenerationError> {
    let starts = check_eligible(scene)?;
    Ok(window_at(scene, rng.random_range(0..starts)))
}

/// Up to `k` distinct windows, drawn without replacement and returned in
/// temporal order as `(start index, window)`.
pub fn sample_windows<R: Rng + ?Sized>(
    scene: &SceneRecord,
    k: usize,
    rng: &mut R,
) -> Result<Vec<(usize, Window)>, GenerationError> {
    let starts = check_eligible(scene)?;
    let mut picked = index::sample(rng, starts, k.min(starts)).into_vec();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|s| (s, window_at(scene, s)))
        .collect())
}

pub fn pair_id(scene_id: &str, start: usize, subtask: SubtaskKind, target: &str) -> String {
    let digest = Sha256::digest(format!("{scene_id}|{start}|{}|{target}", subtask.name()));
    hex::encode(&digest[..10])
}

/// `<view, x1, y1, x2, y2>` at one decimal.
pub fn grounding(view: View, bbox: &BBox2D) -> String {
    format!(
        "<{}, {:.1}, {:.1}, {:.1}, {:.1}>",
        view.label(),
        bbox.x1,
        bbox.y1,
        bbox.x2,
        bbox.y2
    )
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some(c) if "aeiou".contains(c.to_ascii_lowercase()) => "an",
        _ => "a",
    }
}

/// Fields an instruction template may reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateContext {
    pub target: Option<(View, BBox2D)>,
    pub view: Option<View>,
    pub category: Option<String>,
}

const XY_FORMAT: &str =
    "Please use the format as (x,y) where x and y are the forward and leftward offsets in meters.";

pub fn render_instruction(
    subtask: SubtaskKind,
    ctx: &TemplateContext,
) -> Result<String, GenerationError> {
    use SubtaskKind::*;
    let missing = |field| GenerationError::MissingContext {
        subtask: subtask.name().to_string(),
        field,
    };
    let target = || {
        ctx.target
            .as_ref()
            .map(|(v, b)| grounding(*v, b))
            .ok_or_else(|| missing("target"))
    };
    let scope = || {
        ctx.view.map(|v| match v {
            View::All => "around the ego car".to_string(),
            v => format!("in the {} view of the ego car", v.label()),
        })
    };
    Ok(match subtask {
        Distance => format!(
            "What is the distance between {} and the ego car? {XY_FORMAT}",
            target()?
        ),
        Closest => format!(
            "What is the closest object {}?",
            scope().ok_or_else(|| missing("view"))?
        ),
        InstanceNumber => {
            let category = ctx.category.as_deref().ok_or_else(|| missing("category"))?;
            format!(
                "How many objects of type {category} are {}?",
                scope().ok_or_else(|| missing("view"))?
            )
        }
        Speeds => format!("What is the speeds for {} in meters per second?", target()?),
        Status => format!("What is the status for {}?", target()?),
        SameRoad => format!("Is {} in the same road with the ego car?", target()?),
        MotionEgo => format!("What is the next motion for the ego car? {XY_FORMAT}"),
        MotionOthers => format!("What is the next motion for {}? {XY_FORMAT}", target()?),
        StatusEgo => "What's the next status for the ego car?".to_string(),
        StatusOthers => format!("What's the next status for {}?", target()?),
        Overtaking => "Do any objects overtake the ego car?".to_string(),
        OnComing => "Are there any oncoming objects in front of the ego car?".to_string(),
        Approaching => "Are there any objects approaching the ego car?".to_string(),
        Crossing => "Are there any objects crossing the road of the ego car?".to_string(),
        Braking => "Are there any objects braking suddenly near the ego car?".to_string(),
        LaneChanging => {
            "Are there any objects changing lanes into the lane of the ego car?".to_string()
        }
        PlanningWithReasoning => {
            "Please give the next plan for the ego car with reasons.".to_string()
        }
    })
}

pub fn speed_phrase(dv: f64, dead_band: f64) -> &'static str {
    if dv > dead_band {
        "accelerating"
    } else if dv < -dead_band {
        "decelerating"
    } else {
        "keeping a steady speed"
    }
}

/// Displacements shorter than this count as staying in place.
pub const STILL_DISPLACEMENT: f64 = 0.5;

pub fn direction_phrase(motion: Vec3) -> &'static str {
    if planar_norm(motion) < STILL_DISPLACEMENT {
        return "the current position";
    }
    let deg = motion.y.atan2(motion.x).to_degrees();
    match deg {
        d if d.abs() <= 22.5 => "the front",
        d if (22.5..=67.5).contains(&d) => "the left front",
        d if (-67.5..=-22.5).contains(&d) => "the right front",
        d if (67.5..=112.5).contains(&d) => "the left",
        d if (-112.5..=-67.5).contains(&d) => "the right",
        _ => "the back",
    }
}

pub const SPEED_PHRASES: [&str; 3] = ["accelerating", "decelerating", "keeping a steady speed"];
pub const DIRECTION_PHRASES: [&str; 7] = [
    "the front",
    "the left front",
    "the right front",
    "the left",
    "the right",
    "the back",
    "the current position",
];

pub fn status_label(dv: f64, motion: Vec3, dead_band: f64) -> String {
    format!(
        "{} and moving to {}",
        speed_phrase(dv, dead_band),
        direction_phrase(motion)
    )
}

/// Every label a status answer can take.
pub fn status_labels() -> Vec<String> {
    let mut out = Vec::new();
    for s in SPEED_PHRASES {
        for d in DIRECTION_PHRASES {
            out.push(format!("{s} and moving to {d}"));
        }
    }
    out
}

fn risk_phrase(kind: RiskKind) -> &'static str {
    match kind {
        RiskKind::Overtaking => "overtaking",
        RiskKind::OnComing => "oncoming towards",
        RiskKind::Approaching => "approaching",
        RiskKind::Crossing => "crossing",
        RiskKind::Braking => "braking in front of",
        RiskKind::LaneChanging => "changing lanes towards",
    }
}

/// Query results in the shape the response templates consume.
#[derive(Debug, Clone, PartialEq)]
pub enum ResponseInput {
    Distance {
        x: f64,
        y: f64,
    },
    Closest {
        view: View,
        category: String,
    },
    InstanceNumber(usize),
    Speed(f64),
    Status(String),
    SameRoad(bool),
    Motion(Vec3),
    StatusEgo {
        dv: f64,
        motion: Vec3,
    },
    StatusOthers {
        dv: f64,
        motion: Vec3,
    },
    Risk(Vec<DetectionTarget>),
    Planning {
        risks: Vec<(RiskKind, String)>,
        dv: f64,
        motion: Vec3,
    },
}

fn xy_text(x: f64, y: f64) -> String {
    format!("({x:.1}, {y:.1})")
}

pub fn render_response(input: &ResponseInput, th: &RiskThresholds) -> (String, GroundTruth) {
    match input {
        ResponseInput::Distance { x, y } => (xy_text(*x, *y), GroundTruth::Numeric(vec![*x, *y])),
        ResponseInput::Motion(m) => (xy_text(m.x, m.y), GroundTruth::Numeric(vec![m.x, m.y])),
        ResponseInput::Closest { view, category } => {
            let text = match view {
                View::All => format!("The closest object is {} {category}.", article(category)),
                v => format!(
                    "The closest object in the {} view is {} {category}.",
                    v.label(),
                    article(category)
                ),
            };
            (text, GroundTruth::Label(category.clone()))
        }
        ResponseInput::InstanceNumber(n) => (n.to_string(), GroundTruth::Numeric(vec![*n as f64])),
        ResponseInput::Speed(v) => (format!("{v:.1} m/s"), GroundTruth::Numeric(vec![*v])),
        ResponseInput::Status(s) => (format!("It is {s}."), GroundTruth::Label(s.clone())),
        ResponseInput::SameRoad(yes) => {
            let (text, label) = if *yes { ("Yes", "yes") } else { ("No", "no") };
            (text.to_string(), GroundTruth::Label(label.to_string()))
        }
        ResponseInput::StatusEgo { dv, motion } => {
            let label = status_label(*dv, *motion, th.s);
            (
                format!("The ego car will be {label}."),
                GroundTruth::Label(label),
            )
        }
        ResponseInput::StatusOthers { dv, motion } => {
            let label = status_label(*dv, *motion, th.s);
            (format!("It will be {label}."), GroundTruth::Label(label))
        }
        ResponseInput::Risk(targets) => {
            let text = if targets.is_empty() {
                "No.".to_string()
            } else {
                let refs: Vec<String> =
                    targets.iter().map(|t| grounding(t.view, &t.bbox)).collect();
                format!("Yes. {}.", refs.join(", "))
            };
            (text, GroundTruth::Detection(targets.clone()))
        }
        ResponseInput::Planning { risks, dv, motion } => {
            let first = if risks.is_empty() {
                "There are no risky objects around the ego car.".to_string()
            } else {
                let clauses: Vec<String> = risks
                    .iter()
                    .map(|(kind, category)| {
                        format!("{} {category} {}", article(category), risk_phrase(*kind))
                    })
                    .collect();
                let joined = match clauses.as_slice() {
                    [one] => one.clone(),
                    [init @ .., last] => format!("{} and {last}", init.join(", ")),
                    [] => unreachable!(),
                };
                format!("There are {joined} the ego car.")
            };
            let text = format!(
                "{first} Hence the ego car should be {} and move to {}.",
                speed_phrase(*dv, th.s),
                direction_phrase(*motion)
            );
            (text.clone(), GroundTruth::FreeText(text))
        }
    }
}

struct SceneJob<'a> {
    db: &'a SceneDatabase,
    config: &'a GenerationConfig,
    scene_id: &'a str,
    start: usize,
    window: Window,
    diag: Diagnostics,
    pairs: Vec<InstructionResponsePair>,
}

impl<'a> SceneJob<'a> {
    fn push(
        &mut self,
        subtask: SubtaskKind,
        target: &str,
        views: BTreeSet<View>,
        ctx: TemplateContext,
        input: ResponseInput,
    ) -> Result<(), GenerationError> {
        let th = self.config.thresholds;
        let instruction = render_instruction(subtask, &ctx)?;
        let (response, ground_truth) = render_response(&input, &th);
        let views_used = if views.is_empty() {
            BTreeSet::from([View::Front])
        } else {
            views
        };
        self.pairs.push(InstructionResponsePair {
            pair_id: pair_id(self.scene_id, self.start, subtask, target),
            scene_id: self.scene_id.to_string(),
            frame_ids: self
                .window
                .frame_ids()
                .iter()
                .map(|s| s.to_string())
                .collect(),
            task: subtask.task(),
            subtask,
            views_used,
            instruction,
            response,
            ground_truth,
            thresholds_used: matches!(subtask.task(), Task::Risk | Task::PlanningWithReasoning)
                .then_some(th),
            revised_response: None,
            unverified: false,
        });
        Ok(())
    }

    /// Groundable instances of the middle frame nearest-first, optionally
    /// restricted to those that also appear in the next frame.
    fn targets(
        &mut self,
        need_next: bool,
    ) -> Result<Vec<(&'a InstanceInfo, View, BBox2D)>, TaskError> {
        let db = self.db;
        let mut out = Vec::new();
        for inst in db.frame_instances(&self.window.current)? {
            if need_next
                && db
                    .instance_at_frame(&inst.instance_id, &self.window.next)?
                    .is_none()
            {
                continue;
            }
            match inst.primary_view() {
                Some((v, b)) => out.push((inst, v, b)),
                None => self.diag.ungroundable_instances += 1,
            }
        }
        out.sort_by(|a, b| {
            a.0.planar_distance()
                .total_cmp(&b.0.planar_distance())
                .then_with(|| a.0.info_id.cmp(&b.0.info_id))
        });
        let cap = self.config.max_instances_per_subtask;
        if out.len() > cap {
            self.diag.capped_instances += out.len() - cap;
            out.truncate(cap);
        }
        Ok(out)
    }

    fn run(&mut self, subtask: SubtaskKind) -> Result<(), GenerationError> {
        use SubtaskKind::*;
        let db = self.db;
        let w = self.window.clone();
        let th = self.config.thresholds;
        let ctx_for = |v: View, b: BBox2D| TemplateContext {
            target: Some((v, b)),
            ..Default::default()
        };
        match subtask {
            Distance | Speeds | Status | SameRoad => {
                for (inst, v, b) in self.targets(false)? {
                    let input = match subtask {
                        Distance => {
                            let d = task_sql::distance(db, &inst.info_id)?;
                            ResponseInput::Distance { x: d.x, y: d.y }
                        }
                        Speeds => ResponseInput::Speed(task_sql::speeds(db, &inst.info_id)?),
                        Status => ResponseInput::Status(task_sql::status(db, &inst.info_id)?),
                        _ => ResponseInput::SameRoad(task_sql::same_road(
                            db,
                            &inst.info_id,
                            &w.current,
                        )?),
                    };
                    self.push(
                        subtask,
                        &inst.info_id,
                        BTreeSet::from([v]),
                        ctx_for(v, b),
                        input,
                    )?;
                }
            }
            MotionOthers | StatusOthers => {
                let targets = self.targets(true)?;
                let (deltas, motions) = task_sql::status_others(db, &w.current, &w.next)?;
                for (inst, v, b) in targets {
                    let motion = motions[&inst.info_id];
                    let input = if subtask == MotionOthers {
                        ResponseInput::Motion(motion)
                    } else {
                        ResponseInput::StatusOthers {
                            dv: deltas[&inst.info_id],
                            motion,
                        }
                    };
                    self.push(
                        subtask,
                        &inst.info_id,
                        BTreeSet::from([v]),
                        ctx_for(v, b),
                        input,
                    )?;
                }
            }
            Closest => {
                for (view, inst) in task_sql::closest(db, &w.current)? {
                    let views = match view {
                        View::All => inst.camera_pos.keys().copied().collect(),
                        v => BTreeSet::from([v]),
                    };
                    let ctx = TemplateContext {
                        view: Some(view),
                        ..Default::default()
                    };
                    let input = ResponseInput::Closest {
                        view,
                        category: inst.category.clone(),
                    };
                    self.push(subtask, view.label(), views, ctx, input)?;
                }
            }
            InstanceNumber => {
                let counts = task_sql::instance_number(db, &w.current)?;
                let categories: Vec<String> = counts[&View::All].keys().cloned().collect();
                let frame_instances = db.frame_instances(&w.current).map_err(TaskError::from)?;
                for view in View::QUERYABLE {
                    for category in &categories {
                        let n = counts[&view].get(category).copied().unwrap_or(0);
                        let views = match view {
                            View::All => frame_instances
                                .iter()
                                .filter(|i| &i.category == category)
                                .flat_map(|i| i.camera_pos.keys().copied())
                                .collect(),
                            v => BTreeSet::from([v]),
                        };
                        let ctx = TemplateContext {
                            view: Some(view),
                            category: Some(category.clone()),
                            target: None,
                        };
                        let target = format!("{}|{category}", view.label());
                        self.push(
                            subtask,
                            &target,
                            views,
                            ctx,
                            ResponseInput::InstanceNumber(n),
                        )?;
                    }
                }
            }
            MotionEgo => {
                let m = task_sql::motion_ego(db, &w.current, &w.next)?;
                self.push(
                    subtask,
                    "ego",
                    BTreeSet::new(),
                    TemplateContext::default(),
                    ResponseInput::Motion(m),
                )?;
            }
            StatusEgo => {
                let (dv, motion) = task_sql::status_ego(db, &w.current, &w.next)?;
                let input = ResponseInput::StatusEgo { dv, motion };
                self.push(
                    subtask,
                    "ego",
                    BTreeSet::new(),
                    TemplateContext::default(),
                    input,
                )?;
            }
            Overtaking | OnComing | Approaching | Crossing | Braking | LaneChanging => {
                let kind = subtask.risk_kind().expect("risk subtask");
                let scan =
                    task_sql::detect_risk_scan(db, kind, &w, &th, self.config.predicate_mode)?;
                self.diag.skipped_instances += scan.skipped;
                let mut targets = Vec::new();
                for inst in scan.detected {
                    match inst.primary_view() {
                        Some((view, bbox)) => targets.push(DetectionTarget {
                            view,
                            bbox,
                            instance_id: inst.instance_id.clone(),
                        }),
                        None => self.diag.ungroundable_instances += 1,
                    }
                }
                let views = targets.iter().map(|t| t.view).collect();
                self.push(
                    subtask,
                    "-",
                    views,
                    TemplateContext::default(),
                    ResponseInput::Risk(targets),
                )?;
            }
            PlanningWithReasoning => {
                let plan = task_sql::planning_with_reasoning_mode(
                    db,
                    &w,
                    &th,
                    self.config.predicate_mode,
                )?;
                let mut risks = Vec::new();
                let mut views = BTreeSet::new();
                for (kind, list) in &plan.risks {
                    for inst in list {
                        risks.push((*kind, inst.category.clone()));
                        if let Some((v, _)) = inst.primary_view() {
                            views.insert(v);
                        }
                    }
                }
                let input = ResponseInput::Planning {
                    risks,
                    dv: plan.ego_speed_delta,
                    motion: plan.ego_motion,
                };
                self.push(subtask, "ego", views, TemplateContext::default(), input)?;
            }
        }
        Ok(())
    }
}

fn generate_scene(
    db: &SceneDatabase,
    scene: &SceneRecord,
    config: &GenerationConfig,
) -> (Vec<InstructionResponsePair>, Diagnostics) {
    let mut diag = Diagnostics::default();
    let mut rng = scene_rng(config.master_seed, &scene.scene_id);
    let windows = match sample_windows(scene, config.windows_per_scene, &mut rng) {
        Ok(w) => w,
        Err(_) => {
            diag.ineligible_scenes.push(scene.scene_id.clone());
            return (Vec::new(), diag);
        }
    };
    diag.eligible_scenes = 1;
    let mut pairs = Vec::new();
    for (start, window) in windows {
        diag.windows += 1;
        let mut job = SceneJob {
            db,
            config,
            scene_id: &scene.scene_id,
            start,
            window,
            diag: Diagnostics::default(),
            pairs: Vec::new(),
        };
        for subtask in SubtaskKind::ALL
            .into_iter()
            .filter(|s| config.enabled_subtasks.contains(s))
        {
            let before = job.pairs.len();
            if let Err(e) = job.run(subtask) {
                job.pairs.truncate(before);
                job.diag.pair_failures.push(format!(
                    "scene {} window {start} {subtask}: {e}",
                    scene.scene_id
                ));
            }
        }
        pairs.append(&mut job.pairs);
        diag.merge(job.diag);
    }
    (pairs, diag)
}

/// Runs every enabled subtask on sampled windows of every scene. Output
/// order is scene order, then window order, then subtask order, whatever
/// the number of worker threads.
pub fn generate_dataset(
    db: &SceneDatabase,
    config: &GenerationConfig,
    jobs: Option<usize>,
) -> Result<(Vec<InstructionResponsePair>, Diagnostics), GenerationError> {
    config.validate()?;
    let scenes: Vec<&SceneRecord> = db.scenes().collect();
    let work = || -> Vec<_> {
        scenes
            .par_iter()
            .map(|s| generate_scene(db, s, config))
            .collect()
    };
    let results = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| GenerationError::InvalidConfig(format!("cannot start worker pool: {e}")))?
            .install(work),
        None => work(),
    };
    let mut pairs = Vec::new();
    let mut diag = Diagnostics::default();
    for (p, d) in results {
        pairs.extend(p);
        diag.merge(d);
    }
    Ok((pairs, diag))
}

/// Why a pair was dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub pair_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub kept: Vec<InstructionResponsePair>,
    pub rejected: Vec<Rejection>,
    pub revised: usize,
    pub unverified: usize,
    pub client_errors: Vec<String>,
}

static GROUNDING_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"<([a-z ]+), ([-+]?\d+(?:\.\d+)?), ([-+]?\d+(?:\.\d+)?), ([-+]?\d+(?:\.\d+)?), ([-+]?\d+(?:\.\d+)?)>")
        .unwrap()
});
static XY_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\((-?\d+\.\d), (-?\d+\.\d)\)$").unwrap());
static SPEED_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(-?\d+\.\d) m/s$").unwrap());
static COUNT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+$").unwrap());

fn groundings_in(text: &str) -> Vec<(Option<View>, BBox2D)> {
    GROUNDING_RE
        .captures_iter(text)
        .map(|c| {
            let n = |i: usize| c[i].parse::<f64>().unwrap_or(f64::NAN);
            (View::from_label(&c[1]), BBox2D::new(n(2), n(3), n(4), n(5)))
        })
        .collect()
}

fn format_contract(pair: &InstructionResponsePair) -> Result<(), String> {
    use SubtaskKind::*;
    let text = pair.response.trim();
    let ok = match (&pair.subtask, &pair.ground_truth) {
        (Distance | MotionEgo | MotionOthers, GroundTruth::Numeric(v)) => {
            v.len() == 2 && XY_RE.is_match(text)
        }
        (Speeds, GroundTruth::Numeric(v)) => v.len() == 1 && SPEED_RE.is_match(text),
        (InstanceNumber, GroundTruth::Numeric(v)) => v.len() == 1 && COUNT_RE.is_match(text),
        (Closest | Status | SameRoad | StatusEgo | StatusOthers, GroundTruth::Label(l)) => {
            let label = tokens(l);
            !label.is_empty()
                && tokens(text)
                    .windows(label.len())
                    .any(|w| w == label.as_slice())
        }
        (_, GroundTruth::Detection(targets)) if pair.subtask.task() == Task::Risk => {
            if targets.is_empty() {
                text == "No."
            } else {
                text.starts_with("Yes.") && groundings_in(text).len() == targets.len()
            }
        }
        (PlanningWithReasoning, GroundTruth::FreeText(_)) => {
            text.starts_with("There are") && text.contains("Hence the ego car should be")
        }
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err("format contract".to_string())
    }
}

/// Offline checks every pair must pass. Detection references are checked
/// against `db` when one is given.
pub fn offline_check(
    pair: &InstructionResponsePair,
    db: Option<&SceneDatabase>,
) -> Result<(), String> {
    if pair.frame_ids.len() != 3 {
        return Err(format!(
            "expected 3 frame ids, got {}",
            pair.frame_ids.len()
        ));
    }
    if pair.views_used.is_empty() {
        return Err("views_used is empty".into());
    }
    format_contract(pair)?;
    if let GroundTruth::Numeric(v) = &pair.ground_truth {
        if v.iter().any(|x| !x.is_finite()) {
            return Err("non-finite numeric ground truth".into());
        }
    }
    for text in [&pair.instruction, &pair.response] {
        for (view, bbox) in groundings_in(text) {
            if view.is_none_or(|v| v == View::All) {
                return Err("grounding names an unknown view".into());
            }
            if !bbox.is_well_formed() || !bbox.within_image() {
                return Err("bounding box outside image bounds".into());
            }
        }
    }
    if let GroundTruth::Detection(targets) = &pair.ground_truth {
        for t in targets {
            if !t.bbox.is_well_formed() || !t.bbox.within_image() {
                return Err("detection box outside image bounds".into());
            }
            if let Some(db) = db {
                let present = db
                    .instance_at_frame(&t.instance_id, &pair.frame_ids[1])
                    .map_err(|e| e.to_string())?
                    .is_some();
                if !present {
                    return Err(format!(
                        "detection references unknown instance '{}'",
                        t.instance_id
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Wire body sent to an external verifier.
#[derive(Debug, Serialize)]
struct VerifyRequest<'a> {
    pair_id: &'a str,
    instruction: &'a str,
    response: &'a str,
    subtask: SubtaskKind,
    ground_truth: &'a GroundTruth,
}

/// Blocking HTTP client for an external verifier.
pub struct VerifierClient {
    agent: ureq::Agent,
    endpoint: String,
    retries: u32,
}

impl VerifierClient {
    pub fn new(endpoint: &str, timeout_secs: f64, retries: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(timeout_secs)))
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.to_string(),
            retries,
        }
    }

    fn call_once(&self, body: &str) -> Result<VerifierVerdict, String> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        let verdict: VerifierVerdict =
            serde_json::from_str(&text).map_err(|e| format!("bad verdict: {e}"))?;
        if !verdict.is_well_formed() {
            return Err(
                "revised_response must be present exactly when the verdict is revise".into(),
            );
        }
        Ok(verdict)
    }

    /// Asks the verifier about one pair, retrying on failure.
    pub fn verify(&self, pair: &InstructionResponsePair) -> Result<VerifierVerdict, String> {
        let body = jsonio::to_sorted_string(&VerifyRequest {
            pair_id: &pair.pair_id,
            instruction: &pair.instruction,
            response: &pair.response,
            subtask: pair.subtask,
            ground_truth: &pair.ground_truth,
        });
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.call_once(&body) {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

/// Applies the offline rules and, when configured, the external verifier.
pub fn verify_pairs(
    pairs: Vec<InstructionResponsePair>,
    verifier: &VerifierConfig,
    db: Option<&SceneDatabase>,
) -> VerifyOutcome {
    let mut out = VerifyOutcome::default();
    let client = match verifier {
        VerifierConfig::OfflineRules => None,
        VerifierConfig::ExternalClient {
            endpoint,
            timeout_secs,
            retries,
        } => Some(VerifierClient::new(endpoint, *timeout_secs, *retries)),
    };
    for mut pair in pairs {
        if let Err(reason) = offline_check(&pair, db) {
            out.rejected.push(Rejection {
                pair_id: pair.pair_id,
                reason,
            });
            continue;
        }
        if let Some(client) = &client {
            match client.verify(&pair) {
                Ok(v) => match v.verdict {
                    Verdict::Keep => {}
                    Verdict::Drop => {
                        out.rejected.push(Rejection {
                            pair_id: pair.pair_id,
                            reason: v.reason,
                        });
                        continue;
                    }
                    Verdict::Revise => {
                        pair.revised_response = v.revised_response;
                        out.revised += 1;
                    }
                },
                Err(e) => {
                    let mut msg = String::new();
                    let _ = write!(msg, "pair {}: {e}", pair.pair_id);
                    out.client_errors.push(msg);
                    pair.unverified = true;
                    out.unverified += 1;
                }
            }
        }
        out.kept.push(pair);
    }
    out
}

/// Number of pairs one window yields, computed from the database alone.
pub fn expected_pair_count(
    db: &SceneDatabase,
    window: &Window,
    config: &GenerationConfig,
) -> Result<usize, TaskError> {
    use SubtaskKind::*;
    let cap = config.max_instances_per_subtask;
    let current = db.frame_instances(&window.current)?;
    let groundable = current.iter().filter(|i| !i.camera_pos.is_empty()).count();
    let mut with_next = 0;
    for inst in &current {
        if !inst.camera_pos.is_empty()
            && db
                .instance_at_frame(&inst.instance_id, &window.next)?
                .is_some()
        {
            with_next += 1;
        }
    }
    let categories: BTreeSet<&str> = current.iter().map(|i| i.category.as_str()).collect();
    let mut closest_views: BTreeSet<View> = current
        .iter()
        .flat_map(|i| i.camera_pos.keys().copied())
        .collect();
    if !current.is_empty() {
        closest_views.insert(View::All);
    }
    let mut total = 0;
    for subtask in &config.enabled_subtasks {
        total += match subtask {
            Distance | Speeds | Status | SameRoad => groundable.min(cap),
            MotionOthers | StatusOthers => with_next.min(cap),
            Closest => closest_views.len(),
            InstanceNumber => View::QUERYABLE.len() * categories.len(),
            _ => 1,
        };
    }
    Ok(total)
}
