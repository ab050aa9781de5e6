//! Scripted synthetic scenes: kinematic waypoint tracks realized as
//! canonical annotations, plus curated risk scenarios and a random scene
//! generator.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SynthError;
use crate::geometry::{planar_norm, world_to_local, Quaternion, Vec3};
use crate::scene_db::{
    BBox2D, CanonicalAnnotations, EgoInfo, FrameRecord, InstanceInfo, SceneRecord, View,
    IMAGE_HEIGHT, IMAGE_WIDTH,
};
use crate::task_sql::RiskKind;

/// Keyframe spacing, seconds.
pub const KEYFRAME_DT: f64 = 0.5;
/// Half-width of each camera sector, degrees.
pub const SECTOR_HALF_WIDTH_DEG: f64 = 40.0;
/// Instances closer than this to the ego car get no camera box.
pub const MIN_VISIBLE_RANGE: f64 = 1.0;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    Overtaking,
    OnComing,
    Approaching,
    Crossing,
    Braking,
    LaneChanging,
    Benign,
}

impl ScriptKind {
    pub fn risk(self) -> Option<RiskKind> {
        match self {
            ScriptKind::Overtaking => Some(RiskKind::Overtaking),
            ScriptKind::OnComing => Some(RiskKind::OnComing),
            ScriptKind::Approaching => Some(RiskKind::Approaching),
            ScriptKind::Crossing => Some(RiskKind::Crossing),
            ScriptKind::Braking => Some(RiskKind::Braking),
            ScriptKind::LaneChanging => Some(RiskKind::LaneChanging),
            ScriptKind::Benign => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub position: Vec3,
    /// Yaw in radians, counter-clockwise from world +x.
    pub heading: f64,
    pub speed: f64,
    /// Lane from this waypoint on; inherits the previous lane when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lane: Option<String>,
}

impl Waypoint {
    pub fn new(t: f64, x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self {
            t,
            position: Vec3::new(x, y, 0.0),
            heading,
            speed,
            lane: None,
        }
    }

    pub fn with_lane(mut self, lane: &str) -> Self {
        self.lane = Some(lane.to_string());
        self
    }
}

/// One scripted object. It exists from its first to its last waypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub id: String,
    pub kind: ScriptKind,
    pub category: String,
    pub lane: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    pub waypoints: Vec<Waypoint>,
}

/// The ego path: straight along world +x from the origin at `speed`
/// unless waypoints are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoPath {
    pub speed: f64,
    pub lane: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub waypoints: Vec<Waypoint>,
}

impl Default for EgoPath {
    fn default() -> Self {
        Self {
            speed: 5.0,
            lane: "L1".into(),
            waypoints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneScript {
    pub scene_id: String,
    pub n_frames: usize,
    pub seed: u64,
    #[serde(default)]
    pub ego: EgoPath,
    pub scripts: Vec<ScenarioScript>,
}

#[derive(Debug, Clone, PartialEq)]
struct State {
    position: Vec3,
    heading: f64,
    speed: f64,
    lane: String,
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn validate_waypoints(owner: &str, waypoints: &[Waypoint]) -> Result<(), SynthError> {
    if waypoints.is_empty() {
        return Err(SynthError::Invalid(format!("'{owner}' has no waypoints")));
    }
    for w in waypoints {
        if !(w.t.is_finite()
            && w.position.is_finite()
            && w.heading.is_finite()
            && w.speed.is_finite())
        {
            return Err(SynthError::Invalid(format!(
                "'{owner}' has a non-finite waypoint"
            )));
        }
        if w.speed < 0.0 {
            return Err(SynthError::Invalid(format!(
                "'{owner}' has a negative speed"
            )));
        }
    }
    if waypoints.windows(2).any(|p| p[1].t <= p[0].t) {
        return Err(SynthError::Invalid(format!(
            "waypoints of '{owner}' are not strictly time-sorted"
        )));
    }
    Ok(())
}

/// Linear interpolation of position and speed, shortest-arc heading, and
/// step-wise lane. `None` outside the waypoint span.
fn state_at(waypoints: &[Waypoint], default_lane: &str, t: f64) -> Option<State> {
    let first = waypoints.first()?;
    let last = waypoints.last()?;
    if t < first.t - TIME_EPS || t > last.t + TIME_EPS {
        return None;
    }
    let lane = waypoints
        .iter()
        .take_while(|w| w.t <= t + TIME_EPS)
        .filter_map(|w| w.lane.clone())
        .last()
        .unwrap_or_else(|| default_lane.to_string());
    let k = waypoints
        .iter()
        .rposition(|w| w.t <= t + TIME_EPS)
        .unwrap_or(0);
    let a = &waypoints[k];
    if k + 1 == waypoints.len() || (t - a.t).abs() <= TIME_EPS {
        return Some(State {
            position: a.position,
            heading: a.heading,
            speed: a.speed,
            lane,
        });
    }
    let b = &waypoints[k + 1];
    let f = (t - a.t) / (b.t - a.t);
    Some(State {
        position: a.position + (b.position - a.position) * f,
        heading: a.heading + wrap_angle(b.heading - a.heading) * f,
        speed: a.speed + (b.speed - a.speed) * f,
        lane,
    })
}

fn road(lane: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("road".to_string(), "main".to_string()),
        ("lane".to_string(), lane.to_string()),
    ])
}

/// Physical footprint `(width, height)` in meters used to size boxes.
fn footprint(category: &str) -> (f64, f64) {
    match category {
        "pedestrian" => (0.7, 1.8),
        "bicycle" | "motorcycle" => (0.8, 1.5),
        "truck" | "bus" => (2.6, 3.5),
        "barrier" | "traffic_cone" => (1.2, 1.0),
        _ => (1.9, 1.6),
    }
}

/// Boxes for every camera whose sector contains the instance's bearing.
pub fn camera_boxes(local: Vec3, category: &str, scale: f64) -> BTreeMap<View, BBox2D> {
    let mut out = BTreeMap::new();
    let range = planar_norm(local);
    if range < MIN_VISIBLE_RANGE {
        return out;
    }
    let bearing = local.y.atan2(local.x).to_degrees();
    let (w, h) = footprint(category);
    let focal = 800.0;
    let half_w = (0.5 * scale * w * focal / range).clamp(4.0, 300.0);
    let half_h = (0.5 * scale * h * focal / range).clamp(4.0, 250.0);
    for view in View::CAMERAS {
        let axis = view.bearing_deg().expect("camera view");
        let mut diff = (bearing - axis) % 360.0;
        if diff > 180.0 {
            diff -= 360.0;
        } else if diff <= -180.0 {
            diff += 360.0;
        }
        if diff.abs() > SECTOR_HALF_WIDTH_DEG {
            continue;
        }
        let u = IMAGE_WIDTH / 2.0 - diff / SECTOR_HALF_WIDTH_DEG * 700.0;
        let v = IMAGE_HEIGHT / 2.0 + 50.0;
        out.insert(
            view,
            BBox2D::new(
                (u - half_w).max(0.0),
                (v - half_h).max(0.0),
                (u + half_w).min(IMAGE_WIDTH),
                (v + half_h).min(IMAGE_HEIGHT),
            ),
        );
    }
    out
}

fn default_attribute(category: &str, speed: f64) -> String {
    let moving = speed > 0.1;
    match (category, moving) {
        (_, true) => "moving",
        ("pedestrian", false) => "standing",
        _ => "stopped",
    }
    .to_string()
}

pub fn frame_id(scene_id: &str, k: usize) -> String {
    format!("{scene_id}_f{k:02}")
}

pub fn instance_id(scene_id: &str, script_id: &str) -> String {
    format!("{scene_id}_{script_id}")
}

/// Realizes a scene script as canonical annotations.
pub fn synth_scene(scene: &SceneScript) -> Result<CanonicalAnnotations, SynthError> {
    if scene.n_frames < 3 {
        return Err(SynthError::Invalid(format!(
            "scene '{}' needs at least 3 frames",
            scene.scene_id
        )));
    }
    let mut seen = BTreeSet::new();
    for s in &scene.scripts {
        if !seen.insert(s.id.as_str()) {
            return Err(SynthError::ConflictingId(instance_id(
                &scene.scene_id,
                &s.id,
            )));
        }
        validate_waypoints(&s.id, &s.waypoints)?;
    }
    if !scene.ego.waypoints.is_empty() {
        validate_waypoints("ego", &scene.ego.waypoints)?;
    }
    if !(scene.ego.speed.is_finite() && scene.ego.speed >= 0.0) {
        return Err(SynthError::Invalid("ego speed must be non-negative".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let scales: Vec<f64> = scene
        .scripts
        .iter()
        .map(|_| rng.random_range(0.85..1.15))
        .collect();

    let mut out = CanonicalAnnotations::default();
    let mut frame_ids = Vec::new();
    for k in 0..scene.n_frames {
        let t = k as f64 * KEYFRAME_DT;
        let ego_state = if scene.ego.waypoints.is_empty() {
            State {
                position: Vec3::new(scene.ego.speed * t, 0.0, 0.0),
                heading: 0.0,
                speed: scene.ego.speed,
                lane: scene.ego.lane.clone(),
            }
        } else {
            state_at(&scene.ego.waypoints, &scene.ego.lane, t)
                .ok_or_else(|| SynthError::Invalid(format!("ego waypoints do not cover t={t}")))?
        };
        let ego_rot = Quaternion::from_yaw(ego_state.heading);
        let fid = frame_id(&scene.scene_id, k);
        let ego_id = format!("{}_e{k:02}", scene.scene_id);
        out.ego.push(EgoInfo {
            info_id: ego_id.clone(),
            pose: ego_state.position,
            rotation: ego_rot,
            velocity: ego_state.speed,
            road_info: road(&ego_state.lane),
            camera_info: BTreeMap::new(),
        });
        let mut ids = Vec::new();
        for (script, &scale) in scene.scripts.iter().zip(&scales) {
            let Some(s) = state_at(&script.waypoints, &script.lane, t) else {
                continue;
            };
            let rot = Quaternion::from_yaw(s.heading);
            let local = world_to_local(ego_state.position, ego_rot, s.position)?;
            let info_id = format!("{}_{}_{k:02}", scene.scene_id, script.id);
            out.instances.push(InstanceInfo {
                info_id: info_id.clone(),
                instance_id: instance_id(&scene.scene_id, &script.id),
                category: script.category.clone(),
                attribute: script
                    .attribute
                    .clone()
                    .unwrap_or_else(|| default_attribute(&script.category, s.speed)),
                global_t: s.position,
                global_r: rot,
                local_t: local,
                local_r: ego_rot.conjugate() * rot,
                velocity: s.speed,
                road_info: road(&s.lane),
                camera_pos: camera_boxes(local, &script.category, scale),
            });
            ids.push(info_id);
        }
        out.frames.push(FrameRecord {
            frame_id: fid.clone(),
            ego_info_id: ego_id,
            instance_info_ids: ids,
            timestamp: t,
        });
        frame_ids.push(fid);
    }
    out.scenes.push(SceneRecord {
        scene_id: scene.scene_id.clone(),
        frame_ids,
    });
    Ok(out)
}

/// Realizes several scenes into one annotation document.
pub fn synth_corpus(scenes: &[SceneScript]) -> Result<CanonicalAnnotations, SynthError> {
    let mut seen = BTreeSet::new();
    let mut out = CanonicalAnnotations::default();
    for scene in scenes {
        if !seen.insert(scene.scene_id.as_str()) {
            return Err(SynthError::ConflictingId(scene.scene_id.clone()));
        }
        let a = synth_scene(scene)?;
        out.scenes.extend(a.scenes);
        out.frames.extend(a.frames);
        out.ego.extend(a.ego);
        out.instances.extend(a.instances);
    }
    Ok(out)
}

/// Instances each risk kind should report on a scene's first window,
/// according to the script labels.
///
/// An oncoming script also counts as approaching: the oncoming conditions
/// are a strict subset of the approaching ones.
pub fn intended_detections(scene: &SceneScript) -> BTreeMap<RiskKind, BTreeSet<String>> {
    let mut out: BTreeMap<RiskKind, BTreeSet<String>> = RiskKind::ALL
        .into_iter()
        .map(|k| (k, BTreeSet::new()))
        .collect();
    for s in &scene.scripts {
        if let Some(kind) = s.kind.risk() {
            let id = instance_id(&scene.scene_id, &s.id);
            out.get_mut(&kind).unwrap().insert(id.clone());
            if kind == RiskKind::OnComing {
                out.get_mut(&RiskKind::Approaching).unwrap().insert(id);
            }
        }
    }
    out
}

/// A three-point track sampled at the first three keyframes.
fn track(
    id: &str,
    kind: ScriptKind,
    category: &str,
    lanes: [&str; 3],
    points: [(f64, f64); 3],
    heading: f64,
    speeds: [f64; 3],
) -> ScenarioScript {
    let waypoints = (0..3)
        .map(|k| {
            let mut w = Waypoint::new(
                k as f64 * KEYFRAME_DT,
                points[k].0,
                points[k].1,
                heading,
                speeds[k],
            );
            if k == 0 || lanes[k] != lanes[k - 1] {
                w.lane = Some(lanes[k].to_string());
            }
            w
        })
        .collect();
    ScenarioScript {
        id: id.into(),
        kind,
        category: category.into(),
        lane: lanes[0].into(),
        attribute: None,
        waypoints,
    }
}

fn parked(id: &str, category: &str, x: f64, y: f64) -> ScenarioScript {
    let mut s = track(
        id,
        ScriptKind::Benign,
        category,
        ["L3"; 3],
        [(x, y); 3],
        0.0,
        [0.0; 3],
    );
    if category != "pedestrian" && category != "barrier" {
        s.attribute = Some("parked".into());
    }
    s
}

fn scene(id: &str, ego_speed: f64, scripts: Vec<ScenarioScript>) -> SceneScript {
    SceneScript {
        scene_id: id.into(),
        n_frames: 3,
        seed: 7,
        ego: EgoPath {
            speed: ego_speed,
            ..Default::default()
        },
        scripts,
    }
}

/// Hand-built three-frame scenes, two per risk kind plus benign ones.
pub fn curated_scenarios() -> Vec<SceneScript> {
    use ScriptKind::*;
    let l = |a: &'static str| [a; 3];
    vec![
        scene(
            "cur_overtaking_a",
            5.0,
            vec![
                track(
                    "car",
                    Overtaking,
                    "car",
                    l("L2"),
                    [(-5.0, 3.5), (2.5, 3.5), (10.0, 3.5)],
                    0.0,
                    [15.0; 3],
                ),
                parked("parked", "car", 6.0, -6.0),
            ],
        ),
        scene(
            "cur_overtaking_b",
            5.0,
            vec![track(
                "moto",
                Overtaking,
                "motorcycle",
                l("L0"),
                [(-6.0, -3.0), (-1.0, -3.0), (4.0, -3.0)],
                0.0,
                [10.0; 3],
            )],
        ),
        scene(
            "cur_oncoming_a",
            5.0,
            vec![
                track(
                    "car",
                    OnComing,
                    "car",
                    l("L0"),
                    [(12.0, 3.5), (9.0, 3.5), (10.0, 3.5)],
                    0.0,
                    [6.0, 2.0, 2.0],
                ),
                parked("cone", "barrier", 4.0, -5.0),
            ],
        ),
        scene(
            "cur_oncoming_b",
            5.0,
            vec![track(
                "truck",
                OnComing,
                "truck",
                l("L0"),
                [(14.0, 3.0), (14.0, -1.0), (14.0, -0.5)],
                FRAC_PI_2,
                [8.0, 7.0, 1.0],
            )],
        ),
        scene(
            "cur_approaching_a",
            5.0,
            vec![track(
                "car",
                Approaching,
                "car",
                l("L0"),
                [(8.0, 3.5), (6.0, 3.5), (4.0, 3.5)],
                0.0,
                [4.0; 3],
            )],
        ),
        scene(
            "cur_approaching_b",
            5.0,
            vec![
                track(
                    "car",
                    Approaching,
                    "car",
                    l("L2"),
                    [(6.0, -3.5), (7.2, -3.5), (8.4, -3.5)],
                    PI,
                    [2.4; 3],
                ),
                parked("ped", "pedestrian", 9.0, 6.0),
            ],
        ),
        scene(
            "cur_crossing_a",
            5.0,
            vec![track(
                "ped",
                Crossing,
                "pedestrian",
                l("walk"),
                [(11.6, -2.0), (12.0, 0.0), (11.8, 2.0)],
                0.0,
                [4.0; 3],
            )],
        ),
        scene(
            "cur_crossing_b",
            5.0,
            vec![
                track(
                    "bike",
                    Crossing,
                    "bicycle",
                    l("walk"),
                    [(8.0, -3.4), (10.0, -3.0), (12.0, -3.2)],
                    FRAC_PI_2,
                    [4.0; 3],
                ),
                parked("parked", "car", -8.0, 4.0),
            ],
        ),
        scene(
            "cur_braking_a",
            10.0,
            vec![track(
                "car",
                Braking,
                "car",
                l("L1"),
                [(12.0, 0.0), (15.5, 0.0), (15.5, 0.0)],
                0.0,
                [7.0, 0.0, 0.0],
            )],
        ),
        scene(
            "cur_braking_b",
            10.0,
            vec![
                track(
                    "truck",
                    Braking,
                    "truck",
                    l("L2"),
                    [(8.0, -3.5), (12.0, -3.5), (12.0, -3.5)],
                    0.0,
                    [8.0, 0.2, 0.0],
                ),
                parked("parked", "car", 6.0, 6.0),
            ],
        ),
        scene(
            "cur_lane_changing_a",
            5.0,
            vec![track(
                "car",
                LaneChanging,
                "car",
                ["L2", "L1", "L1"],
                [(10.3, 2.2), (10.0, 1.0), (10.5, -0.2)],
                0.0,
                [3.0; 3],
            )],
        ),
        scene(
            "cur_lane_changing_b",
            5.0,
            vec![
                track(
                    "van",
                    LaneChanging,
                    "car",
                    ["L0", "L1", "L1"],
                    [(14.3, -2.2), (14.0, -1.0), (14.5, 0.2)],
                    0.0,
                    [2.0, 2.5, 2.5],
                ),
                parked("ped", "pedestrian", 3.0, 7.0),
            ],
        ),
        scene(
            "cur_benign_static",
            0.0,
            vec![parked("parked", "car", 5.0, 0.0)],
        ),
        scene(
            "cur_benign_roadside",
            5.0,
            vec![
                parked("ped", "pedestrian", 8.0, -5.0),
                parked("barrier", "barrier", -6.0, 4.0),
            ],
        ),
        scene(
            "cur_benign_parking",
            5.0,
            vec![
                parked("truck", "truck", 12.0, 6.0),
                parked("car", "car", -10.0, -3.0),
            ],
        ),
    ]
}

const CATEGORIES: [&str; 6] = ["car", "car", "truck", "pedestrian", "bicycle", "barrier"];
const LANES: [&str; 4] = ["L0", "L1", "L2", "walk"];

/// A random scene of 6 to 12 keyframes with mixed static and moving
/// objects, lane changes, speed changes and objects entering or leaving.
pub fn random_scene<R: Rng + ?Sized>(scene_id: &str, rng: &mut R) -> SceneScript {
    let n_frames = rng.random_range(6..=12);
    let ego_speed = if rng.random_bool(0.2) {
        0.0
    } else {
        rng.random_range(1.0..10.0)
    };
    let n_objects = rng.random_range(3..=12);
    let mut scripts = Vec::new();
    for o in 0..n_objects {
        let category = CATEGORIES[rng.random_range(0..CATEGORIES.len())];
        let static_obj = category == "barrier" || rng.random_bool(0.25);
        let mut x = rng.random_range(-22.0..28.0);
        let mut y = rng.random_range(-15.0..15.0);
        let mut heading = match rng.random_range(0..4) {
            0 => 0.0,
            1 => PI,
            2 => FRAC_PI_2 * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            _ => rng.random_range(-PI..PI),
        };
        let mut speed = if static_obj {
            0.0
        } else if category == "pedestrian" {
            rng.random_range(0.3..2.5)
        } else {
            rng.random_range(0.5..14.0)
        };
        let decel = if rng.random_bool(0.2) {
            rng.random_range(1.0..8.0)
        } else {
            0.0
        };
        let yaw_rate = if static_obj || rng.random_bool(0.7) {
            0.0
        } else {
            rng.random_range(-0.4..0.4)
        };
        let first = if rng.random_bool(0.75) {
            0
        } else {
            rng.random_range(0..n_frames - 1)
        };
        let last = if rng.random_bool(0.75) {
            n_frames - 1
        } else {
            rng.random_range(first + 1..n_frames)
        };
        let mut lane = LANES[rng.random_range(0..LANES.len())].to_string();
        let change_at = rng.random_bool(0.3).then(|| rng.random_range(first..=last));
        let mut waypoints = Vec::new();
        for k in 0..n_frames {
            if k >= first && k <= last {
                let mut w = Waypoint::new(k as f64 * KEYFRAME_DT, x, y, heading, speed);
                if k == first || Some(k) == change_at {
                    if Some(k) == change_at {
                        lane = LANES[rng.random_range(0..LANES.len())].to_string();
                    }
                    w.lane = Some(lane.clone());
                }
                waypoints.push(w);
            }
            let step = speed * KEYFRAME_DT;
            x += step * heading.cos();
            y += step * heading.sin();
            heading = wrap_angle(heading + yaw_rate * KEYFRAME_DT);
            speed = (speed - decel * KEYFRAME_DT).max(0.0);
        }
        scripts.push(ScenarioScript {
            id: format!("obj{o:02}"),
            kind: ScriptKind::Benign,
            category: category.into(),
            lane: waypoints[0].lane.clone().unwrap_or_default(),
            attribute: None,
            waypoints,
        });
    }
    SceneScript {
        scene_id: scene_id.into(),
        n_frames,
        seed: rng.random(),
        ego: EgoPath {
            speed: ego_speed,
            ..Default::default()
        },
        scripts,
    }
}

/// `count` random scenes named `{prefix}{index:03}`.
pub fn random_corpus(prefix: &str, count: usize, seed: u64) -> Vec<SceneScript> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| random_scene(&format!("{prefix}{i:03}"), &mut rng))
        .collect()
}
