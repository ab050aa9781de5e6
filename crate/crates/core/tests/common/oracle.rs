//! Brute-force reference implementations of the query algorithms, built
//! from linear scans and rotation matrices, and a checker that compares
//! them with the library on a database.

use std::collections::{BTreeMap, BTreeSet};

use drivesql::geometry::{Quaternion, Vec3};
use drivesql::scene_db::{EgoInfo, InstanceInfo, SceneDatabase, View};
use drivesql::task_sql::{self, RiskKind, RiskThresholds, Window};

pub const REAL_TOL: f64 = 1e-9;

fn matrix(q: Quaternion) -> [[f64; 3]; 3] {
    let n = (q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
    let (w, x, y, z) = (q.w / n, q.x / n, q.y / n, q.z / n);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// `Rᵀ (to - from)`.
pub fn motion(from: Vec3, r: Quaternion, to: Vec3) -> [f64; 3] {
    let m = matrix(r);
    let d = [to.x - from.x, to.y - from.y, to.z - from.z];
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[0][i] * d[0] + m[1][i] * d[1] + m[2][i] * d[2];
    }
    out
}

pub fn frame_instances<'a>(db: &'a SceneDatabase, frame_id: &str) -> Vec<&'a InstanceInfo> {
    let frame = db.frames().find(|f| f.frame_id == frame_id).expect("frame");
    frame
        .instance_info_ids
        .iter()
        .map(|id| db.instances().find(|i| &i.info_id == id).expect("instance"))
        .collect()
}

pub fn ego<'a>(db: &'a SceneDatabase, frame_id: &str) -> &'a EgoInfo {
    let frame = db.frames().find(|f| f.frame_id == frame_id).expect("frame");
    db.ego_states()
        .find(|e| e.info_id == frame.ego_info_id)
        .expect("ego")
}

pub fn instance_at<'a>(
    db: &'a SceneDatabase,
    instance_id: &str,
    frame_id: &str,
) -> Option<&'a InstanceInfo> {
    frame_instances(db, frame_id)
        .into_iter()
        .find(|i| i.instance_id == instance_id)
}

fn dist(i: &InstanceInfo) -> f64 {
    (i.local_t.x * i.local_t.x + i.local_t.y * i.local_t.y).sqrt()
}

pub fn closest(db: &SceneDatabase, frame_id: &str) -> BTreeMap<View, String> {
    let all = frame_instances(db, frame_id);
    let mut out = BTreeMap::new();
    for view in View::QUERYABLE {
        let mut visible: Vec<&InstanceInfo> = all
            .iter()
            .copied()
            .filter(|i| view == View::All || i.camera_pos.contains_key(&view))
            .collect();
        visible.sort_by(|a, b| {
            dist(a)
                .partial_cmp(&dist(b))
                .unwrap()
                .then(a.info_id.cmp(&b.info_id))
        });
        if let Some(first) = visible.first() {
            out.insert(view, first.info_id.clone());
        }
    }
    out
}

pub fn counts(db: &SceneDatabase, frame_id: &str) -> BTreeMap<View, BTreeMap<String, usize>> {
    let all = frame_instances(db, frame_id);
    let mut out = BTreeMap::new();
    for view in View::QUERYABLE {
        let mut m = BTreeMap::new();
        for cat in all
            .iter()
            .map(|i| i.category.clone())
            .collect::<BTreeSet<_>>()
        {
            let n = all
                .iter()
                .filter(|i| {
                    i.category == cat && (view == View::All || i.camera_pos.contains_key(&view))
                })
                .count();
            if n > 0 {
                m.insert(cat, n);
            }
        }
        out.insert(view, m);
    }
    out
}

/// Inputs of one predicate evaluation, gathered without the library.
struct Kin {
    a: [f64; 3],
    b: Option<[f64; 3]>,
    v_prev: f64,
    v_i: f64,
    l_prev: f64,
    l_i: f64,
    road_prev: bool,
    road_i: bool,
}

fn holds(kind: RiskKind, k: &Kin, th: &RiskThresholds) -> bool {
    let a = k.a;
    let both_move = k.v_prev > 0.0 && k.v_i > 0.0;
    if kind == RiskKind::LaneChanging {
        return k.l_i < k.l_prev
            && k.l_prev < th.dis
            && k.road_i
            && !k.road_prev
            && k.v_prev > th.s
            && k.v_i > th.s;
    }
    let Some(b) = k.b else { return false };
    match kind {
        RiskKind::Overtaking => {
            a[0] < 0.0 && b[0] > 0.0 && a[1].abs() < th.dis && b[1].abs() < th.dis && both_move
        }
        RiskKind::OnComing => {
            a[0] > 0.0
                && b[0] > 0.0
                && b[0] < a[0]
                && a[1].abs() < th.dis
                && b[1].abs() < th.dis
                && (b[1] - a[1]).abs() < th.dis
                && both_move
        }
        RiskKind::Approaching => {
            b[0] < a[0]
                && a[1].abs() < th.dis
                && b[1].abs() < th.dis
                && (b[1] - a[1]).abs() < th.dis
                && both_move
        }
        RiskKind::Crossing => {
            k.l_i < th.dis
                && k.l_prev < th.dis
                && (b[0] - a[0]).abs() < th.dis_x
                && (b[1] - a[1]).abs() > th.dis_y
                && both_move
        }
        RiskKind::Braking => {
            k.l_i < k.l_prev
                && k.l_prev < th.dis
                && (b[0] - a[0]).abs() > th.dis_x
                && b[1].abs() < th.dis_y
                && a[1].abs() < th.dis_y
                && k.v_prev > th.s
                && k.v_i < th.s
        }
        RiskKind::LaneChanging => unreachable!(),
    }
}

/// Info ids of the middle-frame instances satisfying `kind`.
pub fn detect(db: &SceneDatabase, kind: RiskKind, w: &Window, th: &RiskThresholds) -> Vec<String> {
    let ego_prev = ego(db, &w.prev);
    let ego_i = ego(db, &w.current);
    let mut out = Vec::new();
    for inst in frame_instances(db, &w.current) {
        let Some(prev) = instance_at(db, &inst.instance_id, &w.prev) else {
            continue;
        };
        let next = instance_at(db, &inst.instance_id, &w.next);
        if kind != RiskKind::LaneChanging && next.is_none() {
            continue;
        }
        let k = Kin {
            a: motion(inst.global_t, inst.global_r, prev.global_t),
            b: next.map(|n| motion(inst.global_t, inst.global_r, n.global_t)),
            v_prev: prev.velocity,
            v_i: inst.velocity,
            l_prev: dist(prev),
            l_i: dist(inst),
            road_prev: prev.road_info == ego_prev.road_info,
            road_i: inst.road_info == ego_i.road_info,
        };
        if holds(kind, &k, th) {
            out.push(inst.info_id.clone());
        }
    }
    out
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REAL_TOL
}

fn close3(v: Vec3, o: [f64; 3]) -> bool {
    close(v.x, o[0]) && close(v.y, o[1]) && close(v.z, o[2])
}

/// Compares every query against its oracle on every window of every scene.
/// Returns the number of comparisons made.
pub fn check_database(db: &SceneDatabase, th: &RiskThresholds) -> Result<usize, String> {
    let mut checks = 0usize;
    let mut ensure = |ok: bool, what: String| -> Result<(), String> {
        checks += 1;
        if ok {
            Ok(())
        } else {
            Err(what)
        }
    };
    for scene in db.scenes() {
        for fid in &scene.frame_ids {
            let insts = frame_instances(db, fid);
            for inst in &insts {
                let d = task_sql::distance(db, &inst.info_id).map_err(|e| e.to_string())?;
                ensure(
                    d.x == inst.local_t.x && d.y == inst.local_t.y && close(d.l, dist(inst)),
                    format!("distance {}", inst.info_id),
                )?;
                ensure(
                    task_sql::speeds(db, &inst.info_id).unwrap().to_bits()
                        == inst.velocity.to_bits(),
                    format!("speeds {}", inst.info_id),
                )?;
                ensure(
                    task_sql::status(db, &inst.info_id).unwrap() == inst.attribute,
                    format!("status {}", inst.info_id),
                )?;
                ensure(
                    task_sql::same_road(db, &inst.info_id, fid).unwrap()
                        == (inst.road_info == ego(db, fid).road_info),
                    format!("same_road {}", inst.info_id),
                )?;
            }
            let got: BTreeMap<View, String> = task_sql::closest(db, fid)
                .unwrap()
                .into_iter()
                .map(|(v, i)| (v, i.info_id.clone()))
                .collect();
            ensure(got == closest(db, fid), format!("closest {fid}"))?;
            for (view, id) in &got {
                let best = insts
                    .iter()
                    .find(|i| &i.info_id == id)
                    .map(|i| dist(i))
                    .unwrap();
                let minimal = insts
                    .iter()
                    .filter(|i| *view == View::All || i.camera_pos.contains_key(view))
                    .all(|i| best <= dist(i));
                ensure(minimal, format!("closest minimality {fid} {view:?}"))?;
            }
            let n = task_sql::instance_number(db, fid).unwrap();
            ensure(n == counts(db, fid), format!("instance_number {fid}"))?;
            for (cat, c) in &n[&View::All] {
                ensure(
                    *c == insts.iter().filter(|i| &i.category == cat).count(),
                    format!("All count {fid}"),
                )?;
            }
            for m in n.values() {
                ensure(
                    m.values().all(|c| *c <= insts.len()),
                    format!("view count bound {fid}"),
                )?;
            }
        }
        for f in scene.frame_ids.windows(2) {
            let (fi, fnext) = (&f[0], &f[1]);
            let (ei, en) = (ego(db, fi), ego(db, fnext));
            let m = task_sql::motion_ego(db, fi, fnext).unwrap();
            ensure(
                close3(m, motion(ei.pose, ei.rotation, en.pose)),
                format!("motion_ego {fi}"),
            )?;
            let (dv, m2) = task_sql::status_ego(db, fi, fnext).unwrap();
            ensure(
                dv == en.velocity - ei.velocity && m2 == m,
                format!("status_ego {fi}"),
            )?;
            let mo = task_sql::motion_others(db, fi, fnext).unwrap();
            let (speeds, mo2) = task_sql::status_others(db, fi, fnext).unwrap();
            ensure(mo == mo2, format!("status_others motions {fi}"))?;
            let mut expected_keys = BTreeSet::new();
            for inst in frame_instances(db, fi) {
                if let Some(next) = instance_at(db, &inst.instance_id, fnext) {
                    expected_keys.insert(inst.info_id.clone());
                    let got = mo.get(&inst.info_id).copied();
                    let ok = got.is_some_and(|g| {
                        close3(g, motion(inst.global_t, inst.global_r, next.global_t))
                    });
                    ensure(ok, format!("motion_others {}", inst.info_id))?;
                    ensure(
                        speeds.get(&inst.info_id) == Some(&(next.velocity - inst.velocity)),
                        format!("status_others {}", inst.info_id),
                    )?;
                }
            }
            ensure(
                mo.keys().cloned().collect::<BTreeSet<_>>() == expected_keys,
                format!("motion keys {fi}"),
            )?;
            ensure(speeds.keys().eq(mo.keys()), format!("status key sets {fi}"))?;
        }
        for f in scene.frame_ids.windows(3) {
            let w = Window::new(f[0].clone(), f[1].clone(), f[2].clone());
            let plan = task_sql::planning_with_reasoning(db, &w, th).unwrap();
            for kind in RiskKind::ALL {
                let got: Vec<String> = task_sql::detect_risk(db, kind, &w, th)
                    .unwrap()
                    .into_iter()
                    .map(|i| i.info_id.clone())
                    .collect();
                ensure(
                    got == detect(db, kind, &w, th),
                    format!("detect_risk {kind:?} at {}", w.current),
                )?;
                let planned: Vec<String> = plan.risks[&kind]
                    .iter()
                    .map(|i| i.info_id.clone())
                    .collect();
                ensure(
                    planned == got,
                    format!("planning risks {kind:?} at {}", w.current),
                )?;
            }
            let (ei, en) = (ego(db, &w.current), ego(db, &w.next));
            ensure(
                plan.ego_speed_delta == en.velocity - ei.velocity,
                format!("planning dv {}", w.current),
            )?;
            ensure(
                close3(plan.ego_motion, motion(ei.pose, ei.rotation, en.pose)),
                format!("planning motion {}", w.current),
            )?;
        }
    }
    Ok(checks)
}
