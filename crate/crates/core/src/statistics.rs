//! Dataset statistics: pair counts per subtask and task, per-view response
//! counts, and instance tallies over the keyframes the pairs use.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::StatsError;
use crate::generation::InstructionResponsePair;
use crate::scene_db::{SceneDatabase, View};
use crate::task_sql::{SubtaskKind, Task};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pairs_per_subtask: BTreeMap<SubtaskKind, usize>,
    pub task_proportions: BTreeMap<Task, f64>,
    pub responses_per_view: BTreeMap<View, usize>,
    pub view_percent_per_task: BTreeMap<Task, BTreeMap<View, f64>>,
    pub instances_total: usize,
    pub instance_appearances: usize,
    pub keyframes: usize,
    pub avg_instances_per_keyframe: f64,
}

/// Mean number of instance appearances per keyframe; 0 without keyframes.
pub fn average_per_keyframe(appearances: usize, keyframes: usize) -> f64 {
    if keyframes == 0 {
        0.0
    } else {
        appearances as f64 / keyframes as f64
    }
}

fn normalize<K: Ord + Copy>(counts: &BTreeMap<K, usize>) -> BTreeMap<K, f64> {
    let total: usize = counts.values().sum();
    counts
        .iter()
        .map(|(k, &c)| {
            (
                *k,
                if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                },
            )
        })
        .collect()
}

pub fn compute_stats(
    pairs: &[InstructionResponsePair],
    db: &SceneDatabase,
) -> Result<DatasetStats, StatsError> {
    let mut stats = DatasetStats::default();
    let mut per_task: BTreeMap<Task, usize> = BTreeMap::new();
    let mut views_per_task: BTreeMap<Task, BTreeMap<View, usize>> = BTreeMap::new();
    let mut frames: BTreeSet<&str> = BTreeSet::new();
    for p in pairs {
        *stats.pairs_per_subtask.entry(p.subtask).or_default() += 1;
        *per_task.entry(p.task).or_default() += 1;
        let task_views = views_per_task.entry(p.task).or_default();
        for &v in &p.views_used {
            *stats.responses_per_view.entry(v).or_default() += 1;
            *task_views.entry(v).or_default() += 1;
        }
        for f in &p.frame_ids {
            if db.frame(f).is_err() {
                return Err(StatsError::DanglingFrame {
                    pair_id: p.pair_id.clone(),
                    frame_id: f.clone(),
                });
            }
            frames.insert(f);
        }
    }
    stats.task_proportions = normalize(&per_task);
    stats.view_percent_per_task = views_per_task
        .iter()
        .map(|(t, c)| (*t, normalize(c)))
        .collect();

    let mut instances: BTreeSet<&str> = BTreeSet::new();
    for f in &frames {
        let list = db.frame_instances(f).expect("frame checked above");
        stats.instance_appearances += list.len();
        instances.extend(list.iter().map(|i| i.instance_id.as_str()));
    }
    stats.instances_total = instances.len();
    stats.keyframes = frames.len();
    stats.avg_instances_per_keyframe =
        average_per_keyframe(stats.instance_appearances, stats.keyframes);
    Ok(stats)
}

/// Task-by-view percentage table as CSV, one row per task.
pub fn view_percent_csv(stats: &DatasetStats) -> String {
    let mut out = String::from("task");
    for v in View::QUERYABLE {
        out.push(',');
        out.push_str(&v.label().replace(' ', "_"));
    }
    out.push('\n');
    for (task, views) in &stats.view_percent_per_task {
        out.push_str(task.name());
        for v in View::QUERYABLE {
            out.push_str(&format!(
                ",{:.2}",
                100.0 * views.get(&v).copied().unwrap_or(0.0)
            ));
        }
        out.push('\n');
    }
    out
}
