//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::attention_oracle::{max_abs_diff, naive_attention};
use common::metric_oracle::{brute_force_ap, reference_bleu};
use common::oracle::check_database;
use drivesql::attention_ref::{
    attention_weights, cross_attention, inject, inst_bev_qformer_full, BevGrid, FeatureMatrix,
};
use drivesql::build_database;
use drivesql::evaluation::{
    average_precision, bleu, evaluate, modified_precision, split_dataset, tokens, EvalOptions,
    MetricReport, Prediction, RankedDetection, ReferenceBox, DEFAULT_SPLIT_RATIOS,
};
use drivesql::generation::{generate_dataset, GenerationConfig};
use drivesql::scene_db::{BBox2D, View, DEFAULT_IMPORTANT_RADIUS};
use drivesql::statistics::average_per_keyframe;
use drivesql::synth::{
    curated_scenarios, frame_id, intended_detections, random_corpus, synth_corpus, synth_scene,
    ScriptKind,
};
use drivesql::task_sql::{detect_risk, MetricFamily, RiskKind, RiskThresholds, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let scenes = random_corpus("acc", 200, 20_240_601);
    let db = build_database(
        synth_corpus(&scenes).map_err(|e| e.to_string())?,
        DEFAULT_IMPORTANT_RADIUS,
    )
    .map_err(|e| e.to_string())?;
    let checks = check_database(&db, &RiskThresholds::default())?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "200 scenes, {checks} comparisons, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn risk_scenarios() -> Outcome {
    let th = RiskThresholds::default();
    let scenes = curated_scenarios();
    let mut per_kind: BTreeMap<ScriptKind, usize> = BTreeMap::new();
    let (mut matched, mut total) = (0, 0);
    let mut mismatches = Vec::new();
    for scene in &scenes {
        for s in &scene.scripts {
            *per_kind.entry(s.kind).or_default() += 1;
        }
        let db = build_database(
            synth_scene(scene).map_err(|e| e.to_string())?,
            DEFAULT_IMPORTANT_RADIUS,
        )
        .map_err(|e| e.to_string())?;
        let id = &scene.scene_id;
        let w = Window::new(frame_id(id, 0), frame_id(id, 1), frame_id(id, 2));
        let expected = intended_detections(scene);
        for kind in RiskKind::ALL {
            let got: BTreeSet<String> = detect_risk(&db, kind, &w, &th)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|i| i.instance_id.clone())
                .collect();
            total += 1;
            if got == expected[&kind] {
                matched += 1;
            } else {
                mismatches.push(format!("{id}/{kind:?}"));
            }
        }
    }
    ensure(scenes.len() >= 12, || {
        format!("only {} scenarios", scenes.len())
    })?;
    let kinds = [
        ScriptKind::Overtaking,
        ScriptKind::OnComing,
        ScriptKind::Approaching,
        ScriptKind::Crossing,
        ScriptKind::Braking,
        ScriptKind::LaneChanging,
        ScriptKind::Benign,
    ];
    for k in kinds {
        ensure(per_kind.get(&k).copied().unwrap_or(0) >= 2, || {
            format!("fewer than two {k:?} scripts")
        })?;
    }
    ensure(mismatches.is_empty(), || {
        format!(
            "{matched}/{total} matched; wrong: {}",
            mismatches.join(", ")
        )
    })?;
    Ok(format!(
        "{} scenarios, {matched}/{total} (scene, kind) detections exact",
        scenes.len()
    ))
}

fn round_trip() -> Outcome {
    let mut scenes = curated_scenarios();
    scenes.extend(random_corpus("rt", 30, 5));
    let db = build_database(
        synth_corpus(&scenes).map_err(|e| e.to_string())?,
        DEFAULT_IMPORTANT_RADIUS,
    )
    .map_err(|e| e.to_string())?;
    let config = GenerationConfig {
        master_seed: 9,
        windows_per_scene: 2,
        ..Default::default()
    };
    let (pairs, _) = generate_dataset(&db, &config, None).map_err(|e| e.to_string())?;
    let preds: Vec<Prediction> = pairs.iter().map(Prediction::from_ground_truth).collect();
    let report = evaluate(&pairs, &preds, &EvalOptions::default()).map_err(|e| e.to_string())?;
    check_perfect(&report)?;
    Ok(format!("{} pairs, {}", pairs.len(), summarize(&report)))
}

fn summarize(r: &MetricReport) -> String {
    let g = &r.groups;
    let f = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    format!(
        "MAE {}/{} acc {}/{} MAP {} BLEU {}",
        f(g.perception_mae),
        f(g.prediction_mae),
        f(g.perception_acc),
        f(g.prediction_acc),
        f(g.risk_map),
        f(g.reasoning_bleu)
    )
}

fn check_perfect(r: &MetricReport) -> Result<(), String> {
    let g = &r.groups;
    let ok = g.perception_mae.is_some_and(|v| v <= 0.05)
        && g.prediction_mae.is_some_and(|v| v <= 0.05)
        && g.perception_acc == Some(1.0)
        && g.prediction_acc == Some(1.0)
        && g.risk_map == Some(1.0)
        && g.reasoning_bleu == Some(1.0);
    ensure(ok, || summarize(r))
}

fn arithmetic() -> Outcome {
    let avg = format!("{:.2}", average_per_keyframe(295_828, 11_850));
    ensure(avg == "24.96", || format!("average {avg}"))?;
    let ids: Vec<String> = (0..850).map(|i| format!("scene-{i:04}")).collect();
    let split = split_dataset(&ids, DEFAULT_SPLIT_RATIOS, 0).map_err(|e| e.to_string())?;
    let sizes = (split.train.len(), split.val.len(), split.test.len());
    ensure(sizes == (607, 122, 121), || {
        format!("split sizes {sizes:?}")
    })?;
    Ok(format!("avg {avg}, split {sizes:?}"))
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox2D {
    let x = rng.random_range(0.0..1500.0);
    let y = rng.random_range(0.0..800.0);
    BBox2D::new(
        x,
        y,
        x + rng.random_range(10.0..100.0),
        y + rng.random_range(10.0..100.0),
    )
}

fn detection_corpus(seed: u64) -> (Vec<RankedDetection>, Vec<ReferenceBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = [View::Front, View::FrontLeft, View::Back];
    let (mut dets, mut refs) = (Vec::new(), Vec::new());
    for p in 0..rng.random_range(2..10) {
        let pair_id = format!("pair{p}");
        let mut order = 0;
        for _ in 0..rng.random_range(1..5) {
            let r = ReferenceBox {
                pair_id: pair_id.clone(),
                view: views[rng.random_range(0..3)],
                bbox: random_box(&mut rng),
            };
            if rng.random_bool(0.75) {
                let dx = rng.random_range(-0.3..0.3) * (r.bbox.x2 - r.bbox.x1);
                let b = BBox2D::new(r.bbox.x1 + dx, r.bbox.y1, r.bbox.x2 + dx, r.bbox.y2);
                let score = (rng.random_range(0..8) as f64) / 8.0;
                dets.push(RankedDetection {
                    pair_id: pair_id.clone(),
                    order,
                    view: r.view,
                    bbox: b,
                    score,
                });
                order += 1;
            }
            refs.push(r);
        }
        for _ in 0..rng.random_range(0..4) {
            let score = (rng.random_range(0..8) as f64) / 8.0;
            let view = views[rng.random_range(0..3)];
            dets.push(RankedDetection {
                pair_id: pair_id.clone(),
                order,
                view,
                bbox: random_box(&mut rng),
                score,
            });
            order += 1;
        }
    }
    (dets, refs)
}

fn metric_oracles() -> Outcome {
    let mut worst_ap: f64 = 0.0;
    for seed in 0..50 {
        let (dets, refs) = detection_corpus(seed);
        let a = average_precision(&dets, &refs, 0.5).ok_or("AP undefined")?;
        let b = brute_force_ap(&dets, &refs, 0.5).ok_or("oracle AP undefined")?;
        worst_ap = worst_ap.max((a - b).abs());
    }
    ensure(worst_ap <= 1e-9, || format!("MAP deviates by {worst_ap:e}"))?;

    let mut scenes = curated_scenarios();
    scenes.extend(random_corpus("bleu", 10, 3));
    let db = build_database(
        synth_corpus(&scenes).map_err(|e| e.to_string())?,
        DEFAULT_IMPORTANT_RADIUS,
    )
    .map_err(|e| e.to_string())?;
    let (pairs, _) =
        generate_dataset(&db, &GenerationConfig::default(), None).map_err(|e| e.to_string())?;
    let refs: Vec<&str> = pairs
        .iter()
        .filter(|p| p.subtask.metric() == MetricFamily::Bleu)
        .map(|p| p.response.as_str())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_bleu: f64 = 0.0;
    for edits in 0..25 {
        let cands: Vec<String> = refs
            .iter()
            .map(|r| {
                let mut words: Vec<&str> = r.split(' ').collect();
                for _ in 0..edits {
                    let i = rng.random_range(0..words.len());
                    match rng.random_range(0..3) {
                        0 if words.len() > 1 => {
                            words.remove(i);
                        }
                        1 => words.insert(i, "truck"),
                        _ => {
                            let j = rng.random_range(0..words.len());
                            words.swap(i, j);
                        }
                    }
                }
                words.join(" ")
            })
            .collect();
        let cands: Vec<&str> = cands.iter().map(String::as_str).collect();
        let a = bleu(&cands, &refs, false).map_err(|e| e.to_string())?;
        worst_bleu = worst_bleu.max((a - reference_bleu(&cands, &refs)).abs());
    }
    ensure(worst_bleu <= 1e-9, || {
        format!("BLEU deviates by {worst_bleu:e}")
    })?;

    let clipped = modified_precision(
        &tokens("the the the the the the the"),
        &tokens("the cat is on the mat"),
        1,
    );
    ensure(clipped == (2, 7), || {
        format!("clipped unigram precision {clipped:?}")
    })?;
    Ok(format!("MAP max |Δ| {worst_ap:e} over 50 corpora, BLEU max |Δ| {worst_bleu:e} over 25 corpora, clipped 2/7"))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> FeatureMatrix {
    FeatureMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale)).unwrap()
}

/// Row sums, convexity and joint permutation of one attention instance.
/// Returns the worst row-sum deviation and permutation difference.
fn attention_properties(
    q: &FeatureMatrix,
    k: &FeatureMatrix,
    v: &FeatureMatrix,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), String> {
    let w = attention_weights(q, k).map_err(|e| e.to_string())?;
    let out = cross_attention(q, k, v).map_err(|e| e.to_string())?;
    let mut worst_sum: f64 = 0.0;
    for i in 0..w.rows() {
        worst_sum = worst_sum.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
        ensure(w.row(i).iter().all(|&x| x >= 0.0), || {
            "negative weight".into()
        })?;
    }
    for c in 0..v.cols() {
        let lo = (0..v.rows())
            .map(|j| v.get(j, c))
            .fold(f64::INFINITY, f64::min);
        let hi = (0..v.rows())
            .map(|j| v.get(j, c))
            .fold(f64::NEG_INFINITY, f64::max);
        for i in 0..out.rows() {
            let x = out.get(i, c);
            ensure(x >= lo - 1e-9 && x <= hi + 1e-9, || {
                format!("output {x} outside [{lo}, {hi}]")
            })?;
        }
    }
    let mut perm: Vec<usize> = (0..k.rows()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let permuted = cross_attention(q, &k.select_rows(&perm), &v.select_rows(&perm))
        .map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = (0..permuted.rows())
        .map(|i| permuted.row(i).to_vec())
        .collect();
    Ok((worst_sum, max_abs_diff(&out, &rows)))
}

fn attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut worst_sum, mut worst_perm, mut worst_naive): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let (n, m, d) = (
            rng.random_range(1..=64),
            rng.random_range(1..=64),
            rng.random_range(1..=64),
        );
        let dv = rng.random_range(1..=64);
        let q = random_matrix(&mut rng, n, d, 3.0);
        let k = random_matrix(&mut rng, m, d, 3.0);
        let v = random_matrix(&mut rng, m, dv, 5.0);
        let (s, p) = attention_properties(&q, &k, &v, &mut rng)?;
        worst_sum = worst_sum.max(s);
        worst_perm = worst_perm.max(p);
        let out = cross_attention(&q, &k, &v).map_err(|e| e.to_string())?;
        worst_naive = worst_naive.max(max_abs_diff(&out, &naive_attention(&q, &k, &v)));
        let mv = random_matrix(&mut rng, n, d, 3.0);
        ensure(
            inject(&mv, &FeatureMatrix::zeros(m, d)).map_err(|e| e.to_string())? == mv,
            || "zero-value injection changed the tokens".into(),
        )?;
    }
    ensure(worst_sum <= 1e-6, || {
        format!("row sum off by {worst_sum:e}")
    })?;
    ensure(worst_perm <= 1e-6, || {
        format!("permutation changed output by {worst_perm:e}")
    })?;
    ensure(worst_naive <= 1e-9, || {
        format!("naive mismatch {worst_naive:e}")
    })?;

    let (k_mv, k_bev, dim, side, channels) = (32, 32, 1408, 200, 64);
    let start = Instant::now();
    let mv_tokens = random_matrix(&mut rng, k_mv, dim, 0.05);
    let bev_q = random_matrix(&mut rng, k_bev, dim, 0.05);
    let cells: Vec<f64> = (0..side * side * channels)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let bev = BevGrid::new(side, side, channels, cells.clone()).map_err(|e| e.to_string())?;
    let proj = random_matrix(&mut rng, channels, dim, 0.05);
    let full = inst_bev_qformer_full(&bev_q, &mv_tokens, &bev, &proj).map_err(|e| e.to_string())?;
    ensure(
        full.tokens.rows() == k_bev + k_mv && full.tokens.cols() == dim,
        || "token shape".into(),
    )?;
    ensure(full.weights.cols() == side * side, || "weight shape".into())?;
    let big_sum = (0..full.weights.rows())
        .map(|i| (full.weights.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(big_sum <= 1e-6, || {
        format!("full-scale row sum off by {big_sum:e}")
    })?;
    // Reversing the cell order permutes keys and values together.
    let mut reversed = Vec::with_capacity(cells.len());
    for cell in cells.chunks(channels).rev() {
        reversed.extend_from_slice(cell);
    }
    let bev_rev = BevGrid::new(side, side, channels, reversed).map_err(|e| e.to_string())?;
    let rev =
        inst_bev_qformer_full(&bev_q, &mv_tokens, &bev_rev, &proj).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = (0..rev.tokens.rows())
        .map(|i| rev.tokens.row(i).to_vec())
        .collect();
    let big_perm = max_abs_diff(&full.tokens, &rows);
    ensure(big_perm <= 1e-6, || {
        format!("full-scale permutation changed output by {big_perm:e}")
    })?;
    let injected =
        inject(&mv_tokens, &FeatureMatrix::zeros(k_bev + k_mv, dim)).map_err(|e| e.to_string())?;
    ensure(injected == mv_tokens, || {
        "full-scale zero-value injection changed the tokens".into()
    })?;
    Ok(format!(
        "100 shapes: row sum {worst_sum:e}, perm {worst_perm:e}, naive {worst_naive:e}; full scale {k_mv}/{k_bev}/{dim}/{side}x{side} in {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn drivesql(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_drivesql"))
        .current_dir(dir)
        .args(args)
        .env_remove("DRIVESQL_CONFIG")
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    ensure(out.status.success(), || {
        format!(
            "`drivesql {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        )
    })
}

fn sha256_file(path: &Path) -> Result<String, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn bundled_scenes() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data/scenes.json")
        .display()
        .to_string()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    drivesql(
        d,
        &[
            "synth",
            "--curated",
            "--random",
            "40",
            "--seed",
            "11",
            "-o",
            "ann.json",
        ],
    )?;
    drivesql(d, &["build-db", "ann.json", "-o", "db.json"])?;
    drivesql(
        d,
        &[
            "generate",
            "db.json",
            "--seed",
            "42",
            "--windows",
            "3",
            "--jobs",
            "8",
            "-o",
            "a.jsonl",
        ],
    )?;
    drivesql(
        d,
        &[
            "generate",
            "db.json",
            "--seed",
            "42",
            "--windows",
            "3",
            "--jobs",
            "1",
            "-o",
            "b.jsonl",
        ],
    )?;
    let (a, b) = (
        sha256_file(&d.join("a.jsonl"))?,
        sha256_file(&d.join("b.jsonl"))?,
    );
    ensure(a == b, || format!("{a} != {b}"))?;
    let lines = std::fs::read_to_string(d.join("a.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .count();
    ensure(lines > 0, || "no pairs generated".into())?;
    Ok(format!("{lines} pairs, sha256 {}", &a[..16]))
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let start = Instant::now();
    let scripts = bundled_scenes();
    drivesql(d, &["synth", &scripts, "-o", "ann.json"])?;
    drivesql(d, &["build-db", "ann.json", "-o", "db.json"])?;
    drivesql(
        d,
        &[
            "generate",
            "db.json",
            "--seed",
            "1",
            "--windows",
            "2",
            "-o",
            "pairs.jsonl",
        ],
    )?;
    drivesql(
        d,
        &[
            "verify",
            "pairs.jsonl",
            "--db",
            "db.json",
            "-o",
            "kept.jsonl",
        ],
    )?;
    drivesql(
        d,
        &[
            "split",
            "kept.jsonl",
            "--ratios",
            "7.5,1.5,1.5",
            "--seed",
            "1",
            "-o",
            "split",
        ],
    )?;
    drivesql(d, &["stats", "kept.jsonl", "db.json", "-o", "stats.json"])?;
    drivesql(d, &["gt-predictions", "kept.jsonl", "-o", "preds.jsonl"])?;
    drivesql(
        d,
        &["eval", "kept.jsonl", "preds.jsonl", "-o", "report.json"],
    )?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || {
        format!("took {elapsed:?}")
    })?;
    let scenes: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&scripts).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let n_scenes = scenes.as_array().map_or(0, Vec::len);
    ensure(n_scenes == 20, || {
        format!("bundled corpus has {n_scenes} scenes")
    })?;
    let report: MetricReport = serde_json::from_str(
        &std::fs::read_to_string(d.join("report.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    check_perfect(&report)?;
    for f in [
        "split/train.jsonl",
        "split/val.jsonl",
        "split/test.jsonl",
        "stats.json",
        "pairs.jsonl.manifest.json",
    ] {
        ensure(d.join(f).exists(), || format!("missing {f}"))?;
    }
    Ok(format!(
        "20 scenes in {:.2}s, {}",
        elapsed.as_secs_f64(),
        summarize(&report)
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("algorithm-oracle equivalence", oracle_equivalence),
        ("risk-scenario faithfulness", risk_scenarios),
        ("round-trip metric identity", round_trip),
        ("arithmetic checks", arithmetic),
        ("metric oracles", metric_oracles),
        ("attention invariants", attention),
        ("determinism", determinism),
        ("end-to-end desk run", end_to_end),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
