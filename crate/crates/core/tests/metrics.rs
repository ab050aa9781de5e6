mod common;

use common::metric_oracle::{brute_force_ap, reference_bleu};
use drivesql::build_database;
use drivesql::evaluation::{
    average_precision, bleu, evaluate, largest_remainder_sizes, mae, modified_precision,
    split_dataset, tokens, EvalOptions, Prediction, RankedDetection, ReferenceBox,
    DEFAULT_SPLIT_RATIOS,
};
use drivesql::generation::{generate_dataset, GenerationConfig};
use drivesql::scene_db::{BBox2D, View};
use drivesql::synth::{curated_scenarios, random_corpus, synth_corpus};
use drivesql::task_sql::MetricFamily;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut ChaCha8Rng) -> BBox2D {
    let x = rng.random_range(0.0..100.0);
    let y = rng.random_range(0.0..100.0);
    BBox2D::new(
        x,
        y,
        x + rng.random_range(5.0..40.0),
        y + rng.random_range(5.0..40.0),
    )
}

fn random_corpus_boxes(seed: u64) -> (Vec<RankedDetection>, Vec<ReferenceBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = [View::Front, View::Back, View::FrontLeft];
    let mut dets = Vec::new();
    let mut refs = Vec::new();
    for p in 0..rng.random_range(1..8) {
        let pair_id = format!("p{p}");
        for _ in 0..rng.random_range(0..5) {
            refs.push(ReferenceBox {
                pair_id: pair_id.clone(),
                view: views[rng.random_range(0..3)],
                bbox: random_box(&mut rng),
            });
        }
        let mut order = 0;
        for r in refs
            .iter()
            .filter(|r| r.pair_id == pair_id)
            .cloned()
            .collect::<Vec<_>>()
        {
            if rng.random_bool(0.7) {
                let jitter = rng.random_range(-6.0..6.0);
                let b = BBox2D::new(r.bbox.x1 + jitter, r.bbox.y1, r.bbox.x2 + jitter, r.bbox.y2);
                dets.push(RankedDetection {
                    pair_id: pair_id.clone(),
                    order,
                    view: r.view,
                    bbox: b,
                    score: rng.random_range(0.0..1.0),
                });
                order += 1;
            }
        }
        for _ in 0..rng.random_range(0..4) {
            // Coarse scores so that ties occur.
            let score = (rng.random_range(0..5) as f64) / 4.0;
            dets.push(RankedDetection {
                pair_id: pair_id.clone(),
                order,
                view: views[rng.random_range(0..3)],
                bbox: random_box(&mut rng),
                score,
            });
            order += 1;
        }
    }
    (dets, refs)
}

#[test]
fn map_matches_brute_force_enumerator() {
    let mut defined = 0;
    for seed in 0..50 {
        let (dets, refs) = random_corpus_boxes(seed);
        let fast = average_precision(&dets, &refs, 0.5);
        let slow = brute_force_ap(&dets, &refs, 0.5);
        match (fast, slow) {
            (Some(a), Some(b)) => {
                assert!((a - b).abs() < 1e-9, "seed {seed}: {a} vs {b}");
                defined += 1;
            }
            (None, None) => {}
            other => panic!("seed {seed}: {other:?}"),
        }
    }
    assert!(defined > 40);
}

#[test]
fn bleu_matches_reference_implementation() {
    let db = build_database(synth_corpus(&curated_scenarios()).unwrap(), 20.0).unwrap();
    let (pairs, _) = generate_dataset(&db, &GenerationConfig::default(), None).unwrap();
    let refs: Vec<&str> = pairs
        .iter()
        .filter(|p| p.subtask.metric() == MetricFamily::Bleu)
        .map(|p| p.response.as_str())
        .collect();
    assert!(refs.len() >= 10);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let cands: Vec<String> = refs
            .iter()
            .map(|r| {
                let mut words: Vec<&str> = r.split(' ').collect();
                for _ in 0..trial {
                    let i = rng.random_range(0..words.len());
                    if rng.random_bool(0.5) {
                        words.remove(i);
                    } else {
                        words.insert(i, "truck");
                    }
                    if words.is_empty() {
                        words.push("car");
                    }
                }
                words.join(" ")
            })
            .collect();
        let cands: Vec<&str> = cands.iter().map(String::as_str).collect();
        let a = bleu(&cands, &refs, false).unwrap();
        let b = reference_bleu(&cands, &refs);
        assert!((a - b).abs() < 1e-9, "trial {trial}: {a} vs {b}");
    }
    assert_eq!(bleu(&refs, &refs, false).unwrap(), 1.0);
}

#[test]
fn clipped_unigram_hand_case() {
    let cand = tokens("the the the the the the the");
    let refr = tokens("the cat is on the mat");
    assert_eq!(modified_precision(&cand, &refr, 1), (2, 7));
}

#[test]
fn mae_bounded_by_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let refs: Vec<Vec<f64>> = (0..200)
        .map(|_| vec![rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)])
        .collect();
    let texts: Vec<String> = refs
        .iter()
        .map(|r| {
            format!(
                "({:.2}, {:.2})",
                r[0] + rng.random_range(-0.05..0.05),
                r[1] + rng.random_range(-0.05..0.05)
            )
        })
        .collect();
    let out = mae(refs
        .iter()
        .map(Vec::as_slice)
        .zip(texts.iter().map(|t| Some(t.as_str()))));
    assert_eq!(out.failed, 0);
    assert!(out.mae.unwrap() <= 0.051);
}

#[test]
fn accuracy_drops_by_corrupted_fraction() {
    let mut scenes = curated_scenarios();
    scenes.extend(random_corpus("acc", 10, 2));
    let db = build_database(synth_corpus(&scenes).unwrap(), 20.0).unwrap();
    let (pairs, _) = generate_dataset(&db, &GenerationConfig::default(), None).unwrap();
    let mut preds: Vec<Prediction> = pairs.iter().map(Prediction::from_ground_truth).collect();
    let acc_idx: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            p.subtask.metric() == MetricFamily::Accuracy
                && p.subtask.task() == drivesql::task_sql::Task::Perception
        })
        .map(|(i, _)| i)
        .collect();
    let corrupt = acc_idx.len() / 4;
    for &i in &acc_idx[..corrupt] {
        preds[i].response_text = "I cannot tell.".into();
    }
    let report = evaluate(&pairs, &preds, &EvalOptions::default()).unwrap();
    // The group is a macro average, so compare per subtask.
    for (sub, score) in &report.per_subtask {
        if sub.metric() != MetricFamily::Accuracy
            || sub.task() != drivesql::task_sql::Task::Perception
        {
            continue;
        }
        let total = acc_idx
            .iter()
            .filter(|&&i| pairs[i].subtask == *sub)
            .count();
        let bad = acc_idx[..corrupt]
            .iter()
            .filter(|&&i| pairs[i].subtask == *sub)
            .count();
        assert_eq!(score.unwrap(), (total - bad) as f64 / total as f64, "{sub}");
    }
}

#[test]
fn split_of_850_scenes() {
    assert_eq!(
        largest_remainder_sizes(850, DEFAULT_SPLIT_RATIOS).unwrap(),
        [607, 122, 121]
    );
}

proptest! {
    #[test]
    fn adding_false_positive_never_raises_map(seed in 0u64..500, score in 0.0f64..1.0) {
        let (mut dets, refs) = random_corpus_boxes(seed);
        if let Some(before) = average_precision(&dets, &refs, 0.5) {
            dets.push(RankedDetection {
                pair_id: "p0".into(),
                order: 1000,
                view: View::Back,
                bbox: BBox2D::new(500.0, 500.0, 510.0, 510.0),
                score,
            });
            let after = average_precision(&dets, &refs, 0.5).unwrap();
            prop_assert!(after <= before + 1e-12);
        }
    }

    #[test]
    fn split_is_a_partition(n in 1usize..300, seed in any::<u64>(), a in 0.1f64..10.0, b in 0.0f64..5.0, c in 0.0f64..5.0) {
        let ids: Vec<String> = (0..n).map(|i| format!("scene-{i:04}")).collect();
        let split = split_dataset(&ids, [a, b, c], seed).unwrap();
        let sizes = largest_remainder_sizes(n, [a, b, c]).unwrap();
        prop_assert_eq!([split.train.len(), split.val.len(), split.test.len()], sizes);
        let mut all: Vec<String> = split.train.iter().chain(&split.val).chain(&split.test).cloned().collect();
        all.sort();
        prop_assert_eq!(all, ids.clone());
        let mut reversed = ids.clone();
        reversed.reverse();
        prop_assert_eq!(split_dataset(&reversed, [a, b, c], seed).unwrap(), split);
    }
}
