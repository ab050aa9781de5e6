//! Metric suite (MAE, label accuracy, detection MAP, corpus BLEU) and the
//! scene-level dataset split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::generation::{status_labels, GroundTruth, InstructionResponsePair};
use crate::scene_db::{BBox2D, View};
use crate::task_sql::{MetricFamily, SubtaskKind, Task};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [7.5, 1.5, 1.5];

static NUMBER_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[-+]?\d+(?:\.\d+)?").unwrap());

/// Every signed decimal number in `text`, in order.
pub fn extract_numbers(text: &str) -> Vec<f64> {
    NUMBER_RE
        .find_iter(text)
        .filter_map(|m| m.as_str().parse().ok())
        .collect()
}

/// Lowercased alphanumeric runs.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub view: View,
    pub bbox: BBox2D,
    pub score: f64,
}

/// A model answer for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pair_id: String,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
}

impl Prediction {
    /// The prediction that reproduces a pair's own answer.
    pub fn from_ground_truth(pair: &InstructionResponsePair) -> Self {
        let detections = match &pair.ground_truth {
            GroundTruth::Detection(targets) => Some(
                targets
                    .iter()
                    .map(|t| Detection {
                        view: t.view,
                        bbox: t.bbox,
                        score: 1.0,
                    })
                    .collect(),
            ),
            _ => None,
        };
        Self {
            pair_id: pair.pair_id.clone(),
            response_text: pair.response.clone(),
            detections,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub perception_mae: Option<f64>,
    pub perception_acc: Option<f64>,
    pub prediction_mae: Option<f64>,
    pub prediction_acc: Option<f64>,
    pub risk_map: Option<f64>,
    pub reasoning_bleu: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` where a subtask has pairs but nothing scorable.
    pub per_subtask: BTreeMap<SubtaskKind, Option<f64>>,
    pub groups: GroupScores,
    /// Fraction of MAE pairs whose answer held too few numbers.
    pub extraction_failure_rate: f64,
    /// Groups that had pairs yet no defined score.
    pub undefined_groups: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub bleu_smoothing: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            bleu_smoothing: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeOutcome {
    pub mae: Option<f64>,
    pub scored: usize,
    pub failed: usize,
}

/// MAE over `(reference values, response)` items. Responses with fewer
/// numbers than references are counted as failures and left out.
pub fn mae<'a>(items: impl IntoIterator<Item = (&'a [f64], Option<&'a str>)>) -> MaeOutcome {
    let mut sum = 0.0;
    let mut scored = 0;
    let mut failed = 0;
    for (reference, response) in items {
        let got = response.map(extract_numbers).unwrap_or_default();
        if reference.is_empty() || got.len() < reference.len() {
            failed += 1;
            continue;
        }
        let err: f64 = reference
            .iter()
            .zip(&got)
            .map(|(r, p)| (r - p).abs())
            .sum::<f64>()
            / reference.len() as f64;
        sum += err;
        scored += 1;
    }
    MaeOutcome {
        mae: (scored > 0).then(|| sum / scored as f64),
        scored,
        failed,
    }
}

/// The single label `text` mentions, if exactly one does. Mentions nested
/// inside a longer mention are ignored.
pub fn matched_label<'a>(text: &str, labels: &'a [String]) -> Option<&'a str> {
    let words = tokens(text);
    let mut spans: Vec<(usize, usize, usize)> = Vec::new();
    for (li, label) in labels.iter().enumerate() {
        let lt = tokens(label);
        if lt.is_empty() || lt.len() > words.len() {
            continue;
        }
        for start in 0..=words.len() - lt.len() {
            if words[start..start + lt.len()] == lt[..] {
                spans.push((start, start + lt.len(), li));
            }
        }
    }
    let outer: BTreeSet<usize> = spans
        .iter()
        .filter(|&&(s, e, _)| {
            !spans
                .iter()
                .any(|&(s2, e2, _)| s2 <= s && e <= e2 && e2 - s2 > e - s)
        })
        .map(|&(_, _, li)| li)
        .collect();
    let distinct: BTreeSet<Vec<String>> = outer.iter().map(|&li| tokens(&labels[li])).collect();
    match (distinct.len(), outer.first()) {
        (1, Some(&li)) => Some(labels[li].as_str()),
        _ => None,
    }
}

pub fn label_correct(response: &str, reference: &str, labels: &[String]) -> bool {
    matched_label(response, labels).is_some_and(|m| tokens(m) == tokens(reference))
}

/// Candidate labels for an accuracy subtask: a fixed vocabulary plus every
/// reference label seen in `pairs`.
pub fn label_vocabulary(subtask: SubtaskKind, pairs: &[&InstructionResponsePair]) -> Vec<String> {
    let mut set: BTreeSet<String> = match subtask {
        SubtaskKind::SameRoad => ["yes", "no"].map(String::from).into(),
        SubtaskKind::Status => ["moving", "stopped", "parked"].map(String::from).into(),
        SubtaskKind::StatusEgo | SubtaskKind::StatusOthers => status_labels().into_iter().collect(),
        _ => BTreeSet::new(),
    };
    for p in pairs {
        if let GroundTruth::Label(l) = &p.ground_truth {
            set.insert(l.to_lowercase());
        }
    }
    set.into_iter().collect()
}

/// A scored box inside one pair's answer.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedDetection {
    pub pair_id: String,
    pub order: usize,
    pub view: View,
    pub bbox: BBox2D,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBox {
    pub pair_id: String,
    pub view: View,
    pub bbox: BBox2D,
}

/// All-point interpolated average precision; `None` without references.
pub fn average_precision(
    detections: &[RankedDetection],
    references: &[ReferenceBox],
    iou_threshold: f64,
) -> Option<f64> {
    if references.is_empty() {
        return None;
    }
    let mut ranked: Vec<&RankedDetection> = detections.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.pair_id.cmp(&b.pair_id))
            .then_with(|| a.order.cmp(&b.order))
    });
    let mut by_pair: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in references.iter().enumerate() {
        by_pair.entry(r.pair_id.as_str()).or_default().push(i);
    }
    let mut matched = vec![false; references.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (k, det) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &ri in by_pair
            .get(det.pair_id.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[])
        {
            let r = &references[ri];
            if matched[ri] || r.view != det.view {
                continue;
            }
            let iou = det.bbox.iou(&r.bbox);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((ri, iou));
            }
        }
        if let Some((ri, _)) = best {
            matched[ri] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / references.len() as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// `(clipped matches, candidate n-grams)` for one sentence pair.
pub fn modified_precision(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let clipped = cand
        .iter()
        .map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, candidate.len().saturating_sub(n - 1))
}

/// Corpus BLEU-4 with uniform weights and brevity penalty. Without
/// smoothing any zero n-gram precision gives 0; with it every precision
/// becomes `(m + 1) / (t + 1)`.
pub fn bleu(candidates: &[&str], references: &[&str], smoothing: bool) -> Result<f64, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::Undefined { metric: "BLEU" });
    }
    if candidates.len() != references.len() {
        return Err(EvalError::InvalidInput(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut c_len = 0;
    let mut r_len = 0;
    for (c, r) in candidates.iter().zip(references) {
        let ct = tokens(c);
        let rt = tokens(r);
        c_len += ct.len();
        r_len += rt.len();
        for n in 1..=4 {
            let (m, t) = modified_precision(&ct, &rt, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if smoothing {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        } else if matches[n] == 0 {
            return Ok(0.0);
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_sum.exp())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Sizes by floor plus largest remainder; remainder ties go to the earlier
/// part.
pub fn largest_remainder_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], EvalError> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(EvalError::InvalidInput(format!(
            "invalid split ratios {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    let quotas = ratios.map(|r| n as f64 * r / total);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(n - assigned) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Seeded scene-level split. Ids are sorted before shuffling, so the input
/// order does not matter.
pub fn split_dataset(
    scene_ids: &[String],
    ratios: [f64; 3],
    seed: u64,
) -> Result<Split, EvalError> {
    if scene_ids.is_empty() {
        return Err(EvalError::InvalidInput("no scene ids to split".into()));
    }
    let mut ids: Vec<String> = scene_ids.to_vec();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(EvalError::InvalidInput(format!(
            "duplicate scene id '{}'",
            w[0]
        )));
    }
    let sizes = largest_remainder_sizes(ids.len(), ratios)?;
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(sizes[0] + sizes[1]);
    let val = ids.split_off(sizes[0]);
    Ok(Split {
        train: ids,
        val,
        test,
    })
}

fn validate_prediction(pair: &InstructionResponsePair, pred: &Prediction) -> Result<(), EvalError> {
    let invalid = |message: String| EvalError::InvalidPrediction {
        pair_id: pred.pair_id.clone(),
        message,
    };
    let risk = pair.subtask.task() == Task::Risk;
    match (&pred.detections, risk) {
        (None, true) => return Err(invalid("detections are required for risk subtasks".into())),
        (Some(_), false) => {
            return Err(invalid(
                "detections are only allowed for risk subtasks".into(),
            ))
        }
        _ => {}
    }
    for d in pred.detections.iter().flatten() {
        if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
            return Err(invalid(format!(
                "detection score {} is outside [0, 1]",
                d.score
            )));
        }
        if !d.bbox.is_well_formed() {
            return Err(invalid("malformed detection box".into()));
        }
    }
    Ok(())
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores `predictions` against `pairs`. Pairs without a prediction get
/// the worst outcome of their metric.
pub fn evaluate(
    pairs: &[InstructionResponsePair],
    predictions: &[Prediction],
    options: &EvalOptions,
) -> Result<MetricReport, EvalError> {
    let mut index: HashMap<&str, &InstructionResponsePair> = HashMap::new();
    for p in pairs {
        if index.insert(p.pair_id.as_str(), p).is_some() {
            return Err(EvalError::InvalidInput(format!(
                "duplicate pair id '{}' in dataset",
                p.pair_id
            )));
        }
    }
    let mut preds: HashMap<&str, &Prediction> = HashMap::new();
    for pred in predictions {
        let pair = index
            .get(pred.pair_id.as_str())
            .ok_or_else(|| EvalError::UnknownPair(pred.pair_id.clone()))?;
        validate_prediction(pair, pred)?;
        if preds.insert(pred.pair_id.as_str(), pred).is_some() {
            return Err(EvalError::DuplicatePrediction(pred.pair_id.clone()));
        }
    }

    let mut by_subtask: BTreeMap<SubtaskKind, Vec<&InstructionResponsePair>> = BTreeMap::new();
    for p in pairs {
        by_subtask.entry(p.subtask).or_default().push(p);
    }
    let response = |p: &InstructionResponsePair| {
        preds
            .get(p.pair_id.as_str())
            .map(|x| x.response_text.as_str())
    };

    let mut report = MetricReport::default();
    let mut mae_pairs = 0;
    let mut mae_failed = 0;
    for (&subtask, group) in &by_subtask {
        let score = match subtask.metric() {
            MetricFamily::Mae => {
                let items = group.iter().map(|p| match &p.ground_truth {
                    GroundTruth::Numeric(v) => (v.as_slice(), response(p)),
                    _ => (&[][..], None),
                });
                let out = mae(items);
                mae_pairs += group.len();
                mae_failed += out.failed;
                out.mae
            }
            MetricFamily::Accuracy => {
                let labels = label_vocabulary(subtask, group);
                let correct = group
                    .iter()
                    .filter(|p| match (&p.ground_truth, response(p)) {
                        (GroundTruth::Label(l), Some(text)) => label_correct(text, l, &labels),
                        _ => false,
                    })
                    .count();
                Some(correct as f64 / group.len() as f64)
            }
            MetricFamily::Map => {
                let mut refs = Vec::new();
                let mut dets = Vec::new();
                for p in group {
                    if let GroundTruth::Detection(targets) = &p.ground_truth {
                        refs.extend(targets.iter().map(|t| ReferenceBox {
                            pair_id: p.pair_id.clone(),
                            view: t.view,
                            bbox: t.bbox,
                        }));
                    }
                    if let Some(pred) = preds.get(p.pair_id.as_str()) {
                        for (order, d) in pred.detections.iter().flatten().enumerate() {
                            dets.push(RankedDetection {
                                pair_id: p.pair_id.clone(),
                                order,
                                view: d.view,
                                bbox: d.bbox,
                                score: d.score,
                            });
                        }
                    }
                }
                average_precision(&dets, &refs, options.iou_threshold)
            }
            MetricFamily::Bleu => {
                let cands: Vec<&str> = group.iter().map(|p| response(p).unwrap_or("")).collect();
                let refs: Vec<&str> = group
                    .iter()
                    .map(|p| match &p.ground_truth {
                        GroundTruth::FreeText(t) => t.as_str(),
                        _ => "",
                    })
                    .collect();
                Some(bleu(&cands, &refs, options.bleu_smoothing)?)
            }
        };
        report.per_subtask.insert(subtask, score);
    }
    report.extraction_failure_rate = if mae_pairs == 0 {
        0.0
    } else {
        mae_failed as f64 / mae_pairs as f64
    };

    let group_of = |task: Task, family: MetricFamily| -> (bool, Option<f64>) {
        let members: Vec<Option<f64>> = report
            .per_subtask
            .iter()
            .filter(|(k, _)| k.task() == task && k.metric() == family)
            .map(|(_, v)| *v)
            .collect();
        (!members.is_empty(), mean(members.into_iter().flatten()))
    };
    let groups = [
        (
            "perception_mae",
            group_of(Task::Perception, MetricFamily::Mae),
        ),
        (
            "perception_acc",
            group_of(Task::Perception, MetricFamily::Accuracy),
        ),
        (
            "prediction_mae",
            group_of(Task::Prediction, MetricFamily::Mae),
        ),
        (
            "prediction_acc",
            group_of(Task::Prediction, MetricFamily::Accuracy),
        ),
        ("risk_map", group_of(Task::Risk, MetricFamily::Map)),
        (
            "reasoning_bleu",
            group_of(Task::PlanningWithReasoning, MetricFamily::Bleu),
        ),
    ];
    for (name, (present, score)) in groups {
        if present && score.is_none() {
            report.undefined_groups.push(name.to_string());
        }
        let slot = match name {
            "perception_mae" => &mut report.groups.perception_mae,
            "perception_acc" => &mut report.groups.perception_acc,
            "prediction_mae" => &mut report.groups.prediction_mae,
            "prediction_acc" => &mut report.groups.prediction_acc,
            "risk_map" => &mut report.groups.risk_map,
            _ => &mut report.groups.reasoning_bleu,
        };
        *slot = score;
    }
    Ok(report)
}
