//! Second implementations of the ranking and n-gram metrics.

use std::collections::BTreeMap;

use drivesql::evaluation::{RankedDetection, ReferenceBox};

fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let inter = w * h;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn corners(d: &drivesql::scene_db::BBox2D) -> [f64; 4] {
    [d.x1, d.y1, d.x2, d.y2]
}

/// Re-runs the greedy matching for every cutoff of the ranked list and
/// integrates precision over each distinct recall level.
pub fn brute_force_ap(dets: &[RankedDetection], refs: &[ReferenceBox], thr: f64) -> Option<f64> {
    if refs.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&dets[i], &dets[j]);
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.pair_id.cmp(&b.pair_id))
            .then(a.order.cmp(&b.order))
    });
    let mut points = Vec::new();
    for cutoff in 1..=order.len() {
        let mut used = vec![false; refs.len()];
        let mut tp = 0;
        for &di in &order[..cutoff] {
            let d = &dets[di];
            let mut best: Option<usize> = None;
            let mut best_iou = thr;
            for (ri, r) in refs.iter().enumerate() {
                if used[ri] || r.pair_id != d.pair_id || r.view != d.view {
                    continue;
                }
                let v = iou(corners(&d.bbox), corners(&r.bbox));
                if v >= best_iou
                    && best.is_none_or(|b| v > iou(corners(&d.bbox), corners(&refs[b].bbox)))
                {
                    best = Some(ri);
                    best_iou = v;
                }
            }
            if let Some(ri) = best {
                used[ri] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / refs.len() as f64, tp as f64 / cutoff as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points
            .iter()
            .filter(|q| q.0 >= r)
            .map(|q| q.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    Some(ap)
}

fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn grams(w: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for i in 0..w.len().saturating_sub(n - 1) {
        if i + n <= w.len() {
            *m.entry(w[i..i + n].join(" ")).or_insert(0) += 1;
        }
    }
    m
}

/// Unsmoothed corpus BLEU-4.
pub fn reference_bleu(cands: &[&str], refs: &[&str]) -> f64 {
    let mut num = [0f64; 4];
    let mut den = [0f64; 4];
    let (mut c, mut r) = (0f64, 0f64);
    for (cand, reference) in cands.iter().zip(refs) {
        let cw = words(cand);
        let rw = words(reference);
        c += cw.len() as f64;
        r += rw.len() as f64;
        for n in 1..=4 {
            let rg = grams(&rw, n);
            for (g, count) in grams(&cw, n) {
                num[n - 1] += count.min(*rg.get(&g).unwrap_or(&0)) as f64;
                den[n - 1] += count as f64;
            }
        }
    }
    if c == 0.0 || num.contains(&0.0) {
        return 0.0;
    }
    let product: f64 = (0..4).map(|i| num[i] / den[i]).product();
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * product.powf(0.25)
}
