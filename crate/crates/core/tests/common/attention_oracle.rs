//! Naive loop implementations of the attention blocks.

use drivesql::attention_ref::{BevGrid, FeatureMatrix};

pub fn naive_attention(q: &FeatureMatrix, k: &FeatureMatrix, v: &FeatureMatrix) -> Vec<Vec<f64>> {
    let d = q.cols() as f64;
    let mut out = Vec::new();
    for i in 0..q.rows() {
        let mut logits = Vec::new();
        for j in 0..k.rows() {
            let mut s = 0.0;
            for c in 0..q.cols() {
                s += q.get(i, c) * k.get(j, c);
            }
            logits.push(s / d.sqrt());
        }
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut row = vec![0.0; v.cols()];
        for j in 0..k.rows() {
            for c in 0..v.cols() {
                row[c] += e[j] / z * v.get(j, c);
            }
        }
        out.push(row);
    }
    out
}

/// Projects every BEV cell first, then attends.
pub fn naive_inst_bev(
    bev_queries: &FeatureMatrix,
    inst: &FeatureMatrix,
    bev: &BevGrid,
    projection: &FeatureMatrix,
) -> Vec<Vec<f64>> {
    let cells = bev.flatten();
    let mut projected = Vec::new();
    for j in 0..cells.rows() {
        for c in 0..projection.cols() {
            let mut s = 0.0;
            for k in 0..cells.cols() {
                s += cells.get(j, k) * projection.get(k, c);
            }
            projected.push(s);
        }
    }
    let kv = FeatureMatrix::new(cells.rows(), projection.cols(), projected).unwrap();
    let q = bev_queries.vstack(inst).unwrap();
    naive_attention(&q, &kv, &kv)
}

pub fn max_abs_diff(m: &FeatureMatrix, rows: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, r) in rows.iter().enumerate() {
        for (c, v) in r.iter().enumerate() {
            worst = worst.max((m.get(i, c) - v).abs());
        }
    }
    worst
}
