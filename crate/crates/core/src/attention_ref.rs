//! Forward-only reference of the cross-attention blocks: multi-view
//! Q-Former, instruction-aware BEV Q-Former and the residual injection.
//!
//! Single head, no learned projections apart from the BEV input adapter.

use rayon::prelude::*;

use crate::error::AttentionError;

/// Row-major `rows × cols` matrix of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AttentionError> {
        if data.len() != rows * cols {
            return Err(AttentionError::Shape(format!(
                "{rows}×{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AttentionError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, AttentionError> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn vstack(&self, other: &FeatureMatrix) -> Result<FeatureMatrix, AttentionError> {
        if self.cols != other.cols {
            return Err(AttentionError::Shape(format!(
                "cannot stack {} and {} columns",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(FeatureMatrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn select_rows(&self, order: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            rows: order.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn matmul(&self, other: &FeatureMatrix) -> Result<FeatureMatrix, AttentionError> {
        if self.cols != other.rows {
            return Err(AttentionError::Shape(format!(
                "cannot multiply {}×{} by {}×{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data: Vec<f64> = (0..self.rows)
            .into_par_iter()
            .flat_map_iter(|r| {
                let mut out = vec![0.0; other.cols];
                for (k, &a) in self.row(r).iter().enumerate() {
                    if a != 0.0 {
                        for (o, &b) in out.iter_mut().zip(other.row(k)) {
                            *o += a * b;
                        }
                    }
                }
                out
            })
            .collect();
        Ok(FeatureMatrix {
            rows: self.rows,
            cols: other.cols,
            data,
        })
    }

    pub fn add(&self, other: &FeatureMatrix) -> Result<FeatureMatrix, AttentionError> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(AttentionError::Shape(format!(
                "cannot add {}×{} and {}×{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(FeatureMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }
}

/// A `width × height` grid of `dim`-dimensional BEV cells, stored
/// cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    width: usize,
    height: usize,
    cells: FeatureMatrix,
}

impl BevGrid {
    pub fn new(
        width: usize,
        height: usize,
        dim: usize,
        data: Vec<f64>,
    ) -> Result<Self, AttentionError> {
        if width == 0 || height == 0 {
            return Err(AttentionError::Shape(format!(
                "BEV grid must be at least 1×1, got {width}×{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            cells: FeatureMatrix::new(width * height, dim, data)?,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.cells.cols
    }

    /// The grid as `(width·height) × dim`.
    pub fn flatten(&self) -> &FeatureMatrix {
        &self.cells
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of one row with the maximum subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_attention(
    queries: &FeatureMatrix,
    keys: &FeatureMatrix,
    values: &FeatureMatrix,
) -> Result<(), AttentionError> {
    if keys.rows == 0 {
        return Err(AttentionError::Shape(
            "attention needs at least one key".into(),
        ));
    }
    if queries.cols != keys.cols {
        return Err(AttentionError::Shape(format!(
            "query dim {} vs key dim {}",
            queries.cols, keys.cols
        )));
    }
    if keys.rows != values.rows {
        return Err(AttentionError::Shape(format!(
            "{} keys vs {} values",
            keys.rows, values.rows
        )));
    }
    Ok(())
}

/// `softmax(Q·Kᵀ/√d)` as an `n × m` matrix.
pub fn attention_weights(
    queries: &FeatureMatrix,
    keys: &FeatureMatrix,
) -> Result<FeatureMatrix, AttentionError> {
    check_attention(queries, keys, keys)?;
    let scale = 1.0 / (queries.cols as f64).sqrt();
    let data: Vec<f64> = (0..queries.rows)
        .into_par_iter()
        .flat_map_iter(|i| {
            let q = queries.row(i);
            let logits: Vec<f64> = (0..keys.rows)
                .map(|j| dot(q, keys.row(j)) * scale)
                .collect();
            softmax(&logits)
        })
        .collect();
    Ok(FeatureMatrix {
        rows: queries.rows,
        cols: keys.rows,
        data,
    })
}

/// `softmax(Q·Kᵀ/√d)·V`.
pub fn cross_attention(
    queries: &FeatureMatrix,
    keys: &FeatureMatrix,
    values: &FeatureMatrix,
) -> Result<FeatureMatrix, AttentionError> {
    check_attention(queries, keys, values)?;
    attention_weights(queries, keys)?.matmul(values)
}

/// Multi-view Q-Former: learnable queries attend over the concatenated
/// visual tokens of every view.
pub fn mv_qformer(
    mv_queries: &FeatureMatrix,
    mv_tokens: &FeatureMatrix,
) -> Result<FeatureMatrix, AttentionError> {
    cross_attention(mv_queries, mv_tokens, mv_tokens)
}

/// Output of the instruction-aware BEV Q-Former together with its attention
/// weights over the grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct InstBevOutput {
    pub tokens: FeatureMatrix,
    pub weights: FeatureMatrix,
}

/// Instruction-aware BEV Q-Former. The BEV cells are projected to the query
/// dimension and attended by the BEV queries stacked over the instance
/// tokens.
///
/// Keys and values both equal `B·P`, so the logits are computed as
/// `B·(P·q)` and the output as `(wᵀB)·P`; the projected grid is never
/// materialized.
pub fn inst_bev_qformer_full(
    bev_queries: &FeatureMatrix,
    inst_tokens: &FeatureMatrix,
    bev: &BevGrid,
    projection: &FeatureMatrix,
) -> Result<InstBevOutput, AttentionError> {
    let queries = bev_queries.vstack(inst_tokens)?;
    let cells = bev.flatten();
    if projection.rows != cells.cols || projection.cols != queries.cols {
        return Err(AttentionError::Shape(format!(
            "projection must be {}×{}, got {}×{}",
            cells.cols, queries.cols, projection.rows, projection.cols
        )));
    }
    let scale = 1.0 / (queries.cols as f64).sqrt();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..queries.rows)
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let u: Vec<f64> = (0..projection.rows)
                .map(|k| dot(projection.row(k), q))
                .collect();
            let logits: Vec<f64> = (0..cells.rows)
                .map(|j| dot(cells.row(j), &u) * scale)
                .collect();
            let w = softmax(&logits);
            let mut mixed = vec![0.0; cells.cols];
            for (j, &wj) in w.iter().enumerate() {
                for (m, &c) in mixed.iter_mut().zip(cells.row(j)) {
                    *m += wj * c;
                }
            }
            let mut out = vec![0.0; projection.cols];
            for (k, &mk) in mixed.iter().enumerate() {
                for (o, &p) in out.iter_mut().zip(projection.row(k)) {
                    *o += mk * p;
                }
            }
            (out, w)
        })
        .collect();
    let n = queries.rows;
    let mut tokens = Vec::with_capacity(n * projection.cols);
    let mut weights = Vec::with_capacity(n * cells.rows);
    for (o, w) in rows {
        tokens.extend(o);
        weights.extend(w);
    }
    Ok(InstBevOutput {
        tokens: FeatureMatrix {
            rows: n,
            cols: projection.cols,
            data: tokens,
        },
        weights: FeatureMatrix {
            rows: n,
            cols: cells.rows,
            data: weights,
        },
    })
}

pub fn inst_bev_qformer(
    bev_queries: &FeatureMatrix,
    inst_tokens: &FeatureMatrix,
    bev: &BevGrid,
    projection: &FeatureMatrix,
) -> Result<FeatureMatrix, AttentionError> {
    Ok(inst_bev_qformer_full(bev_queries, inst_tokens, bev, projection)?.tokens)
}

/// Residual injection of instruction-aware BEV tokens into the multi-view
/// tokens.
pub fn inject(
    mv_tokens: &FeatureMatrix,
    inst_bev_tokens: &FeatureMatrix,
) -> Result<FeatureMatrix, AttentionError> {
    mv_tokens.add(&cross_attention(
        mv_tokens,
        inst_bev_tokens,
        inst_bev_tokens,
    )?)
}
