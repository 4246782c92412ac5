use super::Matrix;
use crate::error::{contract, Result};

/// Per-entry visibility mask; `true` means the entry participates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![true; rows * cols],
        }
    }

    /// Causal mask for `rows` queries that are the trailing positions of `cols` keys.
    pub fn causal(rows: usize, cols: usize) -> Self {
        let offset = cols.saturating_sub(rows);
        Self::from_fn(rows, cols, |i, j| j <= i + offset)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Row-wise softmax with max subtraction. Masked entries come out exactly zero.
pub fn softmax_rows(m: &Matrix, mask: Option<&Mask>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.shape() != m.shape() {
            return Err(contract("softmax mask shape mismatch"));
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let mrow = mask.map(|mk| mk.row(r));
        softmax_row_into(m.row(r), mrow, out.row_mut(r))
            .map_err(|_| contract(format!("softmax row {r} is fully masked")))?;
    }
    Ok(out)
}

pub(crate) fn softmax_row_into(
    logits: &[f64],
    mask: Option<&[bool]>,
    out: &mut [f64],
) -> std::result::Result<(), ()> {
    let visible = |j: usize| mask.map_or(true, |mk| mk[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in logits.iter().enumerate() {
        if visible(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut sum = 0.0;
    for (j, (o, &v)) in out.iter_mut().zip(logits).enumerate() {
        if visible(j) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(())
}

/// Scaled dot-product attention. Returns `(weights × v, weights)`.
pub fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scale: f64,
    causal_mask: bool,
) -> Result<(Matrix, Matrix)> {
    let mask = causal_mask.then(|| Mask::causal(q.rows(), k.rows()));
    attention_impl(q, k, v, scale, mask.as_ref())
}

/// Attention with an arbitrary visibility mask of shape `q.rows × k.rows`.
pub fn attention_forward_masked(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scale: f64,
    mask: &Mask,
) -> Result<(Matrix, Matrix)> {
    attention_impl(q, k, v, scale, Some(mask))
}

fn attention_impl(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scale: f64,
    mask: Option<&Mask>,
) -> Result<(Matrix, Matrix)> {
    if k.rows() != v.rows() {
        return Err(contract("attention: key and value counts differ"));
    }
    let logits = q.matmul_transposed(k)?.scaled(scale);
    let weights = softmax_rows(&logits, mask)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}
