//! Per-position token log-probabilities produced by the generative head.

use crate::corpus::TokenId;

/// `rows × cols` matrix of natural-log probabilities; row `t` is the
/// distribution of the token at 0-based position `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTable {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ProbTable {
    /// Wraps row-major log-probabilities as-is.
    pub fn from_logprobs(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "table shape mismatch");
        Self { rows, cols, data }
    }

    /// Takes natural logs of row-major probabilities.
    pub fn from_probs(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged probability rows");
            data.extend(r.iter().map(|p| p.ln()));
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Row-wise log-softmax of raw logits.
    pub fn from_logits(rows: usize, cols: usize, mut logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), rows * cols, "table shape mismatch");
        for row in logits.chunks_mut(cols.max(1)) {
            log_softmax_in_place(row);
        }
        Self {
            rows,
            cols,
            data: logits,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    /// Log-probability of `token` at 0-based position `t`; `-inf` for a
    /// token outside the table.
    pub fn get(&self, t: usize, token: TokenId) -> f64 {
        let tok = token as usize;
        if tok >= self.cols {
            return f64::NEG_INFINITY;
        }
        self.data[t * self.cols + tok]
    }

    /// Largest `|logsumexp(row)|` over rows.
    pub fn max_normalization_error(&self) -> f64 {
        (0..self.rows)
            .map(|t| logsumexp(self.row(t)).abs())
            .fold(0.0, f64::max)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax_in_place(xs: &mut [f64]) {
    let lse = logsumexp(xs);
    for x in xs {
        *x -= lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_become_normalized_rows() {
        let t = ProbTable::from_logits(2, 3, vec![1.0, 2.0, 3.0, -50.0, 0.0, 700.0]);
        assert!(t.max_normalization_error() < 1e-12);
        assert!((t.get(0, 2) - (3.0 - logsumexp(&[1.0, 2.0, 3.0]))).abs() < 1e-12);
        assert_eq!(t.get(0, 9), f64::NEG_INFINITY);
    }

    #[test]
    fn probs_are_logged() {
        let t = ProbTable::from_probs(&[vec![0.5, 0.5]]);
        assert_eq!(t.get(0, 1), 0.5f64.ln());
    }
}
