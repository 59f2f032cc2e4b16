//! Single-head scaled dot-product attention over row-major matrices.
//!
//! Used to pool retrieved-document embeddings against a group query vector:
//! `output = softmax(q·Kᵀ/√d_k)·V`. The softmax subtracts the row maximum
//! before exponentiating so large scores cannot overflow.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
}

/// Computes attention for a single query row.
///
/// `keys` and `values` are row-major `t x dim` matrices; both must have the
/// same number of rows and the same width as `query`. Returns the pooled
/// output vector and the attention weights (non-negative, summing to 1).
pub fn cross_attention(
    query: &[f64],
    keys: &[f64],
    values: &[f64],
    dim: usize,
    d_k: usize,
) -> Result<(Vec<f64>, Vec<f64>), AttentionError> {
    if dim == 0 || d_k == 0 {
        return Err(AttentionError::Shape("dim and d_k must be positive".into()));
    }
    if query.len() != dim {
        return Err(AttentionError::Shape(format!(
            "query has {} entries, expected {dim}",
            query.len()
        )));
    }
    if keys.len() % dim != 0 || values.len() % dim != 0 {
        return Err(AttentionError::Shape(format!(
            "matrix sizes {} and {} are not multiples of dim {dim}",
            keys.len(),
            values.len()
        )));
    }
    let t = keys.len() / dim;
    if t == 0 {
        return Err(AttentionError::Shape("attention needs at least one key row".into()));
    }
    if values.len() / dim != t {
        return Err(AttentionError::Shape(format!(
            "keys have {t} rows but values have {}",
            values.len() / dim
        )));
    }
    for (name, data) in [("query", query), ("keys", keys), ("values", values)] {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(AttentionError::NonFinite(name.into()));
        }
    }

    let scale = 1.0 / (d_k as f64).sqrt();
    let mut scores = Vec::with_capacity(t);
    for row in 0..t {
        let mut dot = 0.0;
        for i in 0..dim {
            dot += query[i] * keys[row * dim + i];
        }
        scores.push(dot * scale);
    }

    let weights = softmax_stable(&scores);

    let mut output = vec![0.0; dim];
    for row in 0..t {
        let w = weights[row];
        for i in 0..dim {
            output[i] += w * values[row * dim + i];
        }
    }
    Ok((output, weights))
}

/// Max-subtracted softmax; shift-invariant and overflow-safe.
pub fn softmax_stable(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Independent oracle: textbook attention with no stabilization tricks,
    /// computed in a different operation order.
    fn naive_attention(q: &[f64], k: &[f64], v: &[f64], dim: usize, d_k: usize) -> (Vec<f64>, Vec<f64>) {
        let t = k.len() / dim;
        let exps: Vec<f64> = (0..t)
            .map(|row| {
                let dot: f64 = (0..dim).map(|i| q[i] * k[row * dim + i]).sum();
                (dot / (d_k as f64).sqrt()).exp()
            })
            .collect();
        let sum: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let output: Vec<f64> = (0..dim)
            .map(|i| (0..t).map(|row| weights[row] * v[row * dim + i]).sum())
            .collect();
        (output, weights)
    }

    #[test]
    fn single_row_is_identity() {
        let q = vec![3.0, -1.0];
        let k = vec![0.5, 0.5];
        let v = vec![7.0, -2.0];
        let (out, w) = cross_attention(&q, &k, &v, 2, 2).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(out, vec![7.0, -2.0]);
    }

    #[test]
    fn equal_scores_average_the_rows() {
        // Both key rows are equidistant from the query.
        let q = vec![1.0, 1.0];
        let k = vec![1.0, 0.0, 0.0, 1.0];
        let v = vec![2.0, 0.0, 0.0, 4.0];
        let (out, w) = cross_attention(&q, &k, &v, 2, 2).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12);
        assert!((w[1] - 0.5).abs() < 1e-12);
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!((out[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_two_row_case() {
        // Q=[1,0], K=V=[[1,0],[0,1]], d_k=2: scores are [1/sqrt(2), 0].
        // Expected values computed with an independent numpy script before
        // this module was written.
        let q = vec![1.0, 0.0];
        let kv = vec![1.0, 0.0, 0.0, 1.0];
        let (out, w) = cross_attention(&q, &kv, &kv, 2, 2).unwrap();
        assert!((w[0] - 0.6697615493266569).abs() < 1e-12, "w0 = {}", w[0]);
        assert!((w[1] - 0.3302384506733431).abs() < 1e-12, "w1 = {}", w[1]);
        assert!((out[0] - 0.6697615493266569).abs() < 1e-12);
        assert!((out[1] - 0.3302384506733431).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_oracle_on_random_instances() {
        let mut rng = StdRng::seed_from_u64(0x5eed);
        for _ in 0..100 {
            let t = rng.gen_range(1..=8);
            let dim = rng.gen_range(1..=16);
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let k: Vec<f64> = (0..t * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..t * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();

            let (out, w) = cross_attention(&q, &k, &v, dim, dim).unwrap();
            let (out_ref, w_ref) = naive_attention(&q, &k, &v, dim, dim);

            for (a, b) in w.iter().zip(&w_ref) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in out.iter().zip(&out_ref) {
                assert!((a - b).abs() < 1e-9);
            }
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = StdRng::seed_from_u64(42);
        let (t, dim) = (6, 4);
        let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..t * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..t * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut kp = vec![0.0; t * dim];
        let mut vp = vec![0.0; t * dim];
        for (to, &from) in perm.iter().enumerate() {
            kp[to * dim..(to + 1) * dim].copy_from_slice(&k[from * dim..(from + 1) * dim]);
            vp[to * dim..(to + 1) * dim].copy_from_slice(&v[from * dim..(from + 1) * dim]);
        }

        let (out, w) = cross_attention(&q, &k, &v, dim, dim).unwrap();
        let (out_p, w_p) = cross_attention(&q, &kp, &vp, dim, dim).unwrap();

        for i in 0..dim {
            assert!((out[i] - out_p[i]).abs() <= 1e-9);
        }
        for (to, &from) in perm.iter().enumerate() {
            assert!((w_p[to] - w[from]).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let scores = vec![0.3, -1.2, 2.7, 0.0];
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.456).collect();
        let a = softmax_stable(&scores);
        let b = softmax_stable(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn convex_hull_property() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..20 {
            let t = rng.gen_range(2..=8);
            let dim = rng.gen_range(1..=8);
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let k: Vec<f64> = (0..t * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..t * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (out, _) = cross_attention(&q, &k, &v, dim, dim).unwrap();
            for i in 0..dim {
                let col: Vec<f64> = (0..t).map(|row| v[row * dim + i]).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let q = vec![1.0, 0.0];
        assert!(matches!(
            cross_attention(&q, &[1.0, 0.0, 0.5], &[1.0, 0.0, 0.5], 2, 2),
            Err(AttentionError::Shape(_))
        ));
        assert!(matches!(
            cross_attention(&q, &[], &[], 2, 2),
            Err(AttentionError::Shape(_))
        ));
        assert!(matches!(
            cross_attention(&q, &[f64::NAN, 0.0], &[1.0, 0.0], 2, 2),
            Err(AttentionError::NonFinite(_))
        ));
    }
}
