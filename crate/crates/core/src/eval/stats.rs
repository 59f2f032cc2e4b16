//! Paired Student's t-test for comparing approaches across groups.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub p_two_sided: f64,
    /// Set when the differences have zero variance; the p-value is then a
    /// limit convention rather than a computed tail probability.
    pub degenerate_variance: bool,
}

/// Classic paired t-test on the element-wise differences, with `n - 1`
/// degrees of freedom and a two-sided p-value.
///
/// Conventions for degenerate inputs: identical vectors give `t = 0,
/// p = 1`; a constant non-zero difference gives `p = 0` (the limit as the
/// variance vanishes), flagged as degenerate.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult, EvalError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EvalError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);

    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult {
                t: 0.0,
                p_two_sided: 1.0,
                degenerate_variance: true,
            }
        } else {
            TTestResult {
                t: f64::INFINITY.copysign(mean),
                p_two_sided: 0.0,
                degenerate_variance: true,
            }
        });
    }

    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("n >= 2 gives valid dof");
    let p = 2.0 * dist.sf(t.abs());
    Ok(TTestResult {
        t,
        p_two_sided: p.clamp(0.0, 1.0),
        degenerate_variance: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_give_p_one() {
        let a = vec![0.5, 0.7, 0.9];
        let r = paired_ttest(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p_two_sided, 1.0);
        assert!(r.degenerate_variance);
    }

    #[test]
    fn constant_difference_is_the_zero_variance_limit() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_ttest(&a, &b).unwrap();
        assert!(r.t.is_infinite() && r.t > 0.0);
        assert_eq!(r.p_two_sided, 0.0);
        assert!(r.degenerate_variance);
    }

    #[test]
    fn frozen_textbook_case() {
        // Computed with an independent scipy run before this module was
        // written: t = 3.0, p = 0.05766888562243731.
        let a = vec![3.0, 5.0, 4.0, 6.0];
        let b = vec![2.0, 4.0, 1.0, 5.0];
        let r = paired_ttest(&a, &b).unwrap();
        assert!((r.t - 3.0).abs() < 1e-12, "t = {}", r.t);
        assert!((r.p_two_sided - 0.05766888562243731).abs() < 1e-9, "p = {}", r.p_two_sided);
        assert!(!r.degenerate_variance);
    }

    #[test]
    fn second_frozen_case() {
        // scipy: t = 3.1622776601683786, p = 0.03410942316740964.
        let a = vec![0.7, 0.3, 0.2, 0.6, 0.4];
        let b = vec![0.5, 0.1, 0.0, 0.2, 0.4];
        let r = paired_ttest(&a, &b).unwrap();
        assert!((r.t - 3.1622776601683786).abs() < 1e-9);
        assert!((r.p_two_sided - 0.03410942316740964).abs() < 1e-6);
    }

    #[test]
    fn length_mismatch_and_tiny_inputs_rejected() {
        assert!(paired_ttest(&[1.0, 2.0], &[1.0]).is_err());
        assert!(paired_ttest(&[1.0], &[1.0]).is_err());
        assert!(paired_ttest(&[], &[]).is_err());
    }

    #[test]
    fn symmetry_in_sign() {
        let a = vec![3.0, 5.0, 4.0, 6.0];
        let b = vec![2.0, 4.0, 1.0, 5.0];
        let fwd = paired_ttest(&a, &b).unwrap();
        let rev = paired_ttest(&b, &a).unwrap();
        assert!((fwd.t + rev.t).abs() < 1e-12);
        assert!((fwd.p_two_sided - rev.p_two_sided).abs() < 1e-12);
    }
}
