//! Clamped uniform B-spline bases evaluated with the level-by-level
//! Cox-de Boor recursion, per point or batch-wise without ever materializing
//! a global design matrix.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SplineError {
    #[error("invalid domain [{0}, {1}]: need lo < hi and finite bounds")]
    InvalidDomain(f64, f64),
    #[error("df {df} too small for degree {degree}: need df >= degree + 1")]
    InsufficientDf { degree: usize, df: usize },
}

/// A clamped B-spline basis: `df` functions of degree `degree` over
/// `[lo, hi]` with evenly spaced interior knots. The first and last
/// `degree + 1` knots repeat the domain endpoints, which makes the basis a
/// partition of unity on the whole domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    degree: usize,
    df: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

/// Builds the clamped uniform knot vector for the given degree and degrees
/// of freedom: df + degree + 1 knots in total.
pub fn make_spec(lo: f64, hi: f64, degree: usize, df: usize) -> Result<SplineSpec, SplineError> {
    let ascending = lo < hi;
    if !ascending || !lo.is_finite() || !hi.is_finite() {
        return Err(SplineError::InvalidDomain(lo, hi));
    }
    if df < degree + 1 {
        return Err(SplineError::InsufficientDf { degree, df });
    }
    let n_interior = df - degree - 1;
    let segments = (n_interior + 1) as f64;
    let mut knots = Vec::with_capacity(df + degree + 1);
    knots.extend(std::iter::repeat_n(lo, degree + 1));
    for k in 1..=n_interior {
        knots.push(lo + (hi - lo) * k as f64 / segments);
    }
    knots.extend(std::iter::repeat_n(hi, degree + 1));
    Ok(SplineSpec {
        degree,
        df,
        lo,
        hi,
        knots,
    })
}

impl SplineSpec {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn df(&self) -> usize {
        self.df
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Scratch length needed by [`SplineSpec::basis_into`].
    pub fn work_len(&self) -> usize {
        self.knots.len() - 1
    }

    /// Evaluates all `df` basis functions at `x` into `out` (length `df`),
    /// using `work` (length [`SplineSpec::work_len`]) as the per-level
    /// buffer. Out-of-domain x is clamped: the fitted effect carries no
    /// information outside the observed support.
    pub fn basis_into(&self, x: f64, out: &mut [f64], work: &mut [f64]) {
        debug_assert_eq!(out.len(), self.df);
        debug_assert_eq!(work.len(), self.work_len());
        let x = x.clamp(self.lo, self.hi);
        let u = &self.knots;
        let n_spans = u.len() - 1;

        // Degree-0 indicators over half-open spans; the right domain edge
        // belongs to the last non-empty span.
        let mut last_real_span = 0;
        for j in 0..n_spans {
            work[j] = if u[j] <= x && x < u[j + 1] { 1.0 } else { 0.0 };
            if u[j] < u[j + 1] {
                last_real_span = j;
            }
        }
        if x == self.hi {
            work[last_real_span] = 1.0;
        }

        // Cox-de Boor levels; 0/0 from coincident knots contributes 0.
        for k in 1..=self.degree {
            for j in 0..n_spans - k {
                let left_den = u[j + k] - u[j];
                let left = if left_den > 0.0 {
                    (x - u[j]) / left_den * work[j]
                } else {
                    0.0
                };
                let right_den = u[j + k + 1] - u[j + 1];
                let right = if right_den > 0.0 {
                    (u[j + k + 1] - x) / right_den * work[j + 1]
                } else {
                    0.0
                };
                work[j] = left + right;
            }
        }
        out.copy_from_slice(&work[..self.df]);
    }

    /// Single-point evaluation; returns a fresh row of length `df`.
    pub fn basis_eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.df];
        let mut work = vec![0.0; self.work_len()];
        self.basis_into(x, &mut out, &mut work);
        out
    }

    /// Row-major `xs.len() x df` block; row i equals `basis_eval(xs[i])`.
    pub fn basis_batch(&self, xs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; xs.len() * self.df];
        self.basis_batch_into(xs, &mut out);
        out
    }

    /// Batch evaluation into a caller-provided buffer of length
    /// `xs.len() * df` (the optimizer's per-batch hot path).
    pub fn basis_batch_into(&self, xs: &[f64], out: &mut [f64]) {
        assert_eq!(out.len(), xs.len() * self.df);
        let mut work = vec![0.0; self.work_len()];
        for (row, &x) in out.chunks_exact_mut(self.df).zip(xs) {
            self.basis_into(x, row, &mut work);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn make_spec_knot_layouts() {
        let s = make_spec(0.0, 1.0, 0, 2).unwrap();
        assert_eq!(s.knots(), &[0.0, 0.5, 1.0]);

        let s = make_spec(0.0, 3.0, 3, 4).unwrap();
        assert_eq!(s.knots(), &[0.0, 0.0, 0.0, 0.0, 3.0, 3.0, 3.0, 3.0]);

        let s = make_spec(0.0, 1.0, 3, 12).unwrap();
        assert_eq!(s.knots().len(), 16);
        for k in 1..=8 {
            assert!((s.knots()[3 + k] - k as f64 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn make_spec_rejects_bad_input() {
        assert_eq!(
            make_spec(1.0, 1.0, 3, 12),
            Err(SplineError::InvalidDomain(1.0, 1.0))
        );
        assert!(make_spec(f64::NAN, 1.0, 3, 12).is_err());
        assert_eq!(
            make_spec(0.0, 1.0, 3, 3),
            Err(SplineError::InsufficientDf { degree: 3, df: 3 })
        );
    }

    #[test]
    fn degree_zero_indicator() {
        let s = make_spec(0.0, 2.0, 0, 2).unwrap();
        assert_eq!(s.knots(), &[0.0, 1.0, 2.0]);
        assert_eq!(s.basis_eval(0.5), vec![1.0, 0.0]);
        assert_eq!(s.basis_eval(1.5), vec![0.0, 1.0]);
        assert_eq!(s.basis_eval(2.0), vec![0.0, 1.0]);
    }

    #[test]
    fn degree_one_hand_evaluation() {
        // Knots (0, 0, 1, 2, 2): hat functions; at x = 1 only the middle one.
        let s = make_spec(0.0, 2.0, 1, 3).unwrap();
        assert_eq!(s.knots(), &[0.0, 0.0, 1.0, 2.0, 2.0]);
        let row = s.basis_eval(1.0);
        assert!((row[0] - 0.0).abs() < 1e-15);
        assert!((row[1] - 1.0).abs() < 1e-15);
        assert!((row[2] - 0.0).abs() < 1e-15);
        // Interior point by hand: x = 0.25 -> (0.75, 0.25, 0).
        let row = s.basis_eval(0.25);
        assert!((row[0] - 0.75).abs() < 1e-15);
        assert!((row[1] - 0.25).abs() < 1e-15);
        assert_eq!(row[2], 0.0);
    }

    #[test]
    fn partition_of_unity_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = make_spec(-3.0, 7.0, 3, 12).unwrap();
        for _ in 0..1000 {
            let x = rng.random_range(-3.0..7.0);
            let row = s.basis_eval(x);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "sum {sum} at x {x}");
        }
    }

    #[test]
    fn rows_sum_to_one_at_knots() {
        let s = make_spec(0.0, 1.0, 3, 9).unwrap();
        let block = s.basis_batch(s.knots());
        for row in block.chunks_exact(s.df()) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_matches_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = make_spec(0.0, 10.0, 3, 8).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..11.0)).collect();
        let block = s.basis_batch(&xs);
        for (i, &x) in xs.iter().enumerate() {
            let row = s.basis_eval(x);
            for j in 0..s.df() {
                let diff = (block[i * s.df() + j] - row[j]).abs();
                assert!(diff < 1e-14);
            }
        }
        let single = s.basis_batch(&xs[..1]);
        assert_eq!(single, s.basis_eval(xs[0]));
    }

    #[test]
    fn out_of_domain_is_clamped() {
        let s = make_spec(0.0, 1.0, 3, 6).unwrap();
        assert_eq!(s.basis_eval(-5.0), s.basis_eval(0.0));
        assert_eq!(s.basis_eval(9.0), s.basis_eval(1.0));
    }

    #[test]
    fn continuity_smoke() {
        // Lipschitz-style bound from the knot spacing, checked numerically.
        let s = make_spec(0.0, 1.0, 3, 10).unwrap();
        let spacing = 1.0 / 7.0; // interior segment width for df 10, degree 3
        let lip = 2.0 * s.degree() as f64 / spacing;
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let x = rng.random_range(0.0..(1.0 - h));
            let a = s.basis_eval(x);
            let b = s.basis_eval(x + h);
            for j in 0..s.df() {
                assert!((a[j] - b[j]).abs() <= lip * h + 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn basis_invariants_hold(
            degree in 0usize..=3,
            extra in 0usize..=16,
            lo in -100.0f64..100.0,
            width in 0.1f64..200.0,
            frac in proptest::collection::vec(0.0f64..=1.0, 1..40),
        ) {
            let df = degree + 1 + extra;
            prop_assume!(df <= 20);
            let hi = lo + width;
            let s = make_spec(lo, hi, degree, df).unwrap();
            for f in frac {
                let x = lo + f * width;
                let row = s.basis_eval(x);
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                let mut nonzero = 0;
                for &v in &row {
                    prop_assert!(v >= 0.0);
                    if v != 0.0 {
                        nonzero += 1;
                    }
                }
                prop_assert!(nonzero <= degree + 1);
            }
        }
    }
}
