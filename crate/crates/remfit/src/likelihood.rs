//! Case-control logit partial likelihood: the per-event difference design,
//! its negative log form and analytic gradient, centered effect curves, and
//! information criteria.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsplines::SplineSpec;
use crate::covariates::{CovariateStream, EffectKind};

/// Covariate scaling applied before any basis expansion. The count- and
/// duration-valued effects are fitted on a log(1 + x) scale, matching how
/// their curves are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    Log1p,
}

impl Transform {
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Log1p => v.ln_1p(),
        }
    }

    pub fn default_for(kind: EffectKind) -> Transform {
        match kind {
            EffectKind::ReceiverOutdegree
            | EffectKind::CumulativeCitations
            | EffectKind::TimeFromLastEvent => Transform::Log1p,
            _ => Transform::Identity,
        }
    }
}

/// How one effect enters the linear predictor: a single slope, or a B-spline
/// expansion with its own coefficient block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EffectMode {
    Linear,
    Spline(SplineSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectConfig {
    pub kind: EffectKind,
    pub mode: EffectMode,
    pub transform: Transform,
}

impl EffectConfig {
    pub fn n_coefficients(&self) -> usize {
        match &self.mode {
            EffectMode::Linear => 1,
            EffectMode::Spline(spec) => spec.df(),
        }
    }
}

/// Coefficient layout over a list of effects: contiguous per-effect blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub effects: Vec<EffectConfig>,
    offsets: Vec<usize>,
    total: usize,
}

impl ModelLayout {
    pub fn new(effects: Vec<EffectConfig>) -> Self {
        let mut offsets = Vec::with_capacity(effects.len());
        let mut total = 0;
        for e in &effects {
            offsets.push(total);
            total += e.n_coefficients();
        }
        ModelLayout {
            effects,
            offsets,
            total,
        }
    }

    /// Total coefficient count P.
    pub fn n_coefficients(&self) -> usize {
        self.total
    }

    pub fn block_range(&self, effect_idx: usize) -> std::ops::Range<usize> {
        let start = self.offsets[effect_idx];
        start..start + self.effects[effect_idx].n_coefficients()
    }

    pub fn effect_index(&self, kind: EffectKind) -> Option<usize> {
        self.effects.iter().position(|e| e.kind == kind)
    }
}

/// Dense B x P block of case-minus-control design rows for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseControlBatch {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major storage.
    pub delta: Vec<f64>,
}

impl CaseControlBatch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.delta[i * self.n_cols..(i + 1) * self.n_cols]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LikelihoodError {
    #[error("dimension mismatch: theta has {theta} entries, batch has {batch} columns")]
    DimensionMismatch { theta: usize, batch: usize },
    #[error("effect {0} is not part of this model")]
    UnknownEffect(EffectKind),
}

/// log(1 + e^z) without overflow on either tail.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic function, numerically stable on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fixed chunk width for parallel reductions. Partial results are combined
/// in chunk order, so sums do not depend on the worker count.
const REDUCE_CHUNK: usize = 4096;

/// Builds the delta block for the given stream rows: per effect, the basis
/// expansion (or raw value) of the case covariate minus the control's.
pub fn build_batch(
    stream: &CovariateStream,
    layout: &ModelLayout,
    rows: &[usize],
) -> CaseControlBatch {
    let n_cols = layout.n_coefficients();
    if n_cols == 0 {
        return CaseControlBatch {
            n_rows: rows.len(),
            n_cols: 0,
            delta: Vec::new(),
        };
    }
    let mut delta = vec![0.0; rows.len() * n_cols];

    delta
        .par_chunks_mut(REDUCE_CHUNK * n_cols)
        .zip(rows.par_chunks(REDUCE_CHUNK))
        .for_each(|(out_chunk, row_chunk)| {
            let mut case_basis = Vec::new();
            let mut ctrl_basis = Vec::new();
            let mut work = Vec::new();
            for (out_row, &row) in out_chunk.chunks_exact_mut(n_cols).zip(row_chunk) {
                for (k, effect) in layout.effects.iter().enumerate() {
                    let case = effect.transform.apply(stream.case[k][row]);
                    let ctrl = effect.transform.apply(stream.control[k][row]);
                    let block = &mut out_row[layout.block_range(k)];
                    match &effect.mode {
                        EffectMode::Linear => block[0] = case - ctrl,
                        EffectMode::Spline(spec) => {
                            case_basis.resize(spec.df(), 0.0);
                            ctrl_basis.resize(spec.df(), 0.0);
                            work.resize(spec.work_len(), 0.0);
                            spec.basis_into(case, &mut case_basis, &mut work);
                            spec.basis_into(ctrl, &mut ctrl_basis, &mut work);
                            for j in 0..spec.df() {
                                block[j] = case_basis[j] - ctrl_basis[j];
                            }
                        }
                    }
                }
            }
        });

    CaseControlBatch {
        n_rows: rows.len(),
        n_cols,
        delta,
    }
}

fn check_dims(theta: &[f64], batch: &CaseControlBatch) -> Result<(), LikelihoodError> {
    if theta.len() != batch.n_cols {
        Err(LikelihoodError::DimensionMismatch {
            theta: theta.len(),
            batch: batch.n_cols,
        })
    } else {
        Ok(())
    }
}

/// Negative log partial likelihood of the batch: sum of softplus(-eta_i)
/// with eta_i the case-minus-control linear predictor.
pub fn neg_log_pl(theta: &[f64], batch: &CaseControlBatch) -> Result<f64, LikelihoodError> {
    check_dims(theta, batch)?;
    let p = batch.n_cols;
    if p == 0 {
        // Null model: eta = 0 for every row.
        return Ok(batch.n_rows as f64 * std::f64::consts::LN_2);
    }
    let partials: Vec<f64> = batch
        .delta
        .par_chunks(REDUCE_CHUNK * p)
        .map(|chunk| {
            chunk
                .chunks_exact(p)
                .map(|row| {
                    let eta: f64 = row.iter().zip(theta).map(|(d, t)| d * t).sum();
                    softplus(-eta)
                })
                .sum::<f64>()
        })
        .collect();
    Ok(partials.iter().sum())
}

/// Analytic gradient of [`neg_log_pl`]: -sum_i sigmoid(-eta_i) * delta_i.
pub fn grad_neg_log_pl(
    theta: &[f64],
    batch: &CaseControlBatch,
) -> Result<Vec<f64>, LikelihoodError> {
    check_dims(theta, batch)?;
    let p = batch.n_cols;
    if p == 0 {
        return Ok(Vec::new());
    }
    let partials: Vec<Vec<f64>> = batch
        .delta
        .par_chunks(REDUCE_CHUNK * p)
        .map(|chunk| {
            let mut g = vec![0.0; p];
            for row in chunk.chunks_exact(p) {
                let eta: f64 = row.iter().zip(theta).map(|(d, t)| d * t).sum();
                let w = sigmoid(-eta);
                for (gj, dj) in g.iter_mut().zip(row) {
                    *gj -= w * dj;
                }
            }
            g
        })
        .collect();
    let mut grad = vec![0.0; p];
    for part in partials {
        for (gj, pj) in grad.iter_mut().zip(part) {
            *gj += pj;
        }
    }
    Ok(grad)
}

/// Uncentered effect value f_k(x) for one effect block; `x` is on the
/// transformed scale and is clamped to the spline domain.
pub fn effect_value(config: &EffectConfig, theta_block: &[f64], x: f64) -> f64 {
    match &config.mode {
        EffectMode::Linear => theta_block[0] * x,
        EffectMode::Spline(spec) => {
            let row = spec.basis_eval(x);
            row.iter().zip(theta_block).map(|(b, t)| b * t).sum()
        }
    }
}

/// Mean of f_k over the pooled case and control training values: the
/// centering constant stored in the fit artifact. The case-control design
/// identifies spline effects only up to an additive constant, so all
/// reported curves subtract this mean.
pub fn centering_constant(
    config: &EffectConfig,
    theta_block: &[f64],
    case_vals: &[f64],
    ctrl_vals: &[f64],
) -> f64 {
    let n = case_vals.len() + ctrl_vals.len();
    if n == 0 {
        return 0.0;
    }
    let sum: f64 = case_vals
        .iter()
        .chain(ctrl_vals)
        .map(|&v| effect_value(config, theta_block, config.transform.apply(v)))
        .sum();
    sum / n as f64
}

/// Centered effect curve on a grid of transformed-scale points.
pub fn effect_curve(
    config: &EffectConfig,
    theta_block: &[f64],
    grid: &[f64],
    centering: f64,
) -> Vec<f64> {
    grid.iter()
        .map(|&x| effect_value(config, theta_block, x) - centering)
        .collect()
}

/// AIC and BIC from the full-data negative log partial likelihood.
pub fn information_criteria(n_coefficients: usize, nll: f64, n_events: usize) -> (f64, f64) {
    let p = n_coefficients as f64;
    let aic = 2.0 * p + 2.0 * nll;
    let bic = p * (n_events as f64).ln() + 2.0 * nll;
    (aic, bic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsplines::make_spec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CaseControlBatch {
        CaseControlBatch {
            n_rows: rows,
            n_cols: cols,
            delta: (0..rows * cols)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        }
    }

    #[test]
    fn zero_theta_gives_n_log_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 37, 5);
        let nll = neg_log_pl(&[0.0; 5], &batch).unwrap();
        assert!((nll - 37.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_delta_row_contributes_log_two() {
        let batch = CaseControlBatch {
            n_rows: 1,
            n_cols: 3,
            delta: vec![0.0; 3],
        };
        for theta in [[0.0, 0.0, 0.0], [1.5, -2.0, 0.3]] {
            let nll = neg_log_pl(&theta, &batch).unwrap();
            assert!((nll - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_row_eta_three() {
        let batch = CaseControlBatch {
            n_rows: 1,
            n_cols: 1,
            delta: vec![1.0],
        };
        let nll = neg_log_pl(&[3.0], &batch).unwrap();
        assert!((nll - 0.048587351573742).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let batch = CaseControlBatch {
            n_rows: 1,
            n_cols: 2,
            delta: vec![0.0, 0.0],
        };
        assert_eq!(
            neg_log_pl(&[0.0], &batch),
            Err(LikelihoodError::DimensionMismatch { theta: 1, batch: 2 })
        );
        assert!(grad_neg_log_pl(&[0.0], &batch).is_err());
    }

    #[test]
    fn gradient_at_zero_is_minus_half_delta_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(&mut rng, 20, 4);
        let grad = grad_neg_log_pl(&[0.0; 4], &batch).unwrap();
        for (j, g) in grad.iter().enumerate() {
            let col_sum: f64 = (0..20).map(|i| batch.row(i)[j]).sum();
            assert!((g + 0.5 * col_sum).abs() < 1e-12);
        }
        let zero = CaseControlBatch {
            n_rows: 3,
            n_cols: 4,
            delta: vec![0.0; 12],
        };
        let g = grad_neg_log_pl(&[1.0, 2.0, 3.0, 4.0], &zero).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = rng.random_range(1..8);
            let rows = rng.random_range(1..64);
            let batch = random_batch(&mut rng, rows, p);
            let theta: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let grad = grad_neg_log_pl(&theta, &batch).unwrap();
            let h = 1e-5;
            let mut fd_norm: f64 = 0.0;
            let mut err_norm: f64 = 0.0;
            for j in 0..p {
                let mut tp = theta.clone();
                tp[j] += h;
                let mut tm = theta.clone();
                tm[j] -= h;
                let fd = (neg_log_pl(&tp, &batch).unwrap() - neg_log_pl(&tm, &batch).unwrap())
                    / (2.0 * h);
                fd_norm = fd_norm.max(fd.abs());
                err_norm = err_norm.max((grad[j] - fd).abs());
            }
            assert!(
                err_norm <= 1e-6 * fd_norm.max(1e-12),
                "{err_norm} vs {fd_norm}"
            );
        }
    }

    fn spline_stream_batch(rng: &mut ChaCha8Rng, rows: usize) -> (ModelLayout, CaseControlBatch) {
        let spec = make_spec(0.0, 1.0, 3, 6).unwrap();
        let layout = ModelLayout::new(vec![EffectConfig {
            kind: EffectKind::TimeLag,
            mode: EffectMode::Spline(spec),
            transform: Transform::Identity,
        }]);
        let stream = CovariateStream {
            kinds: vec![EffectKind::TimeLag],
            event_indices: (0..rows).collect(),
            case: vec![(0..rows).map(|_| rng.random_range(0.0..1.0)).collect()],
            control: vec![(0..rows).map(|_| rng.random_range(0.0..1.0)).collect()],
        };
        let all: Vec<usize> = (0..rows).collect();
        let batch = build_batch(&stream, &layout, &all);
        (layout, batch)
    }

    #[test]
    fn spline_delta_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, batch) = spline_stream_batch(&mut rng, 50);
        for i in 0..batch.n_rows {
            let sum: f64 = batch.row(i).iter().sum();
            assert!(sum.abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_shift_of_spline_block_is_a_gauge_freedom() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (layout, batch) = spline_stream_batch(&mut rng, 64);
        let p = layout.n_coefficients();
        let theta: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shifted: Vec<f64> = theta.iter().map(|t| t + 3.7).collect();
        let a = neg_log_pl(&theta, &batch).unwrap();
        let b = neg_log_pl(&shifted, &batch).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn constant_theta_block_centers_to_zero_curve() {
        let spec = make_spec(0.0, 1.0, 3, 6).unwrap();
        let config = EffectConfig {
            kind: EffectKind::TimeLag,
            mode: EffectMode::Spline(spec),
            transform: Transform::Identity,
        };
        let theta = vec![2.5; 6];
        let vals: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let c = centering_constant(&config, &theta, &vals, &vals);
        let grid: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let curve = effect_curve(&config, &theta, &grid, c);
        for v in curve {
            assert!(v.abs() < 1e-12);
        }
        // All-zero block: zero curve before and after centering.
        let zero = vec![0.0; 6];
        let c0 = centering_constant(&config, &zero, &vals, &vals);
        assert_eq!(c0, 0.0);
        assert!(effect_curve(&config, &zero, &grid, c0)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn information_criteria_formulas() {
        let n = std::f64::consts::E.powi(10).round() as usize;
        let (aic, bic) = information_criteria(24, 100.0, n);
        assert!((aic - 248.0).abs() < 1e-9);
        // ln(n) is not exactly 10 after rounding n to an integer.
        assert!((bic - (24.0 * (n as f64).ln() + 200.0)).abs() < 1e-9);
        let (aic0, bic0) = information_criteria(0, 42.0, 1000);
        assert_eq!(aic0, 84.0);
        assert_eq!(bic0, 84.0);
    }

    #[test]
    fn softplus_and_sigmoid_tails() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-800.0), 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn nll_is_convex_along_chords(
            seed in 0u64..1000,
            lambda in 0.0f64..=1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rng.random_range(1..6);
            let rows = rng.random_range(1..40);
            let batch = random_batch(&mut rng, rows, p);
            let a: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
            let fa = neg_log_pl(&a, &batch).unwrap();
            let fb = neg_log_pl(&b, &batch).unwrap();
            let fm = neg_log_pl(&mix, &batch).unwrap();
            prop_assert!(lambda * fa + (1.0 - lambda) * fb >= fm - 1e-10);
        }
    }
}
