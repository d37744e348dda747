//! Mini-batch adaptive-moment optimization of the case-control likelihood:
//! seeded epoch shuffles, per-batch basis expansion, bias-corrected moment
//! updates, patience-based early stopping on a held-out split, and
//! resampling-based refits for uncertainty bands.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsplines::{make_spec, SplineError};
use crate::covariates::{assemble_stream, CovariateError, CovariateStream, EffectKind};
use crate::data_model::EventLog;
use crate::likelihood::{
    build_batch, centering_constant, effect_curve, grad_neg_log_pl, information_criteria,
    neg_log_pl, EffectConfig, EffectMode, LikelihoodError, ModelLayout, Transform,
};
use crate::sampler::sample_controls;
use crate::util::{fnv1a_hex, seeded_permutation};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("no events to fit")]
    NoData,
    #[error("non-finite gradient at optimizer step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("validation loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

/// Optimizer hyperparameters. `xi1`/`xi2` weight the decaying gradient
/// moments, `psi` is the learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub xi1: f64,
    pub xi2: f64,
    pub psi: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            xi1: 0.9,
            xi2: 0.999,
            psi: 1e-3,
            epsilon: 1e-8,
            batch_size: 1 << 14,
            max_epochs: 200,
            patience: 5,
            val_fraction: 0.05,
            seed: 0,
        }
    }
}

/// Decaying first/second gradient moments plus the update counter used for
/// bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_coefficients: usize) -> Self {
        AdamState {
            m1: vec![0.0; n_coefficients],
            m2: vec![0.0; n_coefficients],
            step: 0,
        }
    }
}

/// One bias-corrected moment update:
/// m1 <- xi1 m1 + (1-xi1) g, m2 <- xi2 m2 + (1-xi2) g^2,
/// theta <- theta - psi * m1-hat / (sqrt(m2-hat) + eps).
pub fn adam_step(
    state: &mut AdamState,
    theta: &mut [f64],
    grad: &[f64],
    cfg: &AdamConfig,
) -> Result<(), FitError> {
    debug_assert_eq!(theta.len(), grad.len());
    debug_assert_eq!(state.m1.len(), grad.len());
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(FitError::NonFiniteGradient {
            step: state.step + 1,
        });
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.xi1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.xi2.powi(state.step as i32);
    for j in 0..grad.len() {
        state.m1[j] = cfg.xi1 * state.m1[j] + (1.0 - cfg.xi1) * grad[j];
        state.m2[j] = cfg.xi2 * state.m2[j] + (1.0 - cfg.xi2) * grad[j] * grad[j];
        let m1_hat = state.m1[j] / bc1;
        let m2_hat = state.m2[j] / bc2;
        theta[j] -= cfg.psi * m1_hat / (m2_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Requested shape of one effect, before the covariate domain is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub kind: EffectKind,
    pub mode: ModeSpec,
    /// Defaults to the kind's standard transform when `None`.
    pub transform: Option<Transform>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModeSpec {
    Linear,
    Spline { degree: usize, df: usize },
}

impl EffectSpec {
    pub fn linear(kind: EffectKind) -> Self {
        EffectSpec {
            kind,
            mode: ModeSpec::Linear,
            transform: None,
        }
    }

    pub fn spline(kind: EffectKind, degree: usize, df: usize) -> Self {
        EffectSpec {
            kind,
            mode: ModeSpec::Spline { degree, df },
            transform: None,
        }
    }
}

/// Freezes each requested effect against the data: the spline domain is the
/// empirical min/max of the transformed covariate over cases and controls.
pub fn resolve_effects(
    stream: &CovariateStream,
    specs: &[EffectSpec],
) -> Result<Vec<EffectConfig>, FitError> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let k = stream
            .kind_pos(spec.kind)
            .ok_or(LikelihoodError::UnknownEffect(spec.kind))?;
        let transform = spec.transform.unwrap_or(Transform::default_for(spec.kind));
        let mode = match spec.mode {
            ModeSpec::Linear => EffectMode::Linear,
            ModeSpec::Spline { degree, df } => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for v in stream.case[k].iter().chain(&stream.control[k]) {
                    let t = transform.apply(*v);
                    lo = lo.min(t);
                    hi = hi.max(t);
                }
                EffectMode::Spline(make_spec(lo, hi, degree, df)?)
            }
        };
        out.push(EffectConfig {
            kind: spec.kind,
            mode,
            transform,
        });
    }
    Ok(out)
}

/// Deterministic batched evaluation of the negative log partial likelihood
/// over the given stream rows.
pub fn nll_over_rows(
    stream: &CovariateStream,
    layout: &ModelLayout,
    theta: &[f64],
    rows: &[usize],
    batch_size: usize,
) -> Result<f64, LikelihoodError> {
    let mut total = 0.0;
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = build_batch(stream, layout, chunk);
        total += neg_log_pl(theta, &batch)?;
    }
    Ok(total)
}

/// Per-epoch trace row: running training loss, held-out loss, elapsed time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub wall_seconds: f64,
}

/// One fitted effect: its frozen configuration, coefficient block, the
/// centering constant subtracted from reported curves, and the observed
/// transformed-covariate range (the natural grid for curve tables).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectFit {
    pub config: EffectConfig,
    pub coefficients: Vec<f64>,
    pub centering: f64,
    pub curve_domain: (f64, f64),
}

/// The fit artifact: everything needed to re-evaluate curves, baselines and
/// criteria without refitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub effects: Vec<EffectFit>,
    pub final_nll: f64,
    pub aic: f64,
    pub bic: f64,
    /// Events entering the likelihood (events with an eligible control).
    pub n_events: usize,
    /// Events dropped because their eligible risk set was empty.
    pub n_skipped_events: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Fingerprint of the event log this fit was computed from; empty when
    /// the fit was run on a bare covariate stream.
    pub data_fingerprint: String,
    /// Covariate policy note: value used for never-cited receivers.
    pub never_cited_policy: String,
    /// Per-epoch diagnostics; not part of the serialized artifact (wall
    /// times vary run to run), the CLI writes them to trace.csv instead.
    #[serde(skip)]
    pub trace: Vec<EpochTrace>,
}

pub const NEVER_CITED_POLICY: &str = "time_from_last_event = time since receiver publication";

impl ModelFit {
    pub fn layout(&self) -> ModelLayout {
        ModelLayout::new(self.effects.iter().map(|e| e.config.clone()).collect())
    }

    pub fn theta_flat(&self) -> Vec<f64> {
        self.effects
            .iter()
            .flat_map(|e| e.coefficients.iter().copied())
            .collect()
    }

    pub fn n_coefficients(&self) -> usize {
        self.effects.iter().map(|e| e.config.n_coefficients()).sum()
    }

    /// Centered effect curve on a grid of transformed-scale points.
    pub fn effect_curve(
        &self,
        kind: EffectKind,
        grid: &[f64],
    ) -> Result<Vec<f64>, LikelihoodError> {
        let e = self
            .effects
            .iter()
            .find(|e| e.config.kind == kind)
            .ok_or(LikelihoodError::UnknownEffect(kind))?;
        Ok(effect_curve(&e.config, &e.coefficients, grid, e.centering))
    }

    /// Centered linear predictor sum_k f_k for one raw covariate row.
    pub fn centered_predictor(&self, raw_values: &[f64]) -> f64 {
        self.effects
            .iter()
            .zip(raw_values)
            .map(|(e, &v)| {
                crate::likelihood::effect_value(
                    &e.config,
                    &e.coefficients,
                    e.config.transform.apply(v),
                ) - e.centering
            })
            .sum()
    }
}

/// Stream id for the train/validation split; epochs use 0, 1, 2, ...
const SPLIT_STREAM: u64 = u64::MAX;

/// Fits the model on an assembled covariate stream. Deterministic given
/// (stream, specs, config): epoch shuffles are seeded, reductions are
/// worker-count independent, and the returned coefficients are the snapshot
/// with the best validation loss.
pub fn fit(
    stream: &CovariateStream,
    specs: &[EffectSpec],
    cfg: &AdamConfig,
) -> Result<ModelFit, FitError> {
    let n = stream.n_rows();
    if n == 0 {
        return Err(FitError::NoData);
    }
    let configs = resolve_effects(stream, specs)?;
    for (k, c) in configs.iter().enumerate() {
        assert_eq!(
            stream.kinds.get(k),
            Some(&c.kind),
            "stream columns must be aligned with the effect list"
        );
    }
    let layout = ModelLayout::new(configs);
    let p = layout.n_coefficients();

    // Seeded split: the permutation's head is the held-out set.
    let perm = seeded_permutation(cfg.seed, SPLIT_STREAM, n);
    let n_val = ((n as f64) * cfg.val_fraction).floor() as usize;
    let (val_rows, train_rows) = perm.split_at(n_val);
    let has_val = !val_rows.is_empty() && !train_rows.is_empty();

    let mut theta = vec![0.0; p];
    let mut trace = Vec::new();

    if p > 0 && !train_rows.is_empty() {
        let mut state = AdamState::new(p);
        let mut best_theta = theta.clone();
        let mut best_val = f64::INFINITY;
        let mut stale_epochs = 0usize;
        let started = std::time::Instant::now();

        for epoch in 0..cfg.max_epochs {
            let order = seeded_permutation(cfg.seed, epoch as u64, train_rows.len());
            let mut train_nll = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let rows: Vec<usize> = chunk.iter().map(|&i| train_rows[i]).collect();
                let batch = build_batch(stream, &layout, &rows);
                train_nll += neg_log_pl(&theta, &batch)?;
                let grad = grad_neg_log_pl(&theta, &batch)?;
                adam_step(&mut state, &mut theta, &grad, cfg)?;
            }

            let val_nll = if has_val {
                nll_over_rows(stream, &layout, &theta, val_rows, cfg.batch_size)?
            } else {
                train_nll
            };
            trace.push(EpochTrace {
                epoch,
                train_nll,
                val_nll,
                wall_seconds: started.elapsed().as_secs_f64(),
            });
            if !val_nll.is_finite() {
                return Err(FitError::Diverged { epoch });
            }
            if has_val {
                if val_nll < best_val {
                    best_val = val_nll;
                    best_theta.copy_from_slice(&theta);
                    stale_epochs = 0;
                } else {
                    stale_epochs += 1;
                    if stale_epochs >= cfg.patience {
                        break;
                    }
                }
            }
        }
        if has_val {
            theta = best_theta;
        }
    }

    // Final report: a deterministic full-data pass, not running batch sums.
    let all_rows: Vec<usize> = (0..n).collect();
    let final_nll = nll_over_rows(stream, &layout, &theta, &all_rows, cfg.batch_size)?;
    let (aic, bic) = information_criteria(p, final_nll, n);

    let effects = layout
        .effects
        .iter()
        .enumerate()
        .map(|(k, config)| {
            let coefficients = theta[layout.block_range(k)].to_vec();
            let centering =
                centering_constant(config, &coefficients, &stream.case[k], &stream.control[k]);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in stream.case[k].iter().chain(&stream.control[k]) {
                let t = config.transform.apply(*v);
                lo = lo.min(t);
                hi = hi.max(t);
            }
            EffectFit {
                config: config.clone(),
                coefficients,
                centering,
                curve_domain: (lo, hi),
            }
        })
        .collect();

    Ok(ModelFit {
        effects,
        final_nll,
        aic,
        bic,
        n_events: n,
        n_skipped_events: 0,
        seed: cfg.seed,
        config_hash: fit_config_hash(specs, cfg, None),
        data_fingerprint: String::new(),
        never_cited_policy: NEVER_CITED_POLICY.to_string(),
        trace,
    })
}

/// Hash identifying a fit configuration (and optionally the data it ran on).
pub fn fit_config_hash(specs: &[EffectSpec], cfg: &AdamConfig, data_hash: Option<&str>) -> String {
    let specs_json = serde_json::to_string(specs).expect("effect specs serialize");
    let cfg_json = serde_json::to_string(cfg).expect("adam config serializes");
    fnv1a_hex(&[
        specs_json.as_bytes(),
        cfg_json.as_bytes(),
        data_hash.unwrap_or("").as_bytes(),
    ])
}

/// End-to-end fit from an event log: samples one control per event with the
/// config seed, assembles covariates, and fits.
pub fn fit_log(
    log: &EventLog,
    specs: &[EffectSpec],
    cfg: &AdamConfig,
) -> Result<ModelFit, FitError> {
    let controls = sample_controls(log, cfg.seed);
    if controls.assignments.is_empty() {
        return Err(FitError::NoData);
    }
    let kinds: Vec<EffectKind> = specs.iter().map(|s| s.kind).collect();
    let stream = assemble_stream(log, &controls.pairs(), &kinds)?;
    let mut fit_result = fit(&stream, specs, cfg)?;
    fit_result.n_skipped_events = controls.skipped.len();
    let fingerprint = crate::util::log_fingerprint(log);
    fit_result.config_hash = fit_config_hash(specs, cfg, Some(&fingerprint));
    fit_result.data_fingerprint = fingerprint;
    Ok(fit_result)
}

/// Re-runs control sampling and fitting with seeds seed+1 ... seed+replicates.
/// Failures are reported per replicate; the others continue.
pub fn resample_fits(
    log: &EventLog,
    specs: &[EffectSpec],
    cfg: &AdamConfig,
    replicates: usize,
) -> Vec<Result<ModelFit, FitError>> {
    assert!(replicates >= 1);
    (1..=replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut cfg_r = cfg.clone();
            cfg_r.seed = cfg.seed + r;
            fit_log(log, specs, &cfg_r)
        })
        .collect()
}

/// Pointwise mean and central percentile band of centered effect curves
/// across replicate fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bands at the given coverage (e.g. 0.95 for a 2.5%-97.5% band).
pub fn percentile_bands(
    fits: &[&ModelFit],
    kind: EffectKind,
    grid: &[f64],
    coverage: f64,
) -> Result<CurveBand, LikelihoodError> {
    assert!(!fits.is_empty());
    let curves: Vec<Vec<f64>> = fits
        .iter()
        .map(|f| f.effect_curve(kind, grid))
        .collect::<Result<_, _>>()?;
    let alpha = (1.0 - coverage) / 2.0;
    let mut mean = Vec::with_capacity(grid.len());
    let mut lo = Vec::with_capacity(grid.len());
    let mut hi = Vec::with_capacity(grid.len());
    for g in 0..grid.len() {
        let mut vals: Vec<f64> = curves.iter().map(|c| c[g]).collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
        lo.push(quantile(&vals, alpha));
        hi.push(quantile(&vals, 1.0 - alpha));
    }
    Ok(CurveBand {
        grid: grid.to_vec(),
        mean,
        lo,
        hi,
    })
}
