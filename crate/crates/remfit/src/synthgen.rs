//! Synthetic citation networks with known additive intensity (the
//! verification oracle for the whole pipeline) and an exact full-batch
//! Newton fitter for small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariates::EffectKind;
use crate::data_model::{Event, EventLog, NodeAttributes, NodeId, Timestamp};
use crate::likelihood::{
    grad_neg_log_pl, neg_log_pl, sigmoid, CaseControlBatch, EffectMode, ModelLayout,
};

/// Ground-truth shape of one effect. Curves take the covariate on the same
/// transformed scale the model fits on (log(1+x) for count/duration effects).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CurveSpec {
    Zero,
    Linear {
        slope: f64,
    },
    Sine {
        amplitude: f64,
        period: f64,
    },
    /// Piecewise-linear interpolation through (x, f(x)) points; clamped
    /// outside the table range.
    PiecewiseTable(Vec<(f64, f64)>),
}

impl CurveSpec {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            CurveSpec::Zero => 0.0,
            CurveSpec::Linear { slope } => slope * x,
            CurveSpec::Sine { amplitude, period } => {
                amplitude * (2.0 * std::f64::consts::PI * x / period).sin()
            }
            CurveSpec::PiecewiseTable(points) => {
                assert!(!points.is_empty());
                if x <= points[0].0 {
                    return points[0].1;
                }
                if x >= points[points.len() - 1].0 {
                    return points[points.len() - 1].1;
                }
                let i = points.partition_point(|p| p.0 <= x);
                let (x0, y0) = points[i - 1];
                let (x1, y1) = points[i];
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CitesDistribution {
    Fixed(u32),
    Poisson(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patents: usize,
    /// Poisson rate of new patents per day.
    pub arrivals_per_day: f64,
    pub cites_per_patent: CitesDistribution,
    pub true_effects: Vec<(EffectKind, CurveSpec)>,
    /// When set, per-day citation counts are Poisson(rate x risk-set size)
    /// instead of per-patent draws; this is the absolute-rate mode used for
    /// baseline recovery checks.
    pub daily_citation_rate: Option<f64>,
    pub embedding_dim: usize,
    pub ipc_alphabet: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patents: 1000,
            arrivals_per_day: 5.0,
            cites_per_patent: CitesDistribution::Poisson(3.0),
            true_effects: Vec::new(),
            daily_citation_rate: None,
            embedding_dim: 4,
            ipc_alphabet: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub effects: Vec<(EffectKind, CurveSpec)>,
}

impl GroundTruth {
    pub fn curve(&self, kind: EffectKind) -> Option<&CurveSpec> {
        self.effects
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, c)| c)
    }

    /// f_k at a transformed-scale covariate value; zero for effects without
    /// a configured curve.
    pub fn eval(&self, kind: EffectKind, x: f64) -> f64 {
        self.curve(kind).map_or(0.0, |c| c.eval(x))
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub log: EventLog,
    pub truth: GroundTruth,
    /// Citations dropped because the early risk set was smaller than the
    /// drawn citation count.
    pub truncated_citations: u64,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config asks for {0} patents but none can cite: increase n_patents")]
    InfeasibleConfig(usize),
}

/// Small-mean Poisson sampler (Knuth); large means are split recursively.
pub(crate) fn poisson(rng: &mut ChaCha8Rng, mu: f64) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    if mu > 30.0 {
        return poisson(rng, mu / 2.0) + poisson(rng, mu / 2.0);
    }
    let limit = (-mu).exp();
    let mut k = 0u64;
    let mut p = 1.0f64;
    loop {
        p *= rng.random::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

fn random_unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        // Box-Muller pairs, then normalize.
        let mut v = Vec::with_capacity(dim);
        while v.len() < dim {
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let a = 2.0 * std::f64::consts::PI * u2;
            v.push(r * a.cos());
            if v.len() < dim {
                v.push(r * a.sin());
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for x in &mut v {
                *x /= norm;
            }
            return v;
        }
    }
}

fn random_ipc_set(rng: &mut ChaCha8Rng, alphabet: usize) -> Vec<String> {
    let m = rng.random_range(1..=3usize.min(alphabet));
    let mut set = std::collections::BTreeSet::new();
    while set.len() < m {
        set.insert(format!("C{:02}", rng.random_range(0..alphabet)));
    }
    set.into_iter().collect()
}

/// Sequential softmax draws without replacement over log-weights, via the
/// Gumbel top-k equivalence; works entirely in log space so extreme effect
/// values cannot overflow.
pub(crate) fn choose_receivers(rng: &mut ChaCha8Rng, log_weights: &[f64], k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = log_weights
        .iter()
        .enumerate()
        .map(|(i, &lw)| {
            let u: f64 = rng.random::<f64>().max(1e-300);
            let gumbel = -(-u.ln()).ln();
            (lw + gumbel, i)
        })
        .collect();
    let k = k.min(keyed.len());
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
    keyed.truncate(k);
    keyed.into_iter().map(|(_, i)| i).collect()
}

struct GenState {
    pub_days: Vec<i64>,
    outdegree: Vec<u32>,
    embeddings: Vec<Vec<f64>>,
    ipc: Vec<Vec<String>>,
    indegree: Vec<u32>,
    last_cited: Vec<Option<i64>>,
}

impl GenState {
    /// Log-weight of receiver r for sender s at `day`, i.e. sum of the true
    /// effect curves at the transformed covariates.
    fn log_weight(&self, truth: &[(EffectKind, CurveSpec)], s: usize, r: usize, day: i64) -> f64 {
        let mut total = 0.0;
        for (kind, curve) in truth {
            let x = match kind {
                EffectKind::ReceiverPubYear => {
                    Timestamp::from_days(self.pub_days[r]).year_fraction()
                }
                EffectKind::TimeLag => (day - self.pub_days[r]) as f64,
                EffectKind::ReceiverOutdegree => (self.outdegree[r] as f64).ln_1p(),
                EffectKind::TextualSimilarity => {
                    let a = &self.embeddings[s];
                    let b = &self.embeddings[r];
                    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
                }
                EffectKind::IpcJaccard => {
                    let a = &self.ipc[s];
                    let b = &self.ipc[r];
                    let inter = a.iter().filter(|c| b.binary_search(c).is_ok()).count();
                    inter as f64 / (a.len() + b.len() - inter) as f64
                }
                EffectKind::CumulativeCitations => (self.indegree[r] as f64).ln_1p(),
                EffectKind::TimeFromLastEvent => {
                    let gap = match self.last_cited[r] {
                        Some(t) => day - t,
                        None => day - self.pub_days[r],
                    };
                    (gap as f64).ln_1p()
                }
            };
            total += curve.eval(x);
        }
        total
    }
}

/// Grows a citation network day by day. New patents draw their receivers
/// from the risk set with probabilities proportional to exp(sum of true
/// effects); same-day events never see each other in the history state.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    if config.n_patents < 2 {
        return Err(SynthError::InfeasibleConfig(config.n_patents));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let truth = GroundTruth {
        effects: config.true_effects.clone(),
    };

    let mut state = GenState {
        pub_days: Vec::with_capacity(config.n_patents),
        outdegree: Vec::with_capacity(config.n_patents),
        embeddings: Vec::with_capacity(config.n_patents),
        ipc: Vec::with_capacity(config.n_patents),
        indegree: Vec::with_capacity(config.n_patents),
        last_cited: Vec::with_capacity(config.n_patents),
    };
    let mut events: Vec<Event> = Vec::new();
    let mut truncated = 0u64;
    let mut day = 0i64;

    while state.pub_days.len() < config.n_patents {
        let n_at_risk = state.pub_days.len();
        let mut arrivals = poisson(&mut rng, config.arrivals_per_day) as usize;
        arrivals = arrivals.min(config.n_patents - n_at_risk);
        // Absolute-rate mode needs at least one same-day sender to host the
        // day's citations.
        let day_citations = config
            .daily_citation_rate
            .map(|rate| poisson(&mut rng, rate * n_at_risk as f64) as usize);
        if day_citations.unwrap_or(0) > 0 && arrivals == 0 && n_at_risk < config.n_patents {
            arrivals = 1;
        }

        let first_new = state.pub_days.len();
        for _ in 0..arrivals {
            state.pub_days.push(day);
            state.outdegree.push(0);
            state
                .embeddings
                .push(random_unit_vector(&mut rng, config.embedding_dim));
            state
                .ipc
                .push(random_ipc_set(&mut rng, config.ipc_alphabet));
            state.indegree.push(0);
            state.last_cited.push(None);
        }
        let new_ids: Vec<usize> = (first_new..state.pub_days.len()).collect();

        // Citation counts per new sender.
        let wanted: Vec<usize> = match day_citations {
            Some(total) => {
                let mut per = vec![0usize; new_ids.len()];
                for c in 0..total {
                    per[c % new_ids.len().max(1)] += 1;
                }
                per
            }
            None => new_ids
                .iter()
                .map(|_| match config.cites_per_patent {
                    CitesDistribution::Fixed(k) => k as usize,
                    CitesDistribution::Poisson(mu) => poisson(&mut rng, mu) as usize,
                })
                .collect(),
        };

        let mut day_events: Vec<Event> = Vec::new();
        for (slot, &s) in new_ids.iter().enumerate() {
            let want = wanted[slot];
            if want == 0 {
                continue;
            }
            let take = want.min(n_at_risk);
            truncated += (want - take) as u64;
            if take == 0 {
                continue;
            }
            let log_weights: Vec<f64> = (0..n_at_risk)
                .map(|r| state.log_weight(&config.true_effects, s, r, day))
                .collect();
            let chosen = choose_receivers(&mut rng, &log_weights, take);
            state.outdegree[s] = chosen.len() as u32;
            for r in chosen {
                day_events.push(Event {
                    sender: NodeId(s as u32),
                    receiver: NodeId(r as u32),
                    time: Timestamp::from_days(day),
                });
            }
        }
        // Apply history updates only after the whole day: covariates are
        // measured strictly before the event time.
        for ev in &day_events {
            state.indegree[ev.receiver.index()] += 1;
            state.last_cited[ev.receiver.index()] = Some(day);
        }
        events.extend(day_events);
        day += 1;
    }

    let nodes: Vec<NodeAttributes> = (0..state.pub_days.len())
        .map(|i| {
            NodeAttributes::new(
                format!("p{i}"),
                Timestamp::from_days(state.pub_days[i]),
                state.ipc[i].clone(),
                Some(state.embeddings[i].clone()),
                state.outdegree[i],
            )
        })
        .collect();
    let log = EventLog::new(nodes, events).expect("generated log is structurally sound");
    Ok(SynthOutput {
        log,
        truth,
        truncated_citations: truncated,
    })
}

pub fn truth_curves_to_csv(truth: &GroundTruth, grids: &[(EffectKind, Vec<f64>)]) -> String {
    let mut s = String::from("effect,x,f_x\n");
    for (kind, grid) in grids {
        for &x in grid {
            s.push_str(&format!("{kind},{x},{}\n", truth.eval(*kind, x)));
        }
    }
    s
}

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("hessian is singular; reduce the degrees of freedom")]
    SingularHessian,
    #[error("instance too large for the oracle: P = {p}, n = {n}")]
    TooLarge { p: usize, n: usize },
    #[error("newton iterations did not converge")]
    DidNotConverge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonResult {
    pub theta: Vec<f64>,
    pub nll: f64,
    pub iterations: usize,
}

const ORACLE_MAX_P: usize = 500;
const ORACLE_MAX_N: usize = 100_000;
const ORACLE_GRAD_TOL: f64 = 1e-10;

/// Gauge-fixing basis: identity columns for linear effects; for each spline
/// block of size d, the d-1 columns e_j - (1/d) * ones, spanning the
/// sum-to-zero subspace the optimum is unique in.
fn gauge_basis(layout: &ModelLayout) -> Vec<Vec<f64>> {
    let p = layout.n_coefficients();
    let mut cols = Vec::new();
    for (k, effect) in layout.effects.iter().enumerate() {
        let range = layout.block_range(k);
        match effect.mode {
            EffectMode::Linear => {
                let mut col = vec![0.0; p];
                col[range.start] = 1.0;
                cols.push(col);
            }
            EffectMode::Spline(_) => {
                let d = range.len();
                for j in 0..d - 1 {
                    let mut col = vec![0.0; p];
                    for i in range.clone() {
                        col[i] = -1.0 / d as f64;
                    }
                    col[range.start + j] += 1.0;
                    cols.push(col);
                }
            }
        }
    }
    cols
}

/// In-place Cholesky solve of the symmetric positive definite system a x = b.
fn cholesky_solve(a: &mut [f64], q: usize, b: &mut [f64]) -> Result<(), OracleError> {
    for j in 0..q {
        let mut d = a[j * q + j];
        for k in 0..j {
            d -= a[j * q + k] * a[j * q + k];
        }
        if d <= 1e-300 {
            return Err(OracleError::SingularHessian);
        }
        let d = d.sqrt();
        a[j * q + j] = d;
        for i in j + 1..q {
            let mut v = a[i * q + j];
            for k in 0..j {
                v -= a[i * q + k] * a[j * q + k];
            }
            a[i * q + j] = v / d;
        }
    }
    // Forward substitution L y = b.
    for i in 0..q {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * q + k] * b[k];
        }
        b[i] = v / a[i * q + i];
    }
    // Back substitution L^T x = y.
    for i in (0..q).rev() {
        let mut v = b[i];
        for k in i + 1..q {
            v -= a[k * q + i] * b[k];
        }
        b[i] = v / a[i * q + i];
    }
    Ok(())
}

/// Full-batch Newton with step halving from theta = 0.
pub fn newton_oracle(
    batch: &CaseControlBatch,
    layout: &ModelLayout,
) -> Result<NewtonResult, OracleError> {
    let p = layout.n_coefficients();
    newton_oracle_from(batch, layout, &vec![0.0; p])
}

/// Newton from an arbitrary start; the optimum negative log likelihood is
/// unique by convexity regardless of the start or the gauge of the start.
pub fn newton_oracle_from(
    batch: &CaseControlBatch,
    layout: &ModelLayout,
    theta0: &[f64],
) -> Result<NewtonResult, OracleError> {
    let p = layout.n_coefficients();
    let n = batch.n_rows;
    if p > ORACLE_MAX_P || n > ORACLE_MAX_N {
        return Err(OracleError::TooLarge { p, n });
    }
    assert_eq!(theta0.len(), p);
    if p == 0 {
        return Ok(NewtonResult {
            theta: Vec::new(),
            nll: n as f64 * std::f64::consts::LN_2,
            iterations: 0,
        });
    }

    let basis = gauge_basis(layout);
    let q = basis.len();
    let mut theta = theta0.to_vec();
    let mut nll = neg_log_pl(&theta, batch).expect("dimensions checked");

    for iter in 0..200 {
        let grad = grad_neg_log_pl(&theta, batch).expect("dimensions checked");
        let grad_inf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_inf < ORACLE_GRAD_TOL {
            return Ok(NewtonResult {
                theta,
                nll,
                iterations: iter,
            });
        }

        // Full-space Hessian: sum of w(1-w) outer products.
        let mut hess = vec![0.0; p * p];
        for i in 0..n {
            let row = batch.row(i);
            let eta: f64 = row.iter().zip(&theta).map(|(d, t)| d * t).sum();
            let w = sigmoid(-eta);
            let coef = w * (1.0 - w);
            if coef == 0.0 {
                continue;
            }
            for a in 0..p {
                let ca = coef * row[a];
                if ca == 0.0 {
                    continue;
                }
                for b in 0..p {
                    hess[a * p + b] += ca * row[b];
                }
            }
        }

        // Project onto the gauge-fixed subspace.
        let mut h_sub = vec![0.0; q * q];
        let mut g_sub = vec![0.0; q];
        for a in 0..q {
            for (i, &za) in basis[a].iter().enumerate() {
                if za != 0.0 {
                    g_sub[a] += za * grad[i];
                }
            }
            for b in 0..q {
                let mut acc = 0.0;
                for i in 0..p {
                    let za = basis[a][i];
                    if za == 0.0 {
                        continue;
                    }
                    let mut hz = 0.0;
                    for j in 0..p {
                        hz += hess[i * p + j] * basis[b][j];
                    }
                    acc += za * hz;
                }
                h_sub[a * q + b] = acc;
            }
        }

        let mut step_sub: Vec<f64> = g_sub.iter().map(|g| -g).collect();
        cholesky_solve(&mut h_sub, q, &mut step_sub)?;

        // Map back to the full space.
        let mut direction = vec![0.0; p];
        for a in 0..q {
            for (i, &za) in basis[a].iter().enumerate() {
                direction[i] += step_sub[a] * za;
            }
        }

        // Step halving until the loss decreases. Near the optimum the loss
        // comparison is dominated by summation noise while the gradient can
        // still shrink by orders of magnitude, so allow slack at the scale
        // of that noise.
        let noise = 64.0 * f64::EPSILON * (1.0 + nll.abs());
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = theta
                .iter()
                .zip(&direction)
                .map(|(th, d)| th + t * d)
                .collect();
            let trial_nll = neg_log_pl(&trial, batch).expect("dimensions checked");
            if trial_nll <= nll + noise {
                theta = trial;
                nll = trial_nll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No descent left at float resolution; accept if the gradient is
            // already small at a looser threshold.
            if grad_inf < 1e-6 {
                return Ok(NewtonResult {
                    theta,
                    nll,
                    iterations: iter,
                });
            }
            return Err(OracleError::DidNotConverge);
        }
    }
    Err(OracleError::DidNotConverge)
}
