//! Post-hoc baseline hazard recovery from a fitted model: per-event
//! increments from the sampled case/control pair, cumulative sum,
//! finite-difference pointwise rates, and Gaussian smoothing for reporting.

use serde::{Deserialize, Serialize};

use crate::covariates::CovariateStream;
use crate::data_model::{EventLog, Timestamp};
use crate::optimizer::ModelFit;
use crate::sampler::risk_set_size;

/// Baseline hazard estimate on the aggregated event-day grid.
///
/// Events sharing a day are merged before differencing (a day-resolution
/// clock cannot order them), so `times` is strictly increasing. `pointwise`
/// and `smoothed` are rates per day over the interval ending at each time,
/// with the interval before `times[0]` starting at `origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEstimate {
    pub origin: Timestamp,
    pub times: Vec<Timestamp>,
    pub cumulative: Vec<f64>,
    pub pointwise: Vec<f64>,
    pub smoothed: Vec<f64>,
}

/// Per included event: (event time, increment), where the increment is
/// 2 / (n(t_i) * [exp(eta_case) + exp(eta_control)]) with centered
/// predictors. Centering makes the estimate invariant to the constant-shift
/// gauge freedom of spline blocks.
pub fn raw_increments(
    fit: &ModelFit,
    stream: &CovariateStream,
    log: &EventLog,
) -> Vec<(Timestamp, f64)> {
    for (k, e) in fit.effects.iter().enumerate() {
        assert_eq!(
            stream.kinds.get(k),
            Some(&e.config.kind),
            "stream columns must be aligned with the fitted effects"
        );
    }
    let n_effects = fit.effects.len();
    let mut case_row = vec![0.0; n_effects];
    let mut ctrl_row = vec![0.0; n_effects];
    stream
        .event_indices
        .iter()
        .enumerate()
        .map(|(row, &ei)| {
            let ev = &log.events()[ei];
            for k in 0..n_effects {
                case_row[k] = stream.case[k][row];
                ctrl_row[k] = stream.control[k][row];
            }
            let eta_case = fit.centered_predictor(&case_row);
            let eta_ctrl = fit.centered_predictor(&ctrl_row);
            // Sampled events always have someone at risk; n >= 1 here.
            let n = risk_set_size(log, ev.time) as f64;
            let increment = 2.0 / (n * (eta_case.exp() + eta_ctrl.exp()));
            (ev.time, increment)
        })
        .collect()
}

/// Cumulative baseline hazard: same-day increments are summed, then
/// prefix-summed in time order. `origin` is the earliest publication date
/// (the network exists from there on).
pub fn cumulative_baseline(
    fit: &ModelFit,
    stream: &CovariateStream,
    log: &EventLog,
    sigma: f64,
) -> BaselineEstimate {
    let increments = raw_increments(fit, stream, log);
    let origin = log
        .nodes()
        .iter()
        .map(|n| n.pub_date)
        .min()
        .unwrap_or(Timestamp::from_days(0));

    let mut times: Vec<Timestamp> = Vec::new();
    let mut day_sums: Vec<f64> = Vec::new();
    for (t, inc) in increments {
        match times.last() {
            Some(&last) if last == t => *day_sums.last_mut().unwrap() += inc,
            _ => {
                debug_assert!(times.last().is_none_or(|&last| last < t));
                times.push(t);
                day_sums.push(inc);
            }
        }
    }
    let mut cumulative = Vec::with_capacity(day_sums.len());
    let mut acc = 0.0;
    for s in &day_sums {
        acc += s;
        cumulative.push(acc);
    }
    let day_grid: Vec<i64> = std::iter::once(origin.days())
        .chain(times.iter().map(|t| t.days()))
        .collect();
    let full_cumulative: Vec<f64> = std::iter::once(0.0)
        .chain(cumulative.iter().copied())
        .collect();
    let pointwise = pointwise_baseline(&day_grid, &full_cumulative);
    let smoothed = gaussian_smooth(&pointwise, sigma);
    BaselineEstimate {
        origin,
        times,
        cumulative,
        pointwise,
        smoothed,
    }
}

/// Finite-difference rates between subsequent cumulative values:
/// out[i] = (cum[i+1] - cum[i]) / (t[i+1] - t[i]). Times must be strictly
/// increasing (aggregate same-day events first).
pub fn pointwise_baseline(times_days: &[i64], cumulative: &[f64]) -> Vec<f64> {
    assert_eq!(times_days.len(), cumulative.len());
    assert!(times_days.windows(2).all(|w| w[0] < w[1]));
    cumulative
        .windows(2)
        .zip(times_days.windows(2))
        .map(|(c, t)| (c[1] - c[0]) / (t[1] - t[0]) as f64)
        .collect()
}

/// Discrete Gaussian convolution over the sequence, kernel truncated at
/// 4 sigma and renormalized where it runs off the ends. Sigma is measured in
/// samples; on near-daily event data one sample is one day.
pub fn gaussian_smooth(values: &[f64], sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let half = (4.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-half..=half)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = values.len() as i64;
    (0..n)
        .map(|i| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (j, w) in kernel.iter().enumerate() {
                let idx = i + j as i64 - half;
                if idx >= 0 && idx < n {
                    num += w * values[idx as usize];
                    den += w;
                }
            }
            num / den
        })
        .collect()
}

pub fn baseline_to_csv(est: &BaselineEstimate) -> String {
    let mut s = String::from("time,cumulative,pointwise,smoothed\n");
    for (i, t) in est.times.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{}\n",
            t.to_iso(),
            est.cumulative[i],
            est.pointwise[i],
            est.smoothed[i]
        ));
    }
    s
}
