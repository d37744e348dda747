//! Model selection: k-fold cross-validation over batch size and spline
//! degrees of freedom, the one-standard-error pick, and information-criteria
//! comparison of nested effect groups.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariates::{assemble_stream, CovariateStream, EffectKind};
use crate::data_model::EventLog;
use crate::optimizer::{fit, nll_over_rows, AdamConfig, EffectSpec, FitError, ModeSpec};
use crate::sampler::sample_controls;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("{n} events cannot fill {folds} folds")]
    TooFewEvents { n: usize, folds: usize },
    #[error("every cross-validation cell failed")]
    AllCellsFailed,
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Cross-validation grid: fold count, candidate batch sizes and candidate
/// spline degrees of freedom (applied to every spline effect).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: usize,
    pub batch_sizes: Vec<usize>,
    pub df_grid: Vec<usize>,
    pub seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan {
            folds: 6,
            batch_sizes: vec![1 << 10, 1 << 14, 1 << 18],
            df_grid: (4..=20).collect(),
            seed: 0,
        }
    }
}

/// One grid cell: held-out negative log likelihood per fold, rescaled by the
/// fold size so cells are comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub batch_size: usize,
    pub df: usize,
    pub fold_nlls: Vec<Option<f64>>,
    pub mean: f64,
    pub sd: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: usize,
    pub cells: Vec<CvCell>,
}

/// Seeded near-equal partition: returns the fold id of each stream row.
pub fn fold_assignments(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let perm = crate::util::seeded_permutation(seed, 0, n);
    let mut fold_of = vec![0usize; n];
    let base = n / folds;
    let extra = n % folds;
    let mut pos = 0usize;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        for &row in &perm[pos..pos + size] {
            fold_of[row] = f;
        }
        pos += size;
    }
    fold_of
}

fn with_df(specs: &[EffectSpec], df: usize) -> Vec<EffectSpec> {
    specs
        .iter()
        .map(|s| {
            let mut s = s.clone();
            if let ModeSpec::Spline { degree, .. } = s.mode {
                s.mode = ModeSpec::Spline { degree, df };
            }
            s
        })
        .collect()
}

/// Runs the full grid. Controls (and therefore the stream) are fixed by the
/// caller, and the fold partition is shared across cells, so cells differ
/// only in their hyperparameters. All cell fits reuse `adam.seed`.
pub fn run_cv(
    stream: &CovariateStream,
    specs: &[EffectSpec],
    plan: &CvPlan,
    adam: &AdamConfig,
) -> Result<CvResult, SelectError> {
    let n = stream.n_rows();
    if plan.folds < 2 || n < plan.folds {
        return Err(SelectError::TooFewEvents {
            n,
            folds: plan.folds,
        });
    }
    let fold_of = fold_assignments(n, plan.folds, plan.seed);

    let grid: Vec<(usize, usize)> = plan
        .batch_sizes
        .iter()
        .flat_map(|&b| plan.df_grid.iter().map(move |&df| (b, df)))
        .collect();

    let cells: Vec<CvCell> = grid
        .par_iter()
        .map(|&(batch_size, df)| {
            let cell_specs = with_df(specs, df);
            let mut cfg = adam.clone();
            cfg.batch_size = batch_size;
            let mut fold_nlls: Vec<Option<f64>> = Vec::with_capacity(plan.folds);
            for f in 0..plan.folds {
                let train_rows: Vec<usize> = (0..n).filter(|&r| fold_of[r] != f).collect();
                let val_rows: Vec<usize> = (0..n).filter(|&r| fold_of[r] == f).collect();
                let train = stream.subset(&train_rows);
                let value = fit(&train, &cell_specs, &cfg).ok().and_then(|m| {
                    let val = stream.subset(&val_rows);
                    let rows: Vec<usize> = (0..val.n_rows()).collect();
                    nll_over_rows(&val, &m.layout(), &m.theta_flat(), &rows, cfg.batch_size)
                        .ok()
                        .map(|nll| nll / val_rows.len() as f64)
                });
                fold_nlls.push(value);
            }
            let failed = fold_nlls.iter().any(Option::is_none);
            let (mean, sd) = if failed {
                (f64::NAN, f64::NAN)
            } else {
                let vals: Vec<f64> = fold_nlls.iter().map(|v| v.unwrap()).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (vals.len() - 1) as f64;
                (mean, var.sqrt())
            };
            CvCell {
                batch_size,
                df,
                fold_nlls,
                mean,
                sd,
                failed,
            }
        })
        .collect();

    Ok(CvResult {
        folds: plan.folds,
        cells,
    })
}

/// One-standard-error pick: among cells whose mean is within one standard
/// error of the global minimum, the smallest df; ties across batch sizes go
/// to the largest batch size (stability preference).
pub fn select(result: &CvResult) -> Result<(usize, usize), SelectError> {
    let ok: Vec<&CvCell> = result.cells.iter().filter(|c| !c.failed).collect();
    let best = ok
        .iter()
        .min_by(|a, b| a.mean.total_cmp(&b.mean))
        .ok_or(SelectError::AllCellsFailed)?;
    let threshold = best.mean + best.sd / (result.folds as f64).sqrt();
    let candidates: Vec<&&CvCell> = ok.iter().filter(|c| c.mean <= threshold).collect();
    let df = candidates.iter().map(|c| c.df).min().expect("non-empty");
    let batch_size = candidates
        .iter()
        .filter(|c| c.df == df)
        .map(|c| c.batch_size)
        .max()
        .expect("non-empty");
    Ok((batch_size, df))
}

/// Criteria row for one nested model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCriteria {
    pub group: String,
    pub n_coefficients: usize,
    pub nll: f64,
    pub aic: f64,
    pub bic: f64,
}

/// Sequentially fits the nested models formed by cumulative unions of the
/// given effect groups, on one shared control sample. Group kinds must be
/// disjoint.
pub fn compare_effect_groups(
    log: &EventLog,
    groups: &[(String, Vec<EffectSpec>)],
    adam: &AdamConfig,
) -> Result<Vec<GroupCriteria>, SelectError> {
    assert!(!groups.is_empty());
    let all_kinds: Vec<EffectKind> = groups
        .iter()
        .flat_map(|(_, specs)| specs.iter().map(|s| s.kind))
        .collect();
    {
        let mut k = all_kinds.clone();
        k.sort_by_key(|k| k.name());
        k.dedup();
        assert_eq!(k.len(), all_kinds.len(), "effect groups must be disjoint");
    }
    let controls = sample_controls(log, adam.seed);
    if controls.assignments.is_empty() {
        return Err(SelectError::Fit(FitError::NoData));
    }
    let stream = assemble_stream(log, &controls.pairs(), &all_kinds).map_err(FitError::from)?;

    let mut out = Vec::with_capacity(groups.len());
    let mut specs_so_far: Vec<EffectSpec> = Vec::new();
    let mut label = String::new();
    for (name, specs) in groups {
        specs_so_far.extend(specs.iter().cloned());
        if !label.is_empty() {
            label.push('+');
        }
        label.push_str(name);
        // The stream holds all columns; a prefix model uses a column prefix.
        let prefix_kinds: Vec<EffectKind> = specs_so_far.iter().map(|s| s.kind).collect();
        let sub = CovariateStream {
            kinds: prefix_kinds.clone(),
            event_indices: stream.event_indices.clone(),
            case: stream.case[..prefix_kinds.len()].to_vec(),
            control: stream.control[..prefix_kinds.len()].to_vec(),
        };
        let m = fit(&sub, &specs_so_far, adam)?;
        out.push(GroupCriteria {
            group: label.clone(),
            n_coefficients: m.n_coefficients(),
            nll: m.final_nll,
            aic: m.aic,
            bic: m.bic,
        });
    }
    Ok(out)
}

pub fn cv_results_to_csv(result: &CvResult) -> String {
    let mut s = String::from("batch_size,df,fold,rescaled_nll\n");
    for cell in &result.cells {
        for (fold, nll) in cell.fold_nlls.iter().enumerate() {
            match nll {
                Some(v) => s.push_str(&format!("{},{},{},{}\n", cell.batch_size, cell.df, fold, v)),
                None => s.push_str(&format!(
                    "{},{},{},failed\n",
                    cell.batch_size, cell.df, fold
                )),
            }
        }
    }
    s
}

pub fn criteria_to_csv(rows: &[GroupCriteria]) -> String {
    let mut s = String::from("group,P,nll,aic,bic\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.group, r.n_coefficients, r.nll, r.aic, r.bic
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, CurveSpec, SynthConfig};

    #[test]
    fn folds_partition_all_rows() {
        for (n, folds) in [(100, 6), (17, 2), (23, 7)] {
            let fold_of = fold_assignments(n, folds, 3);
            assert_eq!(fold_of.len(), n);
            let mut counts = vec![0usize; folds];
            for &f in &fold_of {
                counts[f] += 1;
            }
            assert_eq!(counts.iter().sum::<usize>(), n);
            let max = counts.iter().max().unwrap();
            let min = counts.iter().min().unwrap();
            assert!(max - min <= 1);
        }
    }

    fn cell(batch_size: usize, df: usize, mean: f64, sd: f64) -> CvCell {
        CvCell {
            batch_size,
            df,
            fold_nlls: vec![Some(mean); 4],
            mean,
            sd,
            failed: false,
        }
    }

    #[test]
    fn select_single_cell() {
        let result = CvResult {
            folds: 4,
            cells: vec![cell(64, 8, 0.6, 0.01)],
        };
        assert_eq!(select(&result).unwrap(), (64, 8));
    }

    #[test]
    fn select_first_df_on_the_flat() {
        // Decreasing then flat: 0.9, 0.7, 0.5, 0.5, 0.5 with small sd.
        let means = [0.9, 0.7, 0.5, 0.5, 0.5];
        let result = CvResult {
            folds: 4,
            cells: means
                .iter()
                .enumerate()
                .map(|(i, &m)| cell(64, 4 + i, m, 0.02))
                .collect(),
        };
        assert_eq!(select(&result).unwrap(), (64, 6));
    }

    #[test]
    fn select_prefers_largest_batch_on_ties() {
        let result = CvResult {
            folds: 4,
            cells: vec![
                cell(1 << 10, 8, 0.5001, 0.02),
                cell(1 << 14, 8, 0.5002, 0.02),
                cell(1 << 18, 8, 0.5000, 0.02),
            ],
        };
        assert_eq!(select(&result).unwrap(), (1 << 18, 8));
    }

    #[test]
    fn selection_is_scale_invariant() {
        let base = CvResult {
            folds: 4,
            cells: vec![
                cell(32, 4, 0.9, 0.05),
                cell(32, 5, 0.52, 0.05),
                cell(32, 6, 0.5, 0.05),
                cell(64, 5, 0.53, 0.05),
            ],
        };
        let picked = select(&base).unwrap();
        for scale in [0.001, 7.3, 1e6] {
            let scaled = CvResult {
                folds: 4,
                cells: base
                    .cells
                    .iter()
                    .map(|c| cell(c.batch_size, c.df, c.mean * scale, c.sd * scale))
                    .collect(),
            };
            assert_eq!(select(&scaled).unwrap(), picked);
        }
    }

    #[test]
    fn all_failed_is_an_error() {
        let result = CvResult {
            folds: 2,
            cells: vec![CvCell {
                batch_size: 8,
                df: 4,
                fold_nlls: vec![None, None],
                mean: f64::NAN,
                sd: f64::NAN,
                failed: true,
            }],
        };
        assert!(matches!(select(&result), Err(SelectError::AllCellsFailed)));
    }

    #[test]
    fn cv_cells_match_direct_refits() {
        let out = generate(&SynthConfig {
            n_patents: 220,
            arrivals_per_day: 4.0,
            true_effects: vec![(EffectKind::TimeLag, CurveSpec::Linear { slope: 0.01 })],
            seed: 12,
            ..SynthConfig::default()
        })
        .unwrap();
        let controls = sample_controls(&out.log, 5);
        let kinds = [EffectKind::TimeLag];
        let stream = assemble_stream(&out.log, &controls.pairs(), &kinds).unwrap();
        let specs = vec![EffectSpec::spline(EffectKind::TimeLag, 3, 4)];
        let plan = CvPlan {
            folds: 2,
            batch_sizes: vec![64],
            df_grid: vec![5],
            seed: 7,
        };
        let adam = AdamConfig {
            max_epochs: 8,
            batch_size: 64,
            seed: 2,
            ..AdamConfig::default()
        };
        let result = run_cv(&stream, &specs, &plan, &adam).unwrap();
        assert_eq!(result.cells.len(), 1);
        let cv_cell = &result.cells[0];
        assert!(!cv_cell.failed);

        // Independent refit with the same fold assignment and config.
        let fold_of = fold_assignments(stream.n_rows(), 2, plan.seed);
        for f in 0..2 {
            let train_rows: Vec<usize> =
                (0..stream.n_rows()).filter(|&r| fold_of[r] != f).collect();
            let val_rows: Vec<usize> = (0..stream.n_rows()).filter(|&r| fold_of[r] == f).collect();
            let m = fit(&stream.subset(&train_rows), &with_df(&specs, 5), &adam).unwrap();
            let val = stream.subset(&val_rows);
            let rows: Vec<usize> = (0..val.n_rows()).collect();
            let nll = nll_over_rows(&val, &m.layout(), &m.theta_flat(), &rows, 64).unwrap()
                / val_rows.len() as f64;
            let cell_val = cv_cell.fold_nlls[f].unwrap();
            assert!(
                (nll - cell_val).abs() < 1e-10,
                "fold {f}: {nll} vs {cell_val}"
            );
        }
    }

    #[test]
    fn null_group_reports_n_log_two() {
        let out = generate(&SynthConfig {
            n_patents: 120,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let adam = AdamConfig {
            max_epochs: 2,
            seed: 1,
            ..AdamConfig::default()
        };
        let rows = compare_effect_groups(&out.log, &[("null".into(), vec![])], &adam).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].n_coefficients, 0);
        let controls = sample_controls(&out.log, adam.seed);
        let expected = controls.assignments.len() as f64 * std::f64::consts::LN_2;
        assert!((rows[0].nll - expected).abs() < 1e-9);
        assert!((rows[0].aic - 2.0 * expected).abs() < 1e-9);
    }
}
