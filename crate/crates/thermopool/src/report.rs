//! Post-processing: posterior summary tables, Koyck long-run quantities,
//! elasticities, uniform-warming counterfactuals, and rolling-window refits.
//!
//! Long-run quantities follow the lag structure: a short-run coefficient `b`
//! with persistence `nu` implies `b / (1 - nu)` in the long run. Draws with
//! `|nu| >= 1` have no long-run limit; they are excluded and counted.
//!
//! Counterfactual predictions use posterior-mean parameters with the
//! country-specific deviations included (they are part of the linear
//! predictor); an optional full-posterior mode propagates every draw and
//! reports credible intervals. A global-response-only alternative (country
//! deviations zeroed) is deliberately not emitted.

use std::path::Path;

use thiserror::Error;

use crate::diagnostics::{split_rhat, DiagError};
use crate::exposure::{compute_exposure, BinScheme, DayWindow, ExposureError};
use crate::gridio::{format_float, CountryMap, PopulationGrid, TemperatureGrid};
use crate::inference::{Model, ModelSpec};
use crate::panel::{build_design, DesignMatrix, PanelDataset, PanelError};
use crate::sampler::{
    run_chains_with_init, PosteriorDraws, SamplerConfig, SamplerError, WarmStart,
};
use crate::util::{mean, quantile_sorted, sample_sd, Kahan};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("non-stationary persistence |nu| >= 1 (nu = {0})")]
    NonStationary(f64),
    #[error("empty draws")]
    EmptyDraws,
    #[error("draws have no column {0:?}")]
    MissingColumn(String),
    #[error("window of {window} years exceeds the panel span of {span}")]
    WindowTooWide { window: usize, span: usize },
    #[error("year {0} is not covered by both grids")]
    YearNotCovered(i32),
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Inference(#[from] crate::inference::InferenceError),
    #[error("io error at {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Long-run multiplier of a short-run effect under persistence `nu`.
pub fn koyck_long_run(effect: f64, nu: f64) -> Result<f64, ReportError> {
    if nu.abs() >= 1.0 {
        return Err(ReportError::NonStationary(nu));
    }
    Ok(effect / (1.0 - nu))
}

/// One row of the posterior summary (R-hat, mean, sd, 2.5%, median, 97.5%).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub rhat: f64,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn row(&self, label: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ReportError> {
        let io_err = |reason: String| ReportError::Io {
            path: path.display().to_string(),
            reason,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(e.to_string()))?;
        w.write_record(["parameter", "rhat", "mean", "sd", "q2.5", "median", "q97.5"])
            .map_err(|e| io_err(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                format_float(r.rhat),
                format_float(r.mean),
                format_float(r.sd),
                format_float(r.q025),
                format_float(r.median),
                format_float(r.q975),
            ])
            .map_err(|e| io_err(e.to_string()))?;
        }
        w.flush().map_err(|e| io_err(e.to_string()))
    }

    pub fn read_csv(path: &Path) -> Result<SummaryTable, ReportError> {
        let io_err = |reason: String| ReportError::Io {
            path: path.display().to_string(),
            reason,
        };
        let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(e.to_string()))?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| io_err(e.to_string()))?;
            let f = |i: usize| -> Result<f64, ReportError> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| io_err(format!("bad field {i}")))
            };
            rows.push(SummaryRow {
                label: rec.get(0).unwrap_or("").to_string(),
                rhat: f(1)?,
                mean: f(2)?,
                sd: f(3)?,
                q025: f(4)?,
                median: f(5)?,
                q975: f(6)?,
            });
        }
        Ok(SummaryTable { rows })
    }
}

/// Per-parameter posterior summaries. R-hat is NaN where it is undefined
/// (single chain or zero variance); the sd of fewer than two draws is 0.
pub fn summarize(draws: &PosteriorDraws) -> Result<SummaryTable, ReportError> {
    if draws.n_draws_total() == 0 || draws.n_params == 0 {
        return Err(ReportError::EmptyDraws);
    }
    let mut rows = Vec::with_capacity(draws.n_params);
    for p in 0..draws.n_params {
        let col = draws.column(p);
        let mut sorted = col.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN draw"));
        let sd = if col.len() < 2 { 0.0 } else { sample_sd(&col) };
        rows.push(SummaryRow {
            label: draws.labels[p].clone(),
            rhat: split_rhat(draws, p).unwrap_or(f64::NAN),
            mean: mean(&col),
            sd,
            q025: quantile_sorted(&sorted, 0.025),
            median: quantile_sorted(&sorted, 0.5),
            q975: quantile_sorted(&sorted, 0.975),
        });
    }
    Ok(SummaryTable { rows })
}

/// Short- and long-run posterior summaries for one coefficient.
#[derive(Debug, Clone)]
pub struct LongRunRow {
    pub label: String,
    pub short_mean: f64,
    pub short_q025: f64,
    pub short_q975: f64,
    pub long_mean: f64,
    pub long_q025: f64,
    pub long_q975: f64,
}

#[derive(Debug, Clone)]
pub struct LongRunTable {
    pub rows: Vec<LongRunRow>,
    /// Draws excluded because |nu| >= 1.
    pub nonstationary_dropped: usize,
}

fn long_run_rows(draws: &PosteriorDraws, prefix: &str) -> Result<LongRunTable, ReportError> {
    let nu_idx = draws
        .param_index("nu")
        .ok_or_else(|| ReportError::MissingColumn("nu".into()))?;
    let nu = draws.column(nu_idx);
    let keep: Vec<bool> = nu.iter().map(|&v| v.abs() < 1.0).collect();
    let dropped = keep.iter().filter(|&&k| !k).count();
    if dropped == nu.len() {
        return Err(ReportError::NonStationary(nu[0]));
    }
    let cols: Vec<usize> = (0..draws.n_params)
        .filter(|&p| draws.labels[p].starts_with(prefix))
        .collect();
    if cols.is_empty() {
        return Err(ReportError::MissingColumn(format!("{prefix}...")));
    }
    let mut rows = Vec::with_capacity(cols.len());
    for &p in &cols {
        let col = draws.column(p);
        let mut short_sorted = col.clone();
        short_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut long: Vec<f64> = col
            .iter()
            .zip(nu.iter())
            .zip(keep.iter())
            .filter(|(_, &k)| k)
            .map(|((&b, &v), _)| b / (1.0 - v))
            .collect();
        let long_mean = mean(&long);
        long.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(LongRunRow {
            label: draws.labels[p].clone(),
            short_mean: mean(&col),
            short_q025: quantile_sorted(&short_sorted, 0.025),
            short_q975: quantile_sorted(&short_sorted, 0.975),
            long_mean,
            long_q025: quantile_sorted(&long, 0.025),
            long_q975: quantile_sorted(&long, 0.975),
        });
    }
    Ok(LongRunTable {
        rows,
        nonstationary_dropped: dropped,
    })
}

/// Short/long-run income and price elasticities from the gamma draws.
pub fn elasticity_table(draws: &PosteriorDraws) -> Result<LongRunTable, ReportError> {
    long_run_rows(draws, "gamma[")
}

/// Koyck table row for one temperature-bin coefficient, with the demand
/// change implied by a 10-percentage-point exposure shift: the
/// log-scale linear approximation `0.10 * b/(1-nu) * 100` and the exact
/// `(exp(0.10 * b/(1-nu)) - 1) * 100` alongside.
#[derive(Debug, Clone)]
pub struct KoyckRow {
    pub label: String,
    pub short_mean: f64,
    pub long_mean: f64,
    pub long_q025: f64,
    pub long_q975: f64,
    pub pct_10pp_linear: f64,
    pub pct_10pp_exact: f64,
}

pub fn koyck_table(draws: &PosteriorDraws) -> Result<(Vec<KoyckRow>, usize), ReportError> {
    let table = long_run_rows(draws, "beta[")?;
    let rows = table
        .rows
        .into_iter()
        .map(|r| KoyckRow {
            label: r.label,
            short_mean: r.short_mean,
            long_mean: r.long_mean,
            long_q025: r.long_q025,
            long_q975: r.long_q975,
            pct_10pp_linear: 0.10 * r.long_mean * 100.0,
            pct_10pp_exact: ((0.10 * r.long_mean).exp() - 1.0) * 100.0,
        })
        .collect();
    Ok((rows, table.nonstationary_dropped))
}

/// Per-country effect of a uniform temperature shift.
#[derive(Debug, Clone)]
pub struct CountryImpact {
    pub country: String,
    pub baseline: f64,
    pub counterfactual: f64,
    pub pct_change: f64,
    /// Credible interval when the full posterior was propagated.
    pub pct_interval: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct CounterfactualResult {
    pub delta_t: f64,
    pub base_year: i32,
    pub rows: Vec<CountryImpact>,
    /// Demand-weighted aggregate percent change.
    pub total_pct: f64,
}

/// Recomputes exposure under a uniform `delta_t` warming and predicts demand
/// for every country's `base_year` row using posterior means (country
/// deviations included). `full_posterior` adds per-country credible
/// intervals from propagating every draw.
#[allow(clippy::too_many_arguments)]
pub fn warming_counterfactual(
    draws: &PosteriorDraws,
    spec: &ModelSpec,
    design: &DesignMatrix,
    tg: &TemperatureGrid,
    pg: &PopulationGrid,
    cm: &CountryMap,
    scheme: &BinScheme,
    delta_t: f64,
    base_year: i32,
    day_window: DayWindow,
    full_posterior: bool,
) -> Result<CounterfactualResult, ReportError> {
    if !tg.years().contains(&base_year) || !pg.years().contains(&base_year) {
        return Err(ReportError::YearNotCovered(base_year));
    }
    if draws.n_draws_total() == 0 {
        return Err(ReportError::EmptyDraws);
    }
    let model = Model::new(design, spec)?;
    let lay = model.layout;

    let base_table = compute_exposure(tg, pg, cm, scheme, day_window)?;
    let shifted = tg.with_offset(delta_t);
    let shift_table = compute_exposure(&shifted, pg, cm, scheme, day_window)?;

    // Posterior means of every constrained column, plus composite country
    // effects averaged across draws.
    let s_total = draws.n_draws_total() as f64;
    let mut theta_mean = vec![0.0; lay.dim];
    let mut u_mean = vec![vec![0.0; lay.m]; lay.n_groups];
    for c in 0..draws.n_chains {
        for i in 0..draws.n_iterations {
            let d = draws.draw(c, i);
            for (t, &v) in theta_mean.iter_mut().zip(d.iter()) {
                *t += v;
            }
            if lay.m > 0 {
                let ug = lay.group_effects_from_constrained(d);
                for g in 0..lay.n_groups {
                    for m in 0..lay.m {
                        u_mean[g][m] += ug[g][m];
                    }
                }
            }
        }
    }
    for t in theta_mean.iter_mut() {
        *t /= s_total;
    }
    for g in u_mean.iter_mut() {
        for v in g.iter_mut() {
            *v /= s_total;
        }
    }

    // The linear predictor for one design row under a given exposure row.
    let mu_for = |theta: &[f64], u_g: &[Vec<f64>], row: usize, exposure: &[f64]| -> f64 {
        let g = design.row_group[row];
        let mut mu = theta[lay.off_alpha] + theta[lay.off_nu] * design.lag[row];
        for (k, &b) in design.retained_bins.iter().enumerate() {
            mu += theta[lay.off_beta + k] * exposure[b];
        }
        for j in 0..lay.l {
            mu += theta[lay.off_gamma + j] * design.covariate_at(row, j);
        }
        if lay.m > 0 {
            mu += u_g[g][0];
            if lay.m > 1 {
                for (k, &b) in design.retained_bins.iter().enumerate() {
                    mu += u_g[g][k + 1] * exposure[b];
                }
            }
        }
        mu
    };

    let mut rows = Vec::new();
    let mut sum_base = Kahan::default();
    let mut sum_cf = Kahan::default();
    for r in 0..design.n {
        if design.row_years[r] != base_year {
            continue;
        }
        let country = design.group_names[design.row_group[r]].clone();
        let Some(base_row) = base_table.row(&country, base_year) else {
            continue;
        };
        let shift_row = shift_table
            .row(&country, base_year)
            .expect("shifted grid covers the same country-years");
        let mu_base = mu_for(&theta_mean, &u_mean, r, base_row);
        let mu_cf = mu_for(&theta_mean, &u_mean, r, shift_row);
        let baseline = mu_base.exp();
        let counterfactual = mu_cf.exp();
        let pct = (counterfactual - baseline) / baseline * 100.0;

        let pct_interval = if full_posterior {
            let mut pcts = Vec::with_capacity(draws.n_draws_total());
            for c in 0..draws.n_chains {
                for i in 0..draws.n_iterations {
                    let d = draws.draw(c, i);
                    let ug = lay.group_effects_from_constrained(d);
                    let b = mu_for(d, &ug, r, base_row).exp();
                    let cf = mu_for(d, &ug, r, shift_row).exp();
                    pcts.push((cf - b) / b * 100.0);
                }
            }
            pcts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Some((quantile_sorted(&pcts, 0.025), quantile_sorted(&pcts, 0.975)))
        } else {
            None
        };

        sum_base.add(baseline);
        sum_cf.add(counterfactual);
        rows.push(CountryImpact {
            country,
            baseline,
            counterfactual,
            pct_change: pct,
            pct_interval,
        });
    }
    if rows.is_empty() {
        return Err(ReportError::YearNotCovered(base_year));
    }
    let total_pct = (sum_cf.value() - sum_base.value()) / sum_base.value() * 100.0;
    Ok(CounterfactualResult {
        delta_t,
        base_year,
        rows,
        total_pct,
    })
}

impl CounterfactualResult {
    pub fn write_csv(&self, path: &Path) -> Result<(), ReportError> {
        let io_err = |reason: String| ReportError::Io {
            path: path.display().to_string(),
            reason,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(e.to_string()))?;
        w.write_record([
            "country",
            "baseline_demand",
            "counterfactual_demand",
            "pct_change",
            "pct_q2.5",
            "pct_q97.5",
        ])
        .map_err(|e| io_err(e.to_string()))?;
        for r in &self.rows {
            let (lo, hi) = r.pct_interval.unwrap_or((f64::NAN, f64::NAN));
            w.write_record([
                r.country.clone(),
                format_float(r.baseline),
                format_float(r.counterfactual),
                format_float(r.pct_change),
                format_float(lo),
                format_float(hi),
            ])
            .map_err(|e| io_err(e.to_string()))?;
        }
        w.write_record([
            "TOTAL".to_string(),
            String::new(),
            String::new(),
            format_float(self.total_pct),
            String::new(),
            String::new(),
        ])
        .map_err(|e| io_err(e.to_string()))?;
        w.flush().map_err(|e| io_err(e.to_string()))
    }
}

/// Inclusive year range of one rolling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRange {
    pub start: i32,
    pub end: i32,
}

/// Refits the model on every contiguous `window`-year span, sliding by one
/// year, and summarizes each fit. Later windows reuse the previous window's
/// adapted step size and mass matrix as a warm start when dimensions agree.
pub fn rolling_windows(
    panel: &PanelDataset,
    scheme: &BinScheme,
    spec: &ModelSpec,
    config: &SamplerConfig,
    window: usize,
) -> Result<Vec<(WindowRange, SummaryTable)>, ReportError> {
    let (y0, y1) = panel.year_span();
    let span = (y1 - y0 + 1) as usize;
    if window > span {
        return Err(ReportError::WindowTooWide { window, span });
    }
    let mut out = Vec::new();
    let mut warm: Option<(usize, WarmStart)> = None;
    for start in y0..=(y1 - window as i32 + 1) {
        let range = WindowRange {
            start,
            end: start + window as i32 - 1,
        };
        let Some(sub) = panel.restrict_years(start..start + window as i32) else {
            continue;
        };
        let design = build_design(&sub, scheme)?;
        let model_dim = crate::inference::ParamLayout::new(spec, design.n_groups).dim;
        let hint = warm
            .as_ref()
            .filter(|(dim, _)| *dim == model_dim)
            .map(|(_, ws)| ws.clone());
        let (draws, next_warm) = run_chains_with_init(&design, spec, config, hint.as_ref())?;
        warm = Some((model_dim, next_warm));
        out.push((range, summarize(&draws)?));
    }
    Ok(out)
}

/// Flattens window summaries for CSV export, optionally filtered to labels
/// with a given prefix (e.g. `beta[`).
pub fn write_windows_csv(
    windows: &[(WindowRange, SummaryTable)],
    path: &Path,
    label_prefix: Option<&str>,
) -> Result<(), ReportError> {
    let io_err = |reason: String| ReportError::Io {
        path: path.display().to_string(),
        reason,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(e.to_string()))?;
    w.write_record([
        "window_start",
        "window_end",
        "parameter",
        "rhat",
        "mean",
        "sd",
        "q2.5",
        "median",
        "q97.5",
    ])
    .map_err(|e| io_err(e.to_string()))?;
    for (range, table) in windows {
        for r in &table.rows {
            if let Some(prefix) = label_prefix {
                if !r.label.starts_with(prefix) {
                    continue;
                }
            }
            w.write_record([
                range.start.to_string(),
                range.end.to_string(),
                r.label.clone(),
                format_float(r.rhat),
                format_float(r.mean),
                format_float(r.sd),
                format_float(r.q025),
                format_float(r.median),
                format_float(r.q975),
            ])
            .map_err(|e| io_err(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| io_err(e.to_string()))
}

pub fn write_koyck_csv(rows: &[KoyckRow], dropped: usize, path: &Path) -> Result<(), ReportError> {
    let io_err = |reason: String| ReportError::Io {
        path: path.display().to_string(),
        reason,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(e.to_string()))?;
    w.write_record([
        "parameter",
        "short_run_mean",
        "long_run_mean",
        "long_run_q2.5",
        "long_run_q97.5",
        "pct_per_10pp_linear",
        "pct_per_10pp_exact",
        "nonstationary_dropped",
    ])
    .map_err(|e| io_err(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            format_float(r.short_mean),
            format_float(r.long_mean),
            format_float(r.long_q025),
            format_float(r.long_q975),
            format_float(r.pct_10pp_linear),
            format_float(r.pct_10pp_exact),
            dropped.to_string(),
        ])
        .map_err(|e| io_err(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(e.to_string()))
}

pub fn write_elasticity_csv(table: &LongRunTable, path: &Path) -> Result<(), ReportError> {
    let io_err = |reason: String| ReportError::Io {
        path: path.display().to_string(),
        reason,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(e.to_string()))?;
    w.write_record([
        "parameter",
        "short_run_mean",
        "short_run_q2.5",
        "short_run_q97.5",
        "long_run_mean",
        "long_run_q2.5",
        "long_run_q97.5",
        "nonstationary_dropped",
    ])
    .map_err(|e| io_err(e.to_string()))?;
    for r in &table.rows {
        w.write_record([
            r.label.clone(),
            format_float(r.short_mean),
            format_float(r.short_q025),
            format_float(r.short_q975),
            format_float(r.long_mean),
            format_float(r.long_q025),
            format_float(r.long_q975),
            table.nonstationary_dropped.to_string(),
        ])
        .map_err(|e| io_err(e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(e.to_string()))
}

/// Builds a draws object holding constant values, used for arithmetic
/// checks and tests.
pub fn point_mass_draws(entries: &[(&str, f64)], n_iterations: usize) -> PosteriorDraws {
    let labels: Vec<String> = entries.iter().map(|(l, _)| l.to_string()).collect();
    let values: Vec<f64> = entries.iter().map(|&(_, v)| v).collect();
    let chains = vec![vec![values; n_iterations]];
    let stats = vec![
        crate::sampler::IterStats {
            divergent: false,
            treedepth: 0,
            accept_stat: 1.0,
            energy: 0.0,
        };
        n_iterations
    ];
    PosteriorDraws::new(labels, chains, stats)
}
