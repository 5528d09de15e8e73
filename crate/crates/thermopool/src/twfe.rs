//! Two-way fixed-effects baseline on day-count temperature coding.
//!
//! The estimator absorbs country and year intercepts by iterative demeaning
//! (alternating group means to a 1e-10 tolerance), runs OLS on the
//! transformed data, and reports cluster-robust standard errors clustered by
//! country with the small-sample factor `G/(G-1) * (n-1)/(n-k)` where `k`
//! counts slopes plus absorbed intercepts.
//!
//! Columns that the within transform sends to zero (country- or
//! year-constant regressors) carry no information under fixed effects; they
//! are dropped and reported, while genuine collinearity among surviving
//! columns is an error.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::exposure::{BinScheme, DayCountTable};

#[derive(Debug, Error)]
pub enum TwfeError {
    #[error("design is rank deficient after the within transform: {0}")]
    RankDeficient(String),
    #[error("need at least 2 clusters (countries), got {0}")]
    TooFewClusters(usize),
    #[error("need at least 2 distinct years, got {0}")]
    TooFewYears(usize),
    #[error("no usable rows: {0}")]
    EmptyData(String),
    #[error("{series} value for {country} year {year} must be positive, got {value}")]
    NonPositiveValue {
        series: String,
        country: String,
        year: i32,
        value: f64,
    },
}

/// Estimation input: response, regressor columns, and the two fixed-effect
/// group assignments per row.
#[derive(Debug, Clone)]
pub struct TwfeData {
    pub y: Vec<f64>,
    /// Regressor columns, each of length `y.len()`.
    pub x: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub country: Vec<usize>,
    pub year: Vec<usize>,
    pub n_countries: usize,
    pub n_years: usize,
}

/// Point estimates with cluster-robust covariance.
#[derive(Debug, Clone)]
pub struct TwfeFit {
    pub labels: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Cluster-robust covariance (by country), row-major p x p.
    pub vcov: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    /// Regressors removed because the within transform zeroed them.
    pub dropped: Vec<String>,
    pub n_obs: usize,
    pub n_countries: usize,
    pub n_years: usize,
}

impl TwfeFit {
    pub fn coefficient(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.coefficients[i])
    }
}

const DEMEAN_TOL: f64 = 1e-10;

/// Alternating country/year demeaning until every group mean is below
/// tolerance.
fn within_transform(v: &mut [f64], country: &[usize], year: &[usize], nc: usize, ny: usize) {
    for _ in 0..1000 {
        let mut worst = 0.0f64;
        for (groups, count) in [(country, nc), (year, ny)] {
            let mut sums = vec![0.0f64; count];
            let mut counts = vec![0usize; count];
            for (i, &g) in groups.iter().enumerate() {
                sums[g] += v[i];
                counts[g] += 1;
            }
            for g in 0..count {
                if counts[g] > 0 {
                    sums[g] /= counts[g] as f64;
                    worst = worst.max(sums[g].abs());
                }
            }
            for (i, &g) in groups.iter().enumerate() {
                v[i] -= sums[g];
            }
        }
        if worst < DEMEAN_TOL {
            break;
        }
    }
}

/// Fits the two-way fixed-effects regression.
pub fn twfe_fit(data: &TwfeData) -> Result<TwfeFit, TwfeError> {
    if data.n_countries < 2 {
        return Err(TwfeError::TooFewClusters(data.n_countries));
    }
    if data.n_years < 2 {
        return Err(TwfeError::TooFewYears(data.n_years));
    }
    let n = data.y.len();
    if n == 0 {
        return Err(TwfeError::EmptyData("no rows".into()));
    }

    let mut y = data.y.clone();
    within_transform(
        &mut y,
        &data.country,
        &data.year,
        data.n_countries,
        data.n_years,
    );

    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut dropped: Vec<String> = Vec::new();
    for (j, col) in data.x.iter().enumerate() {
        let scale = col.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
        let mut c = col.clone();
        within_transform(
            &mut c,
            &data.country,
            &data.year,
            data.n_countries,
            data.n_years,
        );
        if c.iter().all(|&v| v.abs() <= 1e-9 * scale) {
            dropped.push(data.labels[j].clone());
        } else {
            cols.push(c);
            labels.push(data.labels[j].clone());
        }
    }
    let p = cols.len();
    if p == 0 {
        return Err(TwfeError::EmptyData(
            "every regressor vanished under the within transform".into(),
        ));
    }

    let mut xm: DMatrix<f64> = DMatrix::zeros(n, p);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            xm[(i, j)] = v;
        }
    }
    let yv = DVector::from_vec(y);

    // Rank check on the demeaned design.
    let svd = xm.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > smax * 1e-10)
        .count();
    if rank < p {
        return Err(TwfeError::RankDeficient(format!(
            "rank {rank} < {p} retained regressors"
        )));
    }

    let xtx = xm.transpose() * &xm;
    let xty = xm.transpose() * &yv;
    let xtx_inv = xtx
        .try_inverse()
        .ok_or_else(|| TwfeError::RankDeficient("normal equations singular".into()))?;
    let beta = &xtx_inv * xty;
    let resid = &yv - &xm * &beta;

    // Cluster-robust meat: sum over countries of (X_g' e_g)(X_g' e_g)'.
    let mut meat: DMatrix<f64> = DMatrix::zeros(p, p);
    for g in 0..data.n_countries {
        let mut s: DVector<f64> = DVector::zeros(p);
        for i in 0..n {
            if data.country[i] == g {
                for j in 0..p {
                    s[j] += xm[(i, j)] * resid[i];
                }
            }
        }
        meat += &s * s.transpose();
    }
    let g = data.n_countries as f64;
    let n_f = n as f64;
    let k = (p + data.n_countries + data.n_years - 1) as f64;
    let factor = g / (g - 1.0) * (n_f - 1.0) / (n_f - k).max(1.0);
    let vcov_m = &xtx_inv * meat * &xtx_inv * factor;

    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let std_errors: Vec<f64> = (0..p).map(|j| vcov_m[(j, j)].max(0.0).sqrt()).collect();
    let t_stats: Vec<f64> = coefficients
        .iter()
        .zip(std_errors.iter())
        .map(|(&b, &se)| if se > 0.0 { b / se } else { f64::NAN })
        .collect();
    let vcov: Vec<Vec<f64>> = (0..p)
        .map(|i| (0..p).map(|j| vcov_m[(i, j)]).collect())
        .collect();

    Ok(TwfeFit {
        labels,
        coefficients,
        vcov,
        std_errors,
        t_stats,
        dropped,
        n_obs: n,
        n_countries: data.n_countries,
        n_years: data.n_years,
    })
}

/// [`twfe_fit`] with extra regressor columns appended (lagged dependent
/// variable, lagged prices, ...).
pub fn twfe_augmented(data: &TwfeData, extra: &[(String, Vec<f64>)]) -> Result<TwfeFit, TwfeError> {
    let mut augmented = data.clone();
    for (label, col) in extra {
        assert_eq!(col.len(), data.y.len(), "extra column length");
        augmented.labels.push(label.clone());
        augmented.x.push(col.clone());
    }
    twfe_fit(&augmented)
}

type Series = BTreeMap<(String, i32), f64>;

/// Assembles the baseline regression from day counts and country-level
/// series: log per-capita demand on non-reference day-count bins plus log
/// population, log GDP, and their squares. When `price` is provided the
/// lagged dependent variable and lagged log price columns are also built
/// (for the augmented variant) and rows additionally require year t-1 data.
pub fn assemble_twfe_data(
    day_counts: &DayCountTable,
    scheme: &BinScheme,
    energy: &Series,
    population: &Series,
    gdp: &Series,
    price: Option<&Series>,
) -> Result<(TwfeData, Vec<(String, Vec<f64>)>), TwfeError> {
    let check = |name: &str, c: &str, y: i32, v: f64| -> Result<f64, TwfeError> {
        if !(v > 0.0) || !v.is_finite() {
            return Err(TwfeError::NonPositiveValue {
                series: name.into(),
                country: c.into(),
                year: y,
                value: v,
            });
        }
        Ok(v)
    };
    let retained = scheme.retained_bins();
    let mut rows: Vec<(String, i32)> = Vec::new();
    for (country, year) in day_counts.keys() {
        let key = (country.clone(), *year);
        let lag_ok = match price {
            None => true,
            Some(p) => {
                p.contains_key(&(country.clone(), year - 1))
                    && energy.contains_key(&(country.clone(), year - 1))
            }
        };
        if energy.contains_key(&key)
            && population.contains_key(&key)
            && gdp.contains_key(&key)
            && lag_ok
        {
            rows.push(key);
        }
    }
    if rows.is_empty() {
        return Err(TwfeError::EmptyData(
            "no (country, year) rows shared by all inputs".into(),
        ));
    }

    let countries: Vec<String> = {
        let mut c: Vec<String> = rows.iter().map(|(c, _)| c.clone()).collect();
        c.sort();
        c.dedup();
        c
    };
    let years: Vec<i32> = {
        let mut y: Vec<i32> = rows.iter().map(|&(_, y)| y).collect();
        y.sort_unstable();
        y.dedup();
        y
    };
    let cidx: BTreeMap<&str, usize> = countries.iter().map(|c| c.as_str()).zip(0..).collect();
    let yidx: BTreeMap<i32, usize> = years.iter().copied().zip(0..).collect();

    let mut y = Vec::with_capacity(rows.len());
    let mut country = Vec::with_capacity(rows.len());
    let mut year_col = Vec::with_capacity(rows.len());
    let mut x: Vec<Vec<f64>> = vec![Vec::with_capacity(rows.len()); retained.len() + 4];
    let mut extra: Vec<(String, Vec<f64>)> = Vec::new();
    if price.is_some() {
        extra.push(("log_demand_lag1".into(), Vec::new()));
        extra.push(("log_price_lag1".into(), Vec::new()));
    }
    for (c, yr) in &rows {
        let key = (c.clone(), *yr);
        let demand = check("demand", c, *yr, energy[&key])?;
        let pop = check("population", c, *yr, population[&key])?;
        let g = check("gdp", c, *yr, gdp[&key])?;
        y.push((demand / pop).ln());
        country.push(cidx[c.as_str()]);
        year_col.push(yidx[yr]);
        let counts = day_counts
            .row(c, *yr)
            .expect("row key came from day_counts");
        for (j, &b) in retained.iter().enumerate() {
            x[j].push(counts[b]);
        }
        let lp = pop.ln();
        let lg = g.ln();
        x[retained.len()].push(lp);
        x[retained.len() + 1].push(lp * lp);
        x[retained.len() + 2].push(lg);
        x[retained.len() + 3].push(lg * lg);
        if let Some(p) = price {
            let lag_key = (c.clone(), yr - 1);
            let dlag = check("demand", c, yr - 1, energy[&lag_key])?;
            let plag = check("price", c, yr - 1, p[&lag_key])?;
            extra[0].1.push(dlag.ln());
            extra[1].1.push(plag.ln());
        }
    }

    let mut labels: Vec<String> = retained
        .iter()
        .map(|&b| format!("days[{}]", scheme.bin_label(b)))
        .collect();
    labels.extend(
        ["log_pop", "log_pop_sq", "log_gdp", "log_gdp_sq"]
            .iter()
            .map(|s| s.to_string()),
    );

    Ok((
        TwfeData {
            y,
            x,
            labels,
            country,
            year: year_col,
            n_countries: countries.len(),
            n_years: years.len(),
        },
        extra,
    ))
}
