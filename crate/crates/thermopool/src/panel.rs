//! Assembly of the estimation panel and the regression design matrix.
//!
//! Demand, GDP and price series arrive as `country,year,value` CSVs. The
//! panel inner-joins them with the exposure table, builds one-year lags of
//! log demand and log price, and drops rows with any missing ingredient
//! (listwise deletion), keeping a census of why rows were dropped.
//!
//! The design matrix drops the scheme's reference-bin columns and centers
//! the covariates; centers are recorded for back-transformation.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::exposure::{BinScheme, ExposureTable};
#[cfg(test)]
use crate::util::mean;
use crate::util::Kahan;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("{series} value for {country} year {year} must be positive, got {value}")]
    NonPositiveValue {
        series: String,
        country: String,
        year: i32,
        value: f64,
    },
    #[error("no rows remain after the join; drop census: {0:?}")]
    EmptyPanel(BTreeMap<String, usize>),
    #[error("exposure table has {found} bins but the scheme has {expected}")]
    SchemeMismatch { found: usize, expected: usize },
    #[error("failed to read {path}: {reason}")]
    Io { path: String, reason: String },
}

/// One retained estimation row.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub country: String,
    pub year: i32,
    pub log_y: f64,
    pub log_y_lag1: f64,
    pub log_gdp: f64,
    pub log_price_lag1: f64,
    /// Full K-vector of exposure fractions, reference bins included.
    pub exposure: Vec<f64>,
}

/// The assembled panel: rows sorted by (country, year), plus group indexing
/// and the dropped-row census.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    pub rows: Vec<PanelRow>,
    pub country_index: BTreeMap<String, usize>,
    pub n_countries: usize,
    pub years_per_country: BTreeMap<String, usize>,
    pub drop_census: BTreeMap<String, usize>,
    pub k: usize,
}

impl PanelDataset {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Smallest and largest row year.
    pub fn year_span(&self) -> (i32, i32) {
        let min = self.rows.iter().map(|r| r.year).min().unwrap();
        let max = self.rows.iter().map(|r| r.year).max().unwrap();
        (min, max)
    }

    /// Sub-panel restricted to `years`, re-indexed. Returns None when no
    /// rows fall inside the window.
    pub fn restrict_years(&self, years: std::ops::Range<i32>) -> Option<PanelDataset> {
        let rows: Vec<PanelRow> = self
            .rows
            .iter()
            .filter(|r| years.contains(&r.year))
            .cloned()
            .collect();
        if rows.is_empty() {
            return None;
        }
        Some(Self::from_rows(rows, self.k))
    }

    /// Rebuilds indexes from already-validated rows.
    pub fn from_rows(mut rows: Vec<PanelRow>, k: usize) -> PanelDataset {
        rows.sort_by(|a, b| (a.country.as_str(), a.year).cmp(&(b.country.as_str(), b.year)));
        let mut country_index = BTreeMap::new();
        for row in &rows {
            let next = country_index.len();
            country_index.entry(row.country.clone()).or_insert(next);
        }
        // Group ids follow sorted country order.
        let mut names: Vec<String> = country_index.keys().cloned().collect();
        names.sort();
        let country_index: BTreeMap<String, usize> =
            names.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
        let mut years_per_country = BTreeMap::new();
        for row in &rows {
            *years_per_country
                .entry(row.country.clone())
                .or_insert(0usize) += 1;
        }
        let n_countries = country_index.len();
        PanelDataset {
            rows,
            country_index,
            n_countries,
            years_per_country,
            drop_census: BTreeMap::new(),
            k,
        }
    }
}

/// Reads a `country,year,value` CSV into a sorted map.
pub fn read_series(path: &Path) -> Result<BTreeMap<(String, i32), f64>, PanelError> {
    let io_err = |reason: String| PanelError::Io {
        path: path.display().to_string(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| io_err(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (ic, iy, iv) = match (col("country"), col("year"), col("value")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(io_err("expected columns country,year,value".into())),
    };
    let mut out = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| io_err(e.to_string()))?;
        let country = row.get(ic).unwrap_or("").trim().to_string();
        let year: i32 = row
            .get(iy)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| io_err(format!("line {line}: bad year")))?;
        let value: f64 = row
            .get(iv)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| io_err(format!("line {line}: bad value")))?;
        if country.is_empty() {
            return Err(io_err(format!("line {line}: empty country")));
        }
        if out.insert((country, year), value).is_some() {
            return Err(io_err(format!("line {line}: duplicate (country, year)")));
        }
    }
    Ok(out)
}

/// Joins the three series with the exposure table. See the module docs for
/// the lag and deletion rules.
pub fn assemble_panel(
    energy: &Path,
    gdp: &Path,
    price: &Path,
    exposure: &ExposureTable,
) -> Result<PanelDataset, PanelError> {
    let energy_s = read_series(energy)?;
    let gdp_s = read_series(gdp)?;
    let price_s = read_series(price)?;
    assemble_panel_from_series(&energy_s, &gdp_s, &price_s, exposure)
}

type Series = BTreeMap<(String, i32), f64>;

/// In-memory variant of [`assemble_panel`].
pub fn assemble_panel_from_series(
    energy: &Series,
    gdp: &Series,
    price: &Series,
    exposure: &ExposureTable,
) -> Result<PanelDataset, PanelError> {
    let check_positive = |name: &str, series: &Series| -> Result<(), PanelError> {
        for (&(ref country, year), &value) in series.iter() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(PanelError::NonPositiveValue {
                    series: name.to_string(),
                    country: country.clone(),
                    year,
                    value,
                });
            }
        }
        Ok(())
    };
    check_positive("demand", energy)?;
    check_positive("gdp", gdp)?;
    check_positive("price", price)?;

    let mut rows = Vec::new();
    let mut census: BTreeMap<String, usize> = BTreeMap::new();
    let drop = |reason: &str, census: &mut BTreeMap<String, usize>| {
        *census.entry(reason.to_string()).or_insert(0) += 1;
    };

    for (&(ref country, year), &demand) in energy.iter() {
        let lag_key = (country.clone(), year - 1);
        let Some(&demand_lag) = energy.get(&lag_key) else {
            drop("missing_lagged_demand", &mut census);
            continue;
        };
        let Some(&gdp_v) = gdp.get(&(country.clone(), year)) else {
            drop("missing_gdp", &mut census);
            continue;
        };
        let Some(&price_lag) = price.get(&lag_key) else {
            drop("missing_lagged_price", &mut census);
            continue;
        };
        let Some(erow) = exposure.row(country, year) else {
            drop("missing_exposure", &mut census);
            continue;
        };
        rows.push(PanelRow {
            country: country.clone(),
            year,
            log_y: demand.ln(),
            log_y_lag1: demand_lag.ln(),
            log_gdp: gdp_v.ln(),
            log_price_lag1: price_lag.ln(),
            exposure: erow.to_vec(),
        });
    }

    if rows.is_empty() {
        return Err(PanelError::EmptyPanel(census));
    }
    let mut panel = PanelDataset::from_rows(rows, exposure.k());
    panel.drop_census = census;
    Ok(panel)
}

/// Column labels for the design matrix blocks.
#[derive(Debug, Clone)]
pub struct DesignLabels {
    pub exposure: Vec<String>,
    pub covariates: Vec<String>,
}

/// The regression design: response, lag column, exposure block with the
/// reference bins dropped, centered covariates, and group ids.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub n: usize,
    pub k_eff: usize,
    pub l: usize,
    pub response: Vec<f64>,
    pub lag: Vec<f64>,
    /// Row-major `n x k_eff`.
    pub exposure: Vec<f64>,
    /// Row-major `n x l`, centered to column mean zero.
    pub covariates: Vec<f64>,
    pub covariate_centers: Vec<f64>,
    pub row_group: Vec<usize>,
    pub n_groups: usize,
    pub group_names: Vec<String>,
    pub row_years: Vec<i32>,
    pub labels: DesignLabels,
    /// Non-fatal rank warnings (constant retained columns).
    pub warnings: Vec<String>,
    /// Bin indices of the retained exposure columns in the original scheme.
    pub retained_bins: Vec<usize>,
}

impl DesignMatrix {
    pub fn exposure_at(&self, row: usize, col: usize) -> f64 {
        self.exposure[row * self.k_eff + col]
    }

    pub fn covariate_at(&self, row: usize, col: usize) -> f64 {
        self.covariates[row * self.l + col]
    }
}

/// Builds the design matrix from a panel and its bin scheme.
pub fn build_design(panel: &PanelDataset, scheme: &BinScheme) -> Result<DesignMatrix, PanelError> {
    if panel.k != scheme.k {
        return Err(PanelError::SchemeMismatch {
            found: panel.k,
            expected: scheme.k,
        });
    }
    let retained = scheme.retained_bins();
    let k_eff = retained.len();
    let n = panel.rows.len();
    let l = 2;

    let mut response = Vec::with_capacity(n);
    let mut lag = Vec::with_capacity(n);
    let mut exposure = Vec::with_capacity(n * k_eff);
    let mut covariates = Vec::with_capacity(n * l);
    let mut row_group = Vec::with_capacity(n);
    let mut row_years = Vec::with_capacity(n);
    for row in &panel.rows {
        response.push(row.log_y);
        lag.push(row.log_y_lag1);
        for &b in &retained {
            exposure.push(row.exposure[b]);
        }
        covariates.push(row.log_gdp);
        covariates.push(row.log_price_lag1);
        row_group.push(panel.country_index[&row.country]);
        row_years.push(row.year);
    }

    // Center covariates, record centers.
    let mut covariate_centers = Vec::with_capacity(l);
    for j in 0..l {
        let mut acc = Kahan::default();
        for i in 0..n {
            acc.add(covariates[i * l + j]);
        }
        let center = acc.value() / n as f64;
        covariate_centers.push(center);
        for i in 0..n {
            covariates[i * l + j] -= center;
        }
    }

    let labels = DesignLabels {
        exposure: retained.iter().map(|&b| scheme.bin_label(b)).collect(),
        covariates: vec!["log_gdp".to_string(), "log_price_lag1".to_string()],
    };

    // Rank warnings: a retained column that never varies, globally or within
    // one country, cannot separate its coefficient from the intercepts.
    let mut warnings = Vec::new();
    let mut group_names = vec![String::new(); panel.n_countries];
    for (name, &g) in &panel.country_index {
        group_names[g] = name.clone();
    }
    for (j, label) in labels.exposure.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| exposure[i * k_eff + j]).collect();
        if is_constant(&col) {
            warnings.push(format!("exposure column {label} is constant"));
            continue;
        }
        for (g, gname) in group_names.iter().enumerate() {
            let sub: Vec<f64> = (0..n)
                .filter(|&i| row_group[i] == g)
                .map(|i| exposure[i * k_eff + j])
                .collect();
            if sub.len() > 1 && is_constant(&sub) {
                warnings.push(format!(
                    "exposure column {label} is constant within country {gname}"
                ));
            }
        }
    }
    for (j, label) in labels.covariates.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| covariates[i * l + j]).collect();
        if is_constant(&col) {
            warnings.push(format!("covariate column {label} is constant"));
        }
    }

    Ok(DesignMatrix {
        n,
        k_eff,
        l,
        response,
        lag,
        exposure,
        covariates,
        covariate_centers,
        row_group,
        n_groups: panel.n_countries,
        group_names,
        row_years,
        labels,
        warnings,
        retained_bins: retained,
    })
}

fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exposure::make_bin_scheme;
    use rand::prelude::*;

    fn uniform_exposure(
        countries: &[&str],
        years: std::ops::RangeInclusive<i32>,
        k: usize,
    ) -> ExposureTable {
        let mut values = BTreeMap::new();
        for &c in countries {
            for y in years.clone() {
                values.insert((c.to_string(), y), vec![1.0 / k as f64; k]);
            }
        }
        ExposureTable::from_values(k, values)
    }

    fn series(entries: &[(&str, i32, f64)]) -> BTreeMap<(String, i32), f64> {
        entries
            .iter()
            .map(|&(c, y, v)| ((c.to_string(), y), v))
            .collect()
    }

    #[test]
    fn lag_construction_drops_first_year() {
        let energy = series(&[
            ("AAA", 2000, 10.0),
            ("AAA", 2001, 11.0),
            ("AAA", 2002, 12.0),
        ]);
        let gdp = series(&[("AAA", 2000, 1.0), ("AAA", 2001, 2.0), ("AAA", 2002, 3.0)]);
        let price = series(&[("AAA", 2000, 5.0), ("AAA", 2001, 6.0), ("AAA", 2002, 7.0)]);
        let exposure = uniform_exposure(&["AAA"], 2000..=2002, 12);
        let panel = assemble_panel_from_series(&energy, &gdp, &price, &exposure).unwrap();
        assert_eq!(panel.n_rows(), 2);
        assert_eq!(panel.rows[0].year, 2001);
        assert_eq!(panel.rows[0].log_y_lag1, 10.0f64.ln());
        assert_eq!(panel.rows[0].log_price_lag1, 5.0f64.ln());
        assert_eq!(panel.rows[1].year, 2002);
        assert_eq!(panel.drop_census["missing_lagged_demand"], 1);
    }

    #[test]
    fn zero_demand_is_rejected() {
        let energy = series(&[("AAA", 2000, 0.0), ("AAA", 2001, 11.0)]);
        let gdp = series(&[("AAA", 2000, 1.0), ("AAA", 2001, 2.0)]);
        let price = series(&[("AAA", 2000, 5.0), ("AAA", 2001, 6.0)]);
        let exposure = uniform_exposure(&["AAA"], 2000..=2001, 12);
        let err = assemble_panel_from_series(&energy, &gdp, &price, &exposure).unwrap_err();
        assert!(matches!(err, PanelError::NonPositiveValue { .. }));
    }

    #[test]
    fn empty_panel_is_an_error() {
        let energy = series(&[("AAA", 2000, 1.0)]);
        let gdp = series(&[("AAA", 2000, 1.0)]);
        let price = series(&[("AAA", 2000, 1.0)]);
        let exposure = uniform_exposure(&["AAA"], 2000..=2000, 12);
        let err = assemble_panel_from_series(&energy, &gdp, &price, &exposure).unwrap_err();
        assert!(matches!(err, PanelError::EmptyPanel(_)));
    }

    /// Random-deletion join against an independently coded oracle of the
    /// retained (country, year) set.
    #[test]
    fn join_matches_independent_oracle() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        let countries = ["AAA", "BBB", "CCC", "DDD", "EEE"];
        let years = 2000..=2010;
        let mut energy = BTreeMap::new();
        let mut gdp = BTreeMap::new();
        let mut price = BTreeMap::new();
        for &c in &countries {
            for y in years.clone() {
                if rng.gen_bool(0.85) {
                    energy.insert((c.to_string(), y), rng.gen_range(1.0..100.0));
                }
                if rng.gen_bool(0.85) {
                    gdp.insert((c.to_string(), y), rng.gen_range(1.0..100.0));
                }
                if rng.gen_bool(0.85) {
                    price.insert((c.to_string(), y), rng.gen_range(1.0..100.0));
                }
            }
        }
        let exposure = uniform_exposure(&countries, years.clone(), 4);
        let panel = assemble_panel_from_series(&energy, &gdp, &price, &exposure).unwrap();

        // Oracle: set logic only.
        let mut expect = Vec::new();
        for &c in &countries {
            for y in years.clone() {
                let ok = energy.contains_key(&(c.to_string(), y))
                    && energy.contains_key(&(c.to_string(), y - 1))
                    && gdp.contains_key(&(c.to_string(), y))
                    && price.contains_key(&(c.to_string(), y - 1));
                if ok {
                    expect.push((c.to_string(), y));
                }
            }
        }
        expect.sort();
        let got: Vec<(String, i32)> = panel
            .rows
            .iter()
            .map(|r| (r.country.clone(), r.year))
            .collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn join_is_idempotent() {
        let energy = series(&[
            ("AAA", 2000, 10.0),
            ("AAA", 2001, 11.0),
            ("BBB", 2000, 3.0),
            ("BBB", 2001, 4.0),
        ]);
        let gdp = series(&[
            ("AAA", 2000, 1.0),
            ("AAA", 2001, 2.0),
            ("BBB", 2000, 1.0),
            ("BBB", 2001, 2.0),
        ]);
        let price = series(&[
            ("AAA", 2000, 5.0),
            ("AAA", 2001, 6.0),
            ("BBB", 2000, 5.0),
            ("BBB", 2001, 6.0),
        ]);
        let exposure = uniform_exposure(&["AAA", "BBB"], 2000..=2001, 12);
        let a = assemble_panel_from_series(&energy, &gdp, &price, &exposure).unwrap();
        let b = assemble_panel_from_series(&energy, &gdp, &price, &exposure).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    fn toy_panel_with_exposure(k: usize, rows: Vec<(&str, i32, Vec<f64>)>) -> PanelDataset {
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, (c, y, exposure))| PanelRow {
                country: c.to_string(),
                year: y,
                log_y: i as f64 * 0.1,
                log_y_lag1: i as f64 * 0.05,
                log_gdp: 1.0 + i as f64,
                log_price_lag1: 2.0 - i as f64 * 0.5,
                exposure,
            })
            .collect();
        PanelDataset::from_rows(rows, k)
    }

    #[test]
    fn design_has_ten_exposure_columns_for_width_35() {
        let scheme = make_bin_scheme(3.5, -5.0, 30.0).unwrap();
        let mut rows = Vec::new();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        for c in ["AAA", "BBB"] {
            for y in 2000..2005 {
                let mut e: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = e.iter().sum();
                e.iter_mut().for_each(|v| *v /= s);
                rows.push((c, y, e));
            }
        }
        let panel = toy_panel_with_exposure(12, rows);
        let design = build_design(&panel, &scheme).unwrap();
        assert_eq!(design.k_eff, 10);
        assert_eq!(design.labels.exposure.len(), 10);
        assert!(!design
            .labels
            .exposure
            .iter()
            .any(|l| l.contains("16_to_19.5")));
        assert!(design.warnings.is_empty(), "{:?}", design.warnings);
    }

    #[test]
    fn constant_column_within_country_raises_rank_warning() {
        let scheme = make_bin_scheme(35.0, -5.0, 30.0).unwrap(); // 3 bins, ref = middle
                                                                 // AAA always fully in bin 0; BBB varies.
        let rows = vec![
            ("AAA", 2000, vec![1.0, 0.0, 0.0]),
            ("AAA", 2001, vec![1.0, 0.0, 0.0]),
            ("BBB", 2000, vec![0.2, 0.5, 0.3]),
            ("BBB", 2001, vec![0.4, 0.4, 0.2]),
        ];
        let panel = toy_panel_with_exposure(3, rows);
        let design = build_design(&panel, &scheme).unwrap();
        assert!(
            design
                .warnings
                .iter()
                .any(|w| w.contains("constant within country AAA")),
            "{:?}",
            design.warnings
        );
    }

    #[test]
    fn covariates_are_centered() {
        let scheme = make_bin_scheme(3.5, -5.0, 30.0).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        for c in ["AAA", "BBB", "CCC"] {
            for y in 2000..2010 {
                let mut e: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = e.iter().sum();
                e.iter_mut().for_each(|v| *v /= s);
                rows.push((c, y, e));
            }
        }
        let panel = toy_panel_with_exposure(12, rows);
        let design = build_design(&panel, &scheme).unwrap();
        for j in 0..design.l {
            let col: Vec<f64> = (0..design.n).map(|i| design.covariate_at(i, j)).collect();
            assert!(mean(&col).abs() <= 1e-12);
        }
        // Retained exposure + reference fractions sum to one row-wise.
        let refs: Vec<usize> = scheme.reference_bins.iter().copied().collect();
        for (i, row) in panel.rows.iter().enumerate() {
            let retained_sum: f64 = (0..design.k_eff).map(|j| design.exposure_at(i, j)).sum();
            let ref_sum: f64 = refs.iter().map(|&b| row.exposure[b]).sum();
            assert!((retained_sum + ref_sum - 1.0).abs() <= 1e-12);
        }
    }
}
