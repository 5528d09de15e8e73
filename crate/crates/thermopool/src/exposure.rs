//! Temperature bin schemes and population-weighted exposure indices.
//!
//! The exposure index for country `i`, year `t`, bin `k` is the average
//! fraction of the country's population exposed to temperatures in bin `k`
//! over the retained (daytime) three-hour slots of the year:
//!
//! ```text
//! w[i,j,t] = p[j,t] / sum_{j in J_i} p[j,t]
//! f[i,h,t,k] = sum_j w[i,j,t] * 1{bin(T[i,j,h,t]) = k}
//! F[i,t,k] = (1/H_t) * sum_h f[i,h,t,k]
//! ```
//!
//! Retention is decided per (cell, timestamp): a record counts when its local
//! hour: UTC hour plus the solar offset `round(lon / 15)`, wrapped mod 24 -
//! falls inside the day window (default [6, 21)). With per-cell offsets a
//! single UTC timestamp can be daytime for one cell and night for another, so
//! the average normalizes by the total retained population weight rather than
//! a bare timestamp count; the two coincide whenever all cells of a country
//! share one offset, and the bins always sum to one either way.
//!
//! Accumulation is compensated and runs in (cell_id, timestamp) order, so
//! results are bit-identical under input-row permutation.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use chrono::{Datelike, Timelike};
use thiserror::Error;

use crate::gridio::{format_float, CountryMap, PopulationGrid, TemperatureGrid};
use crate::util::Kahan;

#[derive(Debug, Error)]
pub enum ExposureError {
    #[error("bin width must be positive and finite, got {0}")]
    InvalidWidth(f64),
    #[error("inverted bin range: lower {lower} must be below upper {upper}")]
    InvertedRange { lower: f64, upper: f64 },
    #[error("country {country} has zero total population in year {year}")]
    ZeroPopulation { country: String, year: i32 },
    #[error("country {country} year {year} has no records inside the day window")]
    NoRetainedHours { country: String, year: i32 },
    #[error("day window [{start}, {end}) is empty or out of range")]
    InvalidDayWindow { start: u32, end: u32 },
    #[error("year {0} is not covered by both grids")]
    YearNotCovered(i32),
    #[error("exposure file does not match the bin scheme: {0}")]
    SchemeMismatch(String),
    #[error("failed to read {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Ordered temperature bin edges with two open outer bins.
///
/// Bin 0 is `(-inf, edges[0])`, interior bin `i` is `[edges[i-1], edges[i])`,
/// and bin `K-1` is `[edges.last(), +inf)`. `reference_bins` are the bins
/// omitted from the design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BinScheme {
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
    pub edges: Vec<f64>,
    pub k: usize,
    pub reference_bins: BTreeSet<usize>,
}

/// Builds a bin scheme with interior bins of equal `width` starting at
/// `lower`. When `width` does not divide the range, the final interior bin
/// absorbs the remainder and ends exactly at `upper`.
///
/// The default reference is the set of bins that exactly tile [16, 23) when
/// the scheme contains one, else the single bin containing 19.5.
pub fn make_bin_scheme(width: f64, lower: f64, upper: f64) -> Result<BinScheme, ExposureError> {
    if !width.is_finite() || width <= 0.0 {
        return Err(ExposureError::InvalidWidth(width));
    }
    if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
        return Err(ExposureError::InvertedRange { lower, upper });
    }
    let n_interior = (((upper - lower) / width) + 1e-9).floor().max(1.0) as usize;
    let mut edges = Vec::with_capacity(n_interior + 1);
    for i in 0..n_interior {
        edges.push(lower + i as f64 * width);
    }
    edges.push(upper);
    let k = n_interior + 2;

    let mut scheme = BinScheme {
        lower,
        upper,
        width,
        edges,
        k,
        reference_bins: BTreeSet::new(),
    };
    scheme.reference_bins = default_reference_bins(&scheme);
    Ok(scheme)
}

fn default_reference_bins(scheme: &BinScheme) -> BTreeSet<usize> {
    const REF_LO: f64 = 16.0;
    const REF_HI: f64 = 23.0;
    let tol = 1e-9;
    let mut tiling: Vec<usize> = Vec::new();
    for bin in 1..scheme.k - 1 {
        let (lo, hi) = scheme.bin_bounds(bin);
        if lo >= REF_LO - tol && hi <= REF_HI + tol {
            tiling.push(bin);
        }
    }
    if !tiling.is_empty() {
        let lo = scheme.bin_bounds(tiling[0]).0;
        let hi = scheme.bin_bounds(*tiling.last().unwrap()).1;
        if (lo - REF_LO).abs() < tol && (hi - REF_HI).abs() < tol {
            return tiling.into_iter().collect();
        }
    }
    let mid = (REF_LO + REF_HI) / 2.0;
    [assign_bin(mid, scheme)].into_iter().collect()
}

impl BinScheme {
    /// Replaces the reference bins with the single bin containing `temp_c`.
    pub fn with_reference_containing(mut self, temp_c: f64) -> Self {
        self.reference_bins = [assign_bin(temp_c, &self)].into_iter().collect();
        self
    }

    /// Bounds of bin `k` with infinite outer edges.
    pub fn bin_bounds(&self, k: usize) -> (f64, f64) {
        assert!(k < self.k, "bin index {k} out of range");
        if k == 0 {
            (f64::NEG_INFINITY, self.edges[0])
        } else if k == self.k - 1 {
            (*self.edges.last().unwrap(), f64::INFINITY)
        } else {
            (self.edges[k - 1], self.edges[k])
        }
    }

    pub fn bin_label(&self, k: usize) -> String {
        let (lo, hi) = self.bin_bounds(k);
        if lo.is_infinite() {
            format!("below_{}", format_float(hi))
        } else if hi.is_infinite() {
            format!("above_{}", format_float(lo))
        } else {
            format!("{}_to_{}", format_float(lo), format_float(hi))
        }
    }

    /// Bin indices kept in the design matrix, in ascending order.
    pub fn retained_bins(&self) -> Vec<usize> {
        (0..self.k)
            .filter(|b| !self.reference_bins.contains(b))
            .collect()
    }
}

/// Assigns a finite temperature to its unique bin. Interior bins are
/// half-open `[lo, hi)`.
pub fn assign_bin(temp_c: f64, scheme: &BinScheme) -> usize {
    debug_assert!(temp_c.is_finite());
    // partition_point returns the count of edges <= temp, which is exactly
    // the index of the bin whose right edge is the first one above temp.
    scheme.edges.partition_point(|&e| e <= temp_c)
}

/// Local-hour interval `[start, end)` used to retain daytime records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayWindow {
    pub start_hour: u32,
    pub end_hour: u32,
}

impl Default for DayWindow {
    fn default() -> Self {
        Self {
            start_hour: 6,
            end_hour: 21,
        }
    }
}

impl DayWindow {
    pub fn new(start_hour: u32, end_hour: u32) -> Result<Self, ExposureError> {
        if start_hour >= end_hour || end_hour > 24 {
            return Err(ExposureError::InvalidDayWindow {
                start: start_hour,
                end: end_hour,
            });
        }
        Ok(Self {
            start_hour,
            end_hour,
        })
    }

    fn contains(&self, local_hour: u32) -> bool {
        local_hour >= self.start_hour && local_hour < self.end_hour
    }
}

/// Solar time-zone offset in whole hours for a longitude.
pub fn solar_offset_hours(lon: f64) -> i64 {
    (lon / 15.0).round() as i64
}

/// Per (country, year, bin) average population fraction, plus the retained
/// timestamp count per (country, year).
#[derive(Debug, Clone)]
pub struct ExposureTable {
    k: usize,
    values: BTreeMap<(String, i32), Vec<f64>>,
    hours: BTreeMap<(String, i32), u64>,
}

impl ExposureTable {
    /// Builds a table from precomputed per-(country, year) fraction rows.
    /// Every row must have length `k`; retained-hour counts are unknown (0).
    pub fn from_values(k: usize, values: BTreeMap<(String, i32), Vec<f64>>) -> Self {
        assert!(values.values().all(|v| v.len() == k));
        let hours = values.keys().map(|key| (key.clone(), 0u64)).collect();
        Self { k, values, hours }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fraction(&self, country: &str, year: i32, bin: usize) -> Option<f64> {
        self.values
            .get(&(country.to_string(), year))
            .map(|v| v[bin])
    }

    pub fn row(&self, country: &str, year: i32) -> Option<&[f64]> {
        self.values
            .get(&(country.to_string(), year))
            .map(Vec::as_slice)
    }

    pub fn hours_count(&self, country: &str, year: i32) -> Option<u64> {
        self.hours.get(&(country.to_string(), year)).copied()
    }

    /// Country-year keys in sorted order.
    pub fn keys(&self) -> impl Iterator<Item = &(String, i32)> {
        self.values.keys()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Writes `country,year,bin_lo,bin_hi,fraction` rows in sorted order.
    pub fn write_csv(&self, scheme: &BinScheme, path: &Path) -> Result<(), ExposureError> {
        let io_err = |e: String| ExposureError::Io {
            path: path.display().to_string(),
            reason: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(e.to_string()))?;
        w.write_record(["country", "year", "bin_lo", "bin_hi", "fraction"])
            .map_err(|e| io_err(e.to_string()))?;
        for ((country, year), fractions) in &self.values {
            for (bin, &f) in fractions.iter().enumerate() {
                let (lo, hi) = scheme.bin_bounds(bin);
                w.write_record([
                    country.clone(),
                    year.to_string(),
                    format_float(lo),
                    format_float(hi),
                    format_float(f),
                ])
                .map_err(|e| io_err(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| io_err(e.to_string()))
    }

    /// Reads a table written by [`ExposureTable::write_csv`], checking that
    /// the bins match `scheme`.
    pub fn read_csv(path: &Path, scheme: &BinScheme) -> Result<Self, ExposureError> {
        let io_err = |e: String| ExposureError::Io {
            path: path.display().to_string(),
            reason: e,
        };
        let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(e.to_string()))?;
        let mut values: BTreeMap<(String, i32), Vec<f64>> = BTreeMap::new();
        for row in reader.records() {
            let row = row.map_err(|e| io_err(e.to_string()))?;
            if row.len() < 5 {
                return Err(io_err("expected 5 columns".into()));
            }
            let country = row[0].to_string();
            let year: i32 = row[1]
                .parse()
                .map_err(|_| io_err(format!("bad year {:?}", &row[1])))?;
            let lo: f64 = row[2]
                .parse()
                .map_err(|_| io_err(format!("bad bin_lo {:?}", &row[2])))?;
            let hi: f64 = row[3]
                .parse()
                .map_err(|_| io_err(format!("bad bin_hi {:?}", &row[3])))?;
            let frac: f64 = row[4]
                .parse()
                .map_err(|_| io_err(format!("bad fraction {:?}", &row[4])))?;
            let mid = if lo.is_infinite() {
                hi - 1.0
            } else if hi.is_infinite() {
                lo + 1.0
            } else {
                0.5 * (lo + hi)
            };
            let bin = assign_bin(mid, scheme);
            let (slo, shi) = scheme.bin_bounds(bin);
            let close = |a: f64, b: f64| (a == b) || (a - b).abs() < 1e-9;
            if !close(slo, lo) || !close(shi, hi) {
                return Err(ExposureError::SchemeMismatch(format!(
                    "file bin [{lo}, {hi}) does not match scheme bin [{slo}, {shi})"
                )));
            }
            let entry = values
                .entry((country, year))
                .or_insert_with(|| vec![f64::NAN; scheme.k]);
            entry[bin] = frac;
        }
        for ((country, year), row) in &values {
            if row.iter().any(|v| v.is_nan()) {
                return Err(ExposureError::SchemeMismatch(format!(
                    "country {country} year {year} is missing bins"
                )));
            }
        }
        let hours = values.keys().map(|k| (k.clone(), 0)).collect();
        Ok(Self {
            k: scheme.k,
            values,
            hours,
        })
    }
}

/// Per (country, year, bin) day counts from population-weighted daily means.
#[derive(Debug, Clone)]
pub struct DayCountTable {
    k: usize,
    values: BTreeMap<(String, i32), Vec<f64>>,
}

impl DayCountTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, country: &str, year: i32) -> Option<&[f64]> {
        self.values
            .get(&(country.to_string(), year))
            .map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &(String, i32)> {
        self.values.keys()
    }
}

struct CountryIndex {
    cell_country: BTreeMap<u64, usize>,
    names: Vec<String>,
}

fn index_countries(tg: &TemperatureGrid, cm: &CountryMap) -> CountryIndex {
    let mut names: Vec<String> = cm.countries().into_iter().map(String::from).collect();
    names.sort();
    let pos: BTreeMap<&str, usize> = names.iter().map(|n| n.as_str()).zip(0..).collect();
    let mut cell_country = BTreeMap::new();
    for cell in tg.cells() {
        if let Some(c) = cm.country_of(cell) {
            cell_country.insert(cell, pos[c]);
        }
    }
    CountryIndex {
        cell_country,
        names,
    }
}

/// Computes the exposure table. Requires [`crate::gridio::validate_alignment`]
/// to have passed: unmapped cells are skipped here, missing population counts
/// as zero weight.
pub fn compute_exposure(
    tg: &TemperatureGrid,
    pg: &PopulationGrid,
    cm: &CountryMap,
    scheme: &BinScheme,
    day_window: DayWindow,
) -> Result<ExposureTable, ExposureError> {
    if day_window.start_hour >= day_window.end_hour || day_window.end_hour > 24 {
        return Err(ExposureError::InvalidDayWindow {
            start: day_window.start_hour,
            end: day_window.end_hour,
        });
    }
    let index = index_countries(tg, cm);
    let offsets: BTreeMap<u64, i64> = tg
        .cell_meta()
        .iter()
        .map(|(&cell, &(_, lon))| (cell, solar_offset_hours(lon)))
        .collect();

    struct Acc {
        bins: Vec<Kahan>,
        weight: Kahan,
        stamps: BTreeSet<i64>,
    }
    let mut acc: BTreeMap<(usize, i32), Acc> = BTreeMap::new();
    let mut seen: BTreeSet<(usize, i32)> = BTreeSet::new();

    // Records are sorted by (cell_id, timestamp), so accumulation order is
    // independent of input-row order.
    for r in tg.records() {
        let Some(&ci) = index.cell_country.get(&r.cell_id) else {
            continue;
        };
        let year = r.timestamp.year();
        seen.insert((ci, year));
        let local = (r.timestamp.hour() as i64 + offsets[&r.cell_id]).rem_euclid(24) as u32;
        if !day_window.contains(local) {
            continue;
        }
        let p = pg.get(r.cell_id, year).unwrap_or(0.0);
        let slot = acc.entry((ci, year)).or_insert_with(|| Acc {
            bins: vec![Kahan::default(); scheme.k],
            weight: Kahan::default(),
            stamps: BTreeSet::new(),
        });
        slot.bins[assign_bin(r.temp_c, scheme)].add(p);
        slot.weight.add(p);
        slot.stamps.insert(r.timestamp.timestamp());
    }

    for &(ci, year) in &seen {
        if !acc.contains_key(&(ci, year)) {
            return Err(ExposureError::NoRetainedHours {
                country: index.names[ci].clone(),
                year,
            });
        }
    }

    let mut values = BTreeMap::new();
    let mut hours = BTreeMap::new();
    for ((ci, year), slot) in acc {
        let den = slot.weight.value();
        let country = index.names[ci].clone();
        if den <= 0.0 {
            return Err(ExposureError::ZeroPopulation { country, year });
        }
        let fractions: Vec<f64> = slot.bins.iter().map(|b| b.value() / den).collect();
        hours.insert((country.clone(), year), slot.stamps.len() as u64);
        values.insert((country, year), fractions);
    }

    Ok(ExposureTable {
        k: scheme.k,
        values,
        hours,
    })
}

/// Day counts for the fixed-effects baseline: per calendar day, the
/// population-weighted mean of that day's three-hourly temperatures is
/// binned; counts accumulate per (country, year, bin). No day window.
pub fn compute_day_counts(
    tg: &TemperatureGrid,
    pg: &PopulationGrid,
    cm: &CountryMap,
    scheme: &BinScheme,
) -> Result<DayCountTable, ExposureError> {
    let index = index_countries(tg, cm);

    // (country, year, day ordinal) -> weighted temp sum, weight sum
    let mut daily: BTreeMap<(usize, i32, i32), (Kahan, Kahan)> = BTreeMap::new();
    for r in tg.records() {
        let Some(&ci) = index.cell_country.get(&r.cell_id) else {
            continue;
        };
        let year = r.timestamp.year();
        let day = r.timestamp.ordinal() as i32;
        let p = pg.get(r.cell_id, year).unwrap_or(0.0);
        let slot = daily.entry((ci, year, day)).or_default();
        slot.0.add(p * r.temp_c);
        slot.1.add(p);
    }

    let mut totals: BTreeMap<(usize, i32), f64> = BTreeMap::new();
    for (&(ci, year, _), &(_, ref w)) in &daily {
        *totals.entry((ci, year)).or_insert(0.0) += w.value();
    }
    for (&(ci, year), &total) in &totals {
        if total <= 0.0 {
            return Err(ExposureError::ZeroPopulation {
                country: index.names[ci].clone(),
                year,
            });
        }
    }

    let mut values: BTreeMap<(String, i32), Vec<f64>> = BTreeMap::new();
    for ((ci, year, _day), (wt, w)) in daily {
        let weight = w.value();
        if weight <= 0.0 {
            // A day observed only through zero-population cells carries no
            // weighted mean; it is not a covered day.
            continue;
        }
        let mean = wt.value() / weight;
        let entry = values
            .entry((index.names[ci].clone(), year))
            .or_insert_with(|| vec![0.0; scheme.k]);
        entry[assign_bin(mean, scheme)] += 1.0;
    }

    Ok(DayCountTable {
        k: scheme.k,
        values,
    })
}

/// Classifies each cell's full population into a climate band by the cell's
/// annual mean temperature. `bands` are strictly increasing thresholds
/// partitioning the real line into `bands.len() + 1` intervals.
///
/// Returns `(band_lo, band_hi, population)` rows covering all bands.
pub fn climate_census(
    tg: &TemperatureGrid,
    pg: &PopulationGrid,
    cm: &CountryMap,
    year: i32,
    bands: &[f64],
) -> Result<Vec<(f64, f64, f64)>, ExposureError> {
    if !tg.years().contains(&year) || !pg.years().contains(&year) {
        return Err(ExposureError::YearNotCovered(year));
    }
    assert!(
        bands.windows(2).all(|w| w[0] < w[1]),
        "bands must be strictly increasing"
    );
    let index = index_countries(tg, cm);

    let mut per_cell: BTreeMap<u64, (Kahan, u64)> = BTreeMap::new();
    for r in tg.records() {
        if r.timestamp.year() != year || !index.cell_country.contains_key(&r.cell_id) {
            continue;
        }
        let slot = per_cell.entry(r.cell_id).or_default();
        slot.0.add(r.temp_c);
        slot.1 += 1;
    }

    let mut sums = vec![Kahan::default(); bands.len() + 1];
    for (cell, (sum, n)) in per_cell {
        let mean = sum.value() / n as f64;
        let band = bands.partition_point(|&b| b <= mean);
        sums[band].add(pg.get(cell, year).unwrap_or(0.0));
    }

    let mut out = Vec::with_capacity(sums.len());
    for (i, s) in sums.iter().enumerate() {
        let lo = if i == 0 {
            f64::NEG_INFINITY
        } else {
            bands[i - 1]
        };
        let hi = if i == bands.len() {
            f64::INFINITY
        } else {
            bands[i]
        };
        out.push((lo, hi, s.value()));
    }
    Ok(out)
}
