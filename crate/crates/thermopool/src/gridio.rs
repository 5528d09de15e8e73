//! Loading and validation of gridded temperature records, gridded population
//! counts, and the cell-to-country mapping.
//!
//! All three inputs are CSV files with a header row:
//!
//! * temperature: `cell_id,timestamp,temp_c` (optional `lat`,`lon` columns)
//! * population:  `cell_id,year,population`
//! * mapping:     `cell_id,country`
//!
//! Timestamps are ISO-8601 UTC at 3-hour resolution. Loading is strict:
//! duplicate keys, unparseable fields, and out-of-range temperatures are hard
//! errors rather than silent repairs. Loaded containers are immutable and can
//! be shared freely across threads.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDateTime, TimeZone, Timelike, Utc};
use thiserror::Error;

/// Hard bounds on plausible near-surface air temperature, degrees Celsius.
pub const TEMP_MIN_C: f64 = -90.0;
pub const TEMP_MAX_C: f64 = 60.0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: String,
        line: u64,
        reason: String,
    },
    #[error("{path}:{line}: duplicate record for key {key}")]
    DuplicateRecord {
        path: String,
        line: u64,
        key: String,
    },
    #[error("{path}:{line}: temperature {value} outside [{TEMP_MIN_C}, {TEMP_MAX_C}]")]
    OutOfRangeTemperature { path: String, line: u64, value: f64 },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Maps logical temperature-file fields to CSV header names.
#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub cell_id: String,
    pub timestamp: String,
    pub temp_c: String,
    /// Optional coordinate columns; cells without them get (0, 0).
    pub lat: String,
    pub lon: String,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self {
            cell_id: "cell_id".into(),
            timestamp: "timestamp".into(),
            temp_c: "temp_c".into(),
            lat: "lat".into(),
            lon: "lon".into(),
        }
    }
}

/// One three-hourly temperature observation for one grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempRecord {
    pub cell_id: u64,
    pub timestamp: DateTime<Utc>,
    pub temp_c: f64,
}

/// Validated gridded temperature records, sorted by (cell_id, timestamp).
#[derive(Debug, Clone)]
pub struct TemperatureGrid {
    records: Vec<TempRecord>,
    cell_meta: BTreeMap<u64, (f64, f64)>,
}

impl TemperatureGrid {
    /// Builds a grid from in-memory records, applying the same validation as
    /// the CSV loader. `meta` may omit cells; those default to (0, 0).
    pub fn from_records(
        mut records: Vec<TempRecord>,
        meta: BTreeMap<u64, (f64, f64)>,
    ) -> Result<Self, GridError> {
        let synth = |reason: String| GridError::MalformedRow {
            path: "<memory>".into(),
            line: 0,
            reason,
        };
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            check_temp_record(r, "<memory>", 0)?;
            if !seen.insert((r.cell_id, r.timestamp)) {
                return Err(GridError::DuplicateRecord {
                    path: "<memory>".into(),
                    line: 0,
                    key: format!("({}, {})", r.cell_id, r.timestamp),
                });
            }
        }
        let mut cell_meta = meta;
        for r in &records {
            cell_meta.entry(r.cell_id).or_insert((0.0, 0.0));
        }
        for (lat, lon) in cell_meta.values() {
            if !lat.is_finite() || !lon.is_finite() {
                return Err(synth("non-finite cell coordinates".into()));
            }
        }
        records.sort_by_key(|r| (r.cell_id, r.timestamp));
        Ok(Self { records, cell_meta })
    }

    /// Records sorted by (cell_id, timestamp).
    pub fn records(&self) -> &[TempRecord] {
        &self.records
    }

    pub fn cell_meta(&self) -> &BTreeMap<u64, (f64, f64)> {
        &self.cell_meta
    }

    pub fn cells(&self) -> impl Iterator<Item = u64> + '_ {
        self.cell_meta.keys().copied()
    }

    /// Years (UTC) with at least one record.
    pub fn years(&self) -> BTreeSet<i32> {
        self.records.iter().map(|r| r.timestamp.year()).collect()
    }

    /// A copy of the grid with every temperature shifted by `delta_c`.
    ///
    /// Used for warming counterfactuals; the shifted values are allowed to
    /// leave the ingestion bounds.
    pub fn with_offset(&self, delta_c: f64) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| TempRecord {
                temp_c: r.temp_c + delta_c,
                ..*r
            })
            .collect();
        Self {
            records,
            cell_meta: self.cell_meta.clone(),
        }
    }

    /// Re-serializes the grid. Rows come out sorted by (cell_id, timestamp);
    /// the row multiset equals the loaded input.
    pub fn write_csv(&self, path: &Path) -> Result<(), GridError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["cell_id", "timestamp", "temp_c", "lat", "lon"])
            .map_err(|e| csv_io(path, e))?;
        for r in &self.records {
            let (lat, lon) = self.cell_meta[&r.cell_id];
            w.write_record([
                r.cell_id.to_string(),
                format_timestamp(r.timestamp),
                format_float(r.temp_c),
                format_float(lat),
                format_float(lon),
            ])
            .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| GridError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Gridded population counts keyed by (cell_id, year).
#[derive(Debug, Clone, Default)]
pub struct PopulationGrid {
    counts: BTreeMap<(u64, i32), f64>,
}

impl PopulationGrid {
    pub fn from_counts(counts: BTreeMap<(u64, i32), f64>) -> Self {
        Self { counts }
    }

    pub fn get(&self, cell_id: u64, year: i32) -> Option<f64> {
        self.counts.get(&(cell_id, year)).copied()
    }

    pub fn counts(&self) -> &BTreeMap<(u64, i32), f64> {
        &self.counts
    }

    pub fn years(&self) -> BTreeSet<i32> {
        self.counts.keys().map(|&(_, y)| y).collect()
    }

    pub fn cells(&self) -> BTreeSet<u64> {
        self.counts.keys().map(|&(c, _)| c).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GridError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["cell_id", "year", "population"])
            .map_err(|e| csv_io(path, e))?;
        for (&(cell, year), &pop) in &self.counts {
            w.write_record([cell.to_string(), year.to_string(), format_float(pop)])
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| GridError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Total assignment of grid cells to countries (ISO-3 codes).
#[derive(Debug, Clone, Default)]
pub struct CountryMap {
    assignment: BTreeMap<u64, String>,
}

impl CountryMap {
    pub fn from_assignment(assignment: BTreeMap<u64, String>) -> Self {
        Self { assignment }
    }

    pub fn country_of(&self, cell_id: u64) -> Option<&str> {
        self.assignment.get(&cell_id).map(String::as_str)
    }

    pub fn assignment(&self) -> &BTreeMap<u64, String> {
        &self.assignment
    }

    pub fn countries(&self) -> BTreeSet<&str> {
        self.assignment.values().map(String::as_str).collect()
    }

    /// Cells of one country, ascending.
    pub fn cells_of(&self, country: &str) -> Vec<u64> {
        self.assignment
            .iter()
            .filter(|(_, c)| c.as_str() == country)
            .map(|(&cell, _)| cell)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GridError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["cell_id", "country"])
            .map_err(|e| csv_io(path, e))?;
        for (cell, country) in &self.assignment {
            w.write_record([cell.to_string(), country.clone()])
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| GridError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Loads and validates a temperature CSV.
///
/// Rejects missing columns, unparseable fields, timestamps off the 3-hour
/// grid, temperatures outside [-90, 60], duplicate (cell, timestamp) keys,
/// and contradictory per-cell coordinates.
pub fn load_temperature_grid(
    path: &Path,
    schema: &ColumnSpec,
) -> Result<TemperatureGrid, GridError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let idx_cell = col(&schema.cell_id).ok_or_else(|| missing_col(path, &schema.cell_id))?;
    let idx_ts = col(&schema.timestamp).ok_or_else(|| missing_col(path, &schema.timestamp))?;
    let idx_temp = col(&schema.temp_c).ok_or_else(|| missing_col(path, &schema.temp_c))?;
    let idx_lat = col(&schema.lat);
    let idx_lon = col(&schema.lon);

    let mut records = Vec::new();
    let mut cell_meta: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    let mut seen: HashSet<(u64, i64)> = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2; // header is line 1
        let row = row.map_err(|e| malformed(path, line, &e.to_string()))?;
        let cell_id: u64 = parse_field(&row, idx_cell, path, line, "cell_id")?;
        let ts_str = row
            .get(idx_ts)
            .ok_or_else(|| malformed(path, line, "missing timestamp field"))?;
        let timestamp = parse_timestamp(ts_str)
            .ok_or_else(|| malformed(path, line, &format!("unparseable timestamp {ts_str:?}")))?;
        let temp_c: f64 = parse_field(&row, idx_temp, path, line, "temp_c")?;

        let rec = TempRecord {
            cell_id,
            timestamp,
            temp_c,
        };
        check_temp_record(&rec, &path.display().to_string(), line)?;
        if !seen.insert((cell_id, timestamp.timestamp())) {
            return Err(GridError::DuplicateRecord {
                path: path.display().to_string(),
                line,
                key: format!("({cell_id}, {})", format_timestamp(timestamp)),
            });
        }

        let lat: f64 = match idx_lat {
            Some(j) => parse_field(&row, j, path, line, "lat")?,
            None => 0.0,
        };
        let lon: f64 = match idx_lon {
            Some(j) => parse_field(&row, j, path, line, "lon")?,
            None => 0.0,
        };
        if !lat.is_finite() || !lon.is_finite() {
            return Err(malformed(path, line, "non-finite coordinates"));
        }
        match cell_meta.get(&cell_id) {
            None => {
                cell_meta.insert(cell_id, (lat, lon));
            }
            Some(&(la, lo)) => {
                if (la - lat).abs() > 1e-9 || (lo - lon).abs() > 1e-9 {
                    return Err(malformed(
                        path,
                        line,
                        &format!("cell {cell_id} has conflicting coordinates"),
                    ));
                }
            }
        }
        records.push(rec);
    }
    records.sort_by_key(|r| (r.cell_id, r.timestamp));
    Ok(TemperatureGrid { records, cell_meta })
}

/// Loads a population CSV (`cell_id,year,population`).
pub fn load_population_grid(path: &Path) -> Result<PopulationGrid, GridError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let idx_cell = col("cell_id").ok_or_else(|| missing_col(path, "cell_id"))?;
    let idx_year = col("year").ok_or_else(|| missing_col(path, "year"))?;
    let idx_pop = col("population").ok_or_else(|| missing_col(path, "population"))?;

    let mut counts = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| malformed(path, line, &e.to_string()))?;
        let cell: u64 = parse_field(&row, idx_cell, path, line, "cell_id")?;
        let year: i32 = parse_field(&row, idx_year, path, line, "year")?;
        let pop: f64 = parse_field(&row, idx_pop, path, line, "population")?;
        if !pop.is_finite() || pop < 0.0 {
            return Err(malformed(
                path,
                line,
                &format!("population {pop} must be finite and non-negative"),
            ));
        }
        if counts.insert((cell, year), pop).is_some() {
            return Err(GridError::DuplicateRecord {
                path: path.display().to_string(),
                line,
                key: format!("({cell}, {year})"),
            });
        }
    }
    Ok(PopulationGrid { counts })
}

/// Loads a cell-to-country mapping CSV (`cell_id,country`).
pub fn load_country_map(path: &Path) -> Result<CountryMap, GridError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let idx_cell = col("cell_id").ok_or_else(|| missing_col(path, "cell_id"))?;
    let idx_country = col("country").ok_or_else(|| missing_col(path, "country"))?;

    let mut assignment = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| malformed(path, line, &e.to_string()))?;
        let cell: u64 = parse_field(&row, idx_cell, path, line, "cell_id")?;
        let country = row
            .get(idx_country)
            .ok_or_else(|| malformed(path, line, "missing country field"))?
            .trim()
            .to_string();
        if country.is_empty() {
            return Err(malformed(path, line, "empty country code"));
        }
        if assignment.insert(cell, country).is_some() {
            return Err(GridError::DuplicateRecord {
                path: path.display().to_string(),
                line,
                key: format!("cell {cell}"),
            });
        }
    }
    Ok(CountryMap { assignment })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Warning,
    Fatal,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Severity::Warning => write!(f, "warning"),
            Severity::Fatal => write!(f, "fatal"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignmentEntry {
    pub severity: Severity,
    pub message: String,
}

/// Outcome of cross-validating the three gridded inputs. Fatal entries mean
/// downstream weights are undefined and the pipeline must not proceed.
#[derive(Debug, Clone, Default)]
pub struct AlignmentReport {
    pub entries: Vec<AlignmentEntry>,
}

impl AlignmentReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_fatal(&self) -> bool {
        self.entries.iter().any(|e| e.severity == Severity::Fatal)
    }

    fn push(&mut self, severity: Severity, message: String) {
        self.entries.push(AlignmentEntry { severity, message });
    }
}

impl fmt::Display for AlignmentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{}: {}", e.severity, e.message)?;
        }
        Ok(())
    }
}

/// Cross-checks the three inputs. Pure: identical inputs yield identical
/// reports, in a deterministic order.
///
/// * unmapped temperature cells: fatal (country sets undefined);
/// * country-years with temperature records but zero total population -
///   fatal (the weight denominator is 0);
/// * temperature cells absent from the population grid: warning;
/// * population years with no temperature coverage for a country: warning.
pub fn validate_alignment(
    tg: &TemperatureGrid,
    pg: &PopulationGrid,
    cm: &CountryMap,
) -> AlignmentReport {
    let mut report = AlignmentReport::default();

    for cell in tg.cells() {
        if cm.country_of(cell).is_none() {
            report.push(
                Severity::Fatal,
                format!("cell {cell} is not mapped to a country"),
            );
        }
    }

    let pop_cells = pg.cells();
    for cell in tg.cells() {
        if !pop_cells.contains(&cell) {
            report.push(
                Severity::Warning,
                format!("cell {cell} has no population data in any year"),
            );
        }
    }

    // Country-years observed in the temperature grid.
    let mut country_years: BTreeSet<(String, i32)> = BTreeSet::new();
    for r in tg.records() {
        if let Some(c) = cm.country_of(r.cell_id) {
            country_years.insert((c.to_string(), r.timestamp.year()));
        }
    }
    for (country, year) in &country_years {
        let total: f64 = cm
            .cells_of(country)
            .iter()
            .filter_map(|&cell| pg.get(cell, *year))
            .sum();
        if total <= 0.0 {
            report.push(
                Severity::Fatal,
                format!("country {country} has zero population weight in year {year}"),
            );
        }
    }

    // Population years with no temperature coverage for a mapped country.
    let mut pop_country_years: BTreeSet<(String, i32)> = BTreeSet::new();
    for &(cell, year) in pg.counts().keys() {
        if let Some(c) = cm.country_of(cell) {
            pop_country_years.insert((c.to_string(), year));
        }
    }
    for key in &pop_country_years {
        if !country_years.contains(key) {
            report.push(
                Severity::Warning,
                format!(
                    "country {} year {} has population but no temperature coverage",
                    key.0, key.1
                ),
            );
        }
    }

    report
}

/// Shortest-roundtrip float formatting, used by every CSV writer so that
/// identical runs produce identical bytes.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v}")
}

pub(crate) fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(Utc.from_utc_datetime(&naive));
        }
    }
    None
}

fn check_temp_record(r: &TempRecord, path: &str, line: u64) -> Result<(), GridError> {
    if !r.temp_c.is_finite() || r.temp_c < TEMP_MIN_C || r.temp_c > TEMP_MAX_C {
        return Err(GridError::OutOfRangeTemperature {
            path: path.to_string(),
            line,
            value: r.temp_c,
        });
    }
    let t = r.timestamp;
    if t.hour() % 3 != 0 || t.minute() != 0 || t.second() != 0 || t.nanosecond() != 0 {
        return Err(GridError::MalformedRow {
            path: path.to_string(),
            line,
            reason: format!("timestamp {} not on the 3-hour grid", format_timestamp(t)),
        });
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    row: &csv::StringRecord,
    idx: usize,
    path: &Path,
    line: u64,
    name: &str,
) -> Result<T, GridError> {
    let raw = row
        .get(idx)
        .ok_or_else(|| malformed(path, line, &format!("missing {name} field")))?;
    raw.trim()
        .parse()
        .map_err(|_| malformed(path, line, &format!("unparseable {name} {raw:?}")))
}

fn malformed(path: &Path, line: u64, reason: &str) -> GridError {
    GridError::MalformedRow {
        path: path.display().to_string(),
        line,
        reason: reason.to_string(),
    }
}

fn missing_col(path: &Path, name: &str) -> GridError {
    malformed(
        path,
        1,
        &format!("required column {name:?} not found in header"),
    )
}

fn csv_io(path: &Path, e: csv::Error) -> GridError {
    GridError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn utc(y: i32, mo: u32, d: u32, h: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, mo, d, h, 0, 0).unwrap()
    }

    fn write_temp_csv(dir: &Path, rows: &[(u64, &str, f64)]) -> std::path::PathBuf {
        let path = dir.join("temperature.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "cell_id,timestamp,temp_c,lat,lon").unwrap();
        for (cell, ts, temp) in rows {
            writeln!(f, "{cell},{ts},{temp},10.0,0.0").unwrap();
        }
        path
    }

    #[test]
    fn loads_minimal_grid() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<(u64, String, f64)> = (0..8)
            .map(|h| (1u64, format!("2000-01-01T{:02}:00:00Z", h * 3), 20.0))
            .collect();
        let rows_ref: Vec<(u64, &str, f64)> =
            rows.iter().map(|(c, s, t)| (*c, s.as_str(), *t)).collect();
        let path = write_temp_csv(dir.path(), &rows_ref);
        let grid = load_temperature_grid(&path, &ColumnSpec::default()).unwrap();
        assert_eq!(grid.records().len(), 8);
        assert_eq!(grid.cells().count(), 1);
        assert_eq!(grid.cell_meta()[&1], (10.0, 0.0));
    }

    #[test]
    fn rejects_out_of_range_temperature() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp_csv(dir.path(), &[(1, "2000-01-01T00:00:00Z", 95.0)]);
        let err = load_temperature_grid(&path, &ColumnSpec::default()).unwrap_err();
        assert!(matches!(err, GridError::OutOfRangeTemperature { value, .. } if value == 95.0));
    }

    #[test]
    fn rejects_duplicate_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp_csv(
            dir.path(),
            &[
                (1, "2000-01-01T00:00:00Z", 20.0),
                (1, "2000-01-01T00:00:00Z", 21.0),
            ],
        );
        let err = load_temperature_grid(&path, &ColumnSpec::default()).unwrap_err();
        assert!(matches!(err, GridError::DuplicateRecord { .. }));
    }

    #[test]
    fn rejects_misaligned_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_temp_csv(dir.path(), &[(1, "2000-01-01T01:00:00Z", 20.0)]);
        let err = load_temperature_grid(&path, &ColumnSpec::default()).unwrap_err();
        assert!(matches!(err, GridError::MalformedRow { .. }));
    }

    #[test]
    fn rejects_unparseable_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("temperature.csv");
        std::fs::write(
            &path,
            "cell_id,timestamp,temp_c\nnot_a_number,2000-01-01T00:00:00Z,20\n",
        )
        .unwrap();
        let err = load_temperature_grid(&path, &ColumnSpec::default()).unwrap_err();
        assert!(matches!(err, GridError::MalformedRow { .. }));
    }

    #[test]
    fn generator_round_trip_preserves_row_count_and_multiset() {
        // 100-cell synthetic file; the writer keeps its own ledger of rows.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("temperature.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "cell_id,timestamp,temp_c,lat,lon").unwrap();
        let mut ledger = 0usize;
        let mut expected: Vec<(u64, i64, f64)> = Vec::new();
        for cell in 0..100u64 {
            for h in [0u32, 6, 12, 18] {
                let ts = utc(2001, 7, 1 + (cell % 3) as u32, h);
                let temp = -5.0 + (cell as f64) * 0.3 + h as f64 * 0.1;
                writeln!(
                    f,
                    "{cell},{},{},{},{}",
                    format_timestamp(ts),
                    temp,
                    cell as f64 * 0.1,
                    cell as f64 * 0.2
                )
                .unwrap();
                expected.push((cell, ts.timestamp(), temp));
                ledger += 1;
            }
        }
        drop(f);
        let grid = load_temperature_grid(&path, &ColumnSpec::default()).unwrap();
        assert_eq!(grid.records().len(), ledger);

        // Re-serialize and compare the parsed row multiset.
        let out = dir.path().join("roundtrip.csv");
        grid.write_csv(&out).unwrap();
        let grid2 = load_temperature_grid(&out, &ColumnSpec::default()).unwrap();
        let mut got: Vec<(u64, i64, f64)> = grid2
            .records()
            .iter()
            .map(|r| (r.cell_id, r.timestamp.timestamp(), r.temp_c))
            .collect();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(expected, got);
    }

    fn toy_triple() -> (TemperatureGrid, PopulationGrid, CountryMap) {
        let records = vec![
            TempRecord {
                cell_id: 1,
                timestamp: utc(2000, 1, 1, 12),
                temp_c: 10.0,
            },
            TempRecord {
                cell_id: 2,
                timestamp: utc(2000, 1, 1, 12),
                temp_c: 20.0,
            },
        ];
        let tg = TemperatureGrid::from_records(records, BTreeMap::new()).unwrap();
        let mut counts = BTreeMap::new();
        counts.insert((1u64, 2000), 100.0);
        counts.insert((2u64, 2000), 50.0);
        let pg = PopulationGrid::from_counts(counts);
        let mut assignment = BTreeMap::new();
        assignment.insert(1u64, "AAA".to_string());
        assignment.insert(2u64, "BBB".to_string());
        let cm = CountryMap::from_assignment(assignment);
        (tg, pg, cm)
    }

    #[test]
    fn alignment_clean_triple_is_empty() {
        let (tg, pg, cm) = toy_triple();
        let report = validate_alignment(&tg, &pg, &cm);
        assert!(report.is_empty(), "unexpected entries: {report}");
    }

    #[test]
    fn alignment_flags_missing_population_cell() {
        let (tg, pg, cm) = toy_triple();
        let mut counts = pg.counts().clone();
        counts.remove(&(2, 2000));
        let pg = PopulationGrid::from_counts(counts);
        let report = validate_alignment(&tg, &pg, &cm);
        assert!(!report.is_empty());
        assert!(report
            .entries
            .iter()
            .any(|e| e.severity == Severity::Warning && e.message.contains("cell 2")));
    }

    #[test]
    fn alignment_zero_population_country_year_is_fatal() {
        let (tg, pg, cm) = toy_triple();
        let mut counts = pg.counts().clone();
        counts.insert((2, 2000), 0.0);
        let pg = PopulationGrid::from_counts(counts);
        let report = validate_alignment(&tg, &pg, &cm);
        assert!(report.has_fatal());
        assert!(report
            .entries
            .iter()
            .any(|e| e.severity == Severity::Fatal && e.message.contains("BBB")));
    }

    #[test]
    fn alignment_is_pure() {
        let (tg, pg, cm) = toy_triple();
        let a = format!("{}", validate_alignment(&tg, &pg, &cm));
        let b = format!("{}", validate_alignment(&tg, &pg, &cm));
        assert_eq!(a, b);
    }
}
