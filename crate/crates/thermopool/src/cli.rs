//! The `thermopool` command line: subcommands wiring the pipeline together,
//! a key=value config file, and a provenance manifest written next to every
//! output.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags or bad input
//! data), 2 on runtime failures (sampling or output I/O).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::diagnostics::{compare_models, ess_bulk, psis_loo, split_rhat};
use crate::exposure::{
    climate_census, compute_day_counts, compute_exposure, make_bin_scheme, BinScheme, DayWindow,
    ExposureTable,
};
use crate::gridio::{
    format_float, load_country_map, load_population_grid, load_temperature_grid,
    validate_alignment, ColumnSpec, CountryMap, PopulationGrid, TemperatureGrid,
};
use crate::inference::{ModelSpec, PriorConfig, PriorPreset, Variant};
use crate::panel::{assemble_panel, build_design, read_series, DesignMatrix, PanelDataset};
use crate::report::{
    elasticity_table, koyck_table, rolling_windows, summarize, warming_counterfactual,
    write_elasticity_csv, write_koyck_csv, write_windows_csv,
};
use crate::sampler::{run_chains, PosteriorDraws, SamplerConfig};
use crate::sim::{simulate, write_all, DgpConfig};
use crate::twfe::{assemble_twfe_data, twfe_augmented, twfe_fit};

/// Internal error classification driving the exit code.
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn val(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "thermopool",
    version,
    about = "Population-weighted temperature exposure and Bayesian partial-pooling demand estimation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compute exposure fractions from gridded inputs.
    Exposure(ExposureArgs),
    /// Fit a model variant by NUTS and write posterior draws.
    Fit(FitArgs),
    /// Convergence diagnostics and PSIS-LOO for saved draws.
    Diagnose(DiagnoseArgs),
    /// Posterior summaries, long-run tables, and counterfactuals.
    Report(ReportArgs),
    /// Two-way fixed-effects baseline on day counts.
    Twfe(TwfeArgs),
    /// Population-by-climate census for one year.
    Census(CensusArgs),
    /// Rolling-window refits.
    Windows(WindowsArgs),
    /// Generate a synthetic world and panel from a seeded DGP.
    Simulate(SimulateArgs),
}

#[derive(Args, Clone)]
struct SchemeArgs {
    /// Interior bin width in degrees C.
    #[arg(long, default_value_t = 3.5)]
    width: f64,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    lower: f64,
    #[arg(long, default_value_t = 30.0, allow_hyphen_values = true)]
    upper: f64,
}

impl SchemeArgs {
    fn scheme(&self) -> Result<BinScheme, CliError> {
        make_bin_scheme(self.width, self.lower, self.upper).map_err(val)
    }
}

#[derive(Args)]
struct ExposureArgs {
    /// Directory holding temperature.csv, population.csv, mapping.csv.
    #[arg(long)]
    grid_dir: PathBuf,
    #[command(flatten)]
    scheme: SchemeArgs,
    /// Local-hour retention window, `start:end`.
    #[arg(long, default_value = "6:21")]
    day_window: String,
    /// Loop bin widths 1.0..=5.0 in 0.5 steps, writing one file per width.
    #[arg(long, default_value_t = false)]
    all_widths: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct PanelArgs {
    #[arg(long)]
    energy: PathBuf,
    #[arg(long)]
    gdp: PathBuf,
    #[arg(long)]
    price: PathBuf,
    /// Exposure CSV produced by the exposure subcommand.
    #[arg(long)]
    exposure: PathBuf,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0.8)]
    target_accept: f64,
    #[arg(long, default_value_t = 10)]
    max_treedepth: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            n_chains: self.chains,
            n_warmup: self.warmup,
            n_samples: self.samples,
            target_accept: self.target_accept,
            max_treedepth: self.max_treedepth,
            seed: self.seed,
        }
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// random_slopes | random_intercepts | pooled
    #[arg(long, default_value = "random_slopes")]
    variant: String,
    /// default | vshape | hockey | tight | wide
    #[arg(long, default_value = "default")]
    prior_preset: String,
    #[arg(long, default_value_t = 2.0)]
    lkj_eta: f64,
    /// Sample from the prior alone (likelihood weight 0).
    #[arg(long, default_value_t = false)]
    prior_only: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also export the draws as CSV.
    #[arg(long)]
    export_csv: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Draws file from `fit` (repeat or use --compare for several).
    #[arg(long)]
    draws: PathBuf,
    /// Additional draws files to compare against --draws.
    #[arg(long, num_args = 1..)]
    compare: Vec<PathBuf>,
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Emit the per-bin Koyck long-run table.
    #[arg(long, default_value_t = false)]
    koyck: bool,
    /// Emit short/long-run elasticities.
    #[arg(long, default_value_t = false)]
    elasticities: bool,
    /// Uniform warming in degrees C; requires the data flags below.
    #[arg(long, allow_hyphen_values = true)]
    counterfactual: Option<f64>,
    #[arg(long)]
    base_year: Option<i32>,
    #[arg(long)]
    grid_dir: Option<PathBuf>,
    #[arg(long)]
    energy: Option<PathBuf>,
    #[arg(long)]
    gdp: Option<PathBuf>,
    #[arg(long)]
    price: Option<PathBuf>,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long, default_value = "6:21")]
    day_window: String,
    /// Propagate the full posterior through the counterfactual.
    #[arg(long, default_value_t = false)]
    full_posterior: bool,
    /// Variant of the fitted draws (inferred from labels when omitted).
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct TwfeArgs {
    #[arg(long)]
    grid_dir: PathBuf,
    #[arg(long)]
    energy: PathBuf,
    #[arg(long)]
    gdp: PathBuf,
    /// Needed with --augmented (adds lagged demand and lagged price).
    #[arg(long)]
    price: Option<PathBuf>,
    #[arg(long, default_value_t = false)]
    augmented: bool,
    /// Day-count bin scheme (5.5 C bins over [-12, 32) by default).
    #[arg(long, default_value_t = 5.5)]
    width: f64,
    #[arg(long, default_value_t = -12.0, allow_hyphen_values = true)]
    lower: f64,
    #[arg(long, default_value_t = 32.0, allow_hyphen_values = true)]
    upper: f64,
    /// The reference bin is the one containing this temperature.
    #[arg(long, default_value_t = 12.75, allow_hyphen_values = true)]
    ref_temp: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CensusArgs {
    #[arg(long)]
    grid_dir: PathBuf,
    #[arg(long)]
    year: i32,
    /// Comma-separated band thresholds, e.g. `18,22`.
    #[arg(long, allow_hyphen_values = true)]
    bands: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WindowsArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 15)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    countries: usize,
    #[arg(long, default_value_t = 4)]
    cells: usize,
    /// Inclusive year range, `start:end`.
    #[arg(long, default_value = "2000:2005")]
    years: String,
    #[arg(long, default_value_t = 28)]
    days_per_year: usize,
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long, default_value = "random_slopes")]
    variant: String,
    #[arg(long, default_value_t = 0.2, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long, default_value_t = 0.7, allow_hyphen_values = true)]
    nu: f64,
    #[arg(long, default_value_t = 0.05)]
    sigma_e: f64,
    #[arg(long, default_value_t = 0.15)]
    sd_intercept: f64,
    #[arg(long, default_value_t = 0.2)]
    sd_slope: f64,
    #[arg(long, default_value_t = 0.1, allow_hyphen_values = true)]
    gamma_gdp: f64,
    #[arg(long, default_value_t = -0.05, allow_hyphen_values = true)]
    gamma_price: f64,
    #[arg(long, default_value_t = 0.5)]
    beta_scale: f64,
}

/// Provenance record written next to every primary output.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    /// Content digests (SHA-256) of every input file.
    inputs: BTreeMap<String, String>,
    seed: Option<u64>,
    version: String,
    started: String,
    finished: String,
    notes: BTreeMap<String, String>,
}

struct ManifestBuilder {
    command: String,
    args: Vec<String>,
    inputs: BTreeMap<String, String>,
    seed: Option<u64>,
    started: chrono::DateTime<chrono::Utc>,
    notes: BTreeMap<String, String>,
}

impl ManifestBuilder {
    fn new(command: &str, args: &[String]) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            inputs: BTreeMap::new(),
            seed: None,
            started: chrono::Utc::now(),
            notes: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) {
        if let Ok(bytes) = std::fs::read(path) {
            let mut hasher = Sha256::new();
            hasher.update(&bytes);
            let digest = hasher
                .finalize()
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect::<String>();
            self.inputs.insert(path.display().to_string(), digest);
        }
    }

    fn note(&mut self, key: &str, value: &str) {
        self.notes.insert(key.to_string(), value.to_string());
    }

    /// Writes `<out>.manifest.json` for a file target or `manifest.json`
    /// inside a directory target.
    fn write(self, target: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command,
            args: self.args,
            inputs: self.inputs,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: self.started.to_rfc3339(),
            finished: chrono::Utc::now().to_rfc3339(),
            notes: self.notes,
        };
        let path = if target.is_dir() {
            target.join("manifest.json")
        } else {
            let mut name = target.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            target.with_file_name(name)
        };
        let body = serde_json::to_string_pretty(&manifest).map_err(rt)?;
        std::fs::write(&path, body).map_err(rt)
    }
}

/// Pre-expands `--config file` into flags: each `key = value` line becomes
/// `--key value` unless the flag is already present on the command line.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let Some(pos) = argv.iter().position(|a| a == "--config") else {
        return Ok(argv);
    };
    let path = argv
        .get(pos + 1)
        .ok_or_else(|| val("--config requires a file path"))?
        .clone();
    let mut out: Vec<String> = argv[..pos].to_vec();
    out.extend(argv[pos + 2..].iter().cloned());
    let body = std::fs::read_to_string(&path)
        .map_err(|e| val(format!("cannot read config {path}: {e}")))?;
    for (i, line) in body.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(val(format!("{path}:{}: expected key = value", i + 1)));
        };
        let flag = format!("--{}", key.trim().replace('_', "-"));
        if !out.iter().any(|a| *a == flag) {
            out.push(flag);
            out.push(value.trim().to_string());
        }
    }
    Ok(out)
}

fn parse_day_window(s: &str) -> Result<DayWindow, CliError> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| val(format!("day window {s:?} must be start:end")))?;
    let start: u32 = a.trim().parse().map_err(|_| val("bad day window start"))?;
    let end: u32 = b.trim().parse().map_err(|_| val("bad day window end"))?;
    DayWindow::new(start, end).map_err(val)
}

fn parse_years(s: &str) -> Result<(i32, i32), CliError> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| val(format!("years {s:?} must be start:end")))?;
    let start: i32 = a.trim().parse().map_err(|_| val("bad start year"))?;
    let end: i32 = b.trim().parse().map_err(|_| val("bad end year"))?;
    if start > end {
        return Err(val("start year after end year"));
    }
    Ok((start, end))
}

fn load_grids(dir: &Path) -> Result<(TemperatureGrid, PopulationGrid, CountryMap), CliError> {
    let tg =
        load_temperature_grid(&dir.join("temperature.csv"), &ColumnSpec::default()).map_err(val)?;
    let pg = load_population_grid(&dir.join("population.csv")).map_err(val)?;
    let cm = load_country_map(&dir.join("mapping.csv")).map_err(val)?;
    let report = validate_alignment(&tg, &pg, &cm);
    if !report.is_empty() {
        eprint!("{report}");
    }
    if report.has_fatal() {
        return Err(val("alignment check failed with fatal entries"));
    }
    Ok((tg, pg, cm))
}

fn load_panel_inputs(
    args: &PanelArgs,
    scheme: &BinScheme,
) -> Result<(PanelDataset, DesignMatrix, ExposureTable), CliError> {
    let exposure = ExposureTable::read_csv(&args.exposure, scheme).map_err(val)?;
    let panel = assemble_panel(&args.energy, &args.gdp, &args.price, &exposure).map_err(val)?;
    if !panel.drop_census.is_empty() {
        eprintln!("dropped rows: {:?}", panel.drop_census);
    }
    let design = build_design(&panel, scheme).map_err(val)?;
    for w in &design.warnings {
        eprintln!("warning: {w}");
    }
    Ok((panel, design, exposure))
}

fn model_spec(args: &ModelArgs, scheme: &BinScheme, l: usize) -> Result<ModelSpec, CliError> {
    let variant = Variant::parse(&args.variant)
        .ok_or_else(|| val(format!("unknown variant {:?}", args.variant)))?;
    let preset = PriorPreset::parse(&args.prior_preset)
        .ok_or_else(|| val(format!("unknown prior preset {:?}", args.prior_preset)))?;
    let prior = PriorConfig::for_scheme(preset, scheme);
    let mut spec = ModelSpec::new(variant, scheme.retained_bins().len(), l, prior);
    spec.lkj_eta = args.lkj_eta;
    if args.prior_only {
        spec.likelihood_weight = 0.0;
    }
    Ok(spec)
}

/// Rebuilds the model spec a draws file was fitted with from its labels.
fn infer_spec_from_draws(draws: &PosteriorDraws, l: usize) -> ModelSpec {
    let k_eff = draws
        .labels
        .iter()
        .filter(|l| l.starts_with("beta["))
        .count();
    let n_sd = draws.labels.iter().filter(|l| l.starts_with("sd[")).count();
    let variant = match n_sd {
        0 => Variant::Pooled,
        1 => Variant::RandomIntercepts,
        _ => Variant::RandomSlopes,
    };
    ModelSpec::new(variant, k_eff, l, PriorConfig::default_for(k_eff))
}

/// Parses argv, runs the requested subcommand, and maps errors to exit
/// codes: 0 success, 1 validation, 2 runtime.
pub fn dispatch<I>(argv: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let argv: Vec<String> = argv.into_iter().collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return e.code();
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { 0 } else { 1 };
        }
    };
    match run(cli.cmd, &argv[1..]) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn run(cmd: Cmd, args: &[String]) -> Result<(), CliError> {
    match cmd {
        Cmd::Exposure(a) => cmd_exposure(a, args),
        Cmd::Fit(a) => cmd_fit(a, args),
        Cmd::Diagnose(a) => cmd_diagnose(a, args),
        Cmd::Report(a) => cmd_report(a, args),
        Cmd::Twfe(a) => cmd_twfe(a, args),
        Cmd::Census(a) => cmd_census(a, args),
        Cmd::Windows(a) => cmd_windows(a, args),
        Cmd::Simulate(a) => cmd_simulate(a, args),
    }
}

fn grid_inputs(manifest: &mut ManifestBuilder, dir: &Path) {
    for f in ["temperature.csv", "population.csv", "mapping.csv"] {
        manifest.input(&dir.join(f));
    }
}

fn cmd_exposure(a: ExposureArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("exposure", args);
    grid_inputs(&mut manifest, &a.grid_dir);
    let window = parse_day_window(&a.day_window)?;
    let (tg, pg, cm) = load_grids(&a.grid_dir)?;
    let widths: Vec<f64> = if a.all_widths {
        (0..9).map(|i| 1.0 + 0.5 * i as f64).collect()
    } else {
        vec![a.scheme.width]
    };
    for width in widths {
        let scheme = make_bin_scheme(width, a.scheme.lower, a.scheme.upper).map_err(val)?;
        let table = compute_exposure(&tg, &pg, &cm, &scheme, window).map_err(val)?;
        let out = if a.all_widths {
            let stem = a.out.file_stem().unwrap_or_default().to_string_lossy();
            let ext = a.out.extension().map(|e| e.to_string_lossy().to_string());
            let name = match ext {
                Some(ext) => format!("{stem}_w{width}.{ext}"),
                None => format!("{stem}_w{width}"),
            };
            a.out.with_file_name(name)
        } else {
            a.out.clone()
        };
        table.write_csv(&scheme, &out).map_err(rt)?;
        println!(
            "wrote {} ({} country-years, {} bins)",
            out.display(),
            table.len(),
            scheme.k
        );
    }
    manifest.write(&a.out)
}

fn cmd_census(a: CensusArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("census", args);
    grid_inputs(&mut manifest, &a.grid_dir);
    let bands: Vec<f64> = a
        .bands
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| val(format!("bad bands {:?}", a.bands)))?;
    if !bands.windows(2).all(|w| w[0] < w[1]) || bands.is_empty() {
        return Err(val("bands must be non-empty and strictly increasing"));
    }
    let (tg, pg, cm) = load_grids(&a.grid_dir)?;
    let rows = climate_census(&tg, &pg, &cm, a.year, &bands).map_err(val)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(rt)?;
    w.write_record(["band_lo", "band_hi", "population"])
        .map_err(rt)?;
    for (lo, hi, pop) in rows {
        w.write_record([format_float(lo), format_float(hi), format_float(pop)])
            .map_err(rt)?;
    }
    w.flush().map_err(rt)?;
    println!("wrote {}", a.out.display());
    manifest.write(&a.out)
}

fn cmd_fit(a: FitArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("fit", args);
    for p in [
        &a.panel.energy,
        &a.panel.gdp,
        &a.panel.price,
        &a.panel.exposure,
    ] {
        manifest.input(p);
    }
    manifest.seed = Some(a.sampler.seed);
    let scheme = a.scheme.scheme()?;
    let (_panel, design, _) = load_panel_inputs(&a.panel, &scheme)?;
    let spec = model_spec(&a.model, &scheme, design.l)?;
    let config = a.sampler.config();
    let draws = run_chains(&design, &spec, &config).map_err(rt)?;
    let divergent = draws.n_divergent();
    draws.write_bin(&a.out).map_err(rt)?;
    if let Some(csv_path) = &a.export_csv {
        draws.write_csv(csv_path).map_err(rt)?;
    }
    println!(
        "wrote {} ({} chains x {} draws, {} parameters, {} divergences)",
        a.out.display(),
        draws.n_chains,
        draws.n_iterations,
        draws.n_params,
        divergent
    );
    manifest.note("variant", spec.variant.name());
    manifest.write(&a.out)
}

fn cmd_diagnose(a: DiagnoseArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("diagnose", args);
    for p in [
        &a.panel.energy,
        &a.panel.gdp,
        &a.panel.price,
        &a.panel.exposure,
    ] {
        manifest.input(p);
    }
    manifest.input(&a.draws);
    for p in &a.compare {
        manifest.input(p);
    }
    std::fs::create_dir_all(&a.out_dir).map_err(rt)?;
    let scheme = a.scheme.scheme()?;
    let (_panel, design, _) = load_panel_inputs(&a.panel, &scheme)?;
    let draws = PosteriorDraws::read_bin(&a.draws).map_err(val)?;

    // rhat_ess.csv over every parameter.
    let rhat_path = a.out_dir.join("rhat_ess.csv");
    let mut w = csv::Writer::from_path(&rhat_path).map_err(rt)?;
    w.write_record(["parameter", "rhat", "ess_bulk"])
        .map_err(rt)?;
    for p in 0..draws.n_params {
        let rhat = split_rhat(&draws, p)
            .map(format_float)
            .unwrap_or_default();
        let ess = ess_bulk(&draws, p)
            .map(format_float)
            .unwrap_or_default();
        w.write_record([draws.labels[p].clone(), rhat, ess])
            .map_err(rt)?;
    }
    w.flush().map_err(rt)?;

    // loo.csv pointwise table.
    let spec = infer_spec_from_draws(&draws, design.l);
    let loo = psis_loo(&draws, &design, &spec).map_err(val)?;
    let loo_path = a.out_dir.join("loo.csv");
    let mut w = csv::Writer::from_path(&loo_path).map_err(rt)?;
    w.write_record(["obs", "elpd_i", "pareto_k", "flagged"])
        .map_err(rt)?;
    for i in 0..loo.pointwise.len() {
        w.write_record([
            i.to_string(),
            format_float(loo.pointwise[i]),
            format_float(loo.pareto_k[i]),
            (loo.flagged.contains(&i) as u8).to_string(),
        ])
        .map_err(rt)?;
    }
    w.flush().map_err(rt)?;
    println!(
        "elpd {} (se {}), {} observations flagged",
        loo.elpd,
        loo.se,
        loo.flagged.len()
    );

    if !a.compare.is_empty() {
        let mut models = vec![(
            a.draws
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .to_string(),
            loo,
        )];
        let mut variants = vec![infer_spec_from_draws(&draws, design.l).variant];
        for path in &a.compare {
            let d = PosteriorDraws::read_bin(path).map_err(val)?;
            let spec_i = infer_spec_from_draws(&d, design.l);
            let loo_i = psis_loo(&d, &design, &spec_i).map_err(val)?;
            variants.push(spec_i.variant);
            models.push((
                path.file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .to_string(),
                loo_i,
            ));
        }
        let names: Vec<String> = models.iter().map(|(n, _)| n.clone()).collect();
        let table = compare_models(&models).map_err(val)?;
        let cmp_path = a.out_dir.join("comparison.csv");
        let mut w = csv::Writer::from_path(&cmp_path).map_err(rt)?;
        w.write_record([
            "model",
            "elpd",
            "elpd_diff",
            "se_diff",
            "random_intercepts",
            "random_slopes",
        ])
        .map_err(rt)?;
        for row in &table.rows {
            let idx = names.iter().position(|n| *n == row.name).unwrap();
            let variant = variants[idx];
            let ri = matches!(variant, Variant::RandomIntercepts | Variant::RandomSlopes);
            let rs = matches!(variant, Variant::RandomSlopes);
            w.write_record([
                row.name.clone(),
                format_float(row.elpd),
                format_float(row.elpd_diff),
                format_float(row.se_diff),
                (ri as u8).to_string(),
                (rs as u8).to_string(),
            ])
            .map_err(rt)?;
        }
        w.flush().map_err(rt)?;
        println!("wrote {}", cmp_path.display());
    }
    manifest.write(&a.out_dir)
}

fn cmd_report(a: ReportArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("report", args);
    manifest.input(&a.draws);
    std::fs::create_dir_all(&a.out_dir).map_err(rt)?;
    let draws = PosteriorDraws::read_bin(&a.draws).map_err(val)?;

    let table = summarize(&draws).map_err(val)?;
    table
        .write_csv(&a.out_dir.join("summary.csv"))
        .map_err(rt)?;

    if a.koyck {
        let (rows, dropped) = koyck_table(&draws).map_err(val)?;
        write_koyck_csv(&rows, dropped, &a.out_dir.join("koyck.csv")).map_err(rt)?;
    }
    if a.elasticities {
        let t = elasticity_table(&draws).map_err(val)?;
        write_elasticity_csv(&t, &a.out_dir.join("elasticities.csv")).map_err(rt)?;
    }
    if let Some(delta_t) = a.counterfactual {
        let base_year = a
            .base_year
            .ok_or_else(|| val("--counterfactual needs --base-year"))?;
        let grid_dir = a
            .grid_dir
            .as_ref()
            .ok_or_else(|| val("--counterfactual needs --grid-dir"))?;
        let (energy, gdp, price) = match (&a.energy, &a.gdp, &a.price) {
            (Some(e), Some(g), Some(p)) => (e, g, p),
            _ => return Err(val("--counterfactual needs --energy, --gdp, --price")),
        };
        grid_inputs(&mut manifest, grid_dir);
        for p in [energy, gdp, price] {
            manifest.input(p);
        }
        let scheme = a.scheme.scheme()?;
        let window = parse_day_window(&a.day_window)?;
        let (tg, pg, cm) = load_grids(grid_dir)?;
        let exposure = compute_exposure(&tg, &pg, &cm, &scheme, window).map_err(val)?;
        let panel = assemble_panel(energy, gdp, price, &exposure).map_err(val)?;
        let design = build_design(&panel, &scheme).map_err(val)?;
        let spec = match &a.variant {
            Some(v) => {
                let variant =
                    Variant::parse(v).ok_or_else(|| val(format!("unknown variant {v:?}")))?;
                let mut s = infer_spec_from_draws(&draws, design.l);
                s.variant = variant;
                s
            }
            None => infer_spec_from_draws(&draws, design.l),
        };
        let result = warming_counterfactual(
            &draws,
            &spec,
            &design,
            &tg,
            &pg,
            &cm,
            &scheme,
            delta_t,
            base_year,
            window,
            a.full_posterior,
        )
        .map_err(val)?;
        result
            .write_csv(&a.out_dir.join("counterfactual.csv"))
            .map_err(rt)?;
        println!(
            "counterfactual +{delta_t} C vs {base_year}: total change {}%",
            result.total_pct
        );
    }
    println!("wrote {}", a.out_dir.display());
    manifest.write(&a.out_dir)
}

fn cmd_twfe(a: TwfeArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("twfe", args);
    grid_inputs(&mut manifest, &a.grid_dir);
    manifest.input(&a.energy);
    manifest.input(&a.gdp);
    if let Some(p) = &a.price {
        manifest.input(p);
    }
    manifest.note("cluster_by", "country");
    if a.augmented && a.price.is_none() {
        return Err(val("--augmented needs --price for the lagged price column"));
    }
    let scheme = make_bin_scheme(a.width, a.lower, a.upper)
        .map_err(val)?
        .with_reference_containing(a.ref_temp);
    let (tg, pg, cm) = load_grids(&a.grid_dir)?;
    let day_counts = compute_day_counts(&tg, &pg, &cm, &scheme).map_err(val)?;

    // Country-level population series from the grid.
    let mut population: BTreeMap<(String, i32), f64> = BTreeMap::new();
    for (&(cell, year), &count) in pg.counts() {
        if let Some(country) = cm.country_of(cell) {
            *population.entry((country.to_string(), year)).or_insert(0.0) += count;
        }
    }
    let energy = read_series(&a.energy).map_err(val)?;
    let gdp = read_series(&a.gdp).map_err(val)?;
    let price = match &a.price {
        Some(p) if a.augmented => Some(read_series(p).map_err(val)?),
        _ => None,
    };
    let (data, extra) = assemble_twfe_data(
        &day_counts,
        &scheme,
        &energy,
        &population,
        &gdp,
        price.as_ref(),
    )
    .map_err(val)?;
    let fit = if a.augmented {
        twfe_augmented(&data, &extra).map_err(val)?
    } else {
        twfe_fit(&data).map_err(val)?
    };
    let mut w = csv::Writer::from_path(&a.out).map_err(rt)?;
    w.write_record(["term", "estimate", "cluster_se", "t_stat"])
        .map_err(rt)?;
    for (j, label) in fit.labels.iter().enumerate() {
        w.write_record([
            label.clone(),
            format_float(fit.coefficients[j]),
            format_float(fit.std_errors[j]),
            format_float(fit.t_stats[j]),
        ])
        .map_err(rt)?;
    }
    w.flush().map_err(rt)?;
    if !fit.dropped.is_empty() {
        eprintln!("dropped (zero under within transform): {:?}", fit.dropped);
    }
    println!(
        "wrote {} ({} obs, {} countries, {} years)",
        a.out.display(),
        fit.n_obs,
        fit.n_countries,
        fit.n_years
    );
    manifest.write(&a.out)
}

fn cmd_windows(a: WindowsArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("windows", args);
    for p in [
        &a.panel.energy,
        &a.panel.gdp,
        &a.panel.price,
        &a.panel.exposure,
    ] {
        manifest.input(p);
    }
    manifest.seed = Some(a.sampler.seed);
    let scheme = a.scheme.scheme()?;
    let (panel, design, _) = load_panel_inputs(&a.panel, &scheme)?;
    let spec = model_spec(&a.model, &scheme, design.l)?;
    let config = a.sampler.config();
    let windows =
        rolling_windows(&panel, &scheme, &spec, &config, a.window).map_err(|e| match e {
            crate::report::ReportError::Sampler(se) => rt(se),
            other => val(other),
        })?;
    write_windows_csv(&windows, &a.out, Some("beta[")).map_err(rt)?;
    println!("wrote {} ({} windows)", a.out.display(), windows.len());
    manifest.write(&a.out)
}

fn cmd_simulate(a: SimulateArgs, args: &[String]) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("simulate", args);
    manifest.seed = Some(a.seed);
    let (year_start, year_end) = parse_years(&a.years)?;
    let variant = Variant::parse(&a.variant)
        .ok_or_else(|| val(format!("unknown variant {:?}", a.variant)))?;
    let cfg = DgpConfig {
        seed: a.seed,
        n_countries: a.countries,
        cells_per_country: a.cells,
        year_start,
        year_end,
        days_per_year: a.days_per_year,
        width: a.scheme.width,
        lower: a.scheme.lower,
        upper: a.scheme.upper,
        variant,
        alpha: a.alpha,
        nu: a.nu,
        sigma_e: a.sigma_e,
        sd_intercept: a.sd_intercept,
        sd_slope: a.sd_slope,
        gamma_gdp: a.gamma_gdp,
        gamma_price: a.gamma_price,
        beta_scale: a.beta_scale,
    };
    let out = simulate(&cfg).map_err(val)?;
    write_all(&out, &a.out_dir).map_err(rt)?;
    println!(
        "wrote {} ({} countries, {} cells, years {year_start}..={year_end})",
        a.out_dir.display(),
        a.countries,
        a.countries * a.cells
    );
    manifest.write(&a.out_dir)
}
