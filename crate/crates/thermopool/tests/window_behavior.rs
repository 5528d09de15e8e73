//! Rolling-window behavior: stability under a stationary data-generating
//! process and detection of a coefficient regime change.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use thermopool::exposure::make_bin_scheme;
use thermopool::inference::{ModelSpec, PriorConfig, Variant};
use thermopool::panel::{build_design, PanelDataset, PanelRow};
use thermopool::report::rolling_windows;
use thermopool::sampler::{run_chains, SamplerConfig};

/// Panel rows with exposure mass trading between a cold and a hot bin, and a
/// response generated from fixed (or year-switching) coefficients.
fn dgp_panel(
    years: std::ops::Range<i32>,
    beta_cold: f64,
    beta_hot: impl Fn(i32) -> f64,
    seed: u64,
) -> PanelDataset {
    // Scheme: (-inf,-5), [-5,7), [7,30), [30,inf); reference is [7,30).
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for c in 0..4 {
        for year in years.clone() {
            let cold: f64 = rng.gen_range(0.0..0.45);
            let hot: f64 = rng.gen_range(0.0..0.45);
            let exposure = vec![cold, 0.05, 1.0 - cold - hot - 0.05, hot];
            let lag: f64 = rng.gen_range(-1.0..1.0);
            let log_gdp: f64 = rng.gen_range(0.0..2.0);
            let log_price: f64 = rng.gen_range(0.0..2.0);
            let mu = 0.3 + 0.5 * lag + beta_cold * cold + beta_hot(year) * hot + 0.1 * log_gdp
                - 0.05 * log_price;
            let noise: f64 = rng.gen_range(-1.0..1.0) * 0.1;
            rows.push(PanelRow {
                country: format!("C{c:02}"),
                year,
                log_y: mu + noise,
                log_y_lag1: lag,
                log_gdp,
                log_price_lag1: log_price,
                exposure,
            });
        }
    }
    PanelDataset::from_rows(rows, 4)
}

fn config(seed: u64) -> SamplerConfig {
    SamplerConfig {
        n_chains: 2,
        n_warmup: 250,
        n_samples: 250,
        seed,
        ..SamplerConfig::default()
    }
}

#[test]
fn stationary_dgp_windows_agree_with_global_fit() {
    let scheme = make_bin_scheme(12.0, -5.0, 30.0).unwrap();
    assert_eq!(scheme.retained_bins().len(), 3);
    let panel = dgp_panel(2000..2023, 0.8, |_| -0.4, 3);
    let spec = ModelSpec::new(Variant::Pooled, 3, 2, PriorConfig::default_for(3));

    let design = build_design(&panel, &scheme).unwrap();
    let global = run_chains(&design, &spec, &config(1)).unwrap();
    let global_summary = thermopool::report::summarize(&global).unwrap();

    let windows = rolling_windows(&panel, &scheme, &spec, &config(2), 15).unwrap();
    assert_eq!(windows.len(), 23 - 15 + 1);

    let beta_labels: Vec<String> = global_summary
        .rows
        .iter()
        .filter(|r| r.label.starts_with("beta["))
        .map(|r| r.label.clone())
        .collect();
    let mut checked = 0;
    let mut within = 0;
    for (_, table) in &windows {
        for label in &beta_labels {
            let g = global_summary.row(label).unwrap();
            let w = table.row(label).unwrap();
            checked += 1;
            if (w.mean - g.mean).abs() <= 3.0 * w.sd {
                within += 1;
            }
        }
    }
    let frac = within as f64 / checked as f64;
    assert!(
        frac >= 0.9,
        "only {within}/{checked} window betas near global"
    );
}

#[test]
fn regime_change_shows_up_in_late_windows() {
    // The hot-bin coefficient switches on in 2012.
    let scheme = make_bin_scheme(12.0, -5.0, 30.0).unwrap();
    let hot_label = format!("beta[{}]", scheme.bin_label(3));
    let panel = dgp_panel(
        2000..2025,
        0.6,
        |year| if year < 2012 { 0.0 } else { 1.2 },
        7,
    );
    let spec = ModelSpec::new(Variant::Pooled, 3, 2, PriorConfig::default_for(3));
    let windows = rolling_windows(&panel, &scheme, &spec, &config(5), 15).unwrap();
    let estimates: Vec<f64> = windows
        .iter()
        .map(|(_, t)| t.row(&hot_label).unwrap().mean)
        .collect();
    let first = estimates.first().unwrap();
    let last = estimates.last().unwrap();
    assert!(
        last > &(first + 0.3),
        "hot-bin coefficient did not rise: {estimates:?}"
    );
}
