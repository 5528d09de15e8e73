//! Desk-scale pipeline from gridded temperature and population data to
//! Bayesian partial-pooling estimates of temperature-sensitive residential
//! energy demand.
//!
//! The stages, in pipeline order:
//!
//! * [`gridio`]: load and validate gridded temperature records, gridded
//!   population counts, and the cell-to-country mapping (CSV in, immutable
//!   containers out).
//! * [`exposure`]: temperature bin schemes, population-weighted exposure
//!   indices per (country, year, bin), day-count coding, and the
//!   population-by-climate census.
//! * [`panel`]: assemble the estimation panel (log demand, lags,
//!   covariates, exposure rows) and build the design matrix with reference
//!   bins omitted and covariates centered.
//! * [`inference`]: the three model variants (random slopes, random
//!   intercepts, pooled), their priors and unconstrained transforms, and
//!   the exact log-posterior with analytic gradient.
//! * [`sampler`]: multinomial No-U-Turn sampler with dual-averaging step
//!   size and diagonal mass-matrix adaptation; multi-chain driver.
//! * [`diagnostics`]: rank-normalized split R-hat, bulk ESS, PSIS-LOO
//!   model comparison, and prior/posterior predictive simulation.
//! * [`report`]: posterior summaries, long-run multipliers, elasticities,
//!   uniform-warming counterfactuals, rolling-window refits.
//! * [`twfe`]: two-way fixed-effects baseline on day-count temperature
//!   coding with cluster-robust standard errors.
//! * [`cli`]: the `thermopool` subcommand front end plus run manifests.
//! * [`sim`]: seeded synthetic-data generator backing `thermopool simulate`
//!   and the test suite.

pub mod cli;
pub mod diagnostics;
pub mod exposure;
pub mod gridio;
pub mod inference;
pub mod panel;
pub mod report;
pub mod sampler;
pub mod sim;
pub mod twfe;
pub(crate) mod util;
