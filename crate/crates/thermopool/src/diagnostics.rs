//! Convergence diagnostics, PSIS-LOO model comparison, and predictive
//! simulation.
//!
//! R-hat is the rank-normalized split version: chains are halved, all draws
//! are replaced by normal scores of their pooled ranks, and the classic
//! between/within variance ratio is computed on the transformed halves.
//! Bulk ESS runs on the same rank-normalized split chains with Geyer's
//! initial-monotone truncation of the autocorrelation sum.
//!
//! PSIS-LOO smooths each observation's importance ratios by fitting a
//! generalized Pareto distribution to the top 20% (Zhang-Stephens profile
//! estimator with the usual weak prior), replacing tail weights by GPD
//! quantiles capped at the raw maximum.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::inference::{InferenceError, Model, ModelSpec};
use crate::panel::DesignMatrix;
use crate::sampler::PosteriorDraws;
use crate::util::{log_sum_exp, mean, normal_lpdf, quantile, sample_var, Kahan};

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("draws have zero variance; diagnostics undefined")]
    ZeroVariance,
    #[error("need at least {need} {what}, got {got}")]
    TooFew {
        what: &'static str,
        need: usize,
        got: usize,
    },
    #[error("importance ratios are degenerate for observation {0}")]
    AllRatiosDegenerate(usize),
    #[error("models cover different observation sets: {0} vs {1} pointwise entries")]
    MismatchedObservations(usize, usize),
    #[error("empty draws")]
    EmptyDraws,
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

fn split_in_half(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let keep = c.len() - c.len() % 2;
        let half = keep / 2;
        out.push(c[..half].to_vec());
        out.push(c[half..keep].to_vec());
    }
    out
}

/// Replaces every draw by the normal score of its pooled rank
/// (average ranks for ties, Blom offsets 3/8 and 1/4).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut indexed: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (ci, chain) in chains.iter().enumerate() {
        for (di, &v) in chain.iter().enumerate() {
            indexed.push((v, ci, di));
        }
    }
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("NaN draw"));
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j < total && indexed[j].0 == indexed[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for r in ranks.iter_mut().take(j).skip(i) {
            *r = avg;
        }
        i = j;
    }
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let n_f = total as f64;
    for (k, &(_, ci, di)) in indexed.iter().enumerate() {
        let p = (ranks[k] - 0.375) / (n_f + 0.25);
        out[ci][di] = std_normal.inverse_cdf(p);
    }
    out
}

fn classic_rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let b = n / (m - 1.0)
        * means
            .iter()
            .map(|&x| (x - grand) * (x - grand))
            .sum::<f64>();
    let w = chains.iter().map(|c| sample_var(c)).sum::<f64>() / m;
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

fn check_chains(chains: &[Vec<f64>]) -> Result<(), DiagError> {
    if chains.len() < 2 {
        return Err(DiagError::TooFew {
            what: "chains",
            need: 2,
            got: chains.len(),
        });
    }
    let n = chains[0].len();
    if n < 4 {
        return Err(DiagError::TooFew {
            what: "draws per chain",
            need: 4,
            got: n,
        });
    }
    let first = chains[0][0];
    if chains.iter().all(|c| c.iter().all(|&v| v == first)) {
        return Err(DiagError::ZeroVariance);
    }
    Ok(())
}

/// Rank-normalized split R-hat over per-chain series.
pub fn split_rhat_chains(chains: &[Vec<f64>]) -> Result<f64, DiagError> {
    check_chains(chains)?;
    let split = split_in_half(chains);
    let ranked = rank_normalize(&split);
    Ok(classic_rhat(&ranked))
}

/// Rank-normalized split R-hat for one parameter of a draws object.
pub fn split_rhat(draws: &PosteriorDraws, param: usize) -> Result<f64, DiagError> {
    split_rhat_chains(&draws.chains_of(param))
}

fn ess_from_ranked(split: &[Vec<f64>]) -> f64 {
    let m = split.len();
    let n = split[0].len();
    let m_f = m as f64;
    let n_f = n as f64;
    let means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    // Biased (1/n) autocovariances, computed lag by lag on demand.
    let acov = |lag: usize| -> f64 {
        let mut total = 0.0;
        for (c, chain) in split.iter().enumerate() {
            let mu = means[c];
            let mut acc = 0.0;
            for t in 0..(n - lag) {
                acc += (chain[t] - mu) * (chain[t + lag] - mu);
            }
            total += acc / n_f;
        }
        total / m_f
    };
    let mean_var = acov(0) * n_f / (n_f - 1.0);
    let b_means = if m > 1 { sample_var(&means) } else { 0.0 };
    let var_plus = mean_var * (n_f - 1.0) / n_f + b_means;
    if var_plus <= 0.0 {
        return f64::NAN;
    }

    // Geyer initial positive + monotone sequence over lag pairs.
    let rho = |lag: usize| 1.0 - (mean_var - acov(lag)) / var_plus;
    let mut tau = 1.0; // rho_0 = 1
    let mut prev_pair = f64::INFINITY;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        let capped = pair.min(prev_pair);
        tau += 2.0 * capped;
        prev_pair = capped;
        lag += 2;
    }
    m_f * n_f / tau
}

/// Bulk effective sample size on rank-normalized split chains.
pub fn ess_bulk_chains(chains: &[Vec<f64>]) -> Result<f64, DiagError> {
    check_chains(chains)?;
    let split = split_in_half(chains);
    let ranked = rank_normalize(&split);
    Ok(ess_from_ranked(&ranked))
}

pub fn ess_bulk(draws: &PosteriorDraws, param: usize) -> Result<f64, DiagError> {
    ess_bulk_chains(&draws.chains_of(param))
}

/// PSIS-LOO output.
#[derive(Debug, Clone)]
pub struct LooResult {
    pub elpd: f64,
    pub se: f64,
    pub pointwise: Vec<f64>,
    pub pareto_k: Vec<f64>,
    /// Indices with Pareto k above 0.7.
    pub flagged: Vec<usize>,
}

impl LooResult {
    pub fn from_pointwise(pointwise: Vec<f64>, pareto_k: Vec<f64>) -> LooResult {
        let n = pointwise.len() as f64;
        let mut acc = Kahan::default();
        for &p in &pointwise {
            acc.add(p);
        }
        let elpd = acc.value();
        let se = if pointwise.len() > 1 {
            (n * sample_var(&pointwise)).sqrt()
        } else {
            0.0
        };
        let flagged = pareto_k
            .iter()
            .enumerate()
            .filter(|(_, &k)| k > 0.7)
            .map(|(i, _)| i)
            .collect();
        LooResult {
            elpd,
            se,
            pointwise,
            pareto_k,
            flagged,
        }
    }
}

/// Zhang-Stephens (2009) profile-posterior GPD fit on exceedances, with the
/// weak-prior adjustment `k <- (M*k + 5) / (M + 10)` used by standard PSIS
/// implementations. Returns (k, sigma).
fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mut xs = x.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_f = n as f64;
    let prior = 3.0;
    let m_grid = 30 + (n_f.sqrt() as usize);
    let quart = xs[((n_f / 4.0 + 0.5).floor() as usize).max(1) - 1].max(1e-300);
    let mut theta = Vec::with_capacity(m_grid);
    for j in 1..=m_grid {
        let t =
            1.0 / xs[n - 1] + (1.0 - (m_grid as f64 / (j as f64 - 0.5)).sqrt()) / (prior * quart);
        theta.push(t);
    }
    let k_of = |t: f64| -> f64 { -xs.iter().map(|&xi| (-t * xi).ln_1p()).sum::<f64>() / n_f };
    let logl: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let k = k_of(t);
            n_f * ((t / k).ln() + k - 1.0)
        })
        .collect();
    let lse = log_sum_exp(&logl);
    let mut theta_hat = 0.0;
    for (t, l) in theta.iter().zip(logl.iter()) {
        theta_hat += t * (l - lse).exp();
    }
    let mut k = k_of(theta_hat);
    let sigma = -k / theta_hat;
    k = (k * n_f + 5.0) / (n_f + 10.0);
    (k, sigma)
}

/// GPD quantile with shape `k` and scale `sigma`.
fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (1.0 - p).ln()
    } else {
        sigma / k * ((1.0 - p).powf(-k) - 1.0)
    }
}

/// Smooths one observation's log importance ratios in place; returns the
/// Pareto k estimate. `-0.5` is the sentinel for tails too short or flat to
/// fit (weights left unsmoothed, effectively light-tailed).
fn psis_smooth(lw: &mut [f64]) -> f64 {
    let s = lw.len();
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in lw.iter_mut() {
        *v -= max;
    }
    let m = ((0.2 * s as f64).ceil() as usize).min(s.saturating_sub(1));
    if m < 5 {
        return -0.5;
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].partial_cmp(&lw[b]).unwrap());
    let tail_idx = &order[s - m..];
    let cutoff = lw[order[s - m - 1]];
    let u = cutoff.exp();
    let exceed: Vec<f64> = tail_idx.iter().map(|&i| lw[i].exp() - u).collect();
    if exceed.iter().all(|&e| e <= f64::EPSILON) {
        return -0.5;
    }
    let (k, sigma) = gpd_fit(&exceed);
    if !k.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
        return -0.5;
    }
    // Replace tail weights by expected GPD order statistics, capped at the
    // raw maximum (0 in shifted log space).
    let mut tail_order = tail_idx.to_vec();
    tail_order.sort_by(|&a, &b| lw[a].partial_cmp(&lw[b]).unwrap());
    for (j, &i) in tail_order.iter().enumerate() {
        let p = (j as f64 + 0.5) / m as f64;
        lw[i] = (u + gpd_quantile(p, k, sigma)).ln().min(0.0);
    }
    k
}

/// PSIS-LOO for a fitted model: per-observation elpd contributions, their
/// sum and standard error, and Pareto k diagnostics.
pub fn psis_loo(
    draws: &PosteriorDraws,
    design: &DesignMatrix,
    spec: &ModelSpec,
) -> Result<LooResult, DiagError> {
    if draws.n_draws_total() == 0 {
        return Err(DiagError::EmptyDraws);
    }
    let model = Model::new(design, spec)?;
    let s_total = draws.n_draws_total();
    let n = design.n;

    // loglik[s][i], s enumerating (chain, iteration) in order.
    let mut loglik = Vec::with_capacity(s_total);
    for c in 0..draws.n_chains {
        for i in 0..draws.n_iterations {
            loglik.push(model.pointwise_loglik(draws.draw(c, i)));
        }
    }

    let mut pointwise = Vec::with_capacity(n);
    let mut pareto_k = Vec::with_capacity(n);
    for i in 0..n {
        let col: Vec<f64> = (0..s_total).map(|s| loglik[s][i]).collect();
        if col.windows(2).all(|w| w[0] == w[1]) {
            return Err(DiagError::AllRatiosDegenerate(i));
        }
        let mut lw: Vec<f64> = col.iter().map(|&v| -v).collect();
        let k = psis_smooth(&mut lw);
        let norm = log_sum_exp(&lw);
        // elpd_i = log sum_s exp(loglik_si + lw_si - norm)
        let terms: Vec<f64> = (0..s_total).map(|s| col[s] + lw[s] - norm).collect();
        pointwise.push(log_sum_exp(&terms));
        pareto_k.push(k);
    }
    Ok(LooResult::from_pointwise(pointwise, pareto_k))
}

/// One row of the model-comparison table: the best model first with
/// difference zero, then the rest in descending ELPD order.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub name: String,
    pub elpd: f64,
    pub elpd_diff: f64,
    pub se_diff: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Paired difference `elpd(a) - elpd(b)` and its pointwise standard error.
pub fn pairwise_diff(a: &LooResult, b: &LooResult) -> Result<(f64, f64), DiagError> {
    if a.pointwise.len() != b.pointwise.len() {
        return Err(DiagError::MismatchedObservations(
            a.pointwise.len(),
            b.pointwise.len(),
        ));
    }
    let diffs: Vec<f64> = a
        .pointwise
        .iter()
        .zip(b.pointwise.iter())
        .map(|(&x, &y)| x - y)
        .collect();
    let n = diffs.len() as f64;
    let mut acc = Kahan::default();
    for &d in &diffs {
        acc.add(d);
    }
    let se = if diffs.len() > 1 {
        (n * sample_var(&diffs)).sqrt()
    } else {
        0.0
    };
    Ok((acc.value(), se))
}

/// Ranks models by ELPD (best first, names breaking ties) with
/// paired-difference standard errors against the best model.
pub fn compare_models(models: &[(String, LooResult)]) -> Result<ComparisonTable, DiagError> {
    if models.is_empty() {
        return Err(DiagError::EmptyDraws);
    }
    for w in models.windows(2) {
        if w[0].1.pointwise.len() != w[1].1.pointwise.len() {
            return Err(DiagError::MismatchedObservations(
                w[0].1.pointwise.len(),
                w[1].1.pointwise.len(),
            ));
        }
    }
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| {
        models[b]
            .1
            .elpd
            .partial_cmp(&models[a].1.elpd)
            .unwrap()
            .then_with(|| models[a].0.cmp(&models[b].0))
    });
    let best = &models[order[0]].1;
    let mut rows = Vec::with_capacity(models.len());
    for (rank, &i) in order.iter().enumerate() {
        let (diff, se) = if rank == 0 {
            (0.0, 0.0)
        } else {
            pairwise_diff(&models[i].1, best)?
        };
        rows.push(ComparisonRow {
            name: models[i].0.clone(),
            elpd: models[i].1.elpd,
            elpd_diff: diff,
            se_diff: se,
        });
    }
    Ok(ComparisonTable { rows })
}

/// Where predictive parameter draws come from.
pub enum PredictiveSource<'a> {
    /// Sample parameters from the prior alone.
    Prior,
    /// Thin evenly from posterior draws.
    Posterior(&'a PosteriorDraws),
}

#[derive(Debug, Clone)]
pub struct PredictiveSummary {
    /// Replicated response vectors, `n_reps x n`.
    pub replicates: Vec<Vec<f64>>,
    /// Central 95% band per observation across replicates.
    pub band_low: Vec<f64>,
    pub band_high: Vec<f64>,
    /// Share of observations whose observed response falls in the band.
    pub observed_coverage: f64,
    /// Two-sample KS between observed responses and pooled replicates.
    pub ks_statistic: f64,
    pub replicated_min: f64,
    pub replicated_max: f64,
}

/// Samples a correlation Cholesky factor from LKJ(eta) by the onion method.
fn sample_lkj_chol(m: usize, eta: f64, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
    use rand_distr::{Beta, StandardNormal};
    let mut r = vec![vec![0.0; m]; m];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    if m >= 2 {
        let mut beta_param = eta + (m as f64 - 2.0) / 2.0;
        let b = Beta::new(beta_param, beta_param).unwrap();
        let u: f64 = rng.sample(b);
        let rho = 2.0 * u - 1.0;
        r[0][1] = rho;
        r[1][0] = rho;
        for k in 2..m {
            beta_param -= 0.5;
            let y: f64 = rng.sample(Beta::new(k as f64 / 2.0, beta_param).unwrap());
            let mut w: Vec<f64> = (0..k)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            for wi in w.iter_mut() {
                *wi *= y.sqrt() / norm;
            }
            // q = chol(R_k) * w extends the correlation matrix.
            let lk = dense_cholesky(&r, k);
            let mut q = vec![0.0; k];
            for i in 0..k {
                for j in 0..=i {
                    q[i] += lk[i][j] * w[j];
                }
            }
            for i in 0..k {
                r[i][k] = q[i];
                r[k][i] = q[i];
            }
        }
    }
    dense_cholesky(&r, m)
}

/// Plain Cholesky of the leading `k x k` block.
fn dense_cholesky(a: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let mut l = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let mut sum = a[i][j];
            for p in 0..j {
                sum -= l[i][p] * l[j][p];
            }
            if i == j {
                l[i][j] = sum.max(1e-12).sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    l
}

/// Samples one constrained parameter vector from the model's prior.
pub fn sample_prior_constrained(
    design: &DesignMatrix,
    spec: &ModelSpec,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>, DiagError> {
    use rand_distr::{StandardNormal, StudentT};
    let model = Model::new(design, spec)?;
    let lay = model.layout;
    let prior = &spec.prior;
    let mut theta = vec![0.0; lay.dim];
    let mut z = || -> f64 { rng.sample(StandardNormal) };
    theta[lay.off_alpha] = prior.alpha_sd * z();
    theta[lay.off_nu] = prior.nu_sd * z();
    for k in 0..lay.k_eff {
        theta[lay.off_beta + k] = prior.beta_means[k] + prior.beta_sds[k] * z();
    }
    for j in 0..lay.l {
        theta[lay.off_gamma + j] = prior.gamma_sd * z();
    }
    let t3: f64 = rng.sample(StudentT::new(3.0).unwrap());
    theta[lay.off_log_sigma_e] = (model.scale_e * t3).abs().max(1e-8);
    for i in 0..lay.m {
        let g: f64 = rng.sample(StandardNormal);
        theta[lay.off_log_sd + i] = (prior.group_sd_scale * g).abs();
    }
    if lay.m > 1 {
        let l = sample_lkj_chol(lay.m, spec.lkj_eta, rng);
        let mut idx = 0;
        for i in 1..lay.m {
            for j in 0..i {
                theta[lay.off_chol + idx] = l[i][j];
                idx += 1;
            }
        }
    }
    for g in 0..lay.n_groups {
        for i in 0..lay.m {
            theta[lay.off_z + g * lay.m + i] = rng.sample(StandardNormal);
        }
    }
    Ok(theta)
}

/// Simulates replicated response vectors under the model.
pub fn predictive_simulate(
    source: PredictiveSource<'_>,
    design: &DesignMatrix,
    spec: &ModelSpec,
    n_reps: usize,
    seed: u64,
) -> Result<PredictiveSummary, DiagError> {
    use rand_distr::StandardNormal;
    assert!(n_reps >= 1);
    let model = Model::new(design, spec)?;
    let lay = model.layout;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut replicates = Vec::with_capacity(n_reps);
    for rep in 0..n_reps {
        let theta_c: Vec<f64> = match &source {
            PredictiveSource::Posterior(draws) => {
                if draws.n_draws_total() == 0 {
                    return Err(DiagError::EmptyDraws);
                }
                let s = (rep * draws.n_draws_total()) / n_reps;
                let c = s / draws.n_iterations;
                let i = s % draws.n_iterations;
                draws.draw(c, i).to_vec()
            }
            PredictiveSource::Prior => sample_prior_constrained(design, spec, &mut rng)?,
        };
        let mu = model.mu_constrained(&theta_c);
        let sigma_e = theta_c[lay.off_log_sigma_e];
        let rep_vec: Vec<f64> = mu
            .iter()
            .map(|&m| m + sigma_e * rng.sample::<f64, _>(StandardNormal))
            .collect();
        replicates.push(rep_vec);
    }

    let n = design.n;
    let mut band_low = Vec::with_capacity(n);
    let mut band_high = Vec::with_capacity(n);
    let mut covered = 0usize;
    for i in 0..n {
        let col: Vec<f64> = replicates.iter().map(|r| r[i]).collect();
        let lo = quantile(&col, 0.025);
        let hi = quantile(&col, 0.975);
        if design.response[i] >= lo && design.response[i] <= hi {
            covered += 1;
        }
        band_low.push(lo);
        band_high.push(hi);
    }
    let pooled: Vec<f64> = replicates.iter().flatten().copied().collect();
    let ks = crate::util::ks_two_sample(&design.response, &pooled);
    let replicated_min = pooled.iter().copied().fold(f64::INFINITY, f64::min);
    let replicated_max = pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PredictiveSummary {
        replicates,
        band_low,
        band_high,
        observed_coverage: covered as f64 / n as f64,
        ks_statistic: ks,
        replicated_min,
        replicated_max,
    })
}

/// Simulates one response vector from given constrained parameters (used by
/// the synthetic-data generator and tests).
pub fn simulate_response(
    design: &DesignMatrix,
    spec: &ModelSpec,
    theta_c: &[f64],
    seed: u64,
) -> Result<Vec<f64>, DiagError> {
    use rand_distr::StandardNormal;
    let model = Model::new(design, spec)?;
    let mu = model.mu_constrained(theta_c);
    let sigma_e = theta_c[model.layout.off_log_sigma_e];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok(mu
        .iter()
        .map(|&m| m + sigma_e * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Gaussian pointwise log-likelihood of arbitrary response values under
/// `theta_c`, for refit-style oracles.
pub fn loglik_for_response(
    design: &DesignMatrix,
    spec: &ModelSpec,
    theta_c: &[f64],
    response: &[f64],
) -> Result<Vec<f64>, DiagError> {
    let model = Model::new(design, spec)?;
    let mu = model.mu_constrained(theta_c);
    let sigma_e = theta_c[model.layout.off_log_sigma_e];
    Ok(response
        .iter()
        .zip(mu.iter())
        .map(|(&y, &m)| normal_lpdf(y, m, sigma_e))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{PriorConfig, Variant};
    use crate::sampler::{run_chains, IterStats, SamplerConfig};

    fn synthetic_draws(chains: Vec<Vec<f64>>) -> PosteriorDraws {
        let n_iter = chains[0].len();
        let stats = vec![
            IterStats {
                divergent: false,
                treedepth: 1,
                accept_stat: 1.0,
                energy: 0.0,
            };
            chains.len() * n_iter
        ];
        let data: Vec<Vec<Vec<f64>>> = chains
            .into_iter()
            .map(|c| c.into_iter().map(|v| vec![v]).collect())
            .collect();
        PosteriorDraws::new(vec!["x".to_string()], data, stats)
    }

    fn gaussian_chains(n_chains: usize, n: usize, mu: f64, sd: f64, seed: u64) -> Vec<Vec<f64>> {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n_chains)
            .map(|_| {
                (0..n)
                    .map(|_| mu + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn rhat_near_one_for_identical_distributions() {
        let chains = gaussian_chains(4, 1000, 0.0, 1.0, 1);
        let r = split_rhat_chains(&chains).unwrap();
        assert!((0.99..=1.01).contains(&r), "rhat {r}");
    }

    /// Direct-formula oracle: an independent implementation of the same
    /// rank-normalized split statistic.
    fn rhat_oracle(chains: &[Vec<f64>]) -> f64 {
        let mut split: Vec<Vec<f64>> = Vec::new();
        for c in chains {
            let keep = c.len() - c.len() % 2;
            split.push(c[..keep / 2].to_vec());
            split.push(c[keep / 2..keep].to_vec());
        }
        let mut all: Vec<f64> = split.iter().flatten().copied().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let s = all.len() as f64;
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let score = |v: f64| -> f64 {
            let lo = all.partition_point(|&x| x < v);
            let hi = all.partition_point(|&x| x <= v);
            let rank = (lo + hi + 1) as f64 / 2.0;
            std_normal.inverse_cdf((rank - 0.375) / (s + 0.25))
        };
        let ranked: Vec<Vec<f64>> = split
            .iter()
            .map(|c| c.iter().map(|&v| score(v)).collect())
            .collect();
        let m = ranked.len() as f64;
        let n = ranked[0].len() as f64;
        let means: Vec<f64> = ranked.iter().map(|c| c.iter().sum::<f64>() / n).collect();
        let grand = means.iter().sum::<f64>() / m;
        let b = n / (m - 1.0) * means.iter().map(|&x| (x - grand).powi(2)).sum::<f64>();
        let w = ranked
            .iter()
            .zip(means.iter())
            .map(|(c, &mu)| c.iter().map(|&x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
            .sum::<f64>()
            / m;
        (((n - 1.0) / n * w + b / n) / w).sqrt()
    }

    #[test]
    fn rhat_detects_separated_chains_and_matches_oracle() {
        let mut chains = gaussian_chains(1, 500, 0.0, 1.0, 2);
        chains.extend(gaussian_chains(1, 500, 10.0, 1.0, 3));
        let r = split_rhat_chains(&chains).unwrap();
        // Rank normalization bounds the statistic: two fully separated
        // chains saturate near 1.83 (the classic 1992 statistic would be
        // ~5 here). Anything this far above the 1.01 threshold is an
        // unambiguous failure signal.
        assert!(r > 1.7, "rhat {r}");
        let oracle = rhat_oracle(&chains);
        assert!((r - oracle).abs() < 1e-9, "{r} vs {oracle}");
    }

    #[test]
    fn rhat_zero_variance_errors() {
        let chains = vec![vec![2.0; 100], vec![2.0; 100]];
        assert!(matches!(
            split_rhat_chains(&chains),
            Err(DiagError::ZeroVariance)
        ));
    }

    #[test]
    fn rhat_invariant_under_affine_transforms() {
        let chains = gaussian_chains(4, 400, 0.3, 1.4, 5);
        let r1 = split_rhat_chains(&chains).unwrap();
        let scaled: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.iter().map(|&x| 42.0 + 17.0 * x).collect())
            .collect();
        let r2 = split_rhat_chains(&scaled).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn ess_independent_draws() {
        let chains = gaussian_chains(4, 1000, 0.0, 1.0, 7);
        let ess = ess_bulk_chains(&chains).unwrap();
        assert!((3000.0..=5000.0).contains(&ess), "ess {ess}");
    }

    #[test]
    fn ess_ar1_matches_analytic_iact() {
        use rand_distr::StandardNormal;
        let rho: f64 = 0.9;
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..1000)
                    .map(|_| {
                        let e: f64 = rng.sample(StandardNormal);
                        x = rho * x + (1.0 - rho * rho).sqrt() * e;
                        x
                    })
                    .collect()
            })
            .collect();
        let ess = ess_bulk_chains(&chains).unwrap();
        let expect = 4000.0 * (1.0 - rho) / (1.0 + rho);
        assert!(
            (ess - expect).abs() / expect < 0.3,
            "ess {ess}, analytic {expect}"
        );
    }

    #[test]
    fn ess_zero_variance_errors() {
        let chains = vec![vec![1.0; 64], vec![1.0; 64]];
        assert!(matches!(
            ess_bulk_chains(&chains),
            Err(DiagError::ZeroVariance)
        ));
    }

    #[test]
    fn diagnostics_invariant_under_chain_permutation() {
        let chains = gaussian_chains(4, 256, 0.1, 2.0, 13);
        let draws = synthetic_draws(chains);
        let permuted = draws.permute_chains(&[2, 0, 3, 1]);
        assert_eq!(
            split_rhat(&draws, 0).unwrap(),
            split_rhat(&permuted, 0).unwrap()
        );
        assert_eq!(
            ess_bulk(&draws, 0).unwrap(),
            ess_bulk(&permuted, 0).unwrap()
        );
    }

    fn quick_fit(design: &DesignMatrix, spec: &ModelSpec, seed: u64) -> PosteriorDraws {
        let config = SamplerConfig {
            n_chains: 2,
            n_warmup: 250,
            n_samples: 250,
            seed,
            ..SamplerConfig::default()
        };
        run_chains(design, spec, &config).unwrap()
    }

    #[test]
    fn psis_loo_single_observation() {
        let design = crate::inference::tests::toy_design(1, 1, 2, 3);
        let spec = ModelSpec::new(Variant::Pooled, 2, 2, PriorConfig::default_for(2));
        let draws = quick_fit(&design, &spec, 21);
        let loo = psis_loo(&draws, &design, &spec).unwrap();
        assert_eq!(loo.pointwise.len(), 1);
        assert!((loo.elpd - loo.pointwise[0]).abs() < 1e-12);
        assert_eq!(loo.se, 0.0);
    }

    #[test]
    fn identical_models_have_zero_difference() {
        let design = crate::inference::tests::toy_design(2, 8, 2, 5);
        let spec = ModelSpec::new(Variant::Pooled, 2, 2, PriorConfig::default_for(2));
        let draws = quick_fit(&design, &spec, 23);
        let a = psis_loo(&draws, &design, &spec).unwrap();
        // elpd equals the compensated sum of pointwise contributions.
        let mut acc = Kahan::default();
        for &p in &a.pointwise {
            acc.add(p);
        }
        assert_eq!(a.elpd, acc.value());
        let b = psis_loo(&draws, &design, &spec).unwrap();
        let table = compare_models(&[("m1".into(), a), ("m2".into(), b)]).unwrap();
        assert_eq!(table.rows[1].elpd_diff, 0.0);
        assert_eq!(table.rows[1].se_diff, 0.0);
    }

    #[test]
    fn comparison_is_permutation_invariant_and_antisymmetric() {
        let a = LooResult::from_pointwise(vec![-1.0, -2.0, -1.5], vec![0.1; 3]);
        let b = LooResult::from_pointwise(vec![-1.2, -1.9, -1.8], vec![0.1; 3]);
        let c = LooResult::from_pointwise(vec![-2.0, -2.5, -2.2], vec![0.1; 3]);
        let t1 = compare_models(&[
            ("a".into(), a.clone()),
            ("b".into(), b.clone()),
            ("c".into(), c.clone()),
        ])
        .unwrap();
        let t2 = compare_models(&[
            ("c".into(), c.clone()),
            ("a".into(), a.clone()),
            ("b".into(), b.clone()),
        ])
        .unwrap();
        let names1: Vec<&str> = t1.rows.iter().map(|r| r.name.as_str()).collect();
        let names2: Vec<&str> = t2.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names1, names2);
        for (r1, r2) in t1.rows.iter().zip(t2.rows.iter()) {
            assert_eq!(r1.elpd_diff, r2.elpd_diff);
            assert_eq!(r1.se_diff, r2.se_diff);
        }
        let (dab, se_ab) = pairwise_diff(&a, &b).unwrap();
        let (dba, se_ba) = pairwise_diff(&b, &a).unwrap();
        assert_eq!(dab, -dba);
        assert_eq!(se_ab, se_ba);
        let single = compare_models(&[("only".into(), a)]).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.rows[0].elpd_diff, 0.0);
        assert_eq!(single.rows[0].se_diff, 0.0);
    }

    #[test]
    fn mismatched_observations_error() {
        let a = LooResult::from_pointwise(vec![-1.0, -2.0], vec![0.1; 2]);
        let b = LooResult::from_pointwise(vec![-1.0], vec![0.1; 1]);
        assert!(matches!(
            compare_models(&[("a".into(), a), ("b".into(), b)]),
            Err(DiagError::MismatchedObservations(_, _))
        ));
    }

    #[test]
    fn posterior_predictive_covers_self_simulated_data() {
        let mut design = crate::inference::tests::toy_design(3, 10, 2, 17);
        let spec = ModelSpec::new(Variant::Pooled, 2, 2, PriorConfig::default_for(2));
        let model = Model::new(&design, &spec).unwrap();
        let mut theta = vec![0.0; model.dim()];
        theta[model.layout.off_alpha] = 0.5;
        theta[model.layout.off_nu] = 0.3;
        theta[model.layout.off_log_sigma_e] = 0.1; // constrained slot: sigma_e
        let response = simulate_response(&design, &spec, &theta, 99).unwrap();
        design.response = response;

        let draws = quick_fit(&design, &spec, 31);
        let summary =
            predictive_simulate(PredictiveSource::Posterior(&draws), &design, &spec, 200, 7)
                .unwrap();
        assert!(
            summary.observed_coverage >= 0.9,
            "coverage {}",
            summary.observed_coverage
        );
    }

    #[test]
    fn prior_predictive_spans_observed_range() {
        let design = crate::inference::tests::toy_design(3, 8, 2, 29);
        let spec = ModelSpec::new(Variant::RandomIntercepts, 2, 2, PriorConfig::default_for(2));
        let summary =
            predictive_simulate(PredictiveSource::Prior, &design, &spec, 200, 11).unwrap();
        let obs_min = design
            .response
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let obs_max = design
            .response
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(summary.replicated_min <= obs_min);
        assert!(summary.replicated_max >= obs_max);
    }

    #[test]
    fn single_replicate_shape() {
        let design = crate::inference::tests::toy_design(2, 4, 2, 37);
        let spec = ModelSpec::new(Variant::Pooled, 2, 2, PriorConfig::default_for(2));
        let draws = quick_fit(&design, &spec, 41);
        let summary =
            predictive_simulate(PredictiveSource::Posterior(&draws), &design, &spec, 1, 3).unwrap();
        assert_eq!(summary.replicates.len(), 1);
        assert_eq!(summary.replicates[0].len(), design.n);
    }
}
