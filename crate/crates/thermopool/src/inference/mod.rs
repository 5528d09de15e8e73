//! Model variants, priors, and the exact log-posterior with analytic
//! gradient in unconstrained coordinates.
//!
//! The observation model for row `r` with group (country) `g`:
//!
//! ```text
//! log_y[r] ~ Normal(mu[r], sigma_e)
//! mu[r] = nu * log_y_lag1[r] + alpha + u[g][0]
//!       + sum_k (beta[k] + u[g][k+1]) * F[r][k] + gamma . X[r]
//! ```
//!
//! Group effects are non-centered: `u[g] = diag(sd) * L_R * z[g]` with
//! standard-normal deviates `z`, per-coefficient scales shared across
//! countries, and an LKJ(eta) prior on the correlation Cholesky factor.
//! RandomIntercepts keeps only `u[g][0]`; Pooled has no group block.
//!
//! All prior densities carry their normalizing constants except the LKJ
//! factor density, which is unnormalized in the Stan convention (see
//! [`chol::lkj_cholesky_logdensity`]).

pub mod chol;
pub mod params;

use thiserror::Error;

pub use chol::{lkj_cholesky_logdensity, CholError};
pub use params::ParamLayout;

use crate::exposure::BinScheme;
use crate::panel::DesignMatrix;
use crate::util::{mad, normal_lpdf, Kahan};
use chol::{chain_grad_to_unconstrained, chol_from_unconstrained, lkj_cholesky_logdensity_factor};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("non-finite log-posterior or gradient")]
    NonFinite,
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error(transparent)]
    InvalidCholesky(#[from] CholError),
}

/// Which group-level structure the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    RandomSlopes,
    RandomIntercepts,
    Pooled,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "random_slopes" | "slopes" | "rs" => Some(Variant::RandomSlopes),
            "random_intercepts" | "intercepts" | "ri" => Some(Variant::RandomIntercepts),
            "pooled" => Some(Variant::Pooled),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::RandomSlopes => "random_slopes",
            Variant::RandomIntercepts => "random_intercepts",
            Variant::Pooled => "pooled",
        }
    }
}

/// Named prior configurations for the sensitivity suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorPreset {
    Default,
    /// Temperature-bin prior means rise by 0.5 per bin step away from the
    /// reference in both directions.
    VShape,
    /// Same as VShape on the cold side only.
    HockeyStick,
    /// Group scales shrunk hard (half-Normal(0, 0.01)).
    TightGroup,
    /// Everything widened by a factor of 10 (group scales by 5).
    Wide,
}

impl PriorPreset {
    pub fn parse(s: &str) -> Option<PriorPreset> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "default" => Some(PriorPreset::Default),
            "vshape" | "v_shape" => Some(PriorPreset::VShape),
            "hockey" | "hockey_stick" => Some(PriorPreset::HockeyStick),
            "tight" | "tight_group" => Some(PriorPreset::TightGroup),
            "wide" => Some(PriorPreset::Wide),
            _ => None,
        }
    }
}

/// Prior hyperparameters. `sigma_e_scale = None` defers to the data-based
/// rule `max(1, 2.5 * MAD(response))` with the unscaled median absolute
/// deviation.
#[derive(Debug, Clone)]
pub struct PriorConfig {
    pub beta_means: Vec<f64>,
    pub beta_sds: Vec<f64>,
    pub alpha_sd: f64,
    pub nu_sd: f64,
    pub gamma_sd: f64,
    /// Half-Normal scale for the group-level standard deviations.
    pub group_sd_scale: f64,
    pub sigma_e_scale: Option<f64>,
    pub preset: PriorPreset,
}

impl PriorConfig {
    pub fn default_for(k_eff: usize) -> Self {
        Self {
            beta_means: vec![0.0; k_eff],
            beta_sds: vec![1.0; k_eff],
            alpha_sd: 1.0,
            nu_sd: 1.0,
            gamma_sd: 1.0,
            group_sd_scale: 1.0,
            sigma_e_scale: None,
            preset: PriorPreset::Default,
        }
    }

    /// Builds a preset for a concrete bin scheme: the V-shape and
    /// hockey-stick means need each retained bin's step distance from the
    /// reference bins.
    pub fn for_scheme(preset: PriorPreset, scheme: &BinScheme) -> Self {
        let retained = scheme.retained_bins();
        let mut cfg = Self::default_for(retained.len());
        cfg.preset = preset;
        let refs: Vec<usize> = scheme.reference_bins.iter().copied().collect();
        let dist = |b: usize| -> f64 {
            refs.iter()
                .map(|&r| (b as i64 - r as i64).unsigned_abs())
                .min()
                .unwrap_or(0) as f64
        };
        let cold_side = |b: usize| refs.first().is_some_and(|&r| b < r);
        match preset {
            PriorPreset::Default => {}
            PriorPreset::VShape => {
                for (i, &b) in retained.iter().enumerate() {
                    cfg.beta_means[i] = 0.5 * dist(b);
                }
            }
            PriorPreset::HockeyStick => {
                for (i, &b) in retained.iter().enumerate() {
                    if cold_side(b) {
                        cfg.beta_means[i] = 0.5 * dist(b);
                    }
                }
            }
            PriorPreset::TightGroup => {
                cfg.group_sd_scale = 0.01;
            }
            PriorPreset::Wide => {
                cfg.beta_sds = vec![10.0; retained.len()];
                cfg.alpha_sd = 10.0;
                cfg.nu_sd = 10.0;
                cfg.gamma_sd = 10.0;
                cfg.group_sd_scale = 5.0;
            }
        }
        cfg
    }
}

/// Variant selector plus prior configuration for one fit.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub variant: Variant,
    pub k_eff: usize,
    pub l: usize,
    pub prior: PriorConfig,
    pub lkj_eta: f64,
    /// Multiplies the data term; 0 samples the prior alone.
    pub likelihood_weight: f64,
}

impl ModelSpec {
    pub fn new(variant: Variant, k_eff: usize, l: usize, prior: PriorConfig) -> Self {
        Self {
            variant,
            k_eff,
            l,
            prior,
            lkj_eta: 2.0,
            likelihood_weight: 1.0,
        }
    }

    /// Group-effect dimension per country.
    pub fn group_dim(&self) -> usize {
        match self.variant {
            Variant::RandomSlopes => self.k_eff + 1,
            Variant::RandomIntercepts => 1,
            Variant::Pooled => 0,
        }
    }
}

/// A model bound to its design: the evaluation target for the sampler.
#[derive(Debug, Clone)]
pub struct Model<'a> {
    pub design: &'a DesignMatrix,
    pub spec: &'a ModelSpec,
    pub layout: ParamLayout,
    /// Data-based half-t scale for sigma_e.
    pub scale_e: f64,
    /// Row visit order (sorted by group then year) so the likelihood sum does
    /// not depend on design row order.
    eval_order: Vec<usize>,
}

impl<'a> Model<'a> {
    pub fn new(design: &'a DesignMatrix, spec: &'a ModelSpec) -> Result<Self, InferenceError> {
        if design.k_eff != spec.k_eff || design.l != spec.l {
            return Err(InferenceError::DimensionMismatch {
                context: format!(
                    "design has k_eff={}, l={}; spec has k_eff={}, l={}",
                    design.k_eff, design.l, spec.k_eff, spec.l
                ),
            });
        }
        if spec.prior.beta_means.len() != spec.k_eff || spec.prior.beta_sds.len() != spec.k_eff {
            return Err(InferenceError::DimensionMismatch {
                context: "prior beta vectors must have length k_eff".to_string(),
            });
        }
        let scale_e = spec
            .prior
            .sigma_e_scale
            .unwrap_or_else(|| (2.5 * mad(&design.response)).max(1.0));
        let layout = ParamLayout::new(spec, design.n_groups);
        let mut eval_order: Vec<usize> = (0..design.n).collect();
        eval_order.sort_by_key(|&r| (design.row_group[r], design.row_years[r]));
        Ok(Self {
            design,
            spec,
            layout,
            scale_e,
            eval_order,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    /// Log joint density in unconstrained coordinates, Jacobian terms
    /// included. Non-finite values collapse to -inf (a rejection signal).
    pub fn log_posterior(&self, theta_u: &[f64]) -> f64 {
        let lp = self.eval(theta_u, None);
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }

    /// Analytic gradient of [`Model::log_posterior`].
    pub fn grad_log_posterior(&self, theta_u: &[f64]) -> Result<Vec<f64>, InferenceError> {
        let mut grad = vec![0.0; self.layout.dim];
        let lp = self.eval(theta_u, Some(&mut grad));
        if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(InferenceError::NonFinite);
        }
        Ok(grad)
    }

    /// Log-posterior and gradient in one pass; `grad` must have length
    /// [`Model::dim`]. Returns -inf with an unspecified gradient on
    /// non-finite evaluations.
    pub fn logp_and_grad(&self, theta_u: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let lp = self.eval(theta_u, Some(grad));
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }

    /// Data log-likelihood alone (no priors, no Jacobians, unweighted),
    /// from unconstrained coordinates.
    pub fn log_likelihood(&self, theta_u: &[f64]) -> f64 {
        let (c, _) = self.layout.transform(theta_u);
        self.pointwise_loglik(&c).iter().sum()
    }

    /// Per-row linear predictor from a constrained parameter vector.
    pub fn mu_constrained(&self, theta_c: &[f64]) -> Vec<f64> {
        assert_eq!(theta_c.len(), self.layout.dim);
        let d = self.design;
        let lay = &self.layout;
        let alpha = theta_c[lay.off_alpha];
        let nu = theta_c[lay.off_nu];
        let beta = &theta_c[lay.off_beta..lay.off_beta + lay.k_eff];
        let gamma = &theta_c[lay.off_gamma..lay.off_gamma + lay.l];
        let groups = lay.group_effects_from_constrained(theta_c);
        let mut mu = Vec::with_capacity(d.n);
        for r in 0..d.n {
            let mut v = alpha + nu * d.lag[r];
            for k in 0..lay.k_eff {
                v += beta[k] * d.exposure_at(r, k);
            }
            for j in 0..lay.l {
                v += gamma[j] * d.covariate_at(r, j);
            }
            if lay.m > 0 {
                let u = &groups[d.row_group[r]];
                v += u[0];
                if lay.m > 1 {
                    for k in 0..lay.k_eff {
                        v += u[k + 1] * d.exposure_at(r, k);
                    }
                }
            }
            mu.push(v);
        }
        mu
    }

    /// Per-observation Gaussian log-likelihood from a constrained vector.
    pub fn pointwise_loglik(&self, theta_c: &[f64]) -> Vec<f64> {
        let sigma_e = theta_c[self.layout.off_log_sigma_e];
        let mu = self.mu_constrained(theta_c);
        self.design
            .response
            .iter()
            .zip(mu.iter())
            .map(|(&y, &m)| normal_lpdf(y, m, sigma_e))
            .collect()
    }

    /// The shared evaluation core. When `grad` is `Some`, it must be zeroed
    /// and gets the full gradient added into it.
    fn eval(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let lay = &self.layout;
        assert_eq!(u.len(), lay.dim, "parameter vector length");
        let d = self.design;
        let k_eff = lay.k_eff;
        let l = lay.l;
        let m = lay.m;
        let n = d.n;
        let lw = self.spec.likelihood_weight;
        let prior = &self.spec.prior;

        let alpha = u[lay.off_alpha];
        let nu = u[lay.off_nu];
        let beta = &u[lay.off_beta..lay.off_beta + k_eff];
        let gamma = &u[lay.off_gamma..lay.off_gamma + l];
        let ue = u[lay.off_log_sigma_e];
        let sigma_e = ue.exp();

        // Group machinery: sds, Cholesky factor, per-group L*z and effects.
        let sds: Vec<f64> = (0..m).map(|i| u[lay.off_log_sd + i].exp()).collect();
        let fac = if m > 1 {
            Some(chol_from_unconstrained(
                &u[lay.off_chol..lay.off_chol + lay.n_chol()],
                m,
            ))
        } else {
            None
        };
        let l_at = |i: usize, j: usize| -> f64 {
            match &fac {
                Some(f) => f.l[i * m + j],
                None => 1.0, // m == 1
            }
        };
        let mut lz = vec![0.0; d.n_groups * m];
        let mut ug = vec![0.0; d.n_groups * m];
        for g in 0..d.n_groups {
            let z = &u[lay.off_z + g * m..lay.off_z + (g + 1) * m];
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += l_at(i, j) * z[j];
                }
                lz[g * m + i] = acc;
                ug[g * m + i] = sds[i] * acc;
            }
        }

        // Likelihood, iterated in canonical row order.
        let inv_s2 = 1.0 / (sigma_e * sigma_e);
        let mut ll = Kahan::default();
        let mut sum_e2 = Kahan::default();
        let mut dgrp = vec![0.0; d.n_groups * m];
        for &r in &self.eval_order {
            let mut mu = alpha + nu * d.lag[r];
            for k in 0..k_eff {
                mu += beta[k] * d.exposure_at(r, k);
            }
            for j in 0..l {
                mu += gamma[j] * d.covariate_at(r, j);
            }
            let g = d.row_group[r];
            if m > 0 {
                mu += ug[g * m];
                if m > 1 {
                    for k in 0..k_eff {
                        mu += ug[g * m + k + 1] * d.exposure_at(r, k);
                    }
                }
            }
            let e = d.response[r] - mu;
            ll.add(-0.5 * e * e * inv_s2);
            sum_e2.add(e * e);
            if let Some(gr) = grad.as_deref_mut() {
                let dmu = lw * e * inv_s2;
                gr[lay.off_alpha] += dmu;
                gr[lay.off_nu] += dmu * d.lag[r];
                for k in 0..k_eff {
                    gr[lay.off_beta + k] += dmu * d.exposure_at(r, k);
                }
                for j in 0..l {
                    gr[lay.off_gamma + j] += dmu * d.covariate_at(r, j);
                }
                if m > 0 {
                    dgrp[g * m] += dmu;
                    if m > 1 {
                        for k in 0..k_eff {
                            dgrp[g * m + k + 1] += dmu * d.exposure_at(r, k);
                        }
                    }
                }
            }
        }
        let n_f = n as f64;
        let mut lp =
            lw * (ll.value() - n_f * sigma_e.ln() - 0.5 * n_f * (2.0 * std::f64::consts::PI).ln());
        if let Some(gr) = grad.as_deref_mut() {
            gr[lay.off_log_sigma_e] += lw * (-n_f + sum_e2.value() * inv_s2);
        }

        // Global priors.
        lp += normal_lpdf(alpha, 0.0, prior.alpha_sd);
        lp += normal_lpdf(nu, 0.0, prior.nu_sd);
        for k in 0..k_eff {
            lp += normal_lpdf(beta[k], prior.beta_means[k], prior.beta_sds[k]);
        }
        for j in 0..l {
            lp += normal_lpdf(gamma[j], 0.0, prior.gamma_sd);
        }
        if let Some(gr) = grad.as_deref_mut() {
            gr[lay.off_alpha] -= alpha / (prior.alpha_sd * prior.alpha_sd);
            gr[lay.off_nu] -= nu / (prior.nu_sd * prior.nu_sd);
            for k in 0..k_eff {
                gr[lay.off_beta + k] -=
                    (beta[k] - prior.beta_means[k]) / (prior.beta_sds[k] * prior.beta_sds[k]);
            }
            for j in 0..l {
                gr[lay.off_gamma + j] -= gamma[j] / (prior.gamma_sd * prior.gamma_sd);
            }
        }

        // sigma_e ~ half-t(3, 0, scale_e), plus the exp-transform Jacobian.
        let a2 = self.scale_e * self.scale_e;
        lp += (4.0 / (std::f64::consts::PI * 3.0f64.sqrt() * self.scale_e)).ln()
            - 2.0 * (1.0 + sigma_e * sigma_e / (3.0 * a2)).ln();
        lp += ue;
        if let Some(gr) = grad.as_deref_mut() {
            gr[lay.off_log_sigma_e] +=
                sigma_e * (-4.0 * sigma_e / (3.0 * a2 + sigma_e * sigma_e)) + 1.0;
        }

        if m > 0 {
            // Group sds ~ half-Normal(0, group_sd_scale), with Jacobians.
            let s2 = prior.group_sd_scale * prior.group_sd_scale;
            for i in 0..m {
                lp += std::f64::consts::LN_2 + normal_lpdf(sds[i], 0.0, prior.group_sd_scale);
                lp += u[lay.off_log_sd + i];
            }
            // Deviates ~ Normal(0, 1).
            for g in 0..d.n_groups {
                for i in 0..m {
                    let z = u[lay.off_z + g * m + i];
                    lp += normal_lpdf(z, 0.0, 1.0);
                }
            }
            if let Some(f) = &fac {
                lp += lkj_cholesky_logdensity_factor(f, self.spec.lkj_eta) + f.log_jacobian;
            }

            if let Some(gr) = grad.as_deref_mut() {
                for i in 0..m {
                    // Likelihood part through u_g = sd_i * (L z)_i, then the
                    // half-Normal prior and the exp Jacobian.
                    let mut acc = 0.0;
                    for g in 0..d.n_groups {
                        acc += dgrp[g * m + i] * lz[g * m + i];
                    }
                    gr[lay.off_log_sd + i] += sds[i] * acc - sds[i] * sds[i] / s2 + 1.0;
                }
                for g in 0..d.n_groups {
                    for j in 0..m {
                        let mut acc = 0.0;
                        for i in j..m {
                            acc += l_at(i, j) * sds[i] * dgrp[g * m + i];
                        }
                        gr[lay.off_z + g * m + j] += acc - u[lay.off_z + g * m + j];
                    }
                }
                if let Some(f) = &fac {
                    // d lp / d L[i][j]: likelihood through u_g, LKJ on diag.
                    let mut dl = vec![0.0; m * m];
                    for g in 0..d.n_groups {
                        let z = &u[lay.off_z + g * m..lay.off_z + (g + 1) * m];
                        for i in 0..m {
                            let di = dgrp[g * m + i];
                            if di != 0.0 {
                                for j in 0..=i {
                                    dl[i * m + j] += di * z[j];
                                }
                            }
                        }
                    }
                    for i in 0..m {
                        for j in 0..=i {
                            dl[i * m + j] *= sds[i];
                        }
                    }
                    for i in 1..m {
                        let exponent = (m - (i + 1)) as f64 + 2.0 * self.spec.lkj_eta - 2.0;
                        dl[i * m + i] += exponent / f.l[i * m + i];
                    }
                    let dy = chain_grad_to_unconstrained(f, &dl);
                    for (k, v) in dy.iter().enumerate() {
                        gr[lay.off_chol + k] += v;
                    }
                }
            }
        }

        lp
    }
}

/// Free-function form of [`Model::log_posterior`].
pub fn log_posterior(
    theta_u: &[f64],
    design: &DesignMatrix,
    spec: &ModelSpec,
) -> Result<f64, InferenceError> {
    let model = Model::new(design, spec)?;
    let lp = model.log_posterior(theta_u);
    if lp.is_finite() || lp == f64::NEG_INFINITY {
        Ok(lp)
    } else {
        Err(InferenceError::NonFinite)
    }
}

/// Free-function form of [`Model::grad_log_posterior`].
pub fn grad_log_posterior(
    theta_u: &[f64],
    design: &DesignMatrix,
    spec: &ModelSpec,
) -> Result<Vec<f64>, InferenceError> {
    Model::new(design, spec)?.grad_log_posterior(theta_u)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::panel::{DesignLabels, DesignMatrix};
    use rand::prelude::*;
    use statrs::distribution::{Continuous, Normal, StudentsT};

    /// A throwaway design matrix with random but fixed contents.
    pub(crate) fn toy_design(
        n_groups: usize,
        years_per_group: usize,
        k_eff: usize,
        seed: u64,
    ) -> DesignMatrix {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let n = n_groups * years_per_group;
        let l = 2;
        let mut exposure = Vec::with_capacity(n * k_eff);
        let mut covariates = Vec::with_capacity(n * l);
        let mut response = Vec::with_capacity(n);
        let mut lag = Vec::with_capacity(n);
        let mut row_group = Vec::with_capacity(n);
        let mut row_years = Vec::with_capacity(n);
        for g in 0..n_groups {
            for t in 0..years_per_group {
                let mut e: Vec<f64> = (0..k_eff).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = e.iter().sum::<f64>() * 1.3;
                e.iter_mut().for_each(|v| *v /= s);
                exposure.extend_from_slice(&e);
                covariates.push(rng.gen_range(-1.0..1.0));
                covariates.push(rng.gen_range(-1.0..1.0));
                response.push(rng.gen_range(-1.0..1.0));
                lag.push(rng.gen_range(-1.0..1.0));
                row_group.push(g);
                row_years.push(2000 + t as i32);
            }
        }
        DesignMatrix {
            n,
            k_eff,
            l,
            response,
            lag,
            exposure,
            covariates,
            covariate_centers: vec![0.0; l],
            row_group,
            n_groups,
            group_names: (0..n_groups).map(|g| format!("C{g:02}")).collect(),
            row_years,
            labels: DesignLabels {
                exposure: (0..k_eff).map(|k| format!("bin{k}")).collect(),
                covariates: vec!["log_gdp".into(), "log_price_lag1".into()],
            },
            warnings: Vec::new(),
            retained_bins: (0..k_eff).collect(),
        }
    }

    fn half_t3_lpdf(x: f64, scale: f64) -> f64 {
        // 2/scale * t_3(x/scale) for x >= 0, via statrs.
        let t = StudentsT::new(0.0, 1.0, 3.0).unwrap();
        std::f64::consts::LN_2 - scale.ln() + t.ln_pdf(x / scale)
    }

    #[test]
    fn pooled_single_row_hand_value() {
        let mut d = toy_design(1, 1, 2, 0);
        d.response = vec![0.0];
        d.lag = vec![0.0];
        d.exposure = vec![0.0, 0.0];
        d.covariates = vec![0.0, 0.0];
        let spec = ModelSpec::new(Variant::Pooled, 2, 2, PriorConfig::default_for(2));
        let model = Model::new(&d, &spec).unwrap();
        assert_eq!(model.scale_e, 1.0); // MAD of a single 0 is 0 -> floor 1
        let u = vec![0.0; model.dim()];
        let got = model.log_posterior(&u);

        let n01 = Normal::new(0.0, 1.0).unwrap();
        let likelihood = n01.ln_pdf(0.0);
        // alpha, nu, beta x2, gamma x2 all standard normal at zero.
        let priors = 6.0 * n01.ln_pdf(0.0) + half_t3_lpdf(1.0, 1.0);
        let jacobian = 0.0;
        let expect = likelihood + priors + jacobian;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    /// Independent term-by-term recomputation of the joint density using
    /// statrs densities and a fresh Cholesky reconstruction.
    fn oracle_logp(model: &Model, u: &[f64]) -> f64 {
        let lay = &model.layout;
        let d = model.design;
        let prior = &model.spec.prior;
        let m = lay.m;
        let alpha = u[0];
        let nu = u[1];
        let beta = &u[lay.off_beta..lay.off_beta + lay.k_eff];
        let gamma = &u[lay.off_gamma..lay.off_gamma + lay.l];
        let sigma_e = u[lay.off_log_sigma_e].exp();

        // Rebuild L from tanh recursion, independently of chol.rs.
        let mut lmat = vec![vec![0.0; m.max(1)]; m.max(1)];
        let mut log_jac = 0.0;
        if m >= 1 {
            lmat[0][0] = 1.0;
        }
        if m > 1 {
            let mut idx = 0;
            for i in 1..m {
                let mut rem: f64 = 1.0;
                for j in 0..i {
                    let t = u[lay.off_chol + idx].tanh();
                    idx += 1;
                    lmat[i][j] = t * rem.sqrt();
                    log_jac += rem.sqrt().ln() + (1.0 - t * t).ln();
                    rem *= 1.0 - t * t;
                }
                lmat[i][i] = rem.sqrt();
            }
        }

        let sds: Vec<f64> = (0..m).map(|i| u[lay.off_log_sd + i].exp()).collect();
        let mut lp = 0.0;
        let like = Normal::new(0.0, 1.0).unwrap();
        for r in 0..d.n {
            let g = d.row_group[r];
            let mut mu = alpha + nu * d.lag[r];
            for k in 0..lay.k_eff {
                mu += beta[k] * d.exposure_at(r, k);
            }
            for j in 0..lay.l {
                mu += gamma[j] * d.covariate_at(r, j);
            }
            for i in 0..m {
                let mut lzi = 0.0;
                for j in 0..=i {
                    lzi += lmat[i][j] * u[lay.off_z + g * m + j];
                }
                let coef = sds[i] * lzi;
                if i == 0 {
                    mu += coef;
                } else {
                    mu += coef * d.exposure_at(r, i - 1);
                }
            }
            let norm = Normal::new(mu, sigma_e).unwrap();
            lp += model.spec.likelihood_weight * norm.ln_pdf(d.response[r]);
        }

        lp += Normal::new(0.0, prior.alpha_sd).unwrap().ln_pdf(alpha);
        lp += Normal::new(0.0, prior.nu_sd).unwrap().ln_pdf(nu);
        for k in 0..lay.k_eff {
            lp += Normal::new(prior.beta_means[k], prior.beta_sds[k])
                .unwrap()
                .ln_pdf(beta[k]);
        }
        for j in 0..lay.l {
            lp += Normal::new(0.0, prior.gamma_sd).unwrap().ln_pdf(gamma[j]);
        }
        lp += half_t3_lpdf(sigma_e, model.scale_e) + u[lay.off_log_sigma_e];
        for i in 0..m {
            lp += std::f64::consts::LN_2
                + Normal::new(0.0, prior.group_sd_scale)
                    .unwrap()
                    .ln_pdf(sds[i]);
            lp += u[lay.off_log_sd + i];
        }
        for g in 0..d.n_groups {
            for i in 0..m {
                lp += like.ln_pdf(u[lay.off_z + g * m + i]);
            }
        }
        if m > 1 {
            for i in 1..m {
                let e = (m - (i + 1)) as f64 + 2.0 * model.spec.lkj_eta - 2.0;
                lp += e * lmat[i][i].ln();
            }
            lp += log_jac;
        }
        lp
    }

    #[test]
    fn log_posterior_matches_term_by_term_oracle() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        for variant in [
            Variant::Pooled,
            Variant::RandomIntercepts,
            Variant::RandomSlopes,
        ] {
            let d = toy_design(4, 6, 3, 7);
            let spec = ModelSpec::new(variant, 3, 2, PriorConfig::default_for(3));
            let model = Model::new(&d, &spec).unwrap();
            for _ in 0..10 {
                let u: Vec<f64> = (0..model.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let got = model.log_posterior(&u);
                let expect = oracle_logp(&model, &u);
                assert!(
                    (got - expect).abs() < 1e-9 * (1.0 + expect.abs()),
                    "{variant:?}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn zero_deviates_reduce_to_pooled_likelihood() {
        let d = toy_design(3, 5, 3, 11);
        let rs_spec = ModelSpec::new(Variant::RandomSlopes, 3, 2, PriorConfig::default_for(3));
        let rs = Model::new(&d, &rs_spec).unwrap();
        let pooled_spec = ModelSpec::new(Variant::Pooled, 3, 2, PriorConfig::default_for(3));
        let pooled = Model::new(&d, &pooled_spec).unwrap();

        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let globals: Vec<f64> = (0..pooled.dim())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut u_rs = vec![0.0; rs.dim()];
        u_rs[..globals.len()].copy_from_slice(&globals);
        // Arbitrary scales and correlations; deviates stay zero.
        for i in 0..rs.layout.m {
            u_rs[rs.layout.off_log_sd + i] = rng.gen_range(-1.0..1.0);
        }
        for k in 0..rs.layout.n_chol() {
            u_rs[rs.layout.off_chol + k] = rng.gen_range(-1.0..1.0);
        }
        assert_eq!(rs.log_likelihood(&u_rs), pooled.log_likelihood(&globals));
    }

    pub(crate) fn fd_gradient(model: &Model, u: &[f64], h: f64) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        for i in 0..u.len() {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[i] += h;
            dn[i] -= h;
            out[i] = (model.log_posterior(&up) - model.log_posterior(&dn)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(8);
        for variant in [
            Variant::Pooled,
            Variant::RandomIntercepts,
            Variant::RandomSlopes,
        ] {
            let d = toy_design(3, 4, 3, 19);
            let spec = ModelSpec::new(variant, 3, 2, PriorConfig::default_for(3));
            let model = Model::new(&d, &spec).unwrap();
            for _ in 0..5 {
                let u: Vec<f64> = (0..model.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let grad = model.grad_log_posterior(&u).unwrap();
                let fd = fd_gradient(&model, &u, 1e-5);
                for i in 0..u.len() {
                    let denom = grad[i].abs().max(fd[i].abs()).max(1.0);
                    assert!(
                        (grad[i] - fd[i]).abs() / denom < 1e-6,
                        "{variant:?} coord {i}: {} vs {}",
                        grad[i],
                        fd[i]
                    );
                }
            }
        }
    }

    #[test]
    fn pooled_layout_excludes_group_parameters() {
        let d = toy_design(5, 3, 4, 2);
        let spec = ModelSpec::new(Variant::Pooled, 4, 2, PriorConfig::default_for(4));
        let model = Model::new(&d, &spec).unwrap();
        assert_eq!(model.dim(), 1 + 1 + 4 + 2 + 1);
        let grad = model.grad_log_posterior(&vec![0.1; model.dim()]).unwrap();
        assert_eq!(grad.len(), model.dim());
    }

    #[test]
    fn gradient_vanishes_at_coarse_maximum() {
        let d = toy_design(2, 8, 2, 31);
        let spec = ModelSpec::new(Variant::Pooled, 2, 2, PriorConfig::default_for(2));
        let model = Model::new(&d, &spec).unwrap();
        // Gradient ascent with backtracking.
        let mut u = vec![0.0; model.dim()];
        let mut lp = model.log_posterior(&u);
        for _ in 0..5000 {
            let g = model.grad_log_posterior(&u).unwrap();
            let mut step = 0.5;
            loop {
                let cand: Vec<f64> = u.iter().zip(g.iter()).map(|(a, b)| a + step * b).collect();
                let cand_lp = model.log_posterior(&cand);
                if cand_lp > lp {
                    u = cand;
                    lp = cand_lp;
                    break;
                }
                step *= 0.5;
                if step < 1e-14 {
                    break;
                }
            }
        }
        let g = model.grad_log_posterior(&u).unwrap();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-4, "gradient norm {norm}");
    }

    #[test]
    fn log_posterior_invariant_under_row_permutation() {
        let d = toy_design(3, 5, 3, 23);
        let spec = ModelSpec::new(Variant::RandomSlopes, 3, 2, PriorConfig::default_for(3));
        let model = Model::new(&d, &spec).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(14);
        let u: Vec<f64> = (0..model.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let base = model.log_posterior(&u);

        // Reverse the row order of every row-indexed field.
        let mut d2 = d.clone();
        let n = d.n;
        d2.response.reverse();
        d2.lag.reverse();
        d2.row_group.reverse();
        d2.row_years.reverse();
        let mut exposure = vec![0.0; n * d.k_eff];
        let mut covariates = vec![0.0; n * d.l];
        for r in 0..n {
            for k in 0..d.k_eff {
                exposure[(n - 1 - r) * d.k_eff + k] = d.exposure_at(r, k);
            }
            for j in 0..d.l {
                covariates[(n - 1 - r) * d.l + j] = d.covariate_at(r, j);
            }
        }
        d2.exposure = exposure;
        d2.covariates = covariates;
        let model2 = Model::new(&d2, &spec).unwrap();
        assert_eq!(base, model2.log_posterior(&u));
    }

    #[test]
    fn vshape_and_hockey_presets() {
        let scheme = crate::exposure::make_bin_scheme(3.5, -5.0, 30.0).unwrap();
        let v = PriorConfig::for_scheme(PriorPreset::VShape, &scheme);
        // Retained bins: 0..=6 (cold side), 9..=11 (hot side).
        assert_eq!(v.beta_means[6], 0.5); // bin 6 is one step from ref bin 7
        assert_eq!(v.beta_means[0], 3.5); // bin 0 is seven steps away
        assert_eq!(v.beta_means[7], 0.5); // first hot bin (index 9) one step from ref 8
        assert_eq!(v.beta_means[9], 1.5); // hottest bin, three steps

        let h = PriorConfig::for_scheme(PriorPreset::HockeyStick, &scheme);
        assert_eq!(h.beta_means[6], 0.5);
        assert_eq!(h.beta_means[7], 0.0);
        assert_eq!(h.beta_means[9], 0.0);

        let t = PriorConfig::for_scheme(PriorPreset::TightGroup, &scheme);
        assert_eq!(t.group_sd_scale, 0.01);
        let w = PriorConfig::for_scheme(PriorPreset::Wide, &scheme);
        assert_eq!(w.beta_sds[0], 10.0);
    }
}
