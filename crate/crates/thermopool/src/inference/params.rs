//! Parameter vector layout and the constrained/unconstrained bijection.
//!
//! Unconstrained order (offsets depend on the variant):
//!
//! | block        | length            | transform            |
//! |--------------|-------------------|----------------------|
//! | alpha        | 1                 | identity             |
//! | nu           | 1                 | identity             |
//! | beta         | k_eff             | identity             |
//! | gamma        | l                 | identity             |
//! | log sigma_e  | 1                 | exp                  |
//! | log group sd | m                 | exp                  |
//! | chol         | m(m-1)/2          | tanh row fill        |
//! | z            | n_groups * m      | identity             |
//!
//! The constrained view stores exp'd scales and the strict-lower entries of
//! the correlation Cholesky factor in the chol slots; everything else is
//! copied. `m` is 0 for Pooled, 1 for RandomIntercepts, k_eff + 1 for
//! RandomSlopes; the group blocks vanish when `m` is 0 and the chol block
//! when `m < 2`.

use super::chol::{chol_from_unconstrained, n_lower, unconstrained_from_lower};
use super::{ModelSpec, Variant};
use crate::panel::DesignMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub variant: Variant,
    pub k_eff: usize,
    pub l: usize,
    pub n_groups: usize,
    /// Group-effect dimension per country.
    pub m: usize,
    pub off_alpha: usize,
    pub off_nu: usize,
    pub off_beta: usize,
    pub off_gamma: usize,
    pub off_log_sigma_e: usize,
    pub off_log_sd: usize,
    pub off_chol: usize,
    pub off_z: usize,
    pub dim: usize,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec, n_groups: usize) -> Self {
        let k_eff = spec.k_eff;
        let l = spec.l;
        let m = spec.group_dim();
        let off_alpha = 0;
        let off_nu = 1;
        let off_beta = 2;
        let off_gamma = off_beta + k_eff;
        let off_log_sigma_e = off_gamma + l;
        let off_log_sd = off_log_sigma_e + 1;
        let off_chol = off_log_sd + m;
        let off_z = off_chol + n_lower(m.max(1));
        let dim = off_z + n_groups * m;
        Self {
            variant: spec.variant,
            k_eff,
            l,
            n_groups,
            m,
            off_alpha,
            off_nu,
            off_beta,
            off_gamma,
            off_log_sigma_e,
            off_log_sd,
            off_chol,
            off_z,
            dim,
        }
    }

    pub fn n_chol(&self) -> usize {
        n_lower(self.m.max(1))
    }

    /// Constrained-space labels, aligned with both views.
    pub fn labels(&self, design: &DesignMatrix) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim);
        out.push("alpha".to_string());
        out.push("nu".to_string());
        for lbl in &design.labels.exposure {
            out.push(format!("beta[{lbl}]"));
        }
        for lbl in &design.labels.covariates {
            out.push(format!("gamma[{lbl}]"));
        }
        out.push("sigma_e".to_string());
        let coef_names: Vec<String> = std::iter::once("intercept".to_string())
            .chain(design.labels.exposure.iter().cloned())
            .collect();
        for mi in 0..self.m {
            out.push(format!("sd[{}]", coef_names[mi]));
        }
        for i in 1..self.m {
            for j in 0..i {
                out.push(format!("L[{},{}]", i + 1, j + 1));
            }
        }
        for g in 0..self.n_groups {
            for mi in 0..self.m {
                out.push(format!("z[{},{}]", design.group_names[g], coef_names[mi]));
            }
        }
        debug_assert_eq!(out.len(), self.dim);
        out
    }

    /// Maps unconstrained to constrained values, returning the transform's
    /// log-Jacobian (exp terms plus the Cholesky row-fill term).
    pub fn transform(&self, unconstrained: &[f64]) -> (Vec<f64>, f64) {
        assert_eq!(unconstrained.len(), self.dim);
        let mut out = unconstrained.to_vec();
        let mut log_jac = 0.0;
        let ue = unconstrained[self.off_log_sigma_e];
        out[self.off_log_sigma_e] = ue.exp();
        log_jac += ue;
        for i in 0..self.m {
            let u = unconstrained[self.off_log_sd + i];
            out[self.off_log_sd + i] = u.exp();
            log_jac += u;
        }
        if self.m > 1 {
            let nc = n_lower(self.m);
            let fac =
                chol_from_unconstrained(&unconstrained[self.off_chol..self.off_chol + nc], self.m);
            for i in 1..self.m {
                for j in 0..i {
                    out[self.off_chol + super::chol::lower_index(i, j)] = fac.l[i * self.m + j];
                }
            }
            log_jac += fac.log_jacobian;
        }
        (out, log_jac)
    }

    /// Inverse of [`ParamLayout::transform`]; round-trips to ~1e-12.
    pub fn inverse_transform(&self, constrained: &[f64]) -> Vec<f64> {
        assert_eq!(constrained.len(), self.dim);
        let mut out = constrained.to_vec();
        out[self.off_log_sigma_e] = constrained[self.off_log_sigma_e].ln();
        for i in 0..self.m {
            out[self.off_log_sd + i] = constrained[self.off_log_sd + i].ln();
        }
        if self.m > 1 {
            let nc = n_lower(self.m);
            let y =
                unconstrained_from_lower(&constrained[self.off_chol..self.off_chol + nc], self.m);
            out[self.off_chol..self.off_chol + nc].copy_from_slice(&y);
        }
        out
    }

    /// Group-effect matrix (n_groups x m) from a constrained vector:
    /// `u_g = diag(sd) * L * z_g`.
    pub fn group_effects_from_constrained(&self, constrained: &[f64]) -> Vec<Vec<f64>> {
        if self.m == 0 {
            return vec![Vec::new(); self.n_groups];
        }
        let m = self.m;
        let sds = &constrained[self.off_log_sd..self.off_log_sd + m];
        let mut l = vec![0.0; m * m];
        l[0] = 1.0;
        if m > 1 {
            let mut rem = vec![1.0f64; m];
            for i in 1..m {
                for j in 0..i {
                    let v = constrained[self.off_chol + super::chol::lower_index(i, j)];
                    l[i * m + j] = v;
                    rem[i] -= v * v;
                }
                l[i * m + i] = rem[i].max(0.0).sqrt();
            }
        }
        let mut out = Vec::with_capacity(self.n_groups);
        for g in 0..self.n_groups {
            let z = &constrained[self.off_z + g * m..self.off_z + (g + 1) * m];
            let mut u = vec![0.0; m];
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += l[i * m + j] * z[j];
                }
                u[i] = sds[i] * acc;
            }
            out.push(u);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ModelSpec, PriorConfig, Variant};
    use super::*;

    fn layout(variant: Variant, k_eff: usize, n_groups: usize) -> ParamLayout {
        let spec = ModelSpec::new(variant, k_eff, 2, PriorConfig::default_for(k_eff));
        ParamLayout::new(&spec, n_groups)
    }

    #[test]
    fn dimensions_per_variant() {
        // k_eff = 10, l = 2, 40 groups.
        let pooled = layout(Variant::Pooled, 10, 40);
        assert_eq!(pooled.dim, 15);
        let ri = layout(Variant::RandomIntercepts, 10, 40);
        assert_eq!(ri.dim, 15 + 1 + 40);
        let rs = layout(Variant::RandomSlopes, 10, 40);
        assert_eq!(rs.dim, 15 + 11 + 55 + 440);
    }

    #[test]
    fn zero_vector_maps_to_unit_scales_identity_correlation() {
        let lay = layout(Variant::RandomSlopes, 3, 2);
        let (c, log_jac) = lay.transform(&vec![0.0; lay.dim]);
        assert_eq!(c[lay.off_log_sigma_e], 1.0);
        for i in 0..lay.m {
            assert_eq!(c[lay.off_log_sd + i], 1.0);
        }
        for k in 0..lay.n_chol() {
            assert_eq!(c[lay.off_chol + k], 0.0);
        }
        assert_eq!(log_jac, 0.0);
    }

    #[test]
    fn single_scale_jacobian_is_u() {
        let lay = layout(Variant::Pooled, 2, 1);
        let mut u = vec![0.0; lay.dim];
        u[lay.off_log_sigma_e] = 0.7;
        let (_, log_jac) = lay.transform(&u);
        assert!((log_jac - 0.7).abs() < 1e-15);
    }

    #[test]
    fn round_trip_100_random_vectors() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let lay = layout(Variant::RandomSlopes, 4, 3);
        for _ in 0..100 {
            let u: Vec<f64> = (0..lay.dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (c, _) = lay.transform(&u);
            let back = lay.inverse_transform(&c);
            for (a, b) in u.iter().zip(back.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
