//! No-U-Turn sampling: transition kernel, warmup adaptation, and the
//! multi-chain driver.
//!
//! Chains are reproducible by construction: every iteration draws its
//! randomness from a counter-based ChaCha20 stream keyed by
//! `(seed, chain_id, iteration)`, so identical inputs and seed give
//! bit-identical draws regardless of how chains are scheduled across
//! threads. `THERMOPOOL_THREADS` caps the worker count.

pub mod adapt;
pub mod nuts;

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::inference::{InferenceError, Model, ModelSpec};
use crate::panel::DesignMatrix;

pub use adapt::{adapt, AdaptError, WarmupAdapter, WarmupTrace};
pub use nuts::{find_reasonable_step_size, nuts_step, HmcState, Metric, NutsStats};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Adaptation(#[from] AdaptError),
    #[error("chain {chain} failed: {reason}")]
    ChainFailed { chain: usize, reason: String },
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("draws io error at {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Anything NUTS can sample from: log density and gradient in one pass.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    /// Writes the gradient into `grad` and returns the log density.
    /// Non-finite values signal rejection, never abort.
    fn logp_grad(&self, q: &[f64], grad: &mut [f64]) -> f64;

    fn logp(&self, q: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.logp_grad(q, &mut g)
    }
}

impl Target for Model<'_> {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn logp_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        self.logp_and_grad(q, grad)
    }

    fn logp(&self, q: &[f64]) -> f64 {
        self.log_posterior(q)
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_samples: usize,
    pub target_accept: f64,
    pub max_treedepth: u32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 1000,
            n_samples: 1000,
            target_accept: 0.8,
            max_treedepth: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<(), SamplerError> {
        if self.n_chains == 0 || self.n_samples == 0 {
            return Err(SamplerError::ChainFailed {
                chain: 0,
                reason: "chain and sample counts must be at least 1".into(),
            });
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::ChainFailed {
                chain: 0,
                reason: format!("target_accept {} outside (0, 1)", self.target_accept),
            });
        }
        Ok(())
    }
}

/// Per-iteration sampler statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterStats {
    pub divergent: bool,
    pub treedepth: u32,
    pub accept_stat: f64,
    pub energy: f64,
}

/// One chain's post-warmup output in unconstrained coordinates, plus the
/// adapted kernel and the recorded warmup.
#[derive(Debug, Clone)]
pub struct RawChain {
    pub draws: Vec<Vec<f64>>,
    pub stats: Vec<IterStats>,
    pub adapted_step: f64,
    pub adapted_inv_mass: Vec<f64>,
    pub warmup_trace: WarmupTrace,
}

/// Warm-start hint carried between related fits (rolling windows).
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
}

/// Counter-based RNG for `(seed, chain, iteration)`. Iteration 0 is reserved
/// for initialization; transitions use 1-based indices. The word-position
/// stride leaves ~16M raw draws per iteration, far beyond any tree's use.
fn chain_rng(seed: u64, chain: u64, iter: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(chain.wrapping_add(1));
    rng.set_word_pos((iter as u128) << 24);
    rng
}

/// Samples one chain from an arbitrary target.
pub fn sample_chain<T: Target + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    chain_id: usize,
    warm_start: Option<&WarmStart>,
) -> Result<RawChain, SamplerError> {
    let dim = target.dim();
    let mut rng = chain_rng(config.seed, chain_id as u64, 0);

    // Stan-style init: Uniform(-2, 2) in unconstrained space, retried until
    // the target evaluates finite.
    let mut q0 = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut ok = false;
    for _ in 0..100 {
        for qi in q0.iter_mut() {
            *qi = rng.gen_range(-2.0..2.0);
        }
        let lp = target.logp_grad(&q0, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(SamplerError::ChainFailed {
            chain: chain_id,
            reason: "no finite initial point found in 100 draws".into(),
        });
    }
    let mut state = HmcState::new(target, q0);

    let (init_metric, init_eps) = match warm_start {
        Some(ws) if ws.inv_mass.len() == dim => (
            Metric {
                inv_mass: ws.inv_mass.clone(),
            },
            ws.step_size,
        ),
        _ => {
            let metric = Metric::identity(dim);
            let eps = find_reasonable_step_size(target, &state.q, &metric, &mut rng);
            (metric, eps)
        }
    };

    let mut adapter = WarmupAdapter::new(
        dim,
        config.n_warmup,
        config.target_accept,
        init_eps,
        init_metric.clone(),
    );
    let mut trace = WarmupTrace::default();
    for i in 0..config.n_warmup {
        let mut rng = chain_rng(config.seed, chain_id as u64, 1 + i as u64);
        let eps = adapter.step_size();
        let metric = adapter.metric().clone();
        let stats = nuts_step(
            &mut state,
            target,
            eps,
            &metric,
            config.max_treedepth,
            &mut rng,
        );
        trace.draws.push(state.q.clone());
        trace.accept_stats.push(stats.accept_stat);
        if adapter.update(i, &state.q, stats.accept_stat) {
            let new_eps = find_reasonable_step_size(target, &state.q, adapter.metric(), &mut rng);
            adapter.restart_step_size(new_eps);
        }
    }

    let (eps, metric) = if config.n_warmup > 0 {
        adapter.finalize()?
    } else {
        (init_eps, init_metric)
    };

    let mut draws = Vec::with_capacity(config.n_samples);
    let mut stats_out = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let mut rng = chain_rng(
            config.seed,
            chain_id as u64,
            1 + (config.n_warmup + i) as u64,
        );
        let s = nuts_step(
            &mut state,
            target,
            eps,
            &metric,
            config.max_treedepth,
            &mut rng,
        );
        draws.push(state.q.clone());
        stats_out.push(IterStats {
            divergent: s.divergent,
            treedepth: s.treedepth,
            accept_stat: s.accept_stat,
            energy: s.energy,
        });
    }

    Ok(RawChain {
        draws,
        stats: stats_out,
        adapted_step: eps,
        adapted_inv_mass: metric.inv_mass,
        warmup_trace: trace,
    })
}

fn worker_count(n_chains: usize) -> usize {
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("THERMOPOOL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(hw);
    cap.min(n_chains).max(1)
}

/// Samples all chains from an arbitrary target, in parallel but with results
/// independent of scheduling (merged by chain id).
pub fn sample_target<T: Target + ?Sized>(
    target: &T,
    config: &SamplerConfig,
    warm_start: Option<&WarmStart>,
) -> Result<Vec<RawChain>, SamplerError> {
    config.validate()?;
    let n = config.n_chains;
    let results: Mutex<Vec<Option<Result<RawChain, SamplerError>>>> =
        Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = worker_count(n);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let c = next.fetch_add(1, Ordering::SeqCst);
                if c >= n {
                    break;
                }
                let r = sample_chain(target, config, c, warm_start);
                results.lock().unwrap()[c] = Some(r);
            });
        }
    });
    let mut chains = Vec::with_capacity(n);
    for (c, slot) in results.into_inner().unwrap().into_iter().enumerate() {
        match slot {
            Some(Ok(chain)) => chains.push(chain),
            Some(Err(e)) => return Err(e),
            None => {
                return Err(SamplerError::ChainFailed {
                    chain: c,
                    reason: "chain never ran".into(),
                })
            }
        }
    }
    Ok(chains)
}

/// Posterior draws in constrained space: `[chain][iteration][parameter]`,
/// warmup excluded, plus per-iteration sampler statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub n_chains: usize,
    pub n_iterations: usize,
    pub n_params: usize,
    pub labels: Vec<String>,
    data: Vec<f64>,
    pub stats: Vec<IterStats>,
}

impl PosteriorDraws {
    pub fn new(
        labels: Vec<String>,
        chains: Vec<Vec<Vec<f64>>>,
        stats: Vec<IterStats>,
    ) -> PosteriorDraws {
        let n_chains = chains.len();
        let n_iterations = chains.first().map_or(0, Vec::len);
        let n_params = labels.len();
        assert!(chains.iter().all(|c| c.len() == n_iterations));
        assert_eq!(stats.len(), n_chains * n_iterations);
        let mut data = Vec::with_capacity(n_chains * n_iterations * n_params);
        for chain in &chains {
            for draw in chain {
                assert_eq!(draw.len(), n_params);
                data.extend_from_slice(draw);
            }
        }
        PosteriorDraws {
            n_chains,
            n_iterations,
            n_params,
            labels,
            data,
            stats,
        }
    }

    pub fn value(&self, chain: usize, iter: usize, param: usize) -> f64 {
        self.data[(chain * self.n_iterations + iter) * self.n_params + param]
    }

    pub fn draw(&self, chain: usize, iter: usize) -> &[f64] {
        let start = (chain * self.n_iterations + iter) * self.n_params;
        &self.data[start..start + self.n_params]
    }

    pub fn stat(&self, chain: usize, iter: usize) -> &IterStats {
        &self.stats[chain * self.n_iterations + iter]
    }

    pub fn param_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Per-chain series for one parameter.
    pub fn chains_of(&self, param: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains)
            .map(|c| {
                (0..self.n_iterations)
                    .map(|i| self.value(c, i, param))
                    .collect()
            })
            .collect()
    }

    /// All draws of one parameter, chains concatenated in order.
    pub fn column(&self, param: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_chains * self.n_iterations);
        for c in 0..self.n_chains {
            for i in 0..self.n_iterations {
                out.push(self.value(c, i, param));
            }
        }
        out
    }

    pub fn n_divergent(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }

    pub fn n_draws_total(&self) -> usize {
        self.n_chains * self.n_iterations
    }

    /// Reorders chains; diagnostics must be invariant under this.
    pub fn permute_chains(&self, order: &[usize]) -> PosteriorDraws {
        assert_eq!(order.len(), self.n_chains);
        let chains: Vec<Vec<Vec<f64>>> = order
            .iter()
            .map(|&c| {
                (0..self.n_iterations)
                    .map(|i| self.draw(c, i).to_vec())
                    .collect()
            })
            .collect();
        let mut stats = Vec::with_capacity(self.stats.len());
        for &c in order {
            for i in 0..self.n_iterations {
                stats.push(*self.stat(c, i));
            }
        }
        PosteriorDraws::new(self.labels.clone(), chains, stats)
    }

    /// Flat binary with a text header; byte-identical for identical draws.
    pub fn write_bin(&self, path: &Path) -> Result<(), SamplerError> {
        let io_err = |e: std::io::Error| SamplerError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        writeln!(w, "thermopool-draws v1").map_err(io_err)?;
        writeln!(w, "chains {}", self.n_chains).map_err(io_err)?;
        writeln!(w, "iterations {}", self.n_iterations).map_err(io_err)?;
        writeln!(w, "parameters {}", self.n_params).map_err(io_err)?;
        writeln!(w, "labels\t{}", self.labels.join("\t")).map_err(io_err)?;
        writeln!(w, "stats\tdivergent\ttreedepth\taccept_stat\tenergy").map_err(io_err)?;
        writeln!(w, "end_header").map_err(io_err)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        for s in &self.stats {
            w.write_all(&(s.divergent as u8 as f64).to_le_bytes())
                .map_err(io_err)?;
            w.write_all(&(s.treedepth as f64).to_le_bytes())
                .map_err(io_err)?;
            w.write_all(&s.accept_stat.to_le_bytes()).map_err(io_err)?;
            w.write_all(&s.energy.to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn read_bin(path: &Path) -> Result<PosteriorDraws, SamplerError> {
        let io_err = |reason: String| SamplerError::Io {
            path: path.display().to_string(),
            reason,
        };
        let f = std::fs::File::open(path).map_err(|e| io_err(e.to_string()))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        let read_line =
            |r: &mut BufReader<std::fs::File>, line: &mut String| -> Result<String, SamplerError> {
                line.clear();
                r.read_line(line).map_err(|e| io_err(e.to_string()))?;
                Ok(line.trim_end_matches('\n').to_string())
            };
        let magic = read_line(&mut r, &mut line)?;
        if magic != "thermopool-draws v1" {
            return Err(io_err(format!("bad magic {magic:?}")));
        }
        let parse_kv = |s: &str, key: &str| -> Result<usize, SamplerError> {
            let rest = s
                .strip_prefix(key)
                .ok_or_else(|| io_err(format!("expected {key}, got {s:?}")))?;
            rest.trim()
                .parse()
                .map_err(|_| io_err(format!("bad {key} value")))
        };
        let n_chains = parse_kv(&read_line(&mut r, &mut line)?, "chains")?;
        let n_iterations = parse_kv(&read_line(&mut r, &mut line)?, "iterations")?;
        let n_params = parse_kv(&read_line(&mut r, &mut line)?, "parameters")?;
        let labels_line = read_line(&mut r, &mut line)?;
        let labels: Vec<String> = labels_line
            .strip_prefix("labels\t")
            .ok_or_else(|| io_err("missing labels".into()))?
            .split('\t')
            .map(String::from)
            .collect();
        if labels.len() != n_params {
            return Err(io_err("label count mismatch".into()));
        }
        let _stats_line = read_line(&mut r, &mut line)?;
        let end = read_line(&mut r, &mut line)?;
        if end != "end_header" {
            return Err(io_err("missing end_header".into()));
        }
        let n_values = n_chains * n_iterations * n_params;
        let mut buf = vec![0u8; 8];
        let mut data = Vec::with_capacity(n_values);
        for _ in 0..n_values {
            r.read_exact(&mut buf).map_err(|e| io_err(e.to_string()))?;
            data.push(f64::from_le_bytes(buf[..8].try_into().unwrap()));
        }
        let mut stats = Vec::with_capacity(n_chains * n_iterations);
        for _ in 0..n_chains * n_iterations {
            let mut vals = [0.0f64; 4];
            for v in vals.iter_mut() {
                r.read_exact(&mut buf).map_err(|e| io_err(e.to_string()))?;
                *v = f64::from_le_bytes(buf[..8].try_into().unwrap());
            }
            stats.push(IterStats {
                divergent: vals[0] != 0.0,
                treedepth: vals[1] as u32,
                accept_stat: vals[2],
                energy: vals[3],
            });
        }
        Ok(PosteriorDraws {
            n_chains,
            n_iterations,
            n_params,
            labels,
            data,
            stats,
        })
    }

    /// CSV export: one row per draw with chain, iteration, parameters, stats.
    pub fn write_csv(&self, path: &Path) -> Result<(), SamplerError> {
        let io_err = |reason: String| SamplerError::Io {
            path: path.display().to_string(),
            reason,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(e.to_string()))?;
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(self.labels.iter().cloned());
        header.extend(
            ["divergent", "treedepth", "accept_stat", "energy"]
                .iter()
                .map(|s| s.to_string()),
        );
        w.write_record(&header).map_err(|e| io_err(e.to_string()))?;
        for c in 0..self.n_chains {
            for i in 0..self.n_iterations {
                let mut rec = vec![c.to_string(), i.to_string()];
                rec.extend(
                    self.draw(c, i)
                        .iter()
                        .map(|v| crate::gridio::format_float(*v)),
                );
                let s = self.stat(c, i);
                rec.push((s.divergent as u8).to_string());
                rec.push(s.treedepth.to_string());
                rec.push(crate::gridio::format_float(s.accept_stat));
                rec.push(crate::gridio::format_float(s.energy));
                w.write_record(&rec).map_err(|e| io_err(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| io_err(e.to_string()))
    }
}

/// Fits the model and returns constrained-space draws with labels.
pub fn run_chains(
    design: &DesignMatrix,
    spec: &ModelSpec,
    config: &SamplerConfig,
) -> Result<PosteriorDraws, SamplerError> {
    run_chains_with_init(design, spec, config, None).map(|(draws, _)| draws)
}

/// As [`run_chains`], also returning a warm-start hint for follow-up fits.
pub fn run_chains_with_init(
    design: &DesignMatrix,
    spec: &ModelSpec,
    config: &SamplerConfig,
    warm_start: Option<&WarmStart>,
) -> Result<(PosteriorDraws, WarmStart), SamplerError> {
    let model = Model::new(design, spec)?;
    let raw = sample_target(&model, config, warm_start)?;
    let labels = model.layout.labels(design);
    let mut chains = Vec::with_capacity(raw.len());
    let mut stats = Vec::new();
    for chain in &raw {
        let mut constrained = Vec::with_capacity(chain.draws.len());
        for draw in &chain.draws {
            let (c, _) = model.layout.transform(draw);
            constrained.push(c);
        }
        chains.push(constrained);
        stats.extend(chain.stats.iter().copied());
    }
    let hint = WarmStart {
        step_size: raw[0].adapted_step,
        inv_mass: raw[0].adapted_inv_mass.clone(),
    };
    Ok((PosteriorDraws::new(labels, chains, stats), hint))
}


#[cfg(test)]
mod tests {
    use super::test_targets::*;
    use super::*;

    fn config(chains: usize, warmup: usize, samples: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_chains: chains,
            n_warmup: warmup,
            n_samples: samples,
            seed,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn gaussian_2d_mean_and_covariance() {
        let target = StdGaussian { dim: 2 };
        let chains = sample_target(&target, &config(1, 500, 5000, 1), None).unwrap();
        let draws = &chains[0].draws;
        for d in 0..2 {
            let mean: f64 = draws.iter().map(|q| q[d]).sum::<f64>() / draws.len() as f64;
            assert!(mean.abs() < 0.05, "mean[{d}] = {mean}");
        }
        for a in 0..2 {
            for b in 0..2 {
                let ma: f64 = draws.iter().map(|q| q[a]).sum::<f64>() / draws.len() as f64;
                let mb: f64 = draws.iter().map(|q| q[b]).sum::<f64>() / draws.len() as f64;
                let cov: f64 = draws.iter().map(|q| (q[a] - ma) * (q[b] - mb)).sum::<f64>()
                    / (draws.len() - 1) as f64;
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((cov - expect).abs() < 0.1, "cov[{a}][{b}] = {cov}");
            }
        }
    }

    #[test]
    fn vanishing_step_size_stays_put_and_accepts() {
        let target = StdGaussian { dim: 3 };
        let mut rng = chain_rng(9, 0, 1);
        let mut state = HmcState::new(&target, vec![0.3, -0.2, 1.1]);
        let q0 = state.q.clone();
        let metric = Metric::identity(3);
        let stats = nuts_step(&mut state, &target, 1e-12, &metric, 6, &mut rng);
        for (a, b) in state.q.iter().zip(q0.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(stats.accept_stat > 0.9999, "accept {}", stats.accept_stat);
        assert!(!stats.divergent);
    }

    #[test]
    fn funnel_noncentered_beats_centered_on_divergences() {
        let cfg = config(2, 500, 1000, 7);
        let centered = sample_target(&FunnelCentered { dim: 10 }, &cfg, None).unwrap();
        let noncentered = sample_target(&FunnelNonCentered { dim: 10 }, &cfg, None).unwrap();
        let count = |chains: &[RawChain]| -> usize {
            chains
                .iter()
                .flat_map(|c| c.stats.iter())
                .filter(|s| s.divergent)
                .count()
        };
        let total = 2 * 1000;
        let nc = count(&noncentered);
        let ce = count(&centered);
        assert!(
            (nc as f64) / (total as f64) < 0.001,
            "non-centered divergence rate {nc}/{total}"
        );
        assert!(ce > 10 * nc.max(1), "centered {ce} vs non-centered {nc}");
    }

    #[test]
    fn same_seed_reproduces_draws_bit_exactly() {
        let target = StdGaussian { dim: 4 };
        let a = sample_target(&target, &config(3, 200, 300, 42), None).unwrap();
        let b = sample_target(&target, &config(3, 200, 300, 42), None).unwrap();
        for (ca, cb) in a.iter().zip(b.iter()) {
            assert_eq!(ca.draws, cb.draws);
            assert_eq!(ca.adapted_step, cb.adapted_step);
        }
    }

    #[test]
    fn gaussian_ks_distance_small() {
        let target = StdGaussian { dim: 1 };
        let chains = sample_target(&target, &config(1, 500, 10_000, 3), None).unwrap();
        let xs: Vec<f64> = chains[0].draws.iter().map(|q| q[0]).collect();
        let phi = |x: f64| 0.5 * (1.0 + libm_erf(x / std::f64::consts::SQRT_2));
        let d = crate::util::ks_one_sample(&xs, phi);
        assert!(d < 0.02, "KS distance {d}");
    }

    // erf via the complementary error function continued fraction is overkill
    // here; Abramowitz-Stegun 7.1.26 is plenty for a KS check tolerance 0.02.
    fn libm_erf(x: f64) -> f64 {
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
                + 0.254829592)
                * t
                * (-x * x).exp();
        sign * y
    }

    #[test]
    fn adapted_inv_mass_near_unit_for_standard_gaussian() {
        let target = StdGaussian { dim: 3 };
        let chains = sample_target(&target, &config(1, 600, 10, 11), None).unwrap();
        // Through the recorded-trace entry point.
        let (eps, inv_mass) = adapt(&chains[0].warmup_trace, 0.8).unwrap();
        assert!(eps > 0.0);
        for (i, &im) in inv_mass.iter().enumerate() {
            assert!((0.5..=2.0).contains(&im), "inv_mass[{i}] = {im}");
        }
        // Live adaptation should land in the same range.
        for (i, &im) in chains[0].adapted_inv_mass.iter().enumerate() {
            assert!((0.5..=2.0).contains(&im), "live inv_mass[{i}] = {im}");
        }
    }

    #[test]
    fn higher_accept_target_gives_smaller_step_on_same_trace() {
        let target = StdGaussian { dim: 2 };
        let chains = sample_target(&target, &config(1, 400, 10, 13), None).unwrap();
        let (eps_hi, _) = adapt(&chains[0].warmup_trace, 0.99).unwrap();
        let (eps_lo, _) = adapt(&chains[0].warmup_trace, 0.6).unwrap();
        assert!(eps_hi < eps_lo, "{eps_hi} vs {eps_lo}");
    }

    #[test]
    fn draws_bin_round_trip() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let chains = vec![
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            vec![vec![5.0, 6.0], vec![7.0, 8.0]],
        ];
        let stats = vec![
            IterStats {
                divergent: false,
                treedepth: 3,
                accept_stat: 0.9,
                energy: 1.0
            };
            4
        ];
        let draws = PosteriorDraws::new(labels, chains, stats);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draws.bin");
        draws.write_bin(&path).unwrap();
        let back = PosteriorDraws::read_bin(&path).unwrap();
        assert_eq!(draws, back);
    }
}
