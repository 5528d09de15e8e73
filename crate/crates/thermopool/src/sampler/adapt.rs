//! Warmup adaptation: dual-averaging step size and windowed diagonal
//! mass-matrix estimation.
//!
//! The warmup schedule follows the usual three phases: an initial buffer
//! (default 75 iterations, step size only), expanding variance-estimation
//! windows (25, 50, 100, ... draws; each window end refreshes the inverse
//! mass from the window variances and restarts the step-size search), and a
//! terminal buffer (default 50, step size only).

use rand::Rng;
use thiserror::Error;

use super::nuts::{find_reasonable_step_size, Metric};
use super::Target;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("adaptation failed: {0}")]
    AdaptationFailed(String),
}

/// Nesterov dual averaging on log step size (Hoffman & Gelman defaults).
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    m: f64,
    target_accept: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
}

impl DualAveraging {
    pub fn new(init_eps: f64, target_accept: f64) -> Self {
        Self {
            mu: (10.0 * init_eps).ln(),
            log_eps: init_eps.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            m: 0.0,
            target_accept,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }

    pub fn update(&mut self, accept_prob: f64) {
        self.m += 1.0;
        let eta = 1.0 / (self.m + self.t0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target_accept - accept_prob);
        self.log_eps = self.mu - self.m.sqrt() / self.gamma * self.h_bar;
        let w = self.m.powf(-self.kappa);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
    }

    /// Step size to use for the next transition.
    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    /// Smoothed final step size.
    pub fn adapted(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Streaming mean/variance per coordinate.
#[derive(Debug, Clone)]
pub struct WelfordVar {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WelfordVar {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// Sample variances (n-1 denominator); None with fewer than 2 draws.
    pub fn variance(&self) -> Option<Vec<f64>> {
        if self.n < 2 {
            return None;
        }
        let denom = (self.n - 1) as f64;
        Some(self.m2.iter().map(|&v| v / denom).collect())
    }
}

/// Regularized variance estimate, shrunk toward unit scale exactly as the
/// reference samplers do.
fn regularized_inv_mass(var: &[f64], n: u64) -> Vec<f64> {
    let n = n as f64;
    var.iter()
        .map(|&v| (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0)))
        .collect()
}

/// Phase boundaries for one warmup run.
#[derive(Debug, Clone)]
pub struct WarmupSchedule {
    pub n_warmup: usize,
    pub init_buffer: usize,
    pub term_buffer: usize,
    pub base_window: usize,
    window_ends: Vec<usize>,
}

impl WarmupSchedule {
    pub fn new(n_warmup: usize) -> Self {
        let (init_buffer, term_buffer, base_window) = if n_warmup >= 150 {
            (75usize, 50usize, 25usize)
        } else if n_warmup >= 20 {
            // Scaled-down buffers for short warmups.
            (
                (n_warmup as f64 * 0.15) as usize,
                (n_warmup as f64 * 0.10) as usize,
                0,
            )
        } else {
            (n_warmup, 0, 0)
        };
        let base_window = if base_window == 0 && n_warmup >= 20 {
            n_warmup - (n_warmup as f64 * 0.15) as usize - (n_warmup as f64 * 0.10) as usize
        } else {
            base_window
        };

        let mut window_ends = Vec::new();
        if base_window > 0 {
            let variance_end = n_warmup.saturating_sub(term_buffer);
            let mut start = init_buffer;
            let mut width = base_window;
            while start < variance_end {
                let mut end = start + width;
                // The last window absorbs the remainder.
                if end + 2 * width > variance_end {
                    end = variance_end;
                }
                window_ends.push(end.min(variance_end));
                start = end;
                width *= 2;
            }
        }
        Self {
            n_warmup,
            init_buffer,
            term_buffer,
            base_window,
            window_ends,
        }
    }

    /// Whether draw `iter` (0-based warmup index) falls in a variance window.
    pub fn in_variance_phase(&self, iter: usize) -> bool {
        iter >= self.init_buffer
            && iter < self.n_warmup.saturating_sub(self.term_buffer)
            && !self.window_ends.is_empty()
    }

    pub fn is_window_end(&self, iter: usize) -> bool {
        self.window_ends.contains(&(iter + 1))
    }
}

/// Interleaved warmup adaptation driving both dual averaging and the
/// mass-matrix windows.
#[derive(Debug, Clone)]
pub struct WarmupAdapter {
    pub schedule: WarmupSchedule,
    dual: DualAveraging,
    welford: WelfordVar,
    metric: Metric,
    target_accept: f64,
}

impl WarmupAdapter {
    pub fn new(
        dim: usize,
        n_warmup: usize,
        target_accept: f64,
        init_eps: f64,
        metric: Metric,
    ) -> Self {
        Self {
            schedule: WarmupSchedule::new(n_warmup),
            dual: DualAveraging::new(init_eps, target_accept),
            welford: WelfordVar::new(dim),
            metric,
            target_accept,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.dual.current()
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    /// Records one warmup draw. Returns true when the mass matrix was just
    /// refreshed; the caller should then restart the step-size search via
    /// [`WarmupAdapter::restart_step_size`].
    pub fn update(&mut self, iter: usize, draw: &[f64], accept_prob: f64) -> bool {
        self.dual.update(accept_prob);
        if self.schedule.in_variance_phase(iter) {
            self.welford.push(draw);
            if self.schedule.is_window_end(iter) {
                if let Some(var) = self.welford.variance() {
                    self.metric = Metric {
                        inv_mass: regularized_inv_mass(&var, self.welford.count()),
                    };
                }
                self.welford = WelfordVar::new(draw.len());
                return true;
            }
        }
        false
    }

    pub fn restart_step_size(&mut self, new_eps: f64) {
        self.dual = DualAveraging::new(new_eps, self.target_accept);
    }

    /// Final smoothed step size and metric.
    pub fn finalize(&self) -> Result<(f64, Metric), AdaptError> {
        let eps = self.dual.adapted();
        if !eps.is_finite() || eps <= 0.0 {
            return Err(AdaptError::AdaptationFailed(format!(
                "non-finite adapted step size {eps}"
            )));
        }
        Ok((eps, self.metric.clone()))
    }
}

/// A recorded warmup: one draw and one acceptance statistic per iteration.
#[derive(Debug, Clone, Default)]
pub struct WarmupTrace {
    pub draws: Vec<Vec<f64>>,
    pub accept_stats: Vec<f64>,
}

/// Derives (step_size, inv_mass) from a recorded warmup trace: the diagonal
/// inverse mass comes from the last completed expanding window's draw
/// variances, the step size from dual-averaging the recorded acceptance
/// statistics. The live sampler interleaves the same machinery.
pub fn adapt(trace: &WarmupTrace, target_accept: f64) -> Result<(f64, Vec<f64>), AdaptError> {
    let n = trace.draws.len();
    if n < 150 || trace.accept_stats.len() != n {
        return Err(AdaptError::AdaptationFailed(format!(
            "warmup trace needs at least 150 complete iterations, got {n}"
        )));
    }
    let dim = trace.draws[0].len();
    let schedule = WarmupSchedule::new(n);

    // Last completed window's variance.
    let mut welford = WelfordVar::new(dim);
    let mut inv_mass: Option<Vec<f64>> = None;
    for (i, draw) in trace.draws.iter().enumerate() {
        if schedule.in_variance_phase(i) {
            welford.push(draw);
            if schedule.is_window_end(i) {
                if let Some(var) = welford.variance() {
                    inv_mass = Some(regularized_inv_mass(&var, welford.count()));
                }
                welford = WelfordVar::new(dim);
            }
        }
    }
    let inv_mass = inv_mass.ok_or_else(|| {
        AdaptError::AdaptationFailed("no completed variance window in trace".to_string())
    })?;
    if inv_mass.iter().any(|&v| !v.is_finite() || v <= 0.0) {
        return Err(AdaptError::AdaptationFailed(
            "non-finite or zero variance in warmup draws".to_string(),
        ));
    }
    // A zero-variance trace is degenerate even after regularization: the
    // chain never moved, so no usable step size exists.
    let moved = trace
        .draws
        .windows(2)
        .any(|w| w[0].iter().zip(w[1].iter()).any(|(a, b)| a != b));
    if !moved {
        return Err(AdaptError::AdaptationFailed(
            "zero-variance warmup trace".to_string(),
        ));
    }

    let mut dual = DualAveraging::new(1.0, target_accept);
    for &a in &trace.accept_stats {
        dual.update(a);
    }
    let eps = dual.adapted();
    if !eps.is_finite() || eps <= 0.0 {
        return Err(AdaptError::AdaptationFailed(format!(
            "non-finite step size {eps}"
        )));
    }
    Ok((eps, inv_mass))
}

/// Initial step size for a fresh chain or after a metric refresh.
pub fn initial_step_size<T: Target + ?Sized>(
    target: &T,
    q: &[f64],
    metric: &Metric,
    rng: &mut impl Rng,
) -> f64 {
    find_reasonable_step_size(target, q, metric, rng)
}
