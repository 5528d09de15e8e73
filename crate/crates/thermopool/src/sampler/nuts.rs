//! Multinomial No-U-Turn transitions with the generalized U-turn criterion.
//!
//! One transition resamples the momentum, then doubles a trajectory in random
//! directions. Within subtrees the proposal is selected multinomially with
//! weight `exp(-(H - H0))`; when a finished subtree joins the existing tree
//! the selection is progressive (`W_subtree / W_existing`, clamped to 1),
//! biasing draws away from the start point. The U-turn check uses momentum
//! sums, evaluated for the merged tree and across both subtree junctions.

use rand::Rng;

use super::Target;

/// Maximum energy error before a leapfrog step is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Diagonal Euclidean metric: kinetic energy `0.5 * p' * inv_mass * p`.
#[derive(Debug, Clone)]
pub struct Metric {
    pub inv_mass: Vec<f64>,
}

impl Metric {
    pub fn identity(dim: usize) -> Self {
        Self {
            inv_mass: vec![1.0; dim],
        }
    }

    pub fn sample_momentum(&self, rng: &mut impl Rng) -> Vec<f64> {
        use rand_distr::StandardNormal;
        self.inv_mass
            .iter()
            .map(|&im| {
                let z: f64 = rng.sample(StandardNormal);
                z / im.sqrt()
            })
            .collect()
    }

    pub fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(self.inv_mass.iter())
            .map(|(&pi, &im)| pi * pi * im)
            .sum::<f64>()
    }

    fn velocity(&self, p: &[f64], out: &mut [f64]) {
        for ((o, &pi), &im) in out.iter_mut().zip(p.iter()).zip(self.inv_mass.iter()) {
            *o = pi * im;
        }
    }
}

/// Position, momentum, and cached target evaluations.
#[derive(Debug, Clone)]
pub struct HmcState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
}

impl HmcState {
    pub fn new<T: Target + ?Sized>(target: &T, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let logp = target.logp_grad(&q, &mut grad);
        Self {
            q,
            p: vec![0.0; grad.len()],
            logp,
            grad,
        }
    }

    pub fn hamiltonian(&self, metric: &Metric) -> f64 {
        -self.logp + metric.kinetic(&self.p)
    }
}

/// One leapfrog step in `direction` (+1/-1). Returns false when the target
/// evaluates non-finite, leaving the state unusable.
fn leapfrog<T: Target + ?Sized>(
    target: &T,
    state: &mut HmcState,
    eps: f64,
    direction: f64,
    metric: &Metric,
) -> bool {
    let h = eps * direction;
    for (pi, gi) in state.p.iter_mut().zip(state.grad.iter()) {
        *pi += 0.5 * h * gi;
    }
    let mut v = vec![0.0; state.q.len()];
    metric.velocity(&state.p, &mut v);
    for (qi, vi) in state.q.iter_mut().zip(v.iter()) {
        *qi += h * vi;
    }
    state.logp = target.logp_grad(&state.q, &mut state.grad);
    if !state.logp.is_finite() || state.grad.iter().any(|g| !g.is_finite()) {
        return false;
    }
    for (pi, gi) in state.p.iter_mut().zip(state.grad.iter()) {
        *pi += 0.5 * h * gi;
    }
    true
}

/// Statistics of one NUTS transition.
#[derive(Debug, Clone, Copy)]
pub struct NutsStats {
    pub divergent: bool,
    pub treedepth: u32,
    pub accept_stat: f64,
    pub energy: f64,
    pub n_leapfrog: usize,
}

struct Tree {
    q_left: Vec<f64>,
    p_left: Vec<f64>,
    grad_left: Vec<f64>,
    q_right: Vec<f64>,
    p_right: Vec<f64>,
    grad_right: Vec<f64>,
    q_prop: Vec<f64>,
    logp_prop: f64,
    grad_prop: Vec<f64>,
    log_sum_weight: f64,
    p_sum: Vec<f64>,
    divergent: bool,
    turning: bool,
    sum_accept: f64,
    n_leapfrog: usize,
}

fn is_turning(rho: &[f64], p_left: &[f64], p_right: &[f64], metric: &Metric) -> bool {
    let mut dot_left = 0.0;
    let mut dot_right = 0.0;
    for i in 0..rho.len() {
        dot_left += rho[i] * p_left[i] * metric.inv_mass[i];
        dot_right += rho[i] * p_right[i] * metric.inv_mass[i];
    }
    if !dot_left.is_finite() || !dot_right.is_finite() {
        return true;
    }
    dot_left < 0.0 || dot_right < 0.0
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let a = if a.is_nan() { f64::NEG_INFINITY } else { a };
    let b = if b.is_nan() { f64::NEG_INFINITY } else { b };
    let max = a.max(b);
    if max == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        max + ((a - max).exp() + (b - max).exp()).ln()
    }
}

/// P(pick outer) for within-subtree multinomial selection.
fn prob_outer(logw_inner: f64, logw_outer: f64) -> f64 {
    if logw_outer == f64::NEG_INFINITY {
        return 0.0;
    }
    if logw_inner == f64::NEG_INFINITY {
        return 1.0;
    }
    let d = logw_inner - logw_outer;
    if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

/// P(adopt subtree proposal) for top-level progressive sampling.
fn prob_progressive(logw_existing: f64, logw_subtree: f64) -> f64 {
    if logw_subtree == f64::NEG_INFINITY {
        return 0.0;
    }
    if logw_existing == f64::NEG_INFINITY {
        return 1.0;
    }
    (logw_subtree - logw_existing).exp().min(1.0)
}

fn build_leaf<T: Target + ?Sized>(
    target: &T,
    state: &HmcState,
    direction: f64,
    eps: f64,
    h0: f64,
    metric: &Metric,
) -> Tree {
    let mut s = state.clone();
    let ok = leapfrog(target, &mut s, eps, direction, metric);
    let h = if ok {
        s.hamiltonian(metric)
    } else {
        f64::INFINITY
    };
    let energy_error = h - h0;
    let divergent = !energy_error.is_finite() || energy_error > DIVERGENCE_THRESHOLD;
    let log_weight = if divergent {
        f64::NEG_INFINITY
    } else {
        -energy_error
    };
    let accept = if energy_error.is_finite() {
        (-energy_error).exp().min(1.0)
    } else {
        0.0
    };
    Tree {
        q_left: s.q.clone(),
        p_left: s.p.clone(),
        grad_left: s.grad.clone(),
        q_right: s.q.clone(),
        p_right: s.p.clone(),
        grad_right: s.grad.clone(),
        q_prop: s.q,
        logp_prop: s.logp,
        grad_prop: s.grad,
        log_sum_weight: log_weight,
        p_sum: s.p,
        divergent,
        turning: false,
        sum_accept: accept,
        n_leapfrog: 1,
    }
}

#[allow(clippy::too_many_arguments)]
fn build_tree<T: Target + ?Sized>(
    target: &T,
    state: &HmcState,
    depth: u32,
    direction: f64,
    eps: f64,
    h0: f64,
    metric: &Metric,
    rng: &mut impl Rng,
) -> Tree {
    if depth == 0 {
        return build_leaf(target, state, direction, eps, h0, metric);
    }
    let mut inner = build_tree(target, state, depth - 1, direction, eps, h0, metric, rng);
    if inner.divergent || inner.turning {
        return inner;
    }

    let rho_inner = inner.p_sum.clone();
    let p_inner_junction = if direction > 0.0 {
        inner.p_right.clone()
    } else {
        inner.p_left.clone()
    };

    let edge = if direction > 0.0 {
        HmcState {
            q: inner.q_right.clone(),
            p: inner.p_right.clone(),
            logp: 0.0,
            grad: inner.grad_right.clone(),
        }
    } else {
        HmcState {
            q: inner.q_left.clone(),
            p: inner.p_left.clone(),
            logp: 0.0,
            grad: inner.grad_left.clone(),
        }
    };
    let outer = build_tree(target, &edge, depth - 1, direction, eps, h0, metric, rng);

    let p_outer_junction = if direction > 0.0 {
        outer.p_left.clone()
    } else {
        outer.p_right.clone()
    };
    let rho_outer = outer.p_sum.clone();

    // Multinomial selection between the halves.
    if rng.gen::<f64>() < prob_outer(inner.log_sum_weight, outer.log_sum_weight) {
        inner.q_prop = outer.q_prop;
        inner.logp_prop = outer.logp_prop;
        inner.grad_prop = outer.grad_prop;
    }
    inner.log_sum_weight = log_sum_exp(inner.log_sum_weight, outer.log_sum_weight);
    inner.n_leapfrog += outer.n_leapfrog;
    inner.sum_accept += outer.sum_accept;
    inner.divergent = inner.divergent || outer.divergent;
    for (a, b) in inner.p_sum.iter_mut().zip(outer.p_sum.iter()) {
        *a += *b;
    }
    if direction > 0.0 {
        inner.q_right = outer.q_right;
        inner.p_right = outer.p_right;
        inner.grad_right = outer.grad_right;
    } else {
        inner.q_left = outer.q_left;
        inner.p_left = outer.p_left;
        inner.grad_left = outer.grad_left;
    }

    // Generalized U-turn: merged tree plus both junction cross-checks.
    let turning_full = is_turning(&inner.p_sum, &inner.p_left, &inner.p_right, metric);
    let rho_cross2: Vec<f64> = rho_inner
        .iter()
        .zip(p_outer_junction.iter())
        .map(|(&a, &b)| a + b)
        .collect();
    let p_start = if direction > 0.0 {
        &inner.p_left
    } else {
        &inner.p_right
    };
    let turning2 = is_turning(&rho_cross2, p_start, &p_outer_junction, metric);
    let rho_cross3: Vec<f64> = rho_outer
        .iter()
        .zip(p_inner_junction.iter())
        .map(|(&a, &b)| a + b)
        .collect();
    let p_end = if direction > 0.0 {
        &inner.p_right
    } else {
        &inner.p_left
    };
    let turning3 = is_turning(&rho_cross3, &p_inner_junction, p_end, metric);

    inner.turning = inner.turning || outer.turning || turning_full || turning2 || turning3;
    inner
}

/// Runs one NUTS transition from `state`, mutating it to the new draw.
pub fn nuts_step<T: Target + ?Sized>(
    state: &mut HmcState,
    target: &T,
    eps: f64,
    metric: &Metric,
    max_treedepth: u32,
    rng: &mut impl Rng,
) -> NutsStats {
    state.p = metric.sample_momentum(rng);
    let h0 = state.hamiltonian(metric);
    if !h0.is_finite() {
        return NutsStats {
            divergent: true,
            treedepth: 0,
            accept_stat: 0.0,
            energy: h0,
            n_leapfrog: 0,
        };
    }

    let mut tree = Tree {
        q_left: state.q.clone(),
        p_left: state.p.clone(),
        grad_left: state.grad.clone(),
        q_right: state.q.clone(),
        p_right: state.p.clone(),
        grad_right: state.grad.clone(),
        q_prop: state.q.clone(),
        logp_prop: state.logp,
        grad_prop: state.grad.clone(),
        log_sum_weight: 0.0,
        p_sum: state.p.clone(),
        divergent: false,
        turning: false,
        sum_accept: 0.0,
        n_leapfrog: 0,
    };

    let mut depth: u32 = 0;
    while depth < max_treedepth {
        let direction: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };

        let rho_existing = tree.p_sum.clone();
        let p_existing_junction = if direction > 0.0 {
            tree.p_right.clone()
        } else {
            tree.p_left.clone()
        };
        let edge = if direction > 0.0 {
            HmcState {
                q: tree.q_right.clone(),
                p: tree.p_right.clone(),
                logp: 0.0,
                grad: tree.grad_right.clone(),
            }
        } else {
            HmcState {
                q: tree.q_left.clone(),
                p: tree.p_left.clone(),
                logp: 0.0,
                grad: tree.grad_left.clone(),
            }
        };
        let subtree = build_tree(target, &edge, depth, direction, eps, h0, metric, rng);

        let p_subtree_junction = if direction > 0.0 {
            subtree.p_left.clone()
        } else {
            subtree.p_right.clone()
        };
        let rho_subtree = subtree.p_sum.clone();

        let subtree_ok = !(subtree.divergent || subtree.turning);
        if subtree_ok
            && rng.gen::<f64>() < prob_progressive(tree.log_sum_weight, subtree.log_sum_weight)
        {
            tree.q_prop = subtree.q_prop;
            tree.logp_prop = subtree.logp_prop;
            tree.grad_prop = subtree.grad_prop;
        }
        tree.log_sum_weight = log_sum_exp(tree.log_sum_weight, subtree.log_sum_weight);
        tree.n_leapfrog += subtree.n_leapfrog;
        tree.sum_accept += subtree.sum_accept;
        tree.divergent = tree.divergent || subtree.divergent;
        tree.turning = tree.turning || subtree.turning;
        for (a, b) in tree.p_sum.iter_mut().zip(subtree.p_sum.iter()) {
            *a += *b;
        }
        if direction > 0.0 {
            tree.q_right = subtree.q_right;
            tree.p_right = subtree.p_right;
            tree.grad_right = subtree.grad_right;
        } else {
            tree.q_left = subtree.q_left;
            tree.p_left = subtree.p_left;
            tree.grad_left = subtree.grad_left;
        }
        depth += 1;
        if tree.divergent || tree.turning {
            break;
        }

        let turning_full = is_turning(&tree.p_sum, &tree.p_left, &tree.p_right, metric);
        let (rho_l, rho_r, p_lj, p_rj) = if direction > 0.0 {
            (
                &rho_existing,
                &rho_subtree,
                &p_existing_junction,
                &p_subtree_junction,
            )
        } else {
            (
                &rho_subtree,
                &rho_existing,
                &p_subtree_junction,
                &p_existing_junction,
            )
        };
        let cross_l: Vec<f64> = rho_l
            .iter()
            .zip(p_rj.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let turning2 = is_turning(&cross_l, &tree.p_left, p_rj, metric);
        let cross_r: Vec<f64> = rho_r
            .iter()
            .zip(p_lj.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let turning3 = is_turning(&cross_r, p_lj, &tree.p_right, metric);
        if turning_full || turning2 || turning3 {
            break;
        }
    }

    let accept_stat = if tree.n_leapfrog > 0 {
        (tree.sum_accept / tree.n_leapfrog as f64).clamp(0.0, 1.0)
    } else {
        0.0
    };

    if tree.q_prop.iter().all(|v| v.is_finite()) {
        state.q = tree.q_prop;
        state.logp = tree.logp_prop;
        state.grad = tree.grad_prop;
    }

    NutsStats {
        divergent: tree.divergent,
        treedepth: depth,
        accept_stat,
        energy: h0,
        n_leapfrog: tree.n_leapfrog,
    }
}

/// Stan-style coarse search: double or halve the step size until the one-step
/// acceptance probability crosses 1/2.
pub fn find_reasonable_step_size<T: Target + ?Sized, R: Rng>(
    target: &T,
    q: &[f64],
    metric: &Metric,
    rng: &mut R,
) -> f64 {
    fn one_step_log_accept<T: Target + ?Sized, R: Rng>(
        target: &T,
        base: &HmcState,
        metric: &Metric,
        eps: f64,
        rng: &mut R,
    ) -> f64 {
        let mut s = base.clone();
        s.p = metric.sample_momentum(rng);
        let h0 = s.hamiltonian(metric);
        if !leapfrog(target, &mut s, eps, 1.0, metric) {
            return f64::NEG_INFINITY;
        }
        h0 - s.hamiltonian(metric)
    }

    let mut eps = 1.0f64;
    let base = HmcState::new(target, q.to_vec());
    if !base.logp.is_finite() {
        return eps;
    }
    let half_log = (0.5f64).ln();
    let a0 = one_step_log_accept(target, &base, metric, eps, rng);
    let dir: i32 = if a0 > half_log { 1 } else { -1 };
    for _ in 0..100 {
        let a = one_step_log_accept(target, &base, metric, eps, rng);
        if (dir == 1 && a <= half_log) || (dir == -1 && a > half_log) {
            break;
        }
        eps *= if dir == 1 { 2.0 } else { 0.5 };
        if !(1e-10..=1e7).contains(&eps) {
            break;
        }
    }
    eps
}
