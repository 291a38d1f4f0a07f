//! Hamiltonian Monte Carlo over network parameters, in the full space or a
//! reduced space with the remaining coordinates frozen at their VI means.
//!
//! The integrator is plain leapfrog with a diagonal mass matrix. Step size can
//! be tuned by dual averaging against a target acceptance rate before the
//! production run.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Records};
use crate::error::Error;
use crate::network::{forward, forward_operator, NetworkSpec, ParamVector};
use crate::sensitivity::ParameterPartition;
use crate::tape::Matrix;
use crate::vi::{LikelihoodSpec, PriorSpec};

/// Hamiltonian energy gap beyond which a trajectory counts as divergent and
/// is rejected outright.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// An unnormalized log density with gradient.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    /// Log density (up to a constant) and its gradient at `theta`.
    fn logp_grad(&self, theta: &[f64]) -> (f64, Vec<f64>);
}

/// Log posterior of network parameters under an isotropic Gaussian prior and
/// Gaussian observation likelihood.
pub struct PosteriorTarget<'a> {
    pub net: &'a NetworkSpec,
    pub data: &'a Dataset,
    pub prior: PriorSpec,
    pub likelihood: LikelihoodSpec,
}

impl Target for PosteriorTarget<'_> {
    fn dim(&self) -> usize {
        self.net.param_count()
    }

    fn logp_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let pv = match ParamVector::from_values(self.net, theta.to_vec()) {
            Ok(pv) => pv,
            Err(_) => return (f64::NEG_INFINITY, vec![0.0; theta.len()]),
        };
        let built = match &self.data.records {
            Records::Function(d) => forward(self.net, &pv, &Matrix::column(&d.x)).and_then(|mut f| {
                let y = f.tape.leaf(Matrix::column(&d.y));
                let r = f.tape.sub(f.output_node, y);
                let r2 = f.tape.square(r);
                let sse = f.tape.sum(r2);
                let g = f.tape.grad_scalar(sse)?;
                Ok((f.tape.value(sse).data[0], g.of(f.params_node).to_vec()))
            }),
            Records::Operator(d) => {
                forward_operator(self.net, &pv, &d.fields, &d.queries).and_then(|mut f| {
                    let y = f.tape.leaf(d.values.clone());
                    let r = f.tape.sub(f.output_node, y);
                    let r2 = f.tape.square(r);
                    let sse = f.tape.sum(r2);
                    let g = f.tape.grad_scalar(sse)?;
                    Ok((f.tape.value(sse).data[0], g.of(f.params_node).to_vec()))
                })
            }
        };
        let (sse, g_sse) = match built {
            Ok(v) => v,
            Err(_) => return (f64::NEG_INFINITY, vec![0.0; theta.len()]),
        };
        let inv_lik = 1.0 / (2.0 * self.likelihood.noise_variance);
        let inv_prior = 1.0 / self.prior.variance;
        let mut logp = -sse * inv_lik;
        let mut grad = Vec::with_capacity(theta.len());
        for (i, &t) in theta.iter().enumerate() {
            logp -= 0.5 * t * t * inv_prior;
            grad.push(-g_sse[i] * inv_lik - t * inv_prior);
        }
        (logp, grad)
    }
}

/// Restriction of a target to the sensitive coordinates of a partition; the
/// frozen coordinates stay pinned at their stored values.
pub struct ReducedTarget<'a, T: Target> {
    base: &'a T,
    partition: &'a ParameterPartition,
    template: Vec<f64>,
}

impl<'a, T: Target> ReducedTarget<'a, T> {
    pub fn new(base: &'a T, partition: &'a ParameterPartition) -> Result<Self, Error> {
        partition.validate(base.dim())?;
        let mut template = vec![0.0; base.dim()];
        for (&i, &v) in partition.frozen.iter().zip(&partition.frozen_values) {
            template[i] = v;
        }
        Ok(ReducedTarget { base, partition, template })
    }

    /// Assemble the full parameter vector from free coordinates.
    pub fn embed(&self, free: &[f64]) -> Vec<f64> {
        let mut full = self.template.clone();
        for (&i, &v) in self.partition.sensitive.iter().zip(free) {
            full[i] = v;
        }
        full
    }
}

impl<T: Target> Target for ReducedTarget<'_, T> {
    fn dim(&self) -> usize {
        self.partition.sensitive.len()
    }

    fn logp_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let full = self.embed(theta);
        let (logp, g) = self.base.logp_grad(&full);
        let grad = self.partition.sensitive.iter().map(|&i| g[i]).collect();
        (logp, grad)
    }
}

/// One phase-space state with cached density and gradient.
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub theta: Vec<f64>,
    pub momentum: Vec<f64>,
    pub logp: f64,
    pub grad: Vec<f64>,
}

impl PhaseState {
    pub fn at(target: &dyn Target, theta: Vec<f64>, momentum: Vec<f64>) -> Self {
        let (logp, grad) = target.logp_grad(&theta);
        PhaseState { theta, momentum, logp, grad }
    }

    /// H = -log p + p^T M^{-1} p / 2 with diagonal mass.
    pub fn hamiltonian(&self, mass_diag: &[f64]) -> f64 {
        let kinetic: f64 = self
            .momentum
            .iter()
            .zip(mass_diag)
            .map(|(&p, &m)| 0.5 * p * p / m)
            .sum();
        -self.logp + kinetic
    }
}

/// Leapfrog integration: half momentum step, `l` position steps with full
/// momentum updates between them, closing half momentum step. `l == 0` is the
/// identity map. Returns the end state and whether the trajectory left the
/// region of finite density.
pub fn leapfrog(
    target: &dyn Target,
    start: &PhaseState,
    eps: f64,
    l: usize,
    mass_diag: &[f64],
) -> (PhaseState, bool) {
    if l == 0 {
        return (start.clone(), !start.logp.is_finite());
    }
    let n = start.theta.len();
    let mut theta = start.theta.clone();
    let mut p = start.momentum.clone();
    let mut logp = start.logp;
    let mut grad = start.grad.clone();
    for i in 0..n {
        p[i] += 0.5 * eps * grad[i];
    }
    for step in 0..l {
        for i in 0..n {
            theta[i] += eps * p[i] / mass_diag[i];
        }
        let (lp, g) = target.logp_grad(&theta);
        logp = lp;
        grad = g;
        if !logp.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return (PhaseState { theta, momentum: p, logp: f64::NEG_INFINITY, grad }, true);
        }
        let scale = if step + 1 == l { 0.5 * eps } else { eps };
        for i in 0..n {
            p[i] += scale * grad[i];
        }
    }
    (PhaseState { theta, momentum: p, logp, grad }, false)
}

/// Outcome of a single Metropolis-adjusted HMC proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    pub divergent: bool,
    /// min(1, exp(-dH)), clamped to 0 for divergent proposals.
    pub accept_prob: f64,
}

/// Draw a fresh momentum, integrate, and accept or reject.
pub fn mh_step(
    target: &dyn Target,
    state: &mut PhaseState,
    eps: f64,
    l: usize,
    mass_diag: &[f64],
    rng: &mut impl Rng,
) -> StepOutcome {
    for (p, &m) in state.momentum.iter_mut().zip(mass_diag) {
        let z: f64 = rng.sample(StandardNormal);
        *p = z * m.sqrt();
    }
    let h0 = state.hamiltonian(mass_diag);
    let (proposal, mut divergent) = leapfrog(target, state, eps, l, mass_diag);
    let h1 = proposal.hamiltonian(mass_diag);
    let dh = h1 - h0;
    if !dh.is_finite() || dh.abs() > DIVERGENCE_THRESHOLD {
        divergent = true;
    }
    let accept_prob = if divergent { 0.0 } else { (-dh).exp().min(1.0) };
    let r = if divergent { 0.0 } else { (-dh).exp() };
    let u: f64 = rng.gen();
    let accepted = !divergent && r > u;
    if accepted {
        *state = proposal;
    }
    StepOutcome { accepted, divergent, accept_prob }
}

/// Sampler configuration for one multi-chain run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmcConfig {
    pub step_size: f64,
    pub n_leapfrog: usize,
    /// Total recorded draws per chain, burn-in included.
    pub n_samples: usize,
    /// Leading draws excluded from diagnostics and downstream use.
    pub burn_in: usize,
    pub n_chains: usize,
    pub seed: u64,
    /// Diagonal mass matrix; identity when absent.
    #[serde(default)]
    pub mass_diag: Option<Vec<f64>>,
}

impl HmcConfig {
    pub fn validate(&self, dim: usize) -> Result<(), Error> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.n_leapfrog == 0 {
            return Err(Error::Config("leapfrog step count must be at least 1".into()));
        }
        if self.n_chains == 0 || self.n_samples == 0 {
            return Err(Error::Config("need at least one chain and one sample".into()));
        }
        if self.burn_in >= self.n_samples {
            return Err(Error::Config(format!(
                "burn-in {} must be smaller than the sample count {}",
                self.burn_in, self.n_samples
            )));
        }
        if let Some(m) = &self.mass_diag {
            if m.len() != dim {
                return Err(Error::Config(format!("mass diagonal length {} does not match dim {dim}", m.len())));
            }
            if m.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::Config("mass diagonal entries must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One chain's draws and bookkeeping.
#[derive(Debug, Clone)]
pub struct ChainResult {
    pub chain_index: usize,
    /// n_samples x dim, row per draw, burn-in rows included.
    pub draws: Matrix,
    pub accepted_post_burn_in: usize,
    pub accepted_total: usize,
    pub divergences: usize,
    /// Set when the chain failed a health check and should be discarded.
    pub bad: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SampleResult {
    pub chains: Vec<ChainResult>,
    pub config: HmcConfig,
    pub elapsed_seconds: f64,
}

impl SampleResult {
    /// Post-burn-in draws of the healthy chains, stacked chain-major.
    pub fn pooled_draws(&self) -> Matrix {
        let dim = self.chains[0].draws.cols;
        let kept = self.config.n_samples - self.config.burn_in;
        let good: Vec<&ChainResult> = self.chains.iter().filter(|c| c.bad.is_none()).collect();
        let mut data = Vec::with_capacity(good.len() * kept * dim);
        for c in &good {
            data.extend_from_slice(&c.draws.data[self.config.burn_in * dim..]);
        }
        Matrix::new(good.len() * kept, dim, data)
    }

    pub fn acceptance_rate(&self) -> f64 {
        let kept = (self.config.n_samples - self.config.burn_in) as f64;
        let good: Vec<&ChainResult> = self.chains.iter().filter(|c| c.bad.is_none()).collect();
        if good.is_empty() {
            return 0.0;
        }
        good.iter().map(|c| c.accepted_post_burn_in as f64).sum::<f64>() / (kept * good.len() as f64)
    }
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha12Rng {
    // splitmix-style decorrelation of per-chain streams
    let mut z = seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul((chain as u64).wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha12Rng::seed_from_u64(z ^ (z >> 31))
}

fn run_chain(target: &dyn Target, init: &[f64], cfg: &HmcConfig, chain: usize) -> ChainResult {
    let dim = target.dim();
    let mass: Vec<f64> = cfg.mass_diag.clone().unwrap_or_else(|| vec![1.0; dim]);
    let mut rng = chain_rng(cfg.seed, chain);
    let mut state = PhaseState::at(target, init.to_vec(), vec![0.0; dim]);
    let mut draws = Vec::with_capacity(cfg.n_samples * dim);
    let mut accepted_total = 0;
    let mut accepted_post = 0;
    let mut divergences = 0;
    let mut nonfinite = false;
    for s in 0..cfg.n_samples {
        let out = mh_step(target, &mut state, cfg.step_size, cfg.n_leapfrog, &mass, &mut rng);
        if out.accepted {
            accepted_total += 1;
            if s >= cfg.burn_in {
                accepted_post += 1;
            }
        }
        if out.divergent {
            divergences += 1;
        }
        if state.theta.iter().any(|v| !v.is_finite()) {
            nonfinite = true;
        }
        draws.extend_from_slice(&state.theta);
    }
    let kept = (cfg.n_samples - cfg.burn_in) as f64;
    let bad = if nonfinite {
        Some("non-finite draw".to_string())
    } else if (accepted_post as f64) / kept < 0.01 {
        Some(format!("post-burn-in acceptance {:.4} below 1%", accepted_post as f64 / kept))
    } else {
        None
    };
    ChainResult {
        chain_index: chain,
        draws: Matrix::new(cfg.n_samples, dim, draws),
        accepted_post_burn_in: accepted_post,
        accepted_total,
        divergences,
        bad,
    }
}

/// Number of worker threads: the VIHMC_THREADS environment variable when set
/// to a positive integer, otherwise 1.
pub fn configured_threads() -> usize {
    std::env::var("VIHMC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Run all chains from the same initial point. Chains are independent streams
/// keyed by (seed, chain index), so the result does not depend on thread
/// scheduling.
pub fn sample_chains(target: &dyn Target, init: &[f64], cfg: &HmcConfig) -> Result<SampleResult, Error> {
    cfg.validate(target.dim())?;
    if init.len() != target.dim() {
        return Err(Error::Config(format!(
            "initial point length {} does not match target dim {}",
            init.len(),
            target.dim()
        )));
    }
    let started = Instant::now();
    let threads = configured_threads().min(cfg.n_chains);
    let mut chains: Vec<Option<ChainResult>> = (0..cfg.n_chains).map(|_| None).collect();
    if threads <= 1 {
        for (c, slot) in chains.iter_mut().enumerate() {
            *slot = Some(run_chain(target, init, cfg, c));
        }
    } else {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk_start in 0..threads {
                let cfg = &*cfg;
                handles.push(scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut c = chunk_start;
                    while c < cfg.n_chains {
                        out.push(run_chain(target, init, cfg, c));
                        c += threads;
                    }
                    out
                }));
            }
            for h in handles {
                for r in h.join().expect("chain worker panicked") {
                    let idx = r.chain_index;
                    chains[idx] = Some(r);
                }
            }
        });
    }
    Ok(SampleResult {
        chains: chains.into_iter().map(|c| c.expect("chain missing")).collect(),
        config: cfg.clone(),
        elapsed_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Dual-averaging step-size adaptation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Target acceptance rate delta.
    pub target_accept: f64,
    /// Number of tuning proposals.
    pub probe_iters: usize,
    /// Allowed gap between observed and target acceptance.
    pub tolerance: f64,
    /// Trajectory length scale: l = max(1, round(pi * scale / (2 eps))).
    pub trajectory_scale: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { target_accept: 0.8, probe_iters: 500, tolerance: 0.07, trajectory_scale: 0.0 }
    }
}

/// Leapfrog count covering roughly a quarter period of the slowest mode with
/// scale `v`: l = max(1, round(pi v / (2 eps))).
pub fn leapfrog_step_count(eps: f64, scale: f64) -> usize {
    ((std::f64::consts::PI * scale / (2.0 * eps)).round() as usize).max(1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptedStep {
    pub step_size: f64,
    pub n_leapfrog: usize,
    /// Mean acceptance probability over the probe.
    pub mean_accept: f64,
    pub within_tolerance: bool,
}

/// Double or halve eps until a single leapfrog step crosses 50% acceptance.
fn find_reasonable_epsilon(
    target: &dyn Target,
    state: &PhaseState,
    mass: &[f64],
    rng: &mut impl Rng,
) -> f64 {
    let mut probe = state.clone();
    for (p, &m) in probe.momentum.iter_mut().zip(mass) {
        let z: f64 = rng.sample(StandardNormal);
        *p = z * m.sqrt();
    }
    let h0 = probe.hamiltonian(mass);
    let mut eps = 1.0;
    let log_ratio = |eps: f64| -> f64 {
        let (next, div) = leapfrog(target, &probe, eps, 1, mass);
        if div {
            f64::NEG_INFINITY
        } else {
            h0 - next.hamiltonian(mass)
        }
    };
    let a: f64 = if log_ratio(eps) > (0.5f64).ln() { 1.0 } else { -1.0 };
    for _ in 0..60 {
        let lr = log_ratio(eps);
        if a * lr <= a * (0.5f64).ln() {
            break;
        }
        eps *= 2.0f64.powf(a);
    }
    eps
}

/// Tune the step size by Nesterov dual averaging over `probe_iters` HMC
/// proposals, then report the averaged iterate and the leapfrog count implied
/// by the trajectory-scale heuristic.
pub fn adapt_step_size(
    target: &dyn Target,
    init: &[f64],
    mass_diag: Option<&[f64]>,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<AdaptedStep, Error> {
    if !(cfg.target_accept > 0.0 && cfg.target_accept < 1.0) {
        return Err(Error::Config(format!("target acceptance must lie in (0, 1), got {}", cfg.target_accept)));
    }
    if cfg.probe_iters == 0 {
        return Err(Error::Config("adaptation needs at least one probe iteration".into()));
    }
    let dim = target.dim();
    let mass: Vec<f64> = mass_diag.map(|m| m.to_vec()).unwrap_or_else(|| vec![1.0; dim]);
    let mut rng = chain_rng(seed, usize::MAX);
    let mut state = PhaseState::at(target, init.to_vec(), vec![0.0; dim]);
    if !state.logp.is_finite() {
        return Err(Error::Numerical("initial point has non-finite density".into()));
    }
    let eps0 = find_reasonable_epsilon(target, &state, &mass, &mut rng);

    let (gamma, t0, kappa) = (0.05, 10.0, 0.75);
    let mu = (10.0 * eps0).ln();
    let mut eps = eps0;
    let mut log_eps_bar = 0.0;
    let mut h_bar = 0.0;
    let scale = if cfg.trajectory_scale > 0.0 { cfg.trajectory_scale } else { eps0 };
    for m in 1..=cfg.probe_iters {
        let l = leapfrog_step_count(eps, scale);
        let out = mh_step(target, &mut state, eps, l, &mass, &mut rng);
        let mf = m as f64;
        h_bar = (1.0 - 1.0 / (mf + t0)) * h_bar + (cfg.target_accept - out.accept_prob) / (mf + t0);
        let log_eps = mu - mf.sqrt() / gamma * h_bar;
        eps = log_eps.exp();
        let w = mf.powf(-kappa);
        log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar;
    }
    let step_size = log_eps_bar.exp();

    // verification pass at the fixed averaged step size
    let l = leapfrog_step_count(step_size, scale);
    let mut accept_sum = 0.0;
    let check_iters = cfg.probe_iters.min(200);
    for _ in 0..check_iters {
        let out = mh_step(target, &mut state, step_size, l, &mass, &mut rng);
        accept_sum += out.accept_prob;
    }
    let mean_accept = accept_sum / check_iters as f64;
    Ok(AdaptedStep {
        step_size,
        n_leapfrog: l,
        mean_accept,
        within_tolerance: (mean_accept - cfg.target_accept).abs() <= cfg.tolerance,
    })
}

/// Inverse standard normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9 over the whole open unit interval).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability out of range: {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Per-parameter convergence diagnostics plus run-level summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Rank-normalized split R-hat per parameter.
    pub r_hat: Vec<f64>,
    /// Effective sample size per parameter, pooled over healthy chains.
    pub ess: Vec<f64>,
    pub acceptance_rate: f64,
    pub seconds_per_sample: f64,
    pub n_divergences: usize,
    pub n_bad_chains: usize,
}

/// Average ranks with midranks for ties, then map through the normal quantile
/// function using the (r - 3/8) / (S + 1/4) plotting position.
fn rank_normalize(values: &[f64]) -> Vec<f64> {
    let s = values.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = midrank;
        }
        i = j + 1;
    }
    ranks
        .iter()
        .map(|&r| inverse_normal_cdf((r - 0.375) / (s as f64 + 0.25)))
        .collect()
}

/// Split R-hat on already-transformed sequences: each chain is halved, and
/// R-hat = sqrt(((n-1)/n W + B/n) / W) over the 2C half-chains.
fn split_r_hat(sequences: &[Vec<f64>]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * sequences.len());
    for s in sequences {
        let h = s.len() / 2;
        halves.push(&s[..h]);
        halves.push(&s[s.len() - h..]);
    }
    let n = halves[0].len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let m = halves.len() as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|&mu| (mu - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, &mu)| h.iter().map(|&v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Biased autocovariance estimates (divisor N) at lags 0..n via FFT.
fn autocovariance(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let m = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = (0..m)
        .map(|i| Complex::new(if i < n { series[i] - mean } else { 0.0 }, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex::new(v.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    (0..n).map(|t| buf[t].re / (m as f64 * n as f64)).collect()
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence
/// truncation of the combined autocorrelations.
fn multi_chain_ess(sequences: &[Vec<f64>]) -> f64 {
    let c = sequences.len() as f64;
    let n = sequences[0].len();
    let nf = n as f64;
    let covs: Vec<Vec<f64>> = sequences.iter().map(|s| autocovariance(s)).collect();
    // per-chain unbiased variance and between-chain variance
    let w_vars: Vec<f64> = covs.iter().map(|a| a[0] * nf / (nf - 1.0)).collect();
    let w = w_vars.iter().sum::<f64>() / c;
    let means: Vec<f64> = sequences.iter().map(|s| s.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / c;
    let b_over_n = if sequences.len() > 1 {
        means.iter().map(|&m| (m - grand).powi(2)).sum::<f64>() / (c - 1.0)
    } else {
        0.0
    };
    let var_plus = w * (nf - 1.0) / nf + b_over_n;
    if var_plus <= 0.0 {
        return f64::NAN;
    }
    let rho = |t: usize| -> f64 {
        let mean_cov = covs.iter().map(|a| a[t]).sum::<f64>() / c;
        1.0 - (w - mean_cov) / var_plus
    };
    // Geyer: sum paired autocorrelations while the pair sums stay positive,
    // enforcing monotone decrease.
    let mut tau = 1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 1;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        let capped = pair.min(prev_pair);
        tau += 2.0 * capped;
        prev_pair = capped;
        t += 2;
    }
    (c * nf / tau).min(c * nf)
}

/// Compute diagnostics from the post-burn-in draws of the healthy chains.
pub fn diagnostics(result: &SampleResult) -> Result<Diagnostics, Error> {
    let good: Vec<&ChainResult> = result.chains.iter().filter(|c| c.bad.is_none()).collect();
    let n_bad = result.chains.len() - good.len();
    if good.is_empty() {
        return Err(Error::QualityGate("every chain failed its health check".into()));
    }
    let dim = good[0].draws.cols;
    let kept = result.config.n_samples - result.config.burn_in;
    if kept < 4 {
        return Err(Error::Config("need at least 4 post-burn-in draws for diagnostics".into()));
    }
    let mut r_hat = Vec::with_capacity(dim);
    let mut ess = Vec::with_capacity(dim);
    for p in 0..dim {
        let seqs: Vec<Vec<f64>> = good
            .iter()
            .map(|ch| {
                (result.config.burn_in..result.config.n_samples)
                    .map(|s| ch.draws.data[s * dim + p])
                    .collect()
            })
            .collect();
        let pooled: Vec<f64> = seqs.iter().flatten().copied().collect();
        let z = rank_normalize(&pooled);
        let zseqs: Vec<Vec<f64>> = seqs
            .iter()
            .enumerate()
            .map(|(ci, s)| z[ci * s.len()..(ci + 1) * s.len()].to_vec())
            .collect();
        r_hat.push(split_r_hat(&zseqs));
        ess.push(multi_chain_ess(&seqs));
    }
    let total_draws: usize = good.len() * result.config.n_samples;
    Ok(Diagnostics {
        r_hat,
        ess,
        acceptance_rate: result.acceptance_rate(),
        seconds_per_sample: result.elapsed_seconds / total_draws as f64,
        n_divergences: result.chains.iter().map(|c| c.divergences).sum(),
        n_bad_chains: n_bad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use crate::network::{Activation, LayerSpec};

    struct StdNormal {
        dim: usize,
    }

    impl Target for StdNormal {
        fn dim(&self) -> usize {
            self.dim
        }
        fn logp_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
            let logp = -0.5 * theta.iter().map(|t| t * t).sum::<f64>();
            (logp, theta.iter().map(|t| -t).collect())
        }
    }

    struct ShiftedNormal {
        dim: usize,
        shift: f64,
    }

    impl Target for ShiftedNormal {
        fn dim(&self) -> usize {
            self.dim
        }
        fn logp_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
            let logp = self.shift - 0.5 * theta.iter().map(|t| t * t).sum::<f64>();
            (logp, theta.iter().map(|t| -t).collect())
        }
    }

    fn harmonic_energy_error(eps: f64) -> f64 {
        let target = StdNormal { dim: 1 };
        let mass = [1.0];
        let start = PhaseState::at(&target, vec![1.0], vec![0.5]);
        let h0 = start.hamiltonian(&mass);
        let steps = (1.0 / eps).round() as usize;
        let (end, div) = leapfrog(&target, &start, eps, steps, &mass);
        assert!(!div);
        (end.hamiltonian(&mass) - h0).abs()
    }

    #[test]
    fn leapfrog_energy_error_is_second_order() {
        let e1 = harmonic_energy_error(0.1);
        let e2 = harmonic_energy_error(0.05);
        let ratio = e1 / e2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn leapfrog_is_reversible() {
        let target = StdNormal { dim: 3 };
        let mass = [1.0, 2.0, 0.5];
        let start = PhaseState::at(&target, vec![0.3, -1.1, 0.7], vec![0.4, 0.2, -0.9]);
        let (mid, _) = leapfrog(&target, &start, 0.12, 25, &mass);
        let flipped = PhaseState::at(&target, mid.theta.clone(), mid.momentum.iter().map(|p| -p).collect());
        let (back, _) = leapfrog(&target, &flipped, 0.12, 25, &mass);
        for i in 0..3 {
            assert!((back.theta[i] - start.theta[i]).abs() < 1e-10);
            assert!((back.momentum[i] + start.momentum[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let target = StdNormal { dim: 2 };
        let start = PhaseState::at(&target, vec![0.5, -0.25], vec![1.0, 2.0]);
        let (end, div) = leapfrog(&target, &start, 0.3, 0, &[1.0, 1.0]);
        assert!(!div);
        assert_eq!(end.theta, start.theta);
        assert_eq!(end.momentum, start.momentum);
    }

    #[test]
    fn leapfrog_preserves_phase_space_volume() {
        // numerical Jacobian determinant of the (theta, p) map for a 1D target
        let target = StdNormal { dim: 1 };
        let mass = [1.3];
        let map = |x: f64, p: f64| -> (f64, f64) {
            let s = PhaseState::at(&target, vec![x], vec![p]);
            let (e, _) = leapfrog(&target, &s, 0.2, 7, &mass);
            (e.theta[0], e.momentum[0])
        };
        let h = 1e-6;
        let (x0, p0) = (0.4, -0.6);
        let (ax, ap) = map(x0 + h, p0);
        let (bx, bp) = map(x0 - h, p0);
        let (cx, cp) = map(x0, p0 + h);
        let (dx, dp) = map(x0, p0 - h);
        let j11 = (ax - bx) / (2.0 * h);
        let j21 = (ap - bp) / (2.0 * h);
        let j12 = (cx - dx) / (2.0 * h);
        let j22 = (cp - dp) / (2.0 * h);
        let det = j11 * j22 - j12 * j21;
        assert!((det - 1.0).abs() < 1e-6, "det {det}");
    }

    #[test]
    fn gaussian_moments_recovered() {
        let target = StdNormal { dim: 2 };
        let cfg = HmcConfig {
            step_size: 0.8,
            n_leapfrog: 2,
            n_samples: 6000,
            burn_in: 1000,
            n_chains: 2,
            seed: 11,
            mass_diag: None,
        };
        let res = sample_chains(&target, &[2.0, -2.0], &cfg).unwrap();
        let pooled = res.pooled_draws();
        let n = pooled.rows as f64;
        for p in 0..2 {
            let mean: f64 = (0..pooled.rows).map(|r| pooled.data[r * 2 + p]).sum::<f64>() / n;
            let var: f64 = (0..pooled.rows).map(|r| (pooled.data[r * 2 + p] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 0.1, "mean {mean}");
            assert!((var - 1.0).abs() < 0.12, "var {var}");
        }
        assert!(res.acceptance_rate() > 0.6);
    }

    #[test]
    fn accept_sequence_invariant_under_density_shift() {
        let a = StdNormal { dim: 2 };
        let b = ShiftedNormal { dim: 2, shift: 123.456 };
        let cfg = HmcConfig {
            step_size: 0.3,
            n_leapfrog: 5,
            n_samples: 200,
            burn_in: 10,
            n_chains: 1,
            seed: 5,
            mass_diag: None,
        };
        let ra = sample_chains(&a, &[0.5, 0.5], &cfg).unwrap();
        let rb = sample_chains(&b, &[0.5, 0.5], &cfg).unwrap();
        assert_eq!(ra.chains[0].draws.data, rb.chains[0].draws.data);
        assert_eq!(ra.chains[0].accepted_total, rb.chains[0].accepted_total);
    }

    #[test]
    fn runs_are_reproducible_and_thread_independent() {
        let target = StdNormal { dim: 2 };
        let cfg = HmcConfig {
            step_size: 0.35,
            n_leapfrog: 6,
            n_samples: 300,
            burn_in: 50,
            n_chains: 4,
            seed: 99,
            mass_diag: None,
        };
        let r1 = sample_chains(&target, &[0.0, 0.0], &cfg).unwrap();
        std::env::set_var("VIHMC_THREADS", "3");
        let r2 = sample_chains(&target, &[0.0, 0.0], &cfg).unwrap();
        std::env::remove_var("VIHMC_THREADS");
        for c in 0..4 {
            assert_eq!(r1.chains[c].draws.data, r2.chains[c].draws.data);
        }
    }

    #[test]
    fn divergent_proposals_are_rejected() {
        // steep quartic wall: huge step size forces the integrator to blow up
        struct Quartic;
        impl Target for Quartic {
            fn dim(&self) -> usize {
                1
            }
            fn logp_grad(&self, t: &[f64]) -> (f64, Vec<f64>) {
                (-t[0].powi(4) * 1e6, vec![-4e6 * t[0].powi(3)])
            }
        }
        let target = Quartic;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut state = PhaseState::at(&target, vec![0.5], vec![0.0]);
        let before = state.theta.clone();
        let mut saw_divergence = false;
        for _ in 0..20 {
            let out = mh_step(&target, &mut state, 5.0, 10, &[1.0], &mut rng);
            if out.divergent {
                saw_divergence = true;
                assert!(!out.accepted);
            }
        }
        assert!(saw_divergence);
        assert!(state.theta[0].is_finite());
        let _ = before;
    }

    fn linear_dataset() -> (NetworkSpec, Dataset) {
        // y = w x + b, observed with known noise
        let net = NetworkSpec::Mlp { input_dim: 1, layers: vec![LayerSpec::new(1, Activation::Identity, true)] };
        let x = vec![-1.0, -0.3, 0.2, 0.8, 1.5];
        let y: Vec<f64> = x.iter().map(|&v| 1.4 * v - 0.6).collect();
        let data = Dataset::function(x, y, DatasetMeta::default()).unwrap();
        (net, data)
    }

    /// Closed-form Gaussian posterior for the conjugate linear model.
    fn conjugate_posterior(data: &Dataset, prior_var: f64, noise_var: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let d = data.as_function().unwrap();
        // precision = X^T X / s^2 + I / v; X rows are (x, 1)
        let mut a = [[1.0 / prior_var, 0.0], [0.0, 1.0 / prior_var]];
        let mut rhs = [0.0, 0.0];
        for (&x, &y) in d.x.iter().zip(&d.y) {
            a[0][0] += x * x / noise_var;
            a[0][1] += x / noise_var;
            a[1][0] += x / noise_var;
            a[1][1] += 1.0 / noise_var;
            rhs[0] += x * y / noise_var;
            rhs[1] += y / noise_var;
        }
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let cov = [
            [a[1][1] / det, -a[0][1] / det],
            [-a[1][0] / det, a[0][0] / det],
        ];
        let mean = [
            cov[0][0] * rhs[0] + cov[0][1] * rhs[1],
            cov[1][0] * rhs[0] + cov[1][1] * rhs[1],
        ];
        (mean, cov)
    }

    #[test]
    fn conjugate_linear_regression_moments() {
        let (net, data) = linear_dataset();
        let prior = PriorSpec { variance: 4.0 };
        let lik = LikelihoodSpec { noise_variance: 0.04 };
        let (mean, cov) = conjugate_posterior(&data, prior.variance, lik.noise_variance);
        let target = PosteriorTarget { net: &net, data: &data, prior, likelihood: lik };
        let cfg = HmcConfig {
            step_size: 0.05,
            n_leapfrog: 12,
            n_samples: 8000,
            burn_in: 2000,
            n_chains: 2,
            seed: 21,
            mass_diag: None,
        };
        let res = sample_chains(&target, &[0.0, 0.0], &cfg).unwrap();
        let pooled = res.pooled_draws();
        let n = pooled.rows as f64;
        let mut emp_mean = [0.0; 2];
        for r in 0..pooled.rows {
            emp_mean[0] += pooled.data[r * 2];
            emp_mean[1] += pooled.data[r * 2 + 1];
        }
        emp_mean[0] /= n;
        emp_mean[1] /= n;
        let mut emp_var = [0.0; 2];
        for r in 0..pooled.rows {
            emp_var[0] += (pooled.data[r * 2] - emp_mean[0]).powi(2);
            emp_var[1] += (pooled.data[r * 2 + 1] - emp_mean[1]).powi(2);
        }
        emp_var[0] /= n;
        emp_var[1] /= n;
        for i in 0..2 {
            assert!((emp_mean[i] - mean[i]).abs() < 0.02, "mean[{i}] {} vs {}", emp_mean[i], mean[i]);
            assert!((emp_var[i] - cov[i][i]).abs() < 0.3 * cov[i][i], "var[{i}] {} vs {}", emp_var[i], cov[i][i]);
        }
    }

    #[test]
    fn reduced_target_matches_gaussian_conditional() {
        // freeze the bias of the conjugate model and compare the slope's
        // conditional distribution against the analytic slice
        let (net, data) = linear_dataset();
        let prior = PriorSpec { variance: 4.0 };
        let lik = LikelihoodSpec { noise_variance: 0.04 };
        let (mean, cov) = conjugate_posterior(&data, prior.variance, lik.noise_variance);
        let frozen_bias = -0.5;
        // conditional of x0 | x1: mean m0 + c01/c11 (v - m1), var c00 - c01^2/c11
        let cond_mean = mean[0] + cov[0][1] / cov[1][1] * (frozen_bias - mean[1]);
        let cond_var = cov[0][0] - cov[0][1] * cov[0][1] / cov[1][1];
        let target = PosteriorTarget { net: &net, data: &data, prior, likelihood: lik };
        let partition = ParameterPartition {
            sensitive: vec![0],
            frozen: vec![1],
            frozen_values: vec![frozen_bias],
            tau: 0.9,
            cutoff: 0.0,
            warning: None,
        };
        let reduced = ReducedTarget::new(&target, &partition).unwrap();
        let cfg = HmcConfig {
            step_size: 0.04,
            n_leapfrog: 10,
            n_samples: 8000,
            burn_in: 2000,
            n_chains: 2,
            seed: 77,
            mass_diag: None,
        };
        let res = sample_chains(&reduced, &[0.0], &cfg).unwrap();
        let pooled = res.pooled_draws();
        let n = pooled.rows as f64;
        let m: f64 = pooled.data.iter().sum::<f64>() / n;
        let v: f64 = pooled.data.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!((m - cond_mean).abs() < 0.02, "{m} vs {cond_mean}");
        assert!((v - cond_var).abs() < 0.3 * cond_var, "{v} vs {cond_var}");
    }

    #[test]
    fn reduced_gradient_selects_coordinates() {
        let target = StdNormal { dim: 4 };
        let partition = ParameterPartition {
            sensitive: vec![2, 0],
            frozen: vec![1, 3],
            frozen_values: vec![5.0, -3.0],
            tau: 0.9,
            cutoff: 0.0,
            warning: None,
        };
        let reduced = ReducedTarget::new(&target, &partition).unwrap();
        assert_eq!(reduced.dim(), 2);
        let (logp, g) = reduced.logp_grad(&[1.0, 2.0]);
        // sensitive order [2, 0], so the full vector is [2, 5, 1, -3]
        let expected_logp = -0.5 * (4.0 + 25.0 + 1.0 + 9.0);
        assert!((logp - expected_logp).abs() < 1e-12);
        assert_eq!(g, vec![-1.0, -2.0]);
    }

    #[test]
    fn step_size_adaptation_hits_target_acceptance() {
        let target = StdNormal { dim: 5 };
        let cfg = AdaptConfig { target_accept: 0.8, probe_iters: 500, tolerance: 0.07, trajectory_scale: 1.0 };
        let adapted = adapt_step_size(&target, &[0.0; 5], None, &cfg, 42).unwrap();
        assert!(adapted.within_tolerance, "mean acceptance {}", adapted.mean_accept);
        assert!(adapted.step_size > 0.0 && adapted.step_size < 2.0);
        assert!(adapted.n_leapfrog >= 1);
    }

    #[test]
    fn leapfrog_count_heuristic() {
        assert_eq!(leapfrog_step_count(0.1, 1.0), 16); // round(pi / 0.2)
        assert_eq!(leapfrog_step_count(10.0, 1.0), 1);
    }

    #[test]
    fn inverse_normal_cdf_oracle() {
        assert!((inverse_normal_cdf(0.5)).abs() < 1e-9);
        assert!((inverse_normal_cdf(0.975) - 1.959963984540054).abs() < 1e-8);
        assert!((inverse_normal_cdf(0.025) + 1.959963984540054).abs() < 1e-8);
        assert!((inverse_normal_cdf(0.8413447460685429) - 1.0).abs() < 1e-8);
        assert!((inverse_normal_cdf(1e-10) + 6.361340902404056).abs() < 1e-6);
    }

    #[test]
    fn diagnostics_near_ideal_for_good_chains() {
        let target = StdNormal { dim: 2 };
        let cfg = HmcConfig {
            step_size: 0.9,
            n_leapfrog: 4,
            n_samples: 3000,
            burn_in: 500,
            n_chains: 4,
            seed: 7,
            mass_diag: None,
        };
        let res = sample_chains(&target, &[0.0, 0.0], &cfg).unwrap();
        let d = diagnostics(&res).unwrap();
        for p in 0..2 {
            assert!(d.r_hat[p] < 1.01, "r_hat {}", d.r_hat[p]);
            assert!(d.ess[p] > 1000.0, "ess {}", d.ess[p]);
        }
        assert_eq!(d.n_bad_chains, 0);
        assert!(d.acceptance_rate > 0.5);
        assert!(d.seconds_per_sample > 0.0);
    }

    #[test]
    fn r_hat_detects_disjoint_chains() {
        // fabricate two chains sampling well-separated modes
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let n = 500;
        let mk = |rng: &mut ChaCha12Rng, shift: f64| -> Vec<f64> {
            (0..n).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let a = mk(&mut rng, 0.0);
        let b = mk(&mut rng, 8.0);
        let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
        let z = rank_normalize(&pooled);
        let zseqs = vec![z[..n].to_vec(), z[n..].to_vec()];
        let r = split_r_hat(&zseqs);
        assert!(r > 1.5, "r_hat {r}");
        let same = split_r_hat(&vec![rank_normalize(&a)]);
        assert!(same < 1.02, "r_hat {same}");
    }

    #[test]
    fn ess_matches_iid_and_penalizes_correlation() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let n = 4000;
        let iid: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let e = multi_chain_ess(&[iid.clone()]);
        assert!(e > 0.7 * n as f64, "iid ess {e}");
        // AR(1) with phi = 0.9 has tau = (1 + phi) / (1 - phi) = 19
        let phi = 0.9;
        let mut ar = Vec::with_capacity(n);
        let mut x = 0.0;
        for _ in 0..n {
            x = phi * x + rng.sample::<f64, _>(StandardNormal);
            ar.push(x);
        }
        let e_ar = multi_chain_ess(&[ar]);
        let expected = n as f64 / 19.0;
        assert!(e_ar > 0.5 * expected && e_ar < 2.0 * expected, "ar ess {e_ar} vs {expected}");
    }

    #[test]
    fn bad_chain_flagged_on_zero_acceptance() {
        // impossibly large step size: every proposal diverges
        struct Narrow;
        impl Target for Narrow {
            fn dim(&self) -> usize {
                1
            }
            fn logp_grad(&self, t: &[f64]) -> (f64, Vec<f64>) {
                (-5e7 * t[0] * t[0], vec![-1e8 * t[0]])
            }
        }
        let cfg = HmcConfig {
            step_size: 1.0,
            n_leapfrog: 5,
            n_samples: 120,
            burn_in: 20,
            n_chains: 1,
            seed: 4,
            mass_diag: None,
        };
        let res = sample_chains(&Narrow, &[0.0], &cfg).unwrap();
        assert!(res.chains[0].bad.is_some());
        assert!(diagnostics(&res).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let base = HmcConfig {
            step_size: 0.1,
            n_leapfrog: 5,
            n_samples: 100,
            burn_in: 10,
            n_chains: 2,
            seed: 0,
            mass_diag: None,
        };
        assert!(base.validate(3).is_ok());
        let mut c = base.clone();
        c.step_size = 0.0;
        assert!(c.validate(3).is_err());
        let mut c = base.clone();
        c.burn_in = 100;
        assert!(c.validate(3).is_err());
        let mut c = base.clone();
        c.mass_diag = Some(vec![1.0, -1.0]);
        assert!(c.validate(2).is_err());
    }
}
