//! Mean-field Gaussian variational inference with the reparameterization
//! trick: learn (mu_i, sigma_i) per parameter by minimizing
//! KL(q || prior) - E_q[log likelihood].

use rand::prelude::*;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Records};
use crate::error::Error;
use crate::network::{eval_on_tape, NetInputs, NetworkSpec, ParamVector};
use crate::tape::{Matrix, NodeId, Tape};

/// Zero-mean isotropic Gaussian prior over the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub variance: f64,
}

/// Gaussian observation model with fixed noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodSpec {
    pub noise_variance: f64,
}

/// Per-parameter Gaussian posterior, sigma_i = softplus(rho_i).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub prior: PriorSpec,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus: rho such that softplus(rho) = sigma.
pub fn softplus_inv(sigma: f64) -> f64 {
    if sigma > 30.0 {
        sigma
    } else {
        (sigma.exp() - 1.0).ln()
    }
}

impl VariationalPosterior {
    pub fn new(mu: Vec<f64>, rho: Vec<f64>, prior: PriorSpec) -> Result<Self, Error> {
        if mu.len() != rho.len() {
            return Err(Error::Config("mu and rho must have equal length".into()));
        }
        if prior.variance <= 0.0 {
            return Err(Error::Config("prior variance must be positive".into()));
        }
        Ok(VariationalPosterior { mu, rho, prior })
    }

    /// Initialize means with fan-in scaled uniform draws and a small constant
    /// initial sigma.
    pub fn init(
        spec: &NetworkSpec,
        prior: PriorSpec,
        sigma_init: f64,
        mean_scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mu = crate::network::init_params(spec, rng, mean_scale).values;
        let rho = vec![softplus_inv(sigma_init); mu.len()];
        VariationalPosterior { mu, rho, prior }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// One reparameterized draw theta = mu + sigma .* eps.
    pub fn sample_theta(&self, rng: &mut impl Rng) -> Vec<f64> {
        let sigma = self.sigma();
        self.mu
            .iter()
            .zip(&sigma)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Closed-form KL(q || prior) for a mean-field Gaussian against the isotropic
/// Gaussian prior: sum_i [ log(s / sigma_i) + (sigma_i^2 + mu_i^2) / (2 s^2) - 1/2 ].
pub fn kl_gaussian(q: &VariationalPosterior) -> f64 {
    let s2 = q.prior.variance;
    let log_s = 0.5 * s2.ln();
    let sigma = q.sigma();
    q.mu
        .iter()
        .zip(&sigma)
        .map(|(m, sg)| log_s - sg.ln() + (sg * sg + m * m) / (2.0 * s2) - 0.5)
        .sum()
}

/// A recorded ELBO evaluation, differentiable with respect to (mu, rho).
pub struct ElboEval {
    pub loss: f64,
    pub tape: Tape,
    pub mu_node: NodeId,
    pub rho_node: NodeId,
    pub loss_node: NodeId,
}

impl ElboEval {
    /// Gradient of the loss with respect to the concatenation (mu, rho).
    pub fn grad(&self) -> Result<(Vec<f64>, Vec<f64>), Error> {
        let g = self.tape.grad_scalar(self.loss_node)?;
        Ok((g.of(self.mu_node).to_vec(), g.of(self.rho_node).to_vec()))
    }
}

/// A minibatch view into a dataset: record indices plus, for operator data,
/// the query indices used this step.
pub struct BatchView<'a> {
    pub data: &'a Dataset,
    pub record_idx: Option<&'a [usize]>,
    pub query_idx: Option<&'a [usize]>,
}

impl<'a> BatchView<'a> {
    pub fn full(data: &'a Dataset) -> Self {
        BatchView { data, record_idx: None, query_idx: None }
    }

    /// Scalar observations covered by this view.
    fn n_obs(&self) -> usize {
        match &self.data.records {
            Records::Function(d) => self.record_idx.map_or(d.x.len(), |r| r.len()),
            Records::Operator(d) => {
                let f = self.record_idx.map_or(d.fields.rows, |r| r.len());
                let q = self.query_idx.map_or(d.queries.rows, |r| r.len());
                f * q
            }
        }
    }
}

fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), m.cols);
    for (r, &i) in idx.iter().enumerate() {
        out.data[r * m.cols..(r + 1) * m.cols].copy_from_slice(&m.data[i * m.cols..(i + 1) * m.cols]);
    }
    out
}

/// Record the network prediction for a batch view, given a parameter node.
fn predictions_on_tape(
    net: &NetworkSpec,
    tape: &mut Tape,
    theta: NodeId,
    view: &BatchView,
) -> Result<(NodeId, Matrix), Error> {
    match &view.data.records {
        Records::Function(d) => {
            let (xs, ys): (Vec<f64>, Vec<f64>) = match view.record_idx {
                Some(idx) => idx.iter().map(|&i| (d.x[i], d.y[i])).unzip(),
                None => (d.x.clone(), d.y.clone()),
            };
            let x = tape.leaf(Matrix::column(&xs));
            let out = eval_on_tape(net, tape, theta, &NetInputs::Batch(x))?;
            Ok((out, Matrix::column(&ys)))
        }
        Records::Operator(d) => {
            let fields = match view.record_idx {
                Some(idx) => gather_rows(&d.fields, idx),
                None => d.fields.clone(),
            };
            let queries = match view.query_idx {
                Some(idx) => gather_rows(&d.queries, idx),
                None => d.queries.clone(),
            };
            let mut targets = Matrix::zeros(fields.rows, queries.rows);
            for r in 0..fields.rows {
                let src = view.record_idx.map_or(r, |idx| idx[r]);
                for c in 0..queries.rows {
                    let qc = view.query_idx.map_or(c, |idx| idx[c]);
                    targets.data[r * queries.rows + c] = d.values.get(src, qc);
                }
            }
            let f = tape.leaf(fields);
            let q = tape.leaf(queries);
            let out = eval_on_tape(net, tape, theta, &NetInputs::Operator { fields: f, queries: q })?;
            Ok((out, targets))
        }
    }
}

/// Build the ELBO loss on a tape with explicit reparameterization draws
/// (one per Monte Carlo sample). The KL term is scaled by `kl_scale` so that
/// minibatch losses sum to the full objective over an epoch.
pub fn elbo_with_eps(
    q: &VariationalPosterior,
    net: &NetworkSpec,
    view: &BatchView,
    likelihood: &LikelihoodSpec,
    eps_draws: &[Vec<f64>],
    kl_scale: f64,
) -> Result<ElboEval, Error> {
    if eps_draws.is_empty() {
        return Err(Error::Config("need at least one Monte Carlo draw".into()));
    }
    if view.data.n_obs() == 0 {
        return Err(Error::Config("dataset must be nonempty".into()));
    }
    let n_params = q.len() as f64;
    let sd2 = likelihood.noise_variance;
    if sd2 <= 0.0 {
        return Err(Error::Config("likelihood variance must be positive".into()));
    }
    let mut tape = Tape::new();
    let mu_node = tape.leaf(Matrix::row(&q.mu));
    let rho_node = tape.leaf(Matrix::row(&q.rho));
    let sigma = tape.softplus(rho_node);

    // KL(q || prior): n log s - sum log sigma + (sum sigma^2 + mu^2) / (2 s^2) - n/2
    let s2 = q.prior.variance;
    let log_sigma = tape.log(sigma);
    let sum_log_sigma = tape.sum(log_sigma);
    let t1 = tape.affine(sum_log_sigma, -1.0, n_params * (0.5 * s2.ln() - 0.5));
    let sig_sq = tape.square(sigma);
    let mu_sq = tape.square(mu_node);
    let ssum = tape.add(sig_sq, mu_sq);
    let ssum = tape.sum(ssum);
    let t2 = tape.affine(ssum, 1.0 / (2.0 * s2), 0.0);
    let kl = tape.add(t1, t2);
    let kl = tape.affine(kl, kl_scale, 0.0);

    // average negative log likelihood over the reparameterized draws
    let n_obs = view.n_obs() as f64;
    let mut nll_sum: Option<NodeId> = None;
    for eps in eps_draws {
        if eps.len() != q.len() {
            return Err(Error::Config("eps draw length mismatch".into()));
        }
        let eps_node = tape.leaf(Matrix::row(eps));
        let noise = tape.mul(sigma, eps_node);
        let theta = tape.add(mu_node, noise);
        let (pred, targets) = predictions_on_tape(net, &mut tape, theta, view)?;
        let target_node = tape.leaf(targets);
        let resid = tape.sub(pred, target_node);
        let sq = tape.square(resid);
        let ss = tape.sum(sq);
        let nll = tape.affine(ss, 1.0 / (2.0 * sd2), 0.5 * n_obs * (2.0 * std::f64::consts::PI * sd2).ln());
        nll_sum = Some(match nll_sum {
            Some(acc) => tape.add(acc, nll),
            None => nll,
        });
    }
    let nll_avg = tape.affine(nll_sum.unwrap(), 1.0 / eps_draws.len() as f64, 0.0);
    let loss_node = tape.add(kl, nll_avg);
    let loss = tape.value(loss_node).data[0];
    Ok(ElboEval { loss, tape, mu_node, rho_node, loss_node })
}

/// ELBO loss with fresh standard-normal reparameterization draws.
pub fn elbo_loss(
    q: &VariationalPosterior,
    net: &NetworkSpec,
    data: &Dataset,
    likelihood: &LikelihoodSpec,
    n_mc: usize,
    rng: &mut impl Rng,
) -> Result<ElboEval, Error> {
    let eps: Vec<Vec<f64>> = (0..n_mc.max(1))
        .map(|_| (0..q.len()).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    elbo_with_eps(q, net, &BatchView::full(data), likelihood, &eps, 1.0)
}

/// Adam optimizer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    cfg: AdamConfig,
}

impl AdamState {
    fn new(n: usize, cfg: AdamConfig) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0, cfg }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.cfg.eps);
        }
    }
}

/// Reduce the learning rate by `factor` when the monitored validation loss
/// has not improved for `patience` evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.1, patience: 50, min_lr: 1e-7 }
    }
}

/// Per-evaluation training history row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_elbo: f64,
    pub val_elbo: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub n_mc: usize,
    pub opt: AdamConfig,
    pub plateau: PlateauConfig,
    /// Fields per minibatch for operator data; full batch when absent.
    pub batch_records: Option<usize>,
    /// Query points per minibatch for operator data; all queries when absent.
    pub batch_queries: Option<usize>,
    /// Evaluate history/scheduler every this many epochs.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            n_mc: 1,
            opt: AdamConfig::default(),
            plateau: PlateauConfig::default(),
            batch_records: None,
            batch_queries: None,
            eval_every: 1,
        }
    }
}

pub struct TrainResult {
    pub posterior: VariationalPosterior,
    pub history: Vec<HistoryRow>,
    /// Set when training aborted on a non-finite loss; the posterior and
    /// history hold the last finite state.
    pub diverged_at: Option<usize>,
}

/// Mean squared error of the prediction at theta = mu.
pub fn mse_at_mean(q: &VariationalPosterior, net: &NetworkSpec, data: &Dataset) -> Result<f64, Error> {
    let theta = ParamVector::from_values(net, q.mu.clone())?;
    let (pred, targets): (Matrix, Matrix) = match &data.records {
        Records::Function(d) => {
            let f = crate::network::forward(net, &theta, &Matrix::column(&d.x))?;
            (f.outputs().clone(), Matrix::column(&d.y))
        }
        Records::Operator(d) => {
            let f = crate::network::forward_operator(net, &theta, &d.fields, &d.queries)?;
            (f.outputs().clone(), d.values.clone())
        }
    };
    let n = pred.len() as f64;
    Ok(pred.data.iter().zip(&targets.data).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Train the posterior by stochastic gradient descent on the ELBO.
pub fn train_vi(
    q0: &VariationalPosterior,
    net: &NetworkSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    likelihood: &LikelihoodSpec,
    rng: &mut impl Rng,
) -> Result<TrainResult, Error> {
    if q0.len() != net.param_count() {
        return Err(Error::Config("posterior length does not match network".into()));
    }
    let n = q0.len();
    let mut q = q0.clone();
    let mut opt = AdamState::new(2 * n, cfg.opt);
    let mut lr = cfg.opt.lr;
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let total_obs = train.n_obs() as f64;

    let n_records = train.n_records();
    let n_queries = match &train.records {
        Records::Operator(d) => d.queries.rows,
        Records::Function(_) => 0,
    };

    let mut last_finite = q.clone();
    for epoch in 0..cfg.epochs {
        // assemble this epoch's batches
        let record_batches: Vec<Vec<usize>> = match cfg.batch_records {
            Some(bs) if bs < n_records => {
                let mut order: Vec<usize> = (0..n_records).collect();
                order.shuffle(rng);
                order.chunks(bs).map(|c| c.to_vec()).collect()
            }
            _ => vec![(0..n_records).collect()],
        };
        let mut train_elbo = 0.0;
        for batch in &record_batches {
            let query_idx: Option<Vec<usize>> = match cfg.batch_queries {
                Some(bq) if n_queries > 0 && bq < n_queries => {
                    Some(rand::seq::index::sample(rng, n_queries, bq).into_vec())
                }
                _ => None,
            };
            let view = BatchView {
                data: train,
                record_idx: if batch.len() < n_records { Some(batch) } else { None },
                query_idx: query_idx.as_deref(),
            };
            let kl_scale = view.n_obs() as f64 / total_obs;
            let eps: Vec<Vec<f64>> = (0..cfg.n_mc.max(1))
                .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let eval = elbo_with_eps(&q, net, &view, likelihood, &eps, kl_scale)?;
            if !eval.loss.is_finite() {
                return Ok(TrainResult { posterior: last_finite, history, diverged_at: Some(epoch) });
            }
            train_elbo += eval.loss;
            if lr > 0.0 {
                let (gmu, grho) = eval.grad()?;
                let grad: Vec<f64> = gmu.into_iter().chain(grho).collect();
                let mut params: Vec<f64> = q.mu.iter().chain(&q.rho).copied().collect();
                opt.step(&mut params, &grad, lr);
                q.mu.copy_from_slice(&params[..n]);
                q.rho.copy_from_slice(&params[n..]);
            }
        }
        if !q.mu.iter().chain(&q.rho).all(|v| v.is_finite()) {
            return Ok(TrainResult { posterior: last_finite, history, diverged_at: Some(epoch) });
        }
        last_finite = q.clone();

        if epoch % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            // common random numbers: the monitored metric is a deterministic
            // function of q, so the plateau scheduler is not tripped by
            // Monte Carlo noise
            let mut val_rng = rand_chacha::ChaCha12Rng::seed_from_u64(0x7a11dace);
            let val_eval = elbo_loss(&q, net, val, likelihood, cfg.n_mc.max(1), &mut val_rng)?;
            let row = HistoryRow {
                epoch,
                train_elbo,
                val_elbo: val_eval.loss,
                train_mse: mse_at_mean(&q, net, train)?,
                val_mse: mse_at_mean(&q, net, val)?,
                lr,
            };
            history.push(row);
            // plateau scheduler on validation ELBO
            if val_eval.loss < best_val - 1e-12 {
                best_val = val_eval.loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.plateau.patience && lr > cfg.plateau.min_lr {
                    lr = (lr * cfg.plateau.factor).max(cfg.plateau.min_lr);
                    since_best = 0;
                }
            }
        }
    }
    Ok(TrainResult { posterior: q, history, diverged_at: None })
}

/// Draw posterior predictive samples on an input batch: one row per draw.
pub fn predictive_samples(
    q: &VariationalPosterior,
    net: &NetworkSpec,
    x: &[f64],
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Matrix, Error> {
    let mut out = Matrix::zeros(n_samples, x.len());
    for s in 0..n_samples {
        let theta = ParamVector::from_values(net, q.sample_theta(rng))?;
        let f = crate::network::forward(net, &theta, &Matrix::column(x))?;
        out.data[s * x.len()..(s + 1) * x.len()].copy_from_slice(&f.outputs().data);
    }
    Ok(out)
}

/// Streaming predictive mean and standard deviation for operator inputs.
pub fn predictive_stats_operator(
    q: &VariationalPosterior,
    net: &NetworkSpec,
    fields: &Matrix,
    queries: &Matrix,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<(Matrix, Matrix), Error> {
    let mut mean = Matrix::zeros(fields.rows, queries.rows);
    let mut m2 = Matrix::zeros(fields.rows, queries.rows);
    for s in 0..n_samples {
        let theta = ParamVector::from_values(net, q.sample_theta(rng))?;
        let f = crate::network::forward_operator(net, &theta, fields, queries)?;
        let out = f.outputs();
        let k = (s + 1) as f64;
        for i in 0..out.len() {
            let d = out.data[i] - mean.data[i];
            mean.data[i] += d / k;
            m2.data[i] += d * (out.data[i] - mean.data[i]);
        }
    }
    let denom = (n_samples.max(2) - 1) as f64;
    let std = Matrix::new(mean.rows, mean.cols, m2.data.iter().map(|v| (v / denom).sqrt()).collect());
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use crate::network::{Activation, LayerSpec};
    use rand_chacha::ChaCha12Rng;

    fn linear_net() -> NetworkSpec {
        // y = w x + b
        NetworkSpec::Mlp { input_dim: 1, layers: vec![LayerSpec::new(1, Activation::Identity, true)] }
    }

    fn q_of(mu: Vec<f64>, sigma: Vec<f64>, prior_var: f64) -> VariationalPosterior {
        let rho = sigma.iter().map(|&s| softplus_inv(s)).collect();
        VariationalPosterior::new(mu, rho, PriorSpec { variance: prior_var }).unwrap()
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let q = q_of(vec![0.0], vec![1.0], 1.0);
        assert!(kl_gaussian(&q).abs() < 1e-12);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let q = q_of(vec![1.0], vec![1.0], 1.0);
        assert!((kl_gaussian(&q) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for _ in 0..200 {
            let mu = rng.gen_range(-3.0..3.0);
            let sg = rng.gen_range(0.05..3.0);
            let s2: f64 = rng.gen_range(0.1..4.0);
            let q = q_of(vec![mu], vec![sg], s2);
            assert!(kl_gaussian(&q) >= -1e-12);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_q[log q - log p] estimated from 10^6 draws, within 3 standard errors
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (mu, sg, s2) = (0.7, 0.4, 2.3);
        let q = q_of(vec![mu], vec![sg], s2);
        let exact = kl_gaussian(&q);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = mu + sg * rng.sample::<f64, _>(StandardNormal);
            let log_q = -0.5 * ((x - mu) / sg).powi(2) - (sg * (2.0 * std::f64::consts::PI).sqrt()).ln();
            let log_p = -0.5 * x * x / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
            let v = log_q - log_p;
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    fn const_zero_data(n: usize) -> Dataset {
        Dataset::function(vec![0.0; n], vec![0.0; n], DatasetMeta::default()).unwrap()
    }

    #[test]
    fn likelihood_independent_of_theta_leaves_kl_plus_constant() {
        // y = w x with x = 0 everywhere: the NLL is constant in theta
        let net = NetworkSpec::Mlp { input_dim: 1, layers: vec![LayerSpec::new(1, Activation::Identity, false)] };
        let q = q_of(vec![0.3], vec![0.2], 1.0);
        let lik = LikelihoodSpec { noise_variance: 0.01 };
        let data = const_zero_data(7);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let eval = elbo_loss(&q, &net, &data, &lik, 3, &mut rng).unwrap();
        let expected = kl_gaussian(&q) + 7.0 * 0.5 * (2.0 * std::f64::consts::PI * 0.01).ln();
        assert!((eval.loss - expected).abs() < 1e-10, "{} vs {expected}", eval.loss);
    }

    #[test]
    fn elbo_rejects_empty_dataset() {
        let net = linear_net();
        let q = q_of(vec![0.0, 0.0], vec![0.1, 0.1], 1.0);
        let lik = LikelihoodSpec { noise_variance: 1.0 };
        let d = Dataset::function(vec![1.0], vec![1.0], DatasetMeta::default()).unwrap();
        let mut d_empty = d;
        if let Records::Function(f) = &mut d_empty.records {
            f.x.clear();
            f.y.clear();
        }
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert!(elbo_loss(&q, &net, &d_empty, &lik, 1, &mut rng).is_err());
    }

    #[test]
    fn matched_noise_nll_approaches_analytic_expectation() {
        // sigma -> 0, mu = true parameters, matched noise: the expected NLL is
        // N (0.5 log(2 pi sd^2) + 0.5); checked within 4 SE of the chi^2 sum
        let spec = crate::datagen::SinusoidSpec::case1(123);
        let (_, val) = crate::datagen::gen_sinusoid(&spec).unwrap();
        let net = crate::network::case1_spec();
        let true_theta = vec![4.0, -3.0, 0.0, 1.57, 0.4, 0.5];
        let q = q_of(true_theta, vec![1e-12; 6], 1.0);
        let sd2 = spec.noise_sigma * spec.noise_sigma;
        let lik = LikelihoodSpec { noise_variance: sd2 };
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let eval = elbo_loss(&q, &net, &val, &lik, 1, &mut rng).unwrap();
        let nll = eval.loss - kl_gaussian(&q);
        let n = val.n_obs() as f64;
        let expected = n * (0.5 * (2.0 * std::f64::consts::PI * sd2).ln() + 0.5);
        // Var[sum eps^2 / (2 sd^2)] = n / 2
        let se = (n / 2.0).sqrt();
        assert!((nll - expected).abs() < 4.0 * se, "nll {nll} expected {expected}");
    }

    #[test]
    fn elbo_gradient_matches_finite_differences_with_frozen_eps() {
        let net = linear_net();
        let data = Dataset::function(vec![0.5, -1.0, 2.0], vec![1.0, 0.2, -0.4], DatasetMeta::default()).unwrap();
        let lik = LikelihoodSpec { noise_variance: 0.25 };
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let q = q_of(vec![0.4, -0.2], vec![0.3, 0.15], 1.5);
        let eps: Vec<Vec<f64>> = (0..2).map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let eval = elbo_with_eps(&q, &net, &BatchView::full(&data), &lik, &eps, 1.0).unwrap();
        let (gmu, grho) = eval.grad().unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for which in 0..2 {
                let mut qp = q.clone();
                let slot = if which == 0 { &mut qp.mu } else { &mut qp.rho };
                slot[i] += h;
                let lp = elbo_with_eps(&qp, &net, &BatchView::full(&data), &lik, &eps, 1.0).unwrap().loss;
                let slot = if which == 0 { &mut qp.mu } else { &mut qp.rho };
                slot[i] -= 2.0 * h;
                let lm = elbo_with_eps(&qp, &net, &BatchView::full(&data), &lik, &eps, 1.0).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                let ad = if which == 0 { gmu[i] } else { grho[i] };
                assert!((ad - fd).abs() / fd.abs().max(1.0) < 1e-5, "{which}/{i}: ad {ad} fd {fd}");
            }
        }
    }

    #[test]
    fn reparameterized_gradient_is_unbiased_for_linear_net() {
        // For y = w x + b the exact expected NLL is analytic; the average of
        // fresh-eps gradients must match its gradient within 3 SE.
        let net = linear_net();
        let xs = [0.5, -1.0, 2.0];
        let ys = [1.0, 0.2, -0.4];
        let data = Dataset::function(xs.to_vec(), ys.to_vec(), DatasetMeta::default()).unwrap();
        let sd2 = 0.5;
        let lik = LikelihoodSpec { noise_variance: sd2 };
        let q = q_of(vec![0.4, -0.2], vec![0.3, 0.15], 1.5);
        let sigma = q.sigma();

        // exact gradient of E_q[loss] wrt mu and sigma (chained to rho)
        let mut exact_gmu = vec![0.0; 2];
        let mut exact_gsigma = vec![0.0; 2];
        for (x, y) in xs.iter().zip(&ys) {
            let phi = [*x, 1.0];
            let fmu = q.mu[0] * phi[0] + q.mu[1] * phi[1];
            for i in 0..2 {
                exact_gmu[i] += -(y - fmu) * phi[i] / sd2;
                exact_gsigma[i] += sigma[i] * phi[i] * phi[i] / sd2;
            }
        }
        // KL terms
        for i in 0..2 {
            exact_gmu[i] += q.mu[i] / q.prior.variance;
            exact_gsigma[i] += sigma[i] / q.prior.variance - 1.0 / sigma[i];
        }
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let exact_grho: Vec<f64> = (0..2).map(|i| exact_gsigma[i] * sigmoid(q.rho[i])).collect();

        let mut rng = ChaCha12Rng::seed_from_u64(321);
        let trials = 10_000;
        let mut sum = vec![0.0; 4];
        let mut sumsq = vec![0.0; 4];
        for _ in 0..trials {
            let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let eval = elbo_with_eps(&q, &net, &BatchView::full(&data), &lik, &[eps], 1.0).unwrap();
            let (gmu, grho) = eval.grad().unwrap();
            for i in 0..2 {
                sum[i] += gmu[i];
                sum[2 + i] += grho[i];
                sumsq[i] += gmu[i] * gmu[i];
                sumsq[2 + i] += grho[i] * grho[i];
            }
        }
        let expected = [exact_gmu[0], exact_gmu[1], exact_grho[0], exact_grho[1]];
        for i in 0..4 {
            let mean = sum[i] / trials as f64;
            let var = sumsq[i] / trials as f64 - mean * mean;
            let se = (var / trials as f64).sqrt().max(1e-12);
            assert!(
                (mean - expected[i]).abs() < 3.5 * se,
                "component {i}: mc {mean} exact {} se {se}",
                expected[i]
            );
        }
    }

    #[test]
    fn bias_only_training_recovers_constant_target() {
        // x = 0 data turns the 2-parameter linear net into a bias-only model
        let net = linear_net();
        let c = 0.8;
        let data = Dataset::function(vec![0.0; 50], vec![c; 50], DatasetMeta::default()).unwrap();
        let lik = LikelihoodSpec { noise_variance: 1e-4 };
        let q0 = q_of(vec![0.0, 0.0], vec![0.05, 0.05], 1.0);
        let cfg = TrainConfig { epochs: 3000, ..TrainConfig::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let res = train_vi(&q0, &net, &data, &data, &cfg, &lik, &mut rng).unwrap();
        assert!(res.diverged_at.is_none());
        assert!((res.posterior.mu[1] - c).abs() < 1e-2, "bias {} vs {c}", res.posterior.mu[1]);
    }

    #[test]
    fn zero_learning_rate_leaves_posterior_unchanged() {
        let net = linear_net();
        let data = Dataset::function(vec![1.0, 2.0], vec![1.0, 2.0], DatasetMeta::default()).unwrap();
        let lik = LikelihoodSpec { noise_variance: 1.0 };
        let q0 = q_of(vec![0.1, -0.3], vec![0.2, 0.2], 1.0);
        let cfg = TrainConfig {
            epochs: 1,
            opt: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let res = train_vi(&q0, &net, &data, &data, &cfg, &lik, &mut rng).unwrap();
        assert_eq!(res.posterior, q0);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let net = linear_net();
        let data = Dataset::function(vec![0.1, 0.9, -0.6], vec![0.5, 1.2, -0.1], DatasetMeta::default()).unwrap();
        let lik = LikelihoodSpec { noise_variance: 0.01 };
        let q0 = q_of(vec![0.0, 0.0], vec![0.05, 0.05], 1.0);
        let cfg = TrainConfig { epochs: 100, ..TrainConfig::default() };
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(8);
            train_vi(&q0, &net, &data, &data, &cfg, &lik, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.posterior, b.posterior);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn late_training_elbo_improves_over_early() {
        // stochastic-descent sanity: median ELBO over the last 10% of epochs
        // is below the median over the first 10%
        let net = linear_net();
        let data = Dataset::function(vec![-1.0, -0.5, 0.0, 0.5, 1.0], vec![-0.8, -0.3, 0.2, 0.7, 1.2], DatasetMeta::default()).unwrap();
        let lik = LikelihoodSpec { noise_variance: 0.01 };
        let q0 = q_of(vec![0.0, 0.0], vec![0.05, 0.05], 1.0);
        let cfg = TrainConfig { epochs: 500, ..TrainConfig::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let res = train_vi(&q0, &net, &data, &data, &cfg, &lik, &mut rng).unwrap();
        let k = res.history.len() / 10;
        let median = |rows: &[HistoryRow]| {
            let mut v: Vec<f64> = rows.iter().map(|r| r.train_elbo).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(median(&res.history[res.history.len() - k..]) < median(&res.history[..k]));
    }

    #[test]
    fn zero_sigma_predictive_samples_are_identical() {
        let net = linear_net();
        let q = q_of(vec![0.5, 0.1], vec![1e-14, 1e-14], 1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let s = predictive_samples(&q, &net, &[0.0, 1.0, 2.0], 20, &mut rng).unwrap();
        for r in 1..s.rows {
            for c in 0..s.cols {
                assert!((s.get(r, c) - s.get(0, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn predictive_moments_match_linear_analytics() {
        // for a linear-in-theta net the predictive mean is F(mu) and the
        // variance is sum_i sigma_i^2 (dF/dtheta_i)^2 exactly
        let net = linear_net();
        let q = q_of(vec![0.5, 0.1], vec![0.2, 0.3], 1.0);
        let x = 1.5;
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let n = 100_000;
        let s = predictive_samples(&q, &net, &[x], n, &mut rng).unwrap();
        let mean: f64 = s.data.iter().sum::<f64>() / n as f64;
        let var: f64 = s.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let exact_mean = 0.5 * x + 0.1;
        let exact_var = 0.2f64.powi(2) * x * x + 0.3f64.powi(2);
        let se = (exact_var / n as f64).sqrt();
        assert!((mean - exact_mean).abs() < 3.0 * se);
        assert!((var - exact_var).abs() / exact_var < 0.05);
    }
}
