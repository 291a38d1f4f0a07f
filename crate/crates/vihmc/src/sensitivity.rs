//! Variance-based parameter ranking: each parameter's first-order
//! contribution to the predictive variance, averaged over the training data,
//! and the cumulative-variance partition consumed by reduced-space HMC.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Records};
use crate::error::Error;
use crate::network::{forward, forward_operator, LayoutRecord, NetworkSpec, ParamVector};
use crate::tape::Matrix;
use crate::vi::VariationalPosterior;

/// Ranked sensitivity scores S_i^2 = sigma_i^2 / N_d * sum_j (dF_mu(x_j)/dtheta_i)^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Nonnegative score per flat parameter index.
    pub scores: Vec<f64>,
    /// Permutation of [0, n) sorting scores descending (ties by ascending index).
    pub ranking: Vec<usize>,
    /// cumulative[n] = sum of the top-(n+1) scores / total; empty-safe.
    pub cumulative: Vec<f64>,
    pub total: f64,
}

/// How the cumulative-variance threshold selects the sensitive count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// Smallest N with cumulative fraction >= tau (captures at least tau).
    #[default]
    AtLeast,
    /// Largest N with cumulative fraction <= tau, as the truncation formula
    /// reads literally.
    AtMost,
}

/// Partition of the flat parameter vector into HMC-sampled and frozen sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub sensitive: Vec<usize>,
    pub frozen: Vec<usize>,
    /// VI means for the frozen indices, aligned with `frozen`.
    pub frozen_values: Vec<f64>,
    pub tau: f64,
    /// Implied score cutoff: the smallest selected score (0 when none).
    pub cutoff: f64,
    pub warning: Option<String>,
}

impl ParameterPartition {
    pub fn n_params(&self) -> usize {
        self.sensitive.len() + self.frozen.len()
    }

    /// Partition with every parameter sensitive (tau = 1 limit).
    pub fn all_sensitive(n: usize) -> Self {
        ParameterPartition {
            sensitive: (0..n).collect(),
            frozen: Vec::new(),
            frozen_values: Vec::new(),
            tau: 1.0,
            cutoff: 0.0,
            warning: None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), Error> {
        let mut seen = vec![false; n];
        for &i in self.sensitive.iter().chain(&self.frozen) {
            if i >= n || seen[i] {
                return Err(Error::Config(format!("partition index {i} out of range or duplicated")));
            }
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Config("partition does not cover all parameters".into()));
        }
        if self.frozen.len() != self.frozen_values.len() {
            return Err(Error::Config("frozen values misaligned with frozen indices".into()));
        }
        Ok(())
    }
}

/// Compute sensitivity scores at theta = mu. Gradients are evaluated one
/// reverse pass per (datum, output component) and accumulated squared, so
/// memory stays proportional to one forward pass.
pub fn compute_sensitivities(
    q: &VariationalPosterior,
    net: &NetworkSpec,
    data: &Dataset,
) -> Result<SensitivityReport, Error> {
    let n = net.param_count();
    if q.len() != n {
        return Err(Error::Config("posterior length does not match network".into()));
    }
    let theta = ParamVector::from_values(net, q.mu.clone())?;
    let mut sq_sum = vec![0.0; n];
    let n_avg: f64;
    match &data.records {
        Records::Function(d) => {
            let f = forward(net, &theta, &Matrix::column(&d.x))?;
            let out = f.outputs();
            // squared gradients summed over output components, averaged over data
            n_avg = out.rows as f64;
            for flat in 0..out.len() {
                let g = f.grad_output(flat)?;
                for i in 0..n {
                    sq_sum[i] += g[i] * g[i];
                }
            }
        }
        Records::Operator(d) => {
            // averaged over fields and query points alike
            n_avg = (d.fields.rows * d.queries.rows) as f64;
            for fi in 0..d.fields.rows {
                let frow = Matrix::new(1, d.fields.cols, d.fields.data[fi * d.fields.cols..(fi + 1) * d.fields.cols].to_vec());
                for qi in 0..d.queries.rows {
                    let qrow = Matrix::new(1, d.queries.cols, d.queries.data[qi * d.queries.cols..(qi + 1) * d.queries.cols].to_vec());
                    let f = forward_operator(net, &theta, &frow, &qrow)?;
                    let g = f.grad_output(0)?;
                    for i in 0..n {
                        sq_sum[i] += g[i] * g[i];
                    }
                }
            }
        }
    }
    let sigma = q.sigma();
    let scores: Vec<f64> = (0..n).map(|i| sigma[i] * sigma[i] * sq_sum[i] / n_avg).collect();
    Ok(SensitivityReport::from_scores(scores))
}

impl SensitivityReport {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        // descending by score, ties by ascending flat index
        ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let total: f64 = scores.iter().sum();
        let mut cumulative = Vec::with_capacity(scores.len());
        let mut acc = 0.0;
        for &i in &ranking {
            acc += scores[i];
            cumulative.push(if total > 0.0 { acc / total } else { 0.0 });
        }
        SensitivityReport { scores, ranking, cumulative, total }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Number of top-ranked parameters selected by the threshold rule.
    pub fn selected_count(&self, tau: f64, rule: ThresholdRule) -> usize {
        if self.total <= 0.0 {
            return 0;
        }
        match rule {
            ThresholdRule::AtLeast => {
                match self.cumulative.iter().position(|&c| c >= tau - 1e-12) {
                    Some(idx) => idx + 1,
                    None => self.len(),
                }
            }
            ThresholdRule::AtMost => {
                self.cumulative.iter().take_while(|&&c| c <= tau + 1e-12).count()
            }
        }
    }
}

/// Select the parameter partition at threshold tau.
pub fn select_partition(
    report: &SensitivityReport,
    q: &VariationalPosterior,
    tau: f64,
    rule: ThresholdRule,
) -> Result<ParameterPartition, Error> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    if report.len() != q.len() {
        return Err(Error::Config("report length does not match posterior".into()));
    }
    let warning = if report.total <= 0.0 {
        Some("all sensitivity scores are zero; no parameters selected".to_string())
    } else {
        None
    };
    let n_hat = report.selected_count(tau, rule);
    let sensitive: Vec<usize> = report.ranking[..n_hat].to_vec();
    let mut frozen: Vec<usize> = report.ranking[n_hat..].to_vec();
    frozen.sort_unstable();
    let frozen_values: Vec<f64> = frozen.iter().map(|&i| q.mu[i]).collect();
    let cutoff = sensitive.iter().map(|&i| report.scores[i]).fold(f64::INFINITY, f64::min);
    Ok(ParameterPartition {
        sensitive,
        frozen,
        frozen_values,
        tau,
        cutoff: if cutoff.is_finite() { cutoff } else { 0.0 },
        warning,
    })
}

/// Reshape the flat scores into per-layer blocks for rendering and export.
pub fn layer_sensitivity_map<'a>(
    report: &SensitivityReport,
    net: &'a NetworkSpec,
) -> Result<Vec<(LayoutRecord, Matrix)>, Error> {
    if report.len() != net.param_count() {
        return Err(Error::Config("report length does not match network".into()));
    }
    Ok(net
        .layout()
        .into_iter()
        .map(|rec| {
            let block = Matrix::new(rec.rows, rec.cols, report.scores[rec.offset..rec.offset + rec.len()].to_vec());
            (rec, block)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use crate::network::{Activation, LayerSpec};
    use crate::vi::{softplus_inv, PriorSpec};

    fn q_of(mu: Vec<f64>, sigma: Vec<f64>) -> VariationalPosterior {
        let rho = sigma.iter().map(|&s| softplus_inv(s.max(1e-300))).collect();
        VariationalPosterior::new(mu, rho, PriorSpec { variance: 1.0 }).unwrap()
    }

    fn linear_net() -> NetworkSpec {
        NetworkSpec::Mlp { input_dim: 1, layers: vec![LayerSpec::new(1, Activation::Identity, true)] }
    }

    #[test]
    fn hand_computed_linear_scores() {
        // y = theta1 x + theta2, x in {1, 2}, sigma = (0.1, 0.2):
        // S1^2 = 0.01 * (1 + 4) / 2 = 0.025, S2^2 = 0.04 * (1 + 1) / 2 = 0.04
        let q = q_of(vec![0.0, 0.0], vec![0.1, 0.2]);
        let data = Dataset::function(vec![1.0, 2.0], vec![0.0, 0.0], DatasetMeta::default()).unwrap();
        let r = compute_sensitivities(&q, &linear_net(), &data).unwrap();
        assert!((r.scores[0] - 0.025).abs() < 1e-12);
        assert!((r.scores[1] - 0.04).abs() < 1e-12);
        assert_eq!(r.ranking, vec![1, 0]);
    }

    #[test]
    fn zero_sigma_gives_zero_score() {
        let q = q_of(vec![1.0, 1.0], vec![0.0, 0.3]);
        let data = Dataset::function(vec![1.0], vec![0.0], DatasetMeta::default()).unwrap();
        let r = compute_sensitivities(&q, &linear_net(), &data).unwrap();
        assert_eq!(r.scores[0], 0.0);
        assert!(r.scores[1] > 0.0);
    }

    #[test]
    fn threshold_rules_on_simple_scores() {
        let r = SensitivityReport::from_scores(vec![0.5, 0.3, 0.2]);
        assert_eq!(r.selected_count(0.9, ThresholdRule::AtLeast), 3); // c2 = 0.8 < 0.9
        assert_eq!(r.selected_count(0.9, ThresholdRule::AtMost), 2);
        assert_eq!(r.selected_count(1.0, ThresholdRule::AtLeast), 3);
    }

    #[test]
    fn tau_one_selects_everything() {
        let r = SensitivityReport::from_scores(vec![0.1, 0.7, 0.2]);
        let q = q_of(vec![0.0; 3], vec![0.1; 3]);
        let p = select_partition(&r, &q, 1.0, ThresholdRule::AtLeast).unwrap();
        assert_eq!(p.sensitive.len(), 3);
        assert!(p.frozen.is_empty());
    }

    #[test]
    fn all_zero_scores_warn_with_empty_selection() {
        let r = SensitivityReport::from_scores(vec![0.0; 4]);
        let q = q_of(vec![0.5; 4], vec![0.0; 4]);
        let p = select_partition(&r, &q, 0.9, ThresholdRule::AtLeast).unwrap();
        assert!(p.sensitive.is_empty());
        assert!(p.warning.is_some());
        assert_eq!(p.frozen_values, vec![0.5; 4]);
    }

    #[test]
    fn partition_respects_ranking() {
        let r = SensitivityReport::from_scores(vec![0.05, 0.4, 0.15, 0.4]);
        let q = q_of(vec![0.0; 4], vec![0.1; 4]);
        let p = select_partition(&r, &q, 0.8, ThresholdRule::AtLeast).unwrap();
        p.validate(4).unwrap();
        let min_sel = p.sensitive.iter().map(|&i| r.scores[i]).fold(f64::INFINITY, f64::min);
        let max_frozen = p.frozen.iter().map(|&i| r.scores[i]).fold(0.0f64, f64::max);
        assert!(min_sel >= max_frozen);
        // tie at 0.4 broken by ascending flat index
        assert_eq!(p.sensitive[0], 1);
    }

    #[test]
    fn count_is_monotone_in_tau() {
        let r = SensitivityReport::from_scores(vec![0.3, 0.25, 0.2, 0.15, 0.1]);
        let mut prev = 0;
        for t in 1..=10 {
            let tau = t as f64 / 10.0;
            let n = r.selected_count(tau, ThresholdRule::AtLeast);
            assert!(n >= prev, "tau {tau}");
            prev = n;
        }
    }

    #[test]
    fn scaling_sigma_quadruples_scores_and_keeps_partition() {
        let net = crate::network::case1_spec();
        let mu = vec![1.2, -0.7, 0.3, 0.8, 0.5, -0.2];
        let sigma = vec![0.1, 0.2, 0.05, 0.15, 0.3, 0.08];
        let data = Dataset::function(vec![-0.8, 0.3, 0.9], vec![0.0; 3], DatasetMeta::default()).unwrap();
        let r1 = compute_sensitivities(&q_of(mu.clone(), sigma.clone()), &net, &data).unwrap();
        let sigma2: Vec<f64> = sigma.iter().map(|s| 2.0 * s).collect();
        let r2 = compute_sensitivities(&q_of(mu.clone(), sigma2), &net, &data).unwrap();
        for (a, b) in r1.scores.iter().zip(&r2.scores) {
            assert!((4.0 * a - b).abs() < 1e-9 * b.abs().max(1e-30), "{a} {b}");
        }
        assert_eq!(r1.ranking, r2.ranking);
        let q1 = q_of(mu.clone(), sigma);
        let p1 = select_partition(&r1, &q1, 0.9, ThresholdRule::AtLeast).unwrap();
        let p2 = select_partition(&r2, &q1, 0.9, ThresholdRule::AtLeast).unwrap();
        assert_eq!(p1.sensitive, p2.sensitive);
    }

    #[test]
    fn linear_net_first_order_variance_is_exact() {
        // for a linear-in-theta net, Var[F] = sum_i sigma_i^2 (dF/dtheta_i)^2 exactly
        let q = q_of(vec![0.4, -0.1], vec![0.25, 0.15]);
        let x = 1.7;
        let exact_var = 0.25f64.powi(2) * x * x + 0.15f64.powi(2);
        let data = Dataset::function(vec![x], vec![0.0], DatasetMeta::default()).unwrap();
        let r = compute_sensitivities(&q, &linear_net(), &data).unwrap();
        assert!((r.total - exact_var).abs() < 1e-14);
    }

    #[test]
    fn layer_map_partitions_the_total() {
        let net = crate::network::case2_spec();
        let n = net.param_count();
        let scores: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let r = SensitivityReport::from_scores(scores);
        let blocks = layer_sensitivity_map(&r, &net).unwrap();
        let block_total: f64 = blocks.iter().map(|(_, b)| b.data.iter().sum::<f64>()).sum();
        assert!((block_total - r.total).abs() < 1e-9);
        assert_eq!(blocks[0].1.rows, 10);
        assert_eq!(blocks[0].1.cols, 1);
        assert_eq!(blocks[1].1.rows, 1);
        assert_eq!(blocks[1].1.cols, 10);
    }

    #[test]
    fn small_mlp_block_shapes() {
        let net = NetworkSpec::Mlp {
            input_dim: 1,
            layers: vec![LayerSpec::new(2, Activation::Tanh, true), LayerSpec::new(1, Activation::Identity, false)],
        };
        let r = SensitivityReport::from_scores(vec![1.0; net.param_count()]);
        let blocks = layer_sensitivity_map(&r, &net).unwrap();
        let shapes: Vec<(usize, usize)> = blocks.iter().map(|(_, b)| (b.rows, b.cols)).collect();
        assert_eq!(shapes, vec![(2, 1), (1, 2), (1, 2)]);
    }
}
