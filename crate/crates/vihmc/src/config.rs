//! Declarative experiment configuration. One TOML file describes the
//! network, data source, prior and likelihood, and the three pipeline stages;
//! all randomness flows from the named seeds recorded here.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{BurgersSpec, SinusoidSpec};
use crate::error::Error;
use crate::network::NetworkSpec;
use crate::sensitivity::ThresholdRule;
use crate::vi::{LikelihoodSpec, PriorSpec, TrainConfig};

/// Where the training data comes from. Exactly one variant per config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Sinusoid(SinusoidSpec),
    Burgers(BurgersSpec),
    /// Previously generated dataset directory.
    Path { dir: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViBlock {
    pub seed: u64,
    /// Initial posterior standard deviation before training.
    pub sigma_init: f64,
    /// Scale of the random mean initialization.
    pub mean_scale: f64,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for ViBlock {
    fn default() -> Self {
        ViBlock { seed: 0, sigma_init: 0.05, mean_scale: 1.0, train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBlock {
    pub tau: f64,
    #[serde(default)]
    pub rule: ThresholdRule,
}

impl Default for SensitivityBlock {
    fn default() -> Self {
        SensitivityBlock { tau: 0.9, rule: ThresholdRule::AtLeast }
    }
}

/// Full-space sampling or reduced-space sampling over the sensitive subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HmcMode {
    Full,
    Reduced,
}

/// Fixed step size, or dual-averaging adaptation toward a target acceptance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSizeChoice {
    Fixed { step_size: f64 },
    Adapt { target_accept: f64 },
}

/// Which scalar summarizes the posterior spread in the trajectory-length
/// heuristic l = max(1, round(pi v / (2 eps))).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VChoice {
    #[default]
    Max,
    Median,
}

/// Fixed leapfrog count, or the quarter-period heuristic from the posterior
/// spread. The heuristic uses the variance verbatim; `use_std` switches to
/// the standard deviation instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LeapfrogChoice {
    Fixed { n_leapfrog: usize },
    Heuristic {
        #[serde(default)]
        v_choice: VChoice,
        #[serde(default)]
        use_std: bool,
    },
}

/// Chain initialization: a prior draw, or the VI mean plus scaled Gaussian
/// jitter (scale 0 starts exactly at the mean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitChoice {
    Prior,
    ViJitter { scale: f64 },
}

/// Diagonal mass matrix: identity, or inverse VI variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MassChoice {
    #[default]
    Identity,
    ViInverseVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcBlock {
    pub mode: HmcMode,
    pub step: StepSizeChoice,
    pub leapfrog: LeapfrogChoice,
    pub n_chains: usize,
    pub n_samples: usize,
    pub burn_in: usize,
    pub init: InitChoice,
    #[serde(default)]
    pub mass: MassChoice,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub network: NetworkSpec,
    pub data: DataSource,
    pub prior: PriorSpec,
    pub likelihood: LikelihoodSpec,
    pub vi: ViBlock,
    #[serde(default)]
    pub sensitivity: Option<SensitivityBlock>,
    pub hmc: Option<HmcBlock>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.network.validate()?;
        if !(self.prior.variance > 0.0) {
            return Err(Error::Config("prior variance must be positive".into()));
        }
        if !(self.likelihood.noise_variance > 0.0) {
            return Err(Error::Config("likelihood noise variance must be positive".into()));
        }
        if let Some(s) = &self.sensitivity {
            if !(s.tau > 0.0 && s.tau <= 1.0) {
                return Err(Error::Config(format!("tau must lie in (0, 1], got {}", s.tau)));
            }
        }
        if let Some(h) = &self.hmc {
            if h.mode == HmcMode::Reduced && self.sensitivity.is_none() {
                return Err(Error::Config(
                    "reduced-mode HMC needs a sensitivity block or an explicit partition artifact".into(),
                ));
            }
            if h.n_chains == 0 || h.n_samples == 0 {
                return Err(Error::Config("hmc block needs at least one chain and one sample".into()));
            }
            if h.burn_in >= h.n_samples {
                return Err(Error::Config(format!(
                    "burn-in {} must be smaller than the sample count {}",
                    h.burn_in, h.n_samples
                )));
            }
            match &h.step {
                StepSizeChoice::Fixed { step_size } => {
                    if !(*step_size > 0.0) {
                        return Err(Error::Config("step size must be positive".into()));
                    }
                }
                StepSizeChoice::Adapt { target_accept } => {
                    if !(*target_accept > 0.0 && *target_accept < 1.0) {
                        return Err(Error::Config("target acceptance must lie in (0, 1)".into()));
                    }
                }
            }
            if let LeapfrogChoice::Fixed { n_leapfrog } = &h.leapfrog {
                if *n_leapfrog == 0 {
                    return Err(Error::Config("leapfrog step count must be at least 1".into()));
                }
            }
            if let InitChoice::ViJitter { scale } = &h.init {
                if *scale < 0.0 {
                    return Err(Error::Config("init jitter scale must be nonnegative".into()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::case1_spec;

    fn sample_config() -> ExperimentConfig {
        ExperimentConfig {
            name: "case1".into(),
            network: case1_spec(),
            data: DataSource::Sinusoid(SinusoidSpec::case1(7)),
            prior: PriorSpec { variance: 1.0 },
            likelihood: LikelihoodSpec { noise_variance: 1e-6 },
            vi: ViBlock { seed: 1, ..ViBlock::default() },
            sensitivity: Some(SensitivityBlock::default()),
            hmc: Some(HmcBlock {
                mode: HmcMode::Reduced,
                step: StepSizeChoice::Fixed { step_size: 1e-5 },
                leapfrog: LeapfrogChoice::Heuristic { v_choice: VChoice::Max, use_std: false },
                n_chains: 1,
                n_samples: 5000,
                burn_in: 4000,
                init: InitChoice::ViJitter { scale: 0.0 },
                mass: MassChoice::Identity,
                seed: 2,
            }),
        }
    }

    #[test]
    fn toml_round_trip_is_identity() {
        let cfg = sample_config();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        // and the serialized form is stable
        assert_eq!(text, back.to_toml().unwrap());
    }

    #[test]
    fn reduced_mode_requires_sensitivity_block() {
        let mut cfg = sample_config();
        cfg.sensitivity = None;
        assert!(cfg.validate().is_err());
        cfg.hmc.as_mut().unwrap().mode = HmcMode::Full;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn rejects_bad_scalars() {
        let mut cfg = sample_config();
        cfg.prior.variance = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = sample_config();
        cfg.sensitivity.as_mut().unwrap().tau = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = sample_config();
        cfg.hmc.as_mut().unwrap().burn_in = 5000;
        assert!(cfg.validate().is_err());
        let mut cfg = sample_config();
        cfg.hmc.as_mut().unwrap().step = StepSizeChoice::Adapt { target_accept: 1.0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn parses_handwritten_toml() {
        let text = r#"
name = "tiny"

[network]
kind = "mlp"
input_dim = 1

[[network.layers]]
width = 2
activation = "sin"
bias = true

[[network.layers]]
width = 1
activation = "identity"
bias = false

[data]
kind = "path"
dir = "data/tiny"

[prior]
variance = 1.0

[likelihood]
noise_variance = 0.01

[vi]
seed = 3
sigma_init = 0.05
mean_scale = 1.0
epochs = 100
n_mc = 1
eval_every = 10

[vi.opt]
lr = 1e-3
beta1 = 0.9
beta2 = 0.999
eps = 1e-8

[vi.plateau]
factor = 0.1
patience = 50
min_lr = 1e-7
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.name, "tiny");
        assert_eq!(cfg.network.param_count(), 6);
        assert!(cfg.hmc.is_none());
        assert_eq!(cfg.vi.train.epochs, 100);
    }
}
