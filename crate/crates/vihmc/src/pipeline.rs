//! Pipeline orchestration behind the CLI subcommands: each stage reads a
//! config plus prior artifacts, runs the corresponding library call, and
//! persists versioned outputs into a run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::artifacts::{
    content_hash, load_dataset, load_partition, save_dataset, save_history, save_partition,
    save_sensitivity_csv, ChainArchive, ChainArchiveMeta, PosteriorArchive, RunLock, RunManifest,
};
use crate::config::{
    DataSource, ExperimentConfig, HmcMode, InitChoice, LeapfrogChoice, MassChoice, StepSizeChoice,
    VChoice,
};
use crate::datagen::{gen_burgers, gen_sinusoid};
use crate::dataset::{Dataset, Records};
use crate::error::Error;
use crate::hmc::{
    adapt_step_size, diagnostics, leapfrog_step_count, sample_chains, AdaptConfig, Diagnostics,
    HmcConfig, PosteriorTarget, ReducedTarget, SampleResult,
};
use crate::network::{forward, forward_operator, NetworkSpec, ParamVector};
use crate::sensitivity::{
    compute_sensitivities, layer_sensitivity_map, select_partition, ParameterPartition,
    SensitivityReport,
};
use crate::tape::Matrix;
use crate::vi::{
    mse_at_mean, predictive_samples, train_vi, HistoryRow, VariationalPosterior,
};

/// Produce (train, validation) datasets for a config's data source.
pub fn resolve_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), Error> {
    match &cfg.data {
        DataSource::Sinusoid(s) => gen_sinusoid(s),
        DataSource::Burgers(b) => gen_burgers(b),
        DataSource::Path { dir } => {
            let base = PathBuf::from(dir);
            Ok((load_dataset(&base.join("train"))?, load_dataset(&base.join("val"))?))
        }
    }
}

fn update_manifest(cfg: &ExperimentConfig, out_dir: &Path, stage: &str, seconds: f64, artifacts: &[&Path]) -> Result<(), Error> {
    let path = out_dir.join("run.json");
    let mut manifest = if path.exists() {
        let existing: RunManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        let fresh = RunManifest::new(cfg)?;
        if existing.config_hash == fresh.config_hash {
            existing
        } else {
            fresh
        }
    } else {
        RunManifest::new(cfg)?
    };
    manifest.stage_seconds.insert(stage.to_string(), seconds);
    for a in artifacts {
        manifest.record(a)?;
    }
    manifest.save(&path)
}

pub struct TrainViOutput {
    pub posterior: VariationalPosterior,
    pub history: Vec<HistoryRow>,
    pub posterior_path: PathBuf,
}

/// Stage 1: train the variational posterior and persist it with its history.
pub fn cmd_train_vi(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainViOutput, Error> {
    cfg.validate()?;
    let _lock = RunLock::acquire(out_dir)?;
    let started = Instant::now();
    let (train, val) = resolve_data(cfg)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.vi.seed);
    let q0 = VariationalPosterior::init(&cfg.network, cfg.prior, cfg.vi.sigma_init, cfg.vi.mean_scale, &mut rng);
    let result = train_vi(&q0, &cfg.network, &train, &val, &cfg.vi.train, &cfg.likelihood, &mut rng)?;
    let posterior_path = out_dir.join("posterior.json");
    let history_path = out_dir.join("history.csv");
    let archive = PosteriorArchive::new(cfg.network.clone(), &result.posterior, cfg.vi.seed);
    archive.save(&posterior_path)?;
    save_history(&history_path, &result.history)?;
    update_manifest(cfg, out_dir, "train-vi", started.elapsed().as_secs_f64(), &[&posterior_path, &history_path])?;
    if let Some(epoch) = result.diverged_at {
        return Err(Error::TrainingAborted {
            epoch,
            reason: "ELBO became non-finite; last finite posterior and partial history were saved".into(),
        });
    }
    Ok(TrainViOutput { posterior: result.posterior, history: result.history, posterior_path })
}

fn spec_hash(spec: &NetworkSpec) -> Result<String, Error> {
    Ok(content_hash(serde_json::to_string(spec)?.as_bytes()))
}

fn check_network_match(cfg: &ExperimentConfig, archive: &PosteriorArchive) -> Result<(), Error> {
    if archive.network != cfg.network {
        return Err(Error::Config(format!(
            "posterior network (spec hash {}) does not match config network (spec hash {})",
            spec_hash(&archive.network)?,
            spec_hash(&cfg.network)?
        )));
    }
    Ok(())
}

#[derive(Debug)]
pub struct SensitivityOutput {
    pub report: SensitivityReport,
    pub partition: ParameterPartition,
    pub partition_path: PathBuf,
}

/// Stage 2: rank parameters and emit the partition, ranked CSV, layer maps,
/// and a histogram of the scores.
pub fn cmd_sensitivity(
    cfg: &ExperimentConfig,
    posterior_path: &Path,
    out_dir: &Path,
    tau_override: Option<f64>,
) -> Result<SensitivityOutput, Error> {
    cfg.validate()?;
    let _lock = RunLock::acquire(out_dir)?;
    let started = Instant::now();
    let archive = PosteriorArchive::load(posterior_path)?;
    check_network_match(cfg, &archive)?;
    let q = archive.posterior()?;
    let (train, _) = resolve_data(cfg)?;
    let block = cfg.sensitivity.clone().unwrap_or_default();
    let tau = tau_override.unwrap_or(block.tau);
    let report = compute_sensitivities(&q, &cfg.network, &train)?;
    let partition = select_partition(&report, &q, tau, block.rule)?;
    if let Some(w) = &partition.warning {
        eprintln!("warning: {w}");
    }
    let csv_path = out_dir.join("sensitivity.csv");
    let partition_path = out_dir.join("partition.json");
    save_sensitivity_csv(&csv_path, &report, &cfg.network)?;
    save_partition(&partition_path, &partition)?;

    // long-form per-layer score map
    let maps = layer_sensitivity_map(&report, &cfg.network)?;
    let mut layer_csv = String::from("layer,row,col,s2\n");
    for (rec, block) in &maps {
        for r in 0..block.rows {
            for c in 0..block.cols {
                layer_csv.push_str(&format!("{},{},{},{}\n", rec.name, r, c, block.data[r * block.cols + c]));
            }
        }
    }
    let layer_path = out_dir.join("layer_maps.csv");
    std::fs::write(&layer_path, layer_csv)?;

    // histogram of log10 scores over the positive entries
    let positive: Vec<f64> = report.scores.iter().filter(|&&s| s > 0.0).map(|s| s.log10()).collect();
    let hist_path = out_dir.join("sensitivity_histogram.csv");
    let mut hist = String::from("bin_low_log10,bin_high_log10,count\n");
    if !positive.is_empty() {
        let lo = positive.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = positive.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bins = 30usize;
        let width = ((hi - lo) / bins as f64).max(1e-12);
        let mut counts = vec![0usize; bins];
        for &v in &positive {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, &n) in counts.iter().enumerate() {
            hist.push_str(&format!("{},{},{}\n", lo + b as f64 * width, lo + (b + 1) as f64 * width, n));
        }
    }
    std::fs::write(&hist_path, hist)?;
    update_manifest(cfg, out_dir, "sensitivity", started.elapsed().as_secs_f64(), &[&csv_path, &partition_path, &layer_path, &hist_path])?;
    Ok(SensitivityOutput { report, partition, partition_path })
}

pub struct SampleOutput {
    pub result: SampleResult,
    pub meta: ChainArchiveMeta,
    pub diagnostics: Result<Diagnostics, Error>,
    pub archive_dir: PathBuf,
    pub free_indices: Vec<usize>,
}

/// Stage 3: run HMC in full or reduced mode and persist the chain archive.
pub fn cmd_sample(
    cfg: &ExperimentConfig,
    posterior_path: &Path,
    partition_path: Option<&Path>,
    out_dir: &Path,
) -> Result<SampleOutput, Error> {
    cfg.validate()?;
    let hmc_block = cfg
        .hmc
        .clone()
        .ok_or_else(|| Error::Config("config has no hmc block".into()))?;
    let _lock = RunLock::acquire(out_dir)?;
    let started = Instant::now();
    let archive = PosteriorArchive::load(posterior_path)?;
    check_network_match(cfg, &archive)?;
    let q = archive.posterior()?;
    let (train, _) = resolve_data(cfg)?;

    let partition = match hmc_block.mode {
        HmcMode::Full => ParameterPartition::all_sensitive(q.len()),
        HmcMode::Reduced => match partition_path {
            Some(p) => {
                let part = load_partition(p)?;
                part.validate(q.len())?;
                part
            }
            None => {
                let block = cfg
                    .sensitivity
                    .clone()
                    .ok_or_else(|| Error::Config("reduced mode needs a partition or a sensitivity block".into()))?;
                let report = compute_sensitivities(&q, &cfg.network, &train)?;
                select_partition(&report, &q, block.tau, block.rule)?
            }
        },
    };
    // sample in ascending flat-index order so archive columns are canonical
    // and tau = 1 reduced runs are draw-identical to full runs
    let mut free = partition.sensitive.clone();
    free.sort_unstable();
    if free.is_empty() {
        return Err(Error::QualityGate("partition has no sensitive parameters to sample".into()));
    }
    let partition = ParameterPartition { sensitive: free.clone(), ..partition };

    let target = PosteriorTarget { net: &cfg.network, data: &train, prior: cfg.prior, likelihood: cfg.likelihood };
    let reduced = ReducedTarget::new(&target, &partition)?;

    let sigma = q.sigma();
    let mass_diag = match hmc_block.mass {
        MassChoice::Identity => None,
        MassChoice::ViInverseVariance => {
            Some(free.iter().map(|&i| 1.0 / (sigma[i] * sigma[i]).max(1e-30)).collect::<Vec<f64>>())
        }
    };

    let mut init_rng = ChaCha12Rng::seed_from_u64(hmc_block.seed ^ 0x1217_5eed);
    let init: Vec<f64> = match &hmc_block.init {
        InitChoice::Prior => {
            let s = cfg.prior.variance.sqrt();
            free.iter().map(|_| init_rng.sample::<f64, _>(StandardNormal) * s).collect()
        }
        InitChoice::ViJitter { scale } => free
            .iter()
            .map(|&i| q.mu[i] + scale * sigma[i] * init_rng.sample::<f64, _>(StandardNormal))
            .collect(),
    };

    // trajectory scale for the leapfrog heuristic: a summary of the posterior
    // spread over the free coordinates, variance by default
    let traj_scale = |v_choice: VChoice, use_std: bool| -> f64 {
        let mut vals: Vec<f64> = free
            .iter()
            .map(|&i| if use_std { sigma[i] } else { sigma[i] * sigma[i] })
            .collect();
        vals.sort_by(f64::total_cmp);
        match v_choice {
            VChoice::Max => *vals.last().unwrap(),
            VChoice::Median => vals[vals.len() / 2],
        }
    };

    let (step_size, step_provenance) = match &hmc_block.step {
        StepSizeChoice::Fixed { step_size } => (*step_size, "fixed"),
        StepSizeChoice::Adapt { target_accept } => {
            let scale = match &hmc_block.leapfrog {
                LeapfrogChoice::Fixed { .. } => 0.0,
                LeapfrogChoice::Heuristic { v_choice, use_std } => traj_scale(*v_choice, *use_std),
            };
            let adapted = adapt_step_size(
                &reduced,
                &init,
                mass_diag.as_deref(),
                &AdaptConfig { target_accept: *target_accept, trajectory_scale: scale, ..AdaptConfig::default() },
                hmc_block.seed,
            )?;
            (adapted.step_size, "adapted")
        }
    };
    let (n_leapfrog, leapfrog_provenance) = match &hmc_block.leapfrog {
        LeapfrogChoice::Fixed { n_leapfrog } => (*n_leapfrog, "fixed"),
        LeapfrogChoice::Heuristic { v_choice, use_std } => {
            (leapfrog_step_count(step_size, traj_scale(*v_choice, *use_std)), "heuristic")
        }
    };

    let hmc_cfg = HmcConfig {
        step_size,
        n_leapfrog,
        n_samples: hmc_block.n_samples,
        burn_in: hmc_block.burn_in,
        n_chains: hmc_block.n_chains,
        seed: hmc_block.seed,
        mass_diag,
    };
    let result = sample_chains(&reduced, &init, &hmc_cfg)?;
    let mode = match hmc_block.mode {
        HmcMode::Full => "full",
        HmcMode::Reduced => "reduced",
    };
    let archive_dir = out_dir.join("chains");
    let meta = ChainArchive::save(
        &archive_dir,
        &result,
        &free,
        mode,
        step_provenance,
        leapfrog_provenance,
        &cfg.to_toml()?,
    )?;
    update_manifest(cfg, out_dir, "sample", started.elapsed().as_secs_f64(), &[&archive_dir])?;
    let diag = diagnostics(&result);
    if result.chains.iter().all(|c| c.bad.is_some()) {
        let reasons: Vec<String> = result
            .chains
            .iter()
            .map(|c| format!("chain {}: {}", c.chain_index, c.bad.as_deref().unwrap_or("?")))
            .collect();
        return Err(Error::QualityGate(format!("all chains flagged bad ({})", reasons.join("; "))));
    }
    Ok(SampleOutput { result, meta, diagnostics: diag, archive_dir, free_indices: free })
}

/// Flat parameter names in layout order, e.g. `layer0.weight[1][0]`.
pub fn param_names(spec: &NetworkSpec) -> Vec<String> {
    let mut names = Vec::with_capacity(spec.param_count());
    for rec in spec.layout() {
        for r in 0..rec.rows {
            for c in 0..rec.cols {
                names.push(format!("{}[{r}][{c}]", rec.name));
            }
        }
    }
    names
}

/// Per-parameter mean and standard deviation of the full parameter vector
/// reconstructed from an archive: frozen coordinates sit at the posterior
/// mean with zero spread.
fn archive_param_stats(
    meta: &ChainArchiveMeta,
    pooled: &Matrix,
    q: &VariationalPosterior,
) -> (Vec<f64>, Vec<f64>) {
    let dim = q.len();
    let mut mean = q.mu.clone();
    let mut std = vec![0.0; dim];
    let n = pooled.rows as f64;
    for (col, &flat) in meta.free_indices.iter().enumerate() {
        let m: f64 = (0..pooled.rows).map(|r| pooled.data[r * pooled.cols + col]).sum::<f64>() / n;
        let v: f64 = (0..pooled.rows)
            .map(|r| (pooled.data[r * pooled.cols + col] - m).powi(2))
            .sum::<f64>()
            / n;
        mean[flat] = m;
        std[flat] = v.sqrt();
    }
    (mean, std)
}

fn mse_of_vector(net: &NetworkSpec, theta: &[f64], data: &Dataset) -> Result<f64, Error> {
    let pv = ParamVector::from_values(net, theta.to_vec())?;
    match &data.records {
        Records::Function(d) => {
            let f = forward(net, &pv, &Matrix::column(&d.x))?;
            let out = f.outputs();
            let sse: f64 = out.data.iter().zip(&d.y).map(|(p, y)| (p - y).powi(2)).sum();
            Ok(sse / d.y.len() as f64)
        }
        Records::Operator(d) => {
            let f = forward_operator(net, &pv, &d.fields, &d.queries)?;
            let out = f.outputs();
            let sse: f64 = out.data.iter().zip(&d.values.data).map(|(p, y)| (p - y).powi(2)).sum();
            Ok(sse / d.values.len() as f64)
        }
    }
}

/// Mean relative L2 over fields: (1/N) sum_f ||Y_f - Yhat_f|| / ||Y_f||.
pub fn mean_relative_l2(net: &NetworkSpec, theta: &[f64], data: &Dataset) -> Result<f64, Error> {
    let d = data
        .as_operator()
        .ok_or_else(|| Error::Config("relative L2 is defined for operator datasets".into()))?;
    let pv = ParamVector::from_values(net, theta.to_vec())?;
    let f = forward_operator(net, &pv, &d.fields, &d.queries)?;
    let out = f.outputs();
    let q = d.queries.rows;
    let mut acc = 0.0;
    for fi in 0..d.fields.rows {
        let mut num = 0.0;
        let mut den = 0.0;
        for qi in 0..q {
            let yhat = out.data[fi * q + qi];
            let y = d.values.data[fi * q + qi];
            num += (y - yhat).powi(2);
            den += y * y;
        }
        acc += (num / den.max(1e-300)).sqrt();
    }
    Ok(acc / d.fields.rows as f64)
}

pub struct ReportOutput {
    pub params_table_path: PathBuf,
    pub summary_path: PathBuf,
    pub band_paths: Vec<PathBuf>,
    pub joint_path: Option<PathBuf>,
}

/// Stage 4: summary tables, prediction bands, and optional joint scatter.
pub fn cmd_report(
    archive_dirs: &[PathBuf],
    posterior_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
    joint: Option<(&str, &str)>,
) -> Result<ReportOutput, Error> {
    if archive_dirs.is_empty() {
        return Err(Error::Config("report needs at least one chain archive".into()));
    }
    let _lock = RunLock::acquire(out_dir)?;
    let posterior = PosteriorArchive::load(posterior_path)?;
    let q = posterior.posterior()?;
    let net = &posterior.network;
    let data = load_dataset(data_dir)?;
    let names = param_names(net);
    let sigma = q.sigma();

    struct Loaded {
        label: String,
        meta: ChainArchiveMeta,
        pooled: Matrix,
        mean: Vec<f64>,
        std: Vec<f64>,
    }
    let mut loaded = Vec::new();
    for dir in archive_dirs {
        let (meta, pooled) = ChainArchive::load_pooled(dir)?;
        if meta.free_indices.iter().any(|&i| i >= q.len()) || pooled.cols != meta.free_indices.len() {
            return Err(Error::Serde(format!("archive {} is inconsistent with the posterior", dir.display())));
        }
        let (mean, std) = archive_param_stats(&meta, &pooled, &q);
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        loaded.push(Loaded { label, meta, pooled, mean, std });
    }

    // (i) per-parameter mean and std across methods
    let mut table = String::from("parameter,vi_mean,vi_std");
    for l in &loaded {
        table.push_str(&format!(",{}_mean,{}_std", l.label, l.label));
    }
    table.push('\n');
    for i in 0..q.len() {
        table.push_str(&format!("{},{},{}", names[i], q.mu[i], sigma[i]));
        for l in &loaded {
            table.push_str(&format!(",{},{}", l.mean[i], l.std[i]));
        }
        table.push('\n');
    }
    let params_table_path = out_dir.join("params_table.csv");
    std::fs::write(&params_table_path, table)?;

    // (ii) acceptance, posterior-mean MSE, time per sample, and relative L2
    // for operator data
    let is_operator = data.as_operator().is_some();
    let mut summary = String::from("method,acceptance_rate,posterior_mean_mse,seconds_per_sample,mean_relative_l2\n");
    let vi_mse = mse_at_mean(&q, net, &data)?;
    let vi_rel = if is_operator { mean_relative_l2(net, &q.mu, &data)?.to_string() } else { String::new() };
    summary.push_str(&format!("vi,,{vi_mse},,{vi_rel}\n"));
    for l in &loaded {
        let kept_per_chain = (l.meta.n_samples - l.meta.burn_in) as f64;
        let good: Vec<_> = l.meta.chains.iter().filter(|c| c.bad.is_none()).collect();
        let acc = good.iter().map(|c| c.accepted_post_burn_in as f64).sum::<f64>()
            / (kept_per_chain * good.len() as f64);
        let sps = l.meta.elapsed_seconds / (l.meta.chains.len() * l.meta.n_samples) as f64;
        let mse = mse_of_vector(net, &l.mean, &data)?;
        let rel = if is_operator { mean_relative_l2(net, &l.mean, &data)?.to_string() } else { String::new() };
        summary.push_str(&format!("{},{acc},{mse},{sps},{rel}\n", l.label));
    }
    let summary_path = out_dir.join("summary.csv");
    std::fs::write(&summary_path, summary)?;

    // (iii) predictive mean and +-3 sigma band per grid point
    let mut band_paths = Vec::new();
    if let Some(d) = data.as_function() {
        let mut grid: Vec<f64> = d.x.clone();
        grid.sort_by(f64::total_cmp);
        let mut vi_rng = ChaCha12Rng::seed_from_u64(0xba3d5);
        let draws = predictive_samples(&q, net, &grid, 400, &mut vi_rng)?;
        let vi_band_path = out_dir.join("band_vi.csv");
        std::fs::write(&vi_band_path, band_csv(&grid, &draws))?;
        band_paths.push(vi_band_path);
        for l in &loaded {
            let max_draws = 400.min(l.pooled.rows);
            let stride = (l.pooled.rows / max_draws).max(1);
            let mut rows = Vec::new();
            let mut full = q.mu.clone();
            let mut r = 0;
            while r < l.pooled.rows && rows.len() < max_draws {
                for (col, &flat) in l.meta.free_indices.iter().enumerate() {
                    full[flat] = l.pooled.data[r * l.pooled.cols + col];
                }
                let pv = ParamVector::from_values(net, full.clone())?;
                let f = forward(net, &pv, &Matrix::column(&grid))?;
                rows.extend_from_slice(&f.outputs().data);
                r += stride;
            }
            let draws = Matrix::new(rows.len() / grid.len(), grid.len(), rows);
            let path = out_dir.join(format!("band_{}.csv", l.label));
            std::fs::write(&path, band_csv(&grid, &draws))?;
            band_paths.push(path);
        }
    }

    // (iv) joint scatter of two named parameters from the first archive
    let mut joint_path = None;
    if let Some((a, b)) = joint {
        let find = |name: &str| -> Result<usize, Error> {
            names.iter().position(|n| n == name).ok_or_else(|| {
                Error::Config(format!(
                    "parameter {name} not found; available names: {}",
                    names.join(", ")
                ))
            })
        };
        let (ia, ib) = (find(a)?, find(b)?);
        let l = &loaded[0];
        let col_of = |flat: usize| l.meta.free_indices.iter().position(|&i| i == flat);
        let mut out = format!("{a},{b}\n");
        for r in 0..l.pooled.rows {
            let va = match col_of(ia) {
                Some(c) => l.pooled.data[r * l.pooled.cols + c],
                None => q.mu[ia],
            };
            let vb = match col_of(ib) {
                Some(c) => l.pooled.data[r * l.pooled.cols + c],
                None => q.mu[ib],
            };
            out.push_str(&format!("{va},{vb}\n"));
        }
        let path = out_dir.join("joint.csv");
        std::fs::write(&path, out)?;
        joint_path = Some(path);
    }
    Ok(ReportOutput { params_table_path, summary_path, band_paths, joint_path })
}

fn band_csv(grid: &[f64], draws: &Matrix) -> String {
    let n = draws.rows as f64;
    let mut out = String::from("x,mean,lower_3sigma,upper_3sigma\n");
    for (j, &x) in grid.iter().enumerate() {
        let m: f64 = (0..draws.rows).map(|r| draws.data[r * draws.cols + j]).sum::<f64>() / n;
        let v: f64 = (0..draws.rows).map(|r| (draws.data[r * draws.cols + j] - m).powi(2)).sum::<f64>() / n;
        let s = v.sqrt();
        out.push_str(&format!("{x},{m},{},{}\n", m - 3.0 * s, m + 3.0 * s));
    }
    out
}

/// One row of the cost-comparison table.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub mode: String,
    pub phase: String,
    pub step_size: f64,
    pub acceptance_rate: f64,
    pub posterior_mean_mse: f64,
    pub seconds_per_sample: f64,
}

pub struct CostCompareOutput {
    pub rows: Vec<CostRow>,
    pub csv_path: PathBuf,
}

/// Run full and reduced modes under (a) the config's fixed step size and (b)
/// dual-averaging adaptation at the stated target acceptance, and tabulate
/// acceptance, accuracy, and time per sample.
pub fn cmd_cost_compare(
    cfg: &ExperimentConfig,
    posterior_path: &Path,
    out_dir: &Path,
) -> Result<CostCompareOutput, Error> {
    cfg.validate()?;
    let base = cfg
        .hmc
        .clone()
        .ok_or_else(|| Error::Config("config has no hmc block".into()))?;
    let fixed_eps = match base.step {
        StepSizeChoice::Fixed { step_size } => step_size,
        StepSizeChoice::Adapt { .. } => {
            return Err(Error::Config("cost-compare needs a fixed step size as the shared baseline".into()))
        }
    };
    let mut rows = Vec::new();
    for mode in [HmcMode::Full, HmcMode::Reduced] {
        for (phase, step) in [
            ("fixed", StepSizeChoice::Fixed { step_size: fixed_eps }),
            ("adapted", StepSizeChoice::Adapt { target_accept: 0.8 }),
        ] {
            let mut c = cfg.clone();
            let h = c.hmc.as_mut().unwrap();
            h.mode = mode;
            h.step = step;
            let sub = out_dir.join(format!(
                "{}-{phase}",
                if mode == HmcMode::Full { "full" } else { "reduced" }
            ));
            let out = cmd_sample(&c, posterior_path, None, &sub)?;
            let (train, _) = resolve_data(cfg)?;
            let archive = PosteriorArchive::load(posterior_path)?;
            let q = archive.posterior()?;
            let (mean, _) = archive_param_stats(&out.meta, &out.result.pooled_draws(), &q);
            rows.push(CostRow {
                mode: out.meta.mode.clone(),
                phase: phase.to_string(),
                step_size: out.meta.step_size,
                acceptance_rate: out.result.acceptance_rate(),
                posterior_mean_mse: mse_of_vector(&cfg.network, &mean, &train)?,
                seconds_per_sample: out.result.elapsed_seconds
                    / (out.result.chains.len() * out.meta.n_samples) as f64,
            });
        }
    }
    let mut csv = String::from("mode,phase,step_size,acceptance_rate,posterior_mean_mse,seconds_per_sample\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mode, r.phase, r.step_size, r.acceptance_rate, r.posterior_mean_mse, r.seconds_per_sample
        ));
    }
    let csv_path = out_dir.join("cost_compare.csv");
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(&csv_path, csv)?;
    Ok(CostCompareOutput { rows, csv_path })
}

/// Generate and persist the config's datasets under `out_dir/{train,val}`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf), Error> {
    if matches!(cfg.data, DataSource::Path { .. }) {
        return Err(Error::Config("config already points at a dataset path; nothing to generate".into()));
    }
    let _lock = RunLock::acquire(out_dir)?;
    let (train, val) = resolve_data(cfg)?;
    let train_dir = out_dir.join("train");
    let val_dir = out_dir.join("val");
    save_dataset(&train_dir, &train)?;
    save_dataset(&val_dir, &val)?;
    Ok((train_dir, val_dir))
}

/// Process exit code for an error, per the documented convention:
/// 1 usage/config, 2 numerical failure, 3 quality gate.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Serde(_) | Error::Io(_) => 1,
        Error::Autodiff(_) | Error::Numerical(_) | Error::TrainingAborted { .. } => 2,
        Error::QualityGate(_) => 3,
    }
}
