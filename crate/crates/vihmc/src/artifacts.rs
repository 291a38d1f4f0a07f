//! Artifact persistence: posterior archives, training history, sensitivity
//! reports, parameter partitions, chain archives, datasets, and run
//! manifests. Every format is versioned with an explicit schema tag, and
//! floats are written in shortest round-trip form so re-reading an artifact
//! reproduces it bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, DatasetMeta, Records};
use crate::error::Error;
use crate::hmc::SampleResult;
use crate::network::NetworkSpec;
use crate::sensitivity::{ParameterPartition, SensitivityReport};
use crate::tape::Matrix;
use crate::vi::{HistoryRow, PriorSpec, VariationalPosterior};

pub const POSTERIOR_SCHEMA: &str = "vihmc.posterior.v1";
pub const PARTITION_SCHEMA: &str = "vihmc.partition.v1";
pub const CHAINS_SCHEMA: &str = "vihmc.chains.v1";
pub const DATASET_SCHEMA: &str = "vihmc.dataset.v1";
pub const MANIFEST_SCHEMA: &str = "vihmc.run.v1";

/// SHA-256 of a byte string, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String, Error> {
    Ok(content_hash(&fs::read(path)?))
}

/// Posterior archive: the trained variational posterior together with the
/// network spec and seed needed to reproduce or consume it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorArchive {
    pub schema: String,
    pub network: NetworkSpec,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub prior: PriorSpec,
    pub seed: u64,
}

impl PosteriorArchive {
    pub fn new(network: NetworkSpec, q: &VariationalPosterior, seed: u64) -> Self {
        PosteriorArchive {
            schema: POSTERIOR_SCHEMA.to_string(),
            network,
            mu: q.mu.clone(),
            rho: q.rho.clone(),
            prior: q.prior,
            seed,
        }
    }

    pub fn posterior(&self) -> Result<VariationalPosterior, Error> {
        VariationalPosterior::new(self.mu.clone(), self.rho.clone(), self.prior)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let a: PosteriorArchive = serde_json::from_str(&fs::read_to_string(path)?)?;
        if a.schema != POSTERIOR_SCHEMA {
            return Err(Error::Serde(format!("unexpected posterior schema {}", a.schema)));
        }
        if a.mu.len() != a.network.param_count() || a.rho.len() != a.mu.len() {
            return Err(Error::Serde("posterior archive length mismatch".into()));
        }
        Ok(a)
    }
}

/// Write `history.csv` with one row per evaluation epoch.
pub fn save_history(path: &Path, rows: &[HistoryRow]) -> Result<(), Error> {
    let mut out = String::from("epoch,train_elbo,val_elbo,train_mse,val_mse,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train_elbo, r.val_elbo, r.train_mse, r.val_mse, r.lr
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Sensitivity CSV: one row per parameter in ranked order.
pub fn save_sensitivity_csv(path: &Path, report: &SensitivityReport, net: &NetworkSpec) -> Result<(), Error> {
    let layout = net.layout();
    let layer_of = |flat: usize| -> &str {
        layout
            .iter()
            .find(|r| flat >= r.offset && flat < r.offset + r.len())
            .map(|r| r.name.as_str())
            .unwrap_or("?")
    };
    let mut out = String::from("rank,flat_index,layer,s2,cumulative_fraction\n");
    for (rank, &idx) in report.ranking.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rank, idx, layer_of(idx), report.scores[idx], report.cumulative[rank]
        ));
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartitionFile {
    schema: String,
    #[serde(flatten)]
    partition: ParameterPartition,
}

pub fn save_partition(path: &Path, partition: &ParameterPartition) -> Result<(), Error> {
    let file = PartitionFile { schema: PARTITION_SCHEMA.to_string(), partition: partition.clone() };
    write_atomic(path, serde_json::to_string_pretty(&file)?.as_bytes())
}

pub fn load_partition(path: &Path) -> Result<ParameterPartition, Error> {
    let file: PartitionFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.schema != PARTITION_SCHEMA {
        return Err(Error::Serde(format!("unexpected partition schema {}", file.schema)));
    }
    Ok(file.partition)
}

/// Per-chain summary recorded in the chain-archive manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub chain_index: usize,
    pub accepted_post_burn_in: usize,
    pub accepted_total: usize,
    pub divergences: usize,
    pub bad: Option<String>,
}

/// Manifest of a chain archive directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainArchiveMeta {
    pub schema: String,
    pub seed: u64,
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub n_samples: usize,
    pub burn_in: usize,
    /// "fixed" or "adapted" step-size provenance.
    pub step_provenance: String,
    /// "fixed" or "heuristic" trajectory-length provenance.
    pub leapfrog_provenance: String,
    /// "full" or "reduced".
    pub mode: String,
    /// Flat indices of the sampled (free) coordinates.
    pub free_indices: Vec<usize>,
    pub chains: Vec<ChainMeta>,
    pub elapsed_seconds: f64,
}

/// On-disk layout: `meta.json`, `config.snapshot`, and one
/// `chain-XXX/draws.csv` per chain holding the kept (post-burn-in) draws with
/// the free-parameter flat indices as header.
pub struct ChainArchive;

impl ChainArchive {
    pub fn save(
        dir: &Path,
        result: &SampleResult,
        free_indices: &[usize],
        mode: &str,
        step_provenance: &str,
        leapfrog_provenance: &str,
        config_snapshot: &str,
    ) -> Result<ChainArchiveMeta, Error> {
        fs::create_dir_all(dir)?;
        let cfg = &result.config;
        let meta = ChainArchiveMeta {
            schema: CHAINS_SCHEMA.to_string(),
            seed: cfg.seed,
            step_size: cfg.step_size,
            n_leapfrog: cfg.n_leapfrog,
            n_samples: cfg.n_samples,
            burn_in: cfg.burn_in,
            step_provenance: step_provenance.to_string(),
            leapfrog_provenance: leapfrog_provenance.to_string(),
            mode: mode.to_string(),
            free_indices: free_indices.to_vec(),
            chains: result
                .chains
                .iter()
                .map(|c| ChainMeta {
                    chain_index: c.chain_index,
                    accepted_post_burn_in: c.accepted_post_burn_in,
                    accepted_total: c.accepted_total,
                    divergences: c.divergences,
                    bad: c.bad.clone(),
                })
                .collect(),
            elapsed_seconds: result.elapsed_seconds,
        };
        let header: Vec<String> = free_indices.iter().map(|i| format!("p{i}")).collect();
        for c in &result.chains {
            let cdir = dir.join(format!("chain-{:03}", c.chain_index));
            fs::create_dir_all(&cdir)?;
            let dim = c.draws.cols;
            let mut out = header.join(",");
            out.push('\n');
            for s in cfg.burn_in..cfg.n_samples {
                let row = &c.draws.data[s * dim..(s + 1) * dim];
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            write_atomic(&cdir.join("draws.csv"), out.as_bytes())?;
        }
        write_atomic(&dir.join("config.snapshot"), config_snapshot.as_bytes())?;
        write_atomic(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
        Ok(meta)
    }

    pub fn load_meta(dir: &Path) -> Result<ChainArchiveMeta, Error> {
        let meta: ChainArchiveMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.schema != CHAINS_SCHEMA {
            return Err(Error::Serde(format!("unexpected chain archive schema {}", meta.schema)));
        }
        Ok(meta)
    }

    /// Kept draws of one chain as a (kept x free) matrix.
    pub fn load_chain(dir: &Path, chain_index: usize) -> Result<Matrix, Error> {
        let path = dir.join(format!("chain-{chain_index:03}")).join("draws.csv");
        let text = fs::read_to_string(&path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Serde(format!("empty draws file {}", path.display())))?;
        let cols = header.split(',').count();
        let mut data = Vec::new();
        let mut rows = 0;
        for line in lines {
            if line.is_empty() {
                continue;
            }
            for cell in line.split(',') {
                data.push(cell.parse::<f64>().map_err(|e| Error::Serde(format!("bad draw value: {e}")))?);
            }
            rows += 1;
        }
        if data.len() != rows * cols {
            return Err(Error::Serde("ragged draws.csv".into()));
        }
        Ok(Matrix::new(rows, cols, data))
    }

    /// Kept draws pooled over the healthy chains, chain-major.
    pub fn load_pooled(dir: &Path) -> Result<(ChainArchiveMeta, Matrix), Error> {
        let meta = Self::load_meta(dir)?;
        let mut rows = 0;
        let mut cols = 0;
        let mut data = Vec::new();
        for c in meta.chains.iter().filter(|c| c.bad.is_none()) {
            let m = Self::load_chain(dir, c.chain_index)?;
            if cols == 0 {
                cols = m.cols;
            } else if m.cols != cols {
                return Err(Error::Serde("chain dimensionality mismatch".into()));
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        if rows == 0 {
            return Err(Error::QualityGate("archive contains no kept draws from healthy chains".into()));
        }
        Ok((meta, Matrix::new(rows, cols, data)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    schema: String,
    kind: String,
    meta: DatasetMeta,
    files: BTreeMap<String, String>,
}

fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows {
        let cells: Vec<String> = m.data[r * m.cols..(r + 1) * m.cols].iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn parse_matrix_csv(text: &str) -> Result<Matrix, Error> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let before = data.len();
        for cell in line.split(',') {
            data.push(cell.parse::<f64>().map_err(|e| Error::Serde(format!("bad matrix value: {e}")))?);
        }
        let width = data.len() - before;
        if cols == 0 {
            cols = width;
        } else if width != cols {
            return Err(Error::Serde("ragged matrix CSV".into()));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Serde("empty matrix CSV".into()));
    }
    Ok(Matrix::new(rows, cols, data))
}

/// Persist a dataset as a directory of CSV matrices plus a hashed manifest.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    let kind = match &ds.records {
        Records::Function(d) => {
            let mut out = String::from("x,y\n");
            for (x, y) in d.x.iter().zip(&d.y) {
                out.push_str(&format!("{x},{y}\n"));
            }
            files.insert("data.csv".to_string(), content_hash(out.as_bytes()));
            write_atomic(&dir.join("data.csv"), out.as_bytes())?;
            "function"
        }
        Records::Operator(d) => {
            for (name, m) in [("fields.csv", &d.fields), ("queries.csv", &d.queries), ("values.csv", &d.values)] {
                let out = matrix_csv(m);
                files.insert(name.to_string(), content_hash(out.as_bytes()));
                write_atomic(&dir.join(name), out.as_bytes())?;
            }
            "operator"
        }
    };
    let manifest = DatasetManifest {
        schema: DATASET_SCHEMA.to_string(),
        kind: kind.to_string(),
        meta: ds.meta.clone(),
        files,
    };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, Error> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.schema != DATASET_SCHEMA {
        return Err(Error::Serde(format!("unexpected dataset schema {}", manifest.schema)));
    }
    for (name, expected) in &manifest.files {
        let actual = file_hash(&dir.join(name))?;
        if &actual != expected {
            return Err(Error::Serde(format!("dataset file {name} does not match its recorded hash")));
        }
    }
    match manifest.kind.as_str() {
        "function" => {
            let text = fs::read_to_string(dir.join("data.csv"))?;
            let mut x = Vec::new();
            let mut y = Vec::new();
            for line in text.lines().skip(1) {
                if line.is_empty() {
                    continue;
                }
                let mut cells = line.split(',');
                let (a, b) = (cells.next(), cells.next());
                match (a, b) {
                    (Some(a), Some(b)) => {
                        x.push(a.parse::<f64>().map_err(|e| Error::Serde(e.to_string()))?);
                        y.push(b.parse::<f64>().map_err(|e| Error::Serde(e.to_string()))?);
                    }
                    _ => return Err(Error::Serde("malformed data.csv row".into())),
                }
            }
            Dataset::function(x, y, manifest.meta)
        }
        "operator" => {
            let fields = parse_matrix_csv(&fs::read_to_string(dir.join("fields.csv"))?)?;
            let queries = parse_matrix_csv(&fs::read_to_string(dir.join("queries.csv"))?)?;
            let values = parse_matrix_csv(&fs::read_to_string(dir.join("values.csv"))?)?;
            Dataset::operator(fields, queries, values, manifest.meta)
        }
        other => Err(Error::Serde(format!("unknown dataset kind {other}"))),
    }
}

/// Wall-clock and artifact bookkeeping for one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool_version: String,
    pub config_hash: String,
    /// Artifact path -> content hash (directories hash their manifest file).
    pub artifacts: BTreeMap<String, String>,
    /// Stage name -> wall-clock seconds.
    pub stage_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Result<Self, Error> {
        Ok(RunManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: content_hash(config.to_toml()?.as_bytes()),
            artifacts: BTreeMap::new(),
            stage_seconds: BTreeMap::new(),
        })
    }

    /// Record an artifact path, hashing the file (or a directory's manifest).
    pub fn record(&mut self, path: &Path) -> Result<(), Error> {
        let hash_target = if path.is_dir() {
            let m = path.join("manifest.json");
            if m.exists() {
                m
            } else {
                path.join("meta.json")
            }
        } else {
            path.to_path_buf()
        };
        self.artifacts.insert(path.display().to_string(), file_hash(&hash_target)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Check that every referenced artifact still exists with its recorded
    /// content hash.
    pub fn verify(&self) -> Result<(), Error> {
        for (p, expected) in &self.artifacts {
            let path = PathBuf::from(p);
            let hash_target = if path.is_dir() {
                let m = path.join("manifest.json");
                if m.exists() {
                    m
                } else {
                    path.join("meta.json")
                }
            } else {
                path
            };
            let actual = file_hash(&hash_target)?;
            if &actual != expected {
                return Err(Error::QualityGate(format!("artifact {p} does not match its recorded hash")));
            }
        }
        Ok(())
    }
}

/// Exclusive ownership of a run directory for the life of the process; the
/// lock file is removed on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, Error> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
