//! End-to-end run of the shipped two-neuron sine regression: variational
//! training, sensitivity partition, reduced-space HMC, and a parameter table
//! comparing the VI means with the hybrid posterior means.

use std::path::Path;

use vihmc::config::ExperimentConfig;
use vihmc::pipeline;

fn main() -> Result<(), vihmc::Error> {
    let cfg = ExperimentConfig::load(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/case1.toml"),
    )?;
    let out = std::env::temp_dir().join("vihmc-example-case1");
    let _ = std::fs::remove_dir_all(&out);

    let vi = pipeline::cmd_train_vi(&cfg, &out)?;
    let last = vi.history.last().unwrap();
    println!("vi: {} epochs, val mse {:.3e}", last.epoch + 1, last.val_mse);

    let sens = pipeline::cmd_sensitivity(&cfg, &vi.posterior_path, &out, None)?;
    println!(
        "sensitivity: kept {} of {} parameters at tau {}",
        sens.partition.sensitive.len(),
        sens.report.len(),
        sens.partition.tau
    );

    let run = pipeline::cmd_sample(&cfg, &vi.posterior_path, None, &out)?;
    println!("hmc: acceptance {:.3}", run.result.acceptance_rate());

    let pooled = run.result.pooled_draws();
    let mut hybrid = vi.posterior.mu.clone();
    for (k, &i) in run.free_indices.iter().enumerate() {
        let mut m = 0.0;
        for r in 0..pooled.rows {
            m += pooled.data[r * pooled.cols + k];
        }
        hybrid[i] = m / pooled.rows as f64;
    }

    println!("{:<22} {:>10} {:>10} {:>8}", "parameter", "vi mean", "vi-hmc", "frozen");
    let names = ["omega1", "omega2", "phi1", "phi2", "a", "b"];
    for (i, name) in names.iter().enumerate() {
        let frozen = if run.free_indices.contains(&i) { "" } else { "yes" };
        println!("{:<22} {:>10.4} {:>10.4} {:>8}", name, vi.posterior.mu[i], hybrid[i], frozen);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
