//! Full-space versus reduced-space sampling cost on the sine regression:
//! the same posterior sampled both ways, at the shipped fixed step size and
//! at a step size adapted to 80% acceptance.

use std::path::Path;

use vihmc::config::ExperimentConfig;
use vihmc::pipeline;

fn main() -> Result<(), vihmc::Error> {
    let cfg = ExperimentConfig::load(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/case1.toml"),
    )?;
    let out = std::env::temp_dir().join("vihmc-example-cost");
    let _ = std::fs::remove_dir_all(&out);

    let vi = pipeline::cmd_train_vi(&cfg, &out)?;
    let cc = pipeline::cmd_cost_compare(&cfg, &vi.posterior_path, &out)?;

    println!(
        "{:<10} {:<10} {:>12} {:>12} {:>14} {:>14}",
        "mode", "step", "step size", "acceptance", "mean mse", "s/sample"
    );
    for row in &cc.rows {
        println!(
            "{:<10} {:<10} {:>12.3e} {:>12.3} {:>14.3e} {:>14.3e}",
            row.mode, row.phase, row.step_size, row.acceptance_rate, row.posterior_mean_mse,
            row.seconds_per_sample
        );
    }
    println!("table written to {}", cc.csv_path.display());
    Ok(())
}
