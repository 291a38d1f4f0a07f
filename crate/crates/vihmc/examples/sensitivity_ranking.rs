//! Variance-based parameter screening on the overparameterized tanh
//! regression: train the variational posterior, rank all 141 parameters by
//! their contribution to predictive variance, and show how few are needed to
//! cover 90% of it.

use std::path::Path;

use vihmc::config::ExperimentConfig;
use vihmc::pipeline;
use vihmc::sensitivity::compute_sensitivities;

fn main() -> Result<(), vihmc::Error> {
    let cfg = ExperimentConfig::load(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/case2.toml"),
    )?;
    let out = std::env::temp_dir().join("vihmc-example-case2");
    let _ = std::fs::remove_dir_all(&out);

    let vi = pipeline::cmd_train_vi(&cfg, &out)?;
    let (train, _) = pipeline::resolve_data(&cfg)?;
    let report = compute_sensitivities(&vi.posterior, &cfg.network, &train)?;

    println!("total predictive variance {:.3e}", report.total);
    println!("{:>6} {:>10} {:>12} {:>12}", "rank", "flat idx", "score", "cumulative");
    for r in (0..report.len()).step_by(20) {
        println!(
            "{:>6} {:>10} {:>12.3e} {:>12.4}",
            r + 1,
            report.ranking[r],
            report.scores[report.ranking[r]],
            report.cumulative[r]
        );
    }

    let sens = pipeline::cmd_sensitivity(&cfg, &vi.posterior_path, &out, None)?;
    println!(
        "tau {} keeps {} of {} parameters ({:.0}% of the space)",
        sens.partition.tau,
        sens.partition.sensitive.len(),
        report.len(),
        100.0 * sens.partition.sensitive.len() as f64 / report.len() as f64
    );
    Ok(())
}
