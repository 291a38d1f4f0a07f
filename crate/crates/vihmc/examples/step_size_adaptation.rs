//! Dual-averaging step-size adaptation toward a target acceptance rate,
//! shown on an isotropic Gaussian: the tuned step size hits the target within
//! tolerance, and stricter targets produce smaller steps.

use vihmc::hmc::{adapt_step_size, AdaptConfig, Target};

struct Isotropic {
    dim: usize,
}

impl Target for Isotropic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logp_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let logp = -0.5 * theta.iter().map(|t| t * t).sum::<f64>();
        (logp, theta.iter().map(|t| -t).collect())
    }
}

fn main() -> Result<(), vihmc::Error> {
    let target = Isotropic { dim: 10 };
    let init = vec![0.0; 10];

    let mut previous = f64::INFINITY;
    for delta in [0.5, 0.8, 0.95] {
        let cfg = AdaptConfig { target_accept: delta, ..AdaptConfig::default() };
        let tuned = adapt_step_size(&target, &init, None, &cfg, 17)?;
        println!(
            "target {delta:.2}: step size {:.4}, leapfrog {}, probe acceptance {:.3}, within tolerance: {}",
            tuned.step_size, tuned.n_leapfrog, tuned.mean_accept, tuned.within_tolerance
        );
        assert!(tuned.step_size < previous, "stricter targets need smaller steps");
        previous = tuned.step_size;
    }
    Ok(())
}
