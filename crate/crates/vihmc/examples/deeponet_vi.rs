//! Short variational training of the desk-scale branch-trunk operator
//! network on Burgers data. A few hundred epochs are enough to see the
//! relative L2 error fall well below the trivial predictor; the shipped
//! config trains the same model to convergence.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use vihmc::datagen::{gen_burgers, BurgersSpec};
use vihmc::network::burgers_desk_spec;
use vihmc::pipeline::mean_relative_l2;
use vihmc::vi::{train_vi, LikelihoodSpec, PriorSpec, TrainConfig, VariationalPosterior};

fn main() -> Result<(), vihmc::Error> {
    let mut spec = BurgersSpec::desk_scale(0);
    spec.viscosity = 0.05;
    spec.grf_length_scale = 0.15;
    spec.split_fraction = 0.75;
    let (train, val) = gen_burgers(&spec)?;

    let net = burgers_desk_spec();
    println!("operator network with {} parameters", net.param_count());

    let prior = PriorSpec { variance: 0.25 };
    let likelihood = LikelihoodSpec { noise_variance: 1e-3 };
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let q0 = VariationalPosterior::init(&net, prior, 0.01, 1.0, &mut rng);
    println!("initial val rel-l2 {:.3}", mean_relative_l2(&net, &q0.mu, &val)?);

    let mut cfg = TrainConfig { epochs: 600, n_mc: 1, eval_every: 100, ..TrainConfig::default() };
    cfg.opt.lr = 3e-3;
    let result = train_vi(&q0, &net, &train, &val, &cfg, &likelihood, &mut rng)?;
    for row in &result.history {
        println!("epoch {:>4}: train mse {:.4e}, val mse {:.4e}", row.epoch, row.train_mse, row.val_mse);
    }
    println!("final val rel-l2 {:.3}", mean_relative_l2(&net, &result.posterior.mu, &val)?);
    Ok(())
}
