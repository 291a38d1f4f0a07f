//! Generate the desk-scale periodic Burgers operator dataset: Gaussian
//! random initial fields pushed through a split-step spectral solver, split
//! into training and held-out fields, and persisted as CSV with a manifest.

use vihmc::artifacts::save_dataset;
use vihmc::datagen::{gen_burgers, gen_grf, solve_burgers, BurgersSpec};

fn main() -> Result<(), vihmc::Error> {
    let spec = BurgersSpec::desk_scale(0);

    // one field in detail
    let mut rng = <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(1);
    let u0 = gen_grf(spec.n_x, spec.grf_length_scale, spec.grf_variance, &mut rng);
    let sol = solve_burgers(&u0, &spec)?;
    let energy = |row: usize| -> f64 {
        (0..spec.n_x).map(|i| sol.get(i, row).powi(2)).sum::<f64>() / spec.n_x as f64
    };
    println!("single field: |u0|^2 = {:.4e}, |u(T)|^2 = {:.4e} (viscous decay)", energy(0), energy(spec.n_t - 1));
    assert!(energy(spec.n_t - 1) < energy(0));

    // the full dataset
    let (train, val) = gen_burgers(&spec)?;
    let t = train.as_operator().unwrap();
    println!(
        "train: {} fields x {} queries, val: {} fields",
        t.fields.rows,
        t.queries.rows,
        val.as_operator().unwrap().fields.rows
    );

    let out = std::env::temp_dir().join("vihmc-example-burgers-data");
    let _ = std::fs::remove_dir_all(&out);
    save_dataset(&out.join("train"), &train)?;
    save_dataset(&out.join("val"), &val)?;
    println!("saved to {}", out.display());
    Ok(())
}
