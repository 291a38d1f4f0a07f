//! Dataset generation: noisy sinusoid regression data, periodic Gaussian
//! random fields, and split-step solutions of the viscous Burgers equation.
//!
//! All generators are pure functions of (spec, seed).

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta};
use crate::error::Error;
use crate::tape::Matrix;

/// Two-sinusoid regression data: y = a sin(w1 x + p1) + b sin(w2 x + p2) + noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidSpec {
    pub a: f64,
    pub b: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub noise_sigma: f64,
    pub train_ranges: Vec<(f64, f64)>,
    pub n_train: usize,
    pub val_range: (f64, f64),
    pub n_val: usize,
    pub seed: u64,
}

impl SinusoidSpec {
    /// Case I of the regression experiments: sparse low-noise data with a gap.
    pub fn case1(seed: u64) -> Self {
        SinusoidSpec {
            a: 0.4,
            b: 0.5,
            omega1: 4.0,
            omega2: -3.0,
            phi1: 0.0,
            phi2: 1.57,
            noise_sigma: 1e-3,
            train_ranges: vec![(-1.0, -0.2), (0.2, 1.0)],
            n_train: 20,
            val_range: (-1.2, 1.2),
            n_val: 300,
            seed,
        }
    }

    /// Case II: higher-frequency target with more noise.
    pub fn case2(seed: u64) -> Self {
        SinusoidSpec {
            a: 4.0,
            b: 5.0,
            omega1: 4.0,
            omega2: -12.0,
            phi1: 0.0,
            phi2: std::f64::consts::FRAC_PI_2,
            noise_sigma: 0.05,
            train_ranges: vec![(-1.0, -0.2), (0.2, 1.0)],
            n_train: 20,
            val_range: (-1.2, 1.2),
            n_val: 300,
            seed,
        }
    }

    pub fn true_value(&self, x: f64) -> f64 {
        self.a * (self.omega1 * x + self.phi1).sin() + self.b * (self.omega2 * x + self.phi2).sin()
    }

    pub fn true_params(&self) -> [f64; 6] {
        [self.omega1, self.omega2, self.phi1, self.phi2, self.a, self.b]
    }
}

fn sample_union(ranges: &[(f64, f64)], rng: &mut impl Rng) -> f64 {
    let total: f64 = ranges.iter().map(|(lo, hi)| hi - lo).sum();
    let mut u = rng.gen_range(0.0..total);
    for (lo, hi) in ranges {
        let len = hi - lo;
        if u <= len {
            return lo + u;
        }
        u -= len;
    }
    ranges.last().map(|(_, hi)| *hi).unwrap_or(0.0)
}

/// Generate (train, val) sinusoid datasets. x is sampled uniformly over the
/// stated ranges; noise is i.i.d. Gaussian.
pub fn gen_sinusoid(spec: &SinusoidSpec) -> Result<(Dataset, Dataset), Error> {
    if spec.n_train == 0 || spec.n_val == 0 {
        return Err(Error::Config("sinusoid spec needs n_train, n_val > 0".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let make = |ranges: &[(f64, f64)], n: usize, rng: &mut ChaCha12Rng| {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x = sample_union(ranges, rng);
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise_sigma;
            xs.push(x);
            ys.push(spec.true_value(x) + eps);
        }
        (xs, ys)
    };
    let (tx, ty) = make(&spec.train_ranges, spec.n_train, &mut rng);
    let (vx, vy) = make(&[spec.val_range], spec.n_val, &mut rng);
    let meta = DatasetMeta { generator: "sinusoid".into(), noise_sigma: spec.noise_sigma, seed: spec.seed };
    Ok((Dataset::function(tx, ty, meta.clone())?, Dataset::function(vx, vy, meta)?))
}

/// Periodic viscous Burgers data generated from random initial fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurgersSpec {
    pub viscosity: f64,
    /// Spatial grid points on [0, 1], including the duplicate periodic endpoint.
    pub n_x: usize,
    /// Output times on [0, 1] including t = 0.
    pub n_t: usize,
    /// Length scale of the stand-in squared-exponential spectral decay.
    pub grf_length_scale: f64,
    /// Pointwise variance of the random fields.
    pub grf_variance: f64,
    pub n_fields: usize,
    /// Fraction of fields assigned to the training split.
    pub split_fraction: f64,
    /// Trunk feature dimension; features beyond (x, t) are zero-padded.
    #[serde(default = "default_trunk_features")]
    pub trunk_features: usize,
    pub seed: u64,
}

fn default_trunk_features() -> usize {
    2
}

impl BurgersSpec {
    /// Desk-scale defaults: 200 fields on a 64x33 grid.
    pub fn desk_scale(seed: u64) -> Self {
        BurgersSpec {
            viscosity: 0.01,
            n_x: 64,
            n_t: 33,
            grf_length_scale: 0.1,
            grf_variance: 0.25,
            n_fields: 200,
            split_fraction: 0.5,
            trunk_features: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.viscosity <= 0.0 {
            return Err(Error::Config("viscosity must be positive".into()));
        }
        if self.n_x < 8 || self.n_t < 8 {
            return Err(Error::Config("grid must be at least 8x8".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config("split fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Zero-mean stationary periodic Gaussian random field on the n_x grid
/// (duplicate endpoint included). Spectral synthesis with squared-exponential
/// decay of the mode amplitudes.
pub fn gen_grf(n_x: usize, length_scale: f64, variance: f64, rng: &mut impl Rng) -> Vec<f64> {
    let m = n_x - 1; // unique periodic points
    let k_max = m / 2;
    if variance == 0.0 || k_max == 0 {
        return vec![0.0; n_x];
    }
    let spectrum: Vec<f64> = (1..=k_max)
        .map(|k| {
            let w = 2.0 * std::f64::consts::PI * k as f64 * length_scale;
            (-0.5 * w * w).exp()
        })
        .collect();
    let total: f64 = spectrum.iter().sum();
    let coeffs: Vec<f64> = spectrum.iter().map(|s| (variance * s / total).sqrt()).collect();
    let ab: Vec<(f64, f64)> = (0..k_max)
        .map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let mut field = vec![0.0; n_x];
    for (i, v) in field.iter_mut().enumerate().take(m) {
        let x = i as f64 / m as f64;
        let mut acc = 0.0;
        for (k, ((a, b), c)) in ab.iter().zip(&coeffs).enumerate() {
            let w = 2.0 * std::f64::consts::PI * (k + 1) as f64 * x;
            acc += c * (a * w.cos() + b * w.sin());
        }
        *v = acc;
    }
    field[m] = field[0];
    field
}

const CFL: f64 = 0.4;
const MAX_SUBSTEPS_PER_OUTPUT: usize = 200_000;

/// Solve the periodic viscous Burgers equation by split-stepping: an explicit
/// conservative upwind advection substep alternated with an exact-in-Fourier
/// diffusion substep. Returns the solution sampled on the n_x x n_t grid
/// (rows = space, columns = output times, t = 0 first).
pub fn solve_burgers(u0: &[f64], spec: &BurgersSpec) -> Result<Matrix, Error> {
    solve_burgers_inner(u0, spec, true)
}

fn solve_burgers_inner(u0: &[f64], spec: &BurgersSpec, advection: bool) -> Result<Matrix, Error> {
    spec.validate()?;
    if u0.len() != spec.n_x {
        return Err(Error::Config(format!(
            "initial field length {} does not match n_x {}",
            u0.len(),
            spec.n_x
        )));
    }
    if (u0[0] - u0[spec.n_x - 1]).abs() > 1e-9 {
        return Err(Error::Config("initial field is not periodic".into()));
    }
    let m = spec.n_x - 1;
    let dx = 1.0 / m as f64;
    let dt_out = 1.0 / (spec.n_t - 1) as f64;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(m);
    let ifft = planner.plan_fft_inverse(m);

    let mut u: Vec<f64> = u0[..m].to_vec();
    let mut out = Matrix::zeros(spec.n_x, spec.n_t);
    let store = |out: &mut Matrix, u: &[f64], j: usize| {
        for i in 0..m {
            out.data[i * out.cols + j] = u[i];
        }
        out.data[m * out.cols + j] = u[0];
    };
    store(&mut out, &u, 0);

    let mut buf: Vec<Complex<f64>> = vec![Complex::default(); m];
    for j in 1..spec.n_t {
        let umax = u.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        let dt_cfl = CFL * dx / umax;
        let n_sub = (dt_out / dt_cfl).ceil() as usize;
        let n_sub = n_sub.max(1);
        if n_sub > MAX_SUBSTEPS_PER_OUTPUT {
            return Err(Error::Numerical(format!(
                "CFL limit requires {n_sub} substeps per output interval (max |u| = {umax:.3e})"
            )));
        }
        let dt = dt_out / n_sub as f64;
        for _ in 0..n_sub {
            if advection {
                advect_upwind(&mut u, dx, dt);
            }
            diffuse_spectral(&mut u, &mut buf, &*fft, &*ifft, spec.viscosity, dt);
        }
        store(&mut out, &u, j);
    }
    Ok(out)
}

/// One explicit conservative-form upwind step of u_t + (u^2/2)_x = 0.
fn advect_upwind(u: &mut [f64], dx: f64, dt: f64) {
    let m = u.len();
    // flux at interface i+1/2, upwinded on the interface-averaged velocity
    let mut flux = vec![0.0; m];
    for i in 0..m {
        let ul = u[i];
        let ur = u[(i + 1) % m];
        flux[i] = if 0.5 * (ul + ur) >= 0.0 { 0.5 * ul * ul } else { 0.5 * ur * ur };
    }
    let prev: Vec<f64> = u.to_vec();
    for i in 0..m {
        let fl = flux[(i + m - 1) % m];
        let fr = flux[i];
        u[i] = prev[i] - dt / dx * (fr - fl);
    }
}

/// Exact diffusion over dt in Fourier space: mode k decays by exp(-nu k^2 dt).
fn diffuse_spectral(
    u: &mut [f64],
    buf: &mut [Complex<f64>],
    fft: &dyn rustfft::Fft<f64>,
    ifft: &dyn rustfft::Fft<f64>,
    nu: f64,
    dt: f64,
) {
    let m = u.len();
    for (b, v) in buf.iter_mut().zip(u.iter()) {
        *b = Complex::new(*v, 0.0);
    }
    fft.process(buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let freq = if k <= m / 2 { k as f64 } else { k as f64 - m as f64 };
        let wav = 2.0 * std::f64::consts::PI * freq;
        *b *= (-nu * wav * wav * dt).exp();
    }
    ifft.process(buf);
    for (v, b) in u.iter_mut().zip(buf.iter()) {
        *v = b.re / m as f64;
    }
}

/// Assemble the operator-learning splits: branch inputs are the initial
/// fields at the sensors, trunk queries are the (x, t) grid, targets are the
/// solved values. The split over fields is a deterministic seeded shuffle.
pub fn build_operator_dataset(
    fields: &[Vec<f64>],
    solutions: &[Matrix],
    spec: &BurgersSpec,
) -> Result<(Dataset, Dataset), Error> {
    if fields.len() != solutions.len() {
        return Err(Error::Config(format!(
            "{} fields but {} solutions",
            fields.len(),
            solutions.len()
        )));
    }
    let n = fields.len();
    let n_train = (n as f64 * spec.split_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed.wrapping_add(0x5eed));
    order.shuffle(&mut rng);

    let n_q = spec.n_x * spec.n_t;
    let mut queries = Matrix::zeros(n_q, spec.trunk_features.max(2));
    for i in 0..spec.n_x {
        for j in 0..spec.n_t {
            let q = i * spec.n_t + j;
            let x = i as f64 / (spec.n_x - 1) as f64;
            let row = &mut queries.data[q * spec.trunk_features.max(2)..];
            row[0] = x;
            row[1] = j as f64 / (spec.n_t - 1) as f64;
            // optional periodic embedding of the spatial coordinate
            if spec.trunk_features >= 3 {
                row[2] = (2.0 * std::f64::consts::PI * x).sin();
            }
            if spec.trunk_features >= 4 {
                row[3] = (2.0 * std::f64::consts::PI * x).cos();
            }
        }
    }

    let build = |idx: &[usize]| -> Result<Dataset, Error> {
        let mut fmat = Matrix::zeros(idx.len(), spec.n_x);
        let mut vmat = Matrix::zeros(idx.len(), n_q);
        for (r, &fi) in idx.iter().enumerate() {
            fmat.data[r * spec.n_x..(r + 1) * spec.n_x].copy_from_slice(&fields[fi]);
            let sol = &solutions[fi];
            for i in 0..spec.n_x {
                for j in 0..spec.n_t {
                    vmat.data[r * n_q + i * spec.n_t + j] = sol.get(i, j);
                }
            }
        }
        Dataset::operator(fmat, queries.clone(), vmat, DatasetMeta {
            generator: "burgers".into(),
            noise_sigma: 0.0,
            seed: spec.seed,
        })
    };
    let train = build(&order[..n_train])?;
    let val = build(&order[n_train..])?;
    Ok((train, val))
}

/// Generate the full desk-scale Burgers operator dataset from the spec.
pub fn gen_burgers(spec: &BurgersSpec) -> Result<(Dataset, Dataset), Error> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut fields = Vec::with_capacity(spec.n_fields);
    let mut solutions = Vec::with_capacity(spec.n_fields);
    for _ in 0..spec.n_fields {
        let u0 = gen_grf(spec.n_x, spec.grf_length_scale, spec.grf_variance, &mut rng);
        let sol = solve_burgers(&u0, spec)?;
        fields.push(u0);
        solutions.push(sol);
    }
    build_operator_dataset(&fields, &solutions, spec)
}
