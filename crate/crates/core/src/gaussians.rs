//! Class-conditional Gaussian latent structure with learnable mean and
//! covariance generators and a noise-driven mean shift.
//!
//! Per class `c`: mean = gamma * G_m(c) + lambda * H_m(n), covariance =
//! softplus of a raw embedding row (diagonal, strictly positive by
//! construction). `G_m`/`G_std` are embedding tables, `H_m` a single
//! linear map; the simplest parameterizations with those contracts.

use crate::error::{DegiaError, Result};
use crate::params::{ParamBinding, ParamStore};
use crate::seeds;
use crate::tape::{softplus, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const MEAN_TABLE: &str = "bank.mean";
pub const RAWSTD_TABLE: &str = "bank.rawstd";
pub const SHIFT_WEIGHT: &str = "bank.shift.w";

/// softplus(x) = 1  at  x = ln(e - 1); raw covariance entries start there
/// so every class begins as a unit Gaussian.
const RAW_FOR_UNIT_VARIANCE: f64 = 0.541_324_854_612_918_1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBankConfig {
    pub classes: usize,
    pub dim: usize,
    /// Dimensionality of the noise signal n; 0 disables the shift entirely.
    pub noise_dim: usize,
    /// Class-separation scale on G_m.
    pub gamma: f64,
    /// Weight of the noise shift H_m(n).
    pub lambda: f64,
}

impl GaussianBankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 {
            return Err(DegiaError::contract(
                "GaussianBankConfig",
                format!("classes {} and dim {} must be positive", self.classes, self.dim),
            ));
        }
        Ok(())
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.classes {
            return Err(DegiaError::contract(
                "ClassGaussianBank",
                format!("class {c} out of range for {} classes", self.classes),
            ));
        }
        Ok(())
    }
}

pub fn init_bank_params(cfg: &GaussianBankConfig, store: &mut ParamStore, seed: u64) {
    let mut rng = seeds::rng_for(seed, seeds::stream::PARAM_INIT, 0xBA17);
    let small = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| 0.01 * rng.gen_range(-1.0..1.0f64)).collect()
    };
    let mean = small(&mut rng, cfg.classes * cfg.dim);
    store.insert(MEAN_TABLE, Tensor::new(vec![cfg.classes, cfg.dim], mean).expect("sized"));
    store.insert(
        RAWSTD_TABLE,
        Tensor::full(vec![cfg.classes, cfg.dim], RAW_FOR_UNIT_VARIANCE),
    );
    if cfg.noise_dim > 0 {
        let w = small(&mut rng, cfg.noise_dim * cfg.dim);
        store.insert(SHIFT_WEIGHT, Tensor::new(vec![cfg.noise_dim, cfg.dim], w).expect("sized"));
    }
}

/// Standard-normal noise vector of length `noise_dim`, seeded.
pub fn sample_noise(cfg: &GaussianBankConfig, seed: u64) -> Vec<f64> {
    let mut rng = seeds::rng_for(seed, seeds::stream::NOISE, 0);
    (0..cfg.noise_dim)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (-2.0 * u1.ln()).sqrt() * u2.cos()
        })
        .collect()
}

/// Per-batch class means `[b, dim]` on the tape:
/// `gamma * G_m(c) + lambda * H_m(n)`.
pub fn class_means(
    tape: &mut Tape,
    binding: &ParamBinding,
    cfg: &GaussianBankConfig,
    labels: &[usize],
    noise: &[f64],
) -> Result<Var> {
    for &c in labels {
        cfg.check_class(c)?;
    }
    let table = binding.var(MEAN_TABLE)?;
    let rows = tape.gather_rows(table, labels)?;
    let scaled = tape.scale(rows, cfg.gamma);
    if cfg.noise_dim == 0 || cfg.lambda == 0.0 {
        return Ok(scaled);
    }
    if noise.len() != cfg.noise_dim {
        return Err(DegiaError::shape(
            "class_means",
            format!("noise length {} vs noise_dim {}", noise.len(), cfg.noise_dim),
        ));
    }
    let n = tape.constant(Tensor::new(vec![1, cfg.noise_dim], noise.to_vec())?);
    let w = binding.var(SHIFT_WEIGHT)?;
    let shift = tape.matmul(n, w)?;
    let shift = tape.reshape(shift, vec![cfg.dim])?;
    let shift = tape.scale(shift, cfg.lambda);
    tape.add_row(scaled, shift)
}

/// Per-batch diagonal covariances `[b, dim]`, strictly positive.
pub fn class_covs(
    tape: &mut Tape,
    binding: &ParamBinding,
    cfg: &GaussianBankConfig,
    labels: &[usize],
) -> Result<Var> {
    for &c in labels {
        cfg.check_class(c)?;
    }
    let table = binding.var(RAWSTD_TABLE)?;
    let rows = tape.gather_rows(table, labels)?;
    Ok(tape.softplus(rows))
}

/// Per-sample log N(z; mu_c, diag(Sigma_c)) as a `[b]` vector.
pub fn log_density_rows(
    tape: &mut Tape,
    binding: &ParamBinding,
    cfg: &GaussianBankConfig,
    z: Var,
    labels: &[usize],
    noise: &[f64],
) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != cfg.dim {
        return Err(DegiaError::shape(
            "log_density_rows",
            format!("z {shape:?} vs latent dim {}", cfg.dim),
        ));
    }
    if shape[0] != labels.len() {
        return Err(DegiaError::shape(
            "log_density_rows",
            format!("{} rows vs {} labels", shape[0], labels.len()),
        ));
    }
    let means = class_means(tape, binding, cfg, labels, noise)?;
    let covs = class_covs(tape, binding, cfg, labels)?;
    let diff = tape.sub(z, means)?;
    let sq = tape.mul(diff, diff)?;
    let mahal = tape.div(sq, covs)?;
    let logcov = tape.log(covs);
    let inner = tape.add(mahal, logcov)?;
    let s = tape.sum_axis1(inner)?;
    let s = tape.scale(s, -0.5);
    Ok(tape.add_scalar(s, -0.5 * cfg.dim as f64 * (std::f64::consts::TAU).ln()))
}

// ---- plain-array views (no tape), for sampling and tests ----------------

pub fn class_mean_values(
    store: &ParamStore,
    cfg: &GaussianBankConfig,
    c: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    cfg.check_class(c)?;
    let table = store.get(MEAN_TABLE)?;
    let mut mean: Vec<f64> = table.data()[c * cfg.dim..(c + 1) * cfg.dim]
        .iter()
        .map(|v| cfg.gamma * v)
        .collect();
    if cfg.noise_dim > 0 && cfg.lambda != 0.0 {
        let w = store.get(SHIFT_WEIGHT)?;
        for (j, m) in mean.iter_mut().enumerate() {
            let mut s = 0.0;
            for (i, nv) in noise.iter().enumerate() {
                s += nv * w.data()[i * cfg.dim + j];
            }
            *m += cfg.lambda * s;
        }
    }
    Ok(mean)
}

pub fn class_cov_values(store: &ParamStore, cfg: &GaussianBankConfig, c: usize) -> Result<Vec<f64>> {
    cfg.check_class(c)?;
    let table = store.get(RAWSTD_TABLE)?;
    Ok(table.data()[c * cfg.dim..(c + 1) * cfg.dim].iter().map(|&v| softplus(v)).collect())
}
