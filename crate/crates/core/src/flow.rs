//! Invertible generative flow: a stack of affine coupling blocks with
//! alternating half masks. Each block leaves one half of the vector
//! unchanged and transforms the other half affinely, conditioned on the
//! unchanged half, so the map is exactly invertible and the Jacobian is
//! triangular — the log-determinant is just the sum of the log scales.
//!
//! Scale outputs pass through a bounded tanh so `exp(s)` stays well
//! conditioned. Subnet output layers start at zero, which makes a fresh
//! flow the identity map with zero log-determinant.

use crate::error::{DegiaError, Result};
use crate::gaussians::{log_density_rows, GaussianBankConfig};
use crate::params::{ParamBinding, ParamStore};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Flattened input dimensionality.
    pub dim: usize,
    pub blocks: usize,
    /// Hidden width of the two-layer scale/shift subnetworks.
    pub hidden: usize,
    /// Multiplier on tanh(s_raw); bounds every log scale to +-scale_bound.
    pub scale_bound: f64,
}

impl FlowConfig {
    pub fn new(dim: usize) -> Self {
        FlowConfig { dim, blocks: 6, hidden: 32, scale_bound: 2.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(DegiaError::contract("FlowConfig", format!("dim {} < 2", self.dim)));
        }
        if self.blocks == 0 || self.hidden == 0 || self.scale_bound <= 0.0 {
            return Err(DegiaError::contract(
                "FlowConfig",
                "blocks, hidden and scale_bound must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Split point: even blocks condition on the first half and transform
    /// the second; odd blocks swap the roles.
    fn split(&self) -> usize {
        self.dim / 2
    }

    fn block_dims(&self, block: usize) -> (usize, usize) {
        let p = self.split();
        if block % 2 == 0 {
            (p, self.dim - p) // (conditioning, transformed)
        } else {
            (self.dim - p, p)
        }
    }
}

fn subnet_names(block: usize, net: &str) -> [String; 4] {
    [
        format!("flow.b{block}.{net}.w1"),
        format!("flow.b{block}.{net}.b1"),
        format!("flow.b{block}.{net}.w2"),
        format!("flow.b{block}.{net}.b2"),
    ]
}

pub fn init_flow_params(cfg: &FlowConfig, store: &mut ParamStore, seed: u64) {
    let mut rng = seeds::rng_for(seed, seeds::stream::PARAM_INIT, 0xF10);
    for block in 0..cfg.blocks {
        let (d_in, d_out) = cfg.block_dims(block);
        for net in ["s", "t"] {
            let [w1, b1, w2, b2] = subnet_names(block, net);
            let std = 1.0 / (d_in as f64).sqrt();
            let data = (0..d_in * cfg.hidden).map(|_| std * rng.gen_range(-1.0..1.0f64)).collect();
            store.insert(w1, Tensor::new(vec![d_in, cfg.hidden], data).expect("sized"));
            store.insert(b1, Tensor::zeros(vec![cfg.hidden]));
            // zero output layer: block starts as the identity
            store.insert(w2, Tensor::zeros(vec![cfg.hidden, d_out]));
            store.insert(b2, Tensor::zeros(vec![d_out]));
        }
    }
}

fn subnet_forward(
    tape: &mut Tape,
    binding: &ParamBinding,
    block: usize,
    net: &str,
    x: Var,
) -> Result<Var> {
    let [w1, b1, w2, b2] = subnet_names(block, net);
    let h = tape.matmul(x, binding.var(&w1)?)?;
    let h = tape.add_row(h, binding.var(&b1)?)?;
    let h = tape.tanh(h);
    let out = tape.matmul(h, binding.var(&w2)?)?;
    tape.add_row(out, binding.var(&b2)?)
}

/// Forward map of one batch `[b, dim]`; returns `(z, log_det)` with
/// `log_det` per sample `[b]`.
pub fn forward_map(
    tape: &mut Tape,
    binding: &ParamBinding,
    cfg: &FlowConfig,
    x: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.dim {
        return Err(DegiaError::shape(
            "forward_map",
            format!("input {shape:?} vs flow dim {}", cfg.dim),
        ));
    }
    let b = shape[0];
    let p = cfg.split();
    let mut cur = x;
    let mut log_det = tape.constant(Tensor::zeros(vec![b]));
    for block in 0..cfg.blocks {
        let (cond, trans) = if block % 2 == 0 {
            (tape.slice_cols(cur, 0, p)?, tape.slice_cols(cur, p, cfg.dim)?)
        } else {
            (tape.slice_cols(cur, p, cfg.dim)?, tape.slice_cols(cur, 0, p)?)
        };
        let s_raw = subnet_forward(tape, binding, block, "s", cond)?;
        let s_t = tape.tanh(s_raw);
        let s = tape.scale(s_t, cfg.scale_bound);
        let t = subnet_forward(tape, binding, block, "t", cond)?;
        let es = tape.exp(s);
        let scaled = tape.mul(trans, es)?;
        let zb = tape.add(scaled, t)?;
        cur = if block % 2 == 0 {
            tape.concat_cols(cond, zb)?
        } else {
            tape.concat_cols(zb, cond)?
        };
        let block_ld = tape.sum_axis1(s)?;
        log_det = tape.add(log_det, block_ld)?;
    }
    Ok((cur, log_det))
}

/// Per-sample log-likelihood in image space:
/// `log N(F(x); mu_c, Sigma_c) + log|dF/dx|`, differentiable w.r.t. both
/// the flow parameters and `x`.
pub fn log_likelihood_rows(
    tape: &mut Tape,
    binding: &ParamBinding,
    flow_cfg: &FlowConfig,
    bank_cfg: &GaussianBankConfig,
    x: Var,
    labels: &[usize],
    noise: &[f64],
) -> Result<Var> {
    let (z, log_det) = forward_map(tape, binding, flow_cfg, x)?;
    let prior = log_density_rows(tape, binding, bank_cfg, z, labels, noise)?;
    tape.add(prior, log_det)
}

// ---- plain-array evaluation (no tape) ------------------------------------

fn subnet_eval(store: &ParamStore, block: usize, net: &str, x: &[f64], rows: usize) -> Result<Vec<f64>> {
    let [w1n, b1n, w2n, b2n] = subnet_names(block, net);
    let (w1, b1, w2, b2) = (store.get(&w1n)?, store.get(&b1n)?, store.get(&w2n)?, store.get(&b2n)?);
    let d_in = w1.shape()[0];
    let hidden = w1.shape()[1];
    let d_out = w2.shape()[1];
    let mut h = vec![0.0; rows * hidden];
    crate::tape::matmul_acc(x, w1.data(), rows, d_in, hidden, &mut h);
    for r in 0..rows {
        for j in 0..hidden {
            h[r * hidden + j] = (h[r * hidden + j] + b1.data()[j]).tanh();
        }
    }
    let mut out = vec![0.0; rows * d_out];
    crate::tape::matmul_acc(&h, w2.data(), rows, hidden, d_out, &mut out);
    for r in 0..rows {
        for j in 0..d_out {
            out[r * d_out + j] += b2.data()[j];
        }
    }
    Ok(out)
}

/// Tape-free forward of a `[rows, dim]` batch; returns flat z and per-row
/// log-determinants. Matches `forward_map` exactly.
pub fn forward_values(
    store: &ParamStore,
    cfg: &FlowConfig,
    x: &[f64],
    rows: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != rows * cfg.dim {
        return Err(DegiaError::shape(
            "forward_values",
            format!("{} values for {rows} x {}", x.len(), cfg.dim),
        ));
    }
    let p = cfg.split();
    let mut cur = x.to_vec();
    let mut log_det = vec![0.0; rows];
    for block in 0..cfg.blocks {
        let (d_cond, d_trans) = cfg.block_dims(block);
        let (mut cond, mut trans) = (vec![0.0; rows * d_cond], vec![0.0; rows * d_trans]);
        for r in 0..rows {
            let row = &cur[r * cfg.dim..(r + 1) * cfg.dim];
            if block % 2 == 0 {
                cond[r * d_cond..(r + 1) * d_cond].copy_from_slice(&row[..p]);
                trans[r * d_trans..(r + 1) * d_trans].copy_from_slice(&row[p..]);
            } else {
                cond[r * d_cond..(r + 1) * d_cond].copy_from_slice(&row[p..]);
                trans[r * d_trans..(r + 1) * d_trans].copy_from_slice(&row[..p]);
            }
        }
        let s_raw = subnet_eval(store, block, "s", &cond, rows)?;
        let t = subnet_eval(store, block, "t", &cond, rows)?;
        for r in 0..rows {
            let out_row = &mut cur[r * cfg.dim..(r + 1) * cfg.dim];
            for j in 0..d_trans {
                let s = cfg.scale_bound * s_raw[r * d_trans + j].tanh();
                log_det[r] += s;
                let v = trans[r * d_trans + j] * s.exp() + t[r * d_trans + j];
                if block % 2 == 0 {
                    out_row[p + j] = v;
                } else {
                    out_row[j] = v;
                }
            }
            // conditioning half passes through unchanged
        }
    }
    Ok((cur, log_det))
}

/// Exact inverse of `forward_values` for a `[rows, dim]` batch of latents.
pub fn inverse_values(
    store: &ParamStore,
    cfg: &FlowConfig,
    z: &[f64],
    rows: usize,
) -> Result<Vec<f64>> {
    if z.len() != rows * cfg.dim {
        return Err(DegiaError::shape(
            "inverse_values",
            format!("{} values for {rows} x {}", z.len(), cfg.dim),
        ));
    }
    let p = cfg.split();
    let mut cur = z.to_vec();
    for block in (0..cfg.blocks).rev() {
        let (d_cond, d_trans) = cfg.block_dims(block);
        let mut cond = vec![0.0; rows * d_cond];
        for r in 0..rows {
            let row = &cur[r * cfg.dim..(r + 1) * cfg.dim];
            if block % 2 == 0 {
                cond[r * d_cond..(r + 1) * d_cond].copy_from_slice(&row[..p]);
            } else {
                cond[r * d_cond..(r + 1) * d_cond].copy_from_slice(&row[p..]);
            }
        }
        let s_raw = subnet_eval(store, block, "s", &cond, rows)?;
        let t = subnet_eval(store, block, "t", &cond, rows)?;
        for r in 0..rows {
            let row = &mut cur[r * cfg.dim..(r + 1) * cfg.dim];
            for j in 0..d_trans {
                let s = cfg.scale_bound * s_raw[r * d_trans + j].tanh();
                let idx = if block % 2 == 0 { p + j } else { j };
                row[idx] = (row[idx] - t[r * d_trans + j]) * (-s).exp();
            }
        }
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed_store(cfg: &FlowConfig, seed: u64, scale: f64) -> ParamStore {
        let mut store = ParamStore::new();
        init_flow_params(cfg, &mut store, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let t = store.get(&name).unwrap().clone();
            let data = t.data().iter().map(|v| v + scale * rng.gen_range(-1.0..1.0)).collect();
            store.insert(name, Tensor::new(t.shape().to_vec(), data).unwrap());
        }
        store
    }

    fn tape_forward(store: &ParamStore, cfg: &FlowConfig, x: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let binding = ParamBinding::bind(&mut tape, store, false);
        let xv = tape.constant(x.clone());
        let (z, ld) = forward_map(&mut tape, &binding, cfg, xv).unwrap();
        (tape.value(z).clone(), tape.value(ld).clone())
    }

    #[test]
    fn zero_initialized_flow_is_identity_with_zero_logdet() {
        let cfg = FlowConfig { dim: 6, blocks: 4, hidden: 8, scale_bound: 2.0 };
        let mut store = ParamStore::new();
        init_flow_params(&cfg, &mut store, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(vec![3, 6], (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let (z, ld) = tape_forward(&store, &cfg, &x);
        assert_eq!(z.data(), x.data());
        assert!(ld.data().iter().all(|&v| v == 0.0));
        // and the raw-array path agrees
        let (z2, ld2) = forward_values(&store, &cfg, x.data(), 3).unwrap();
        assert_eq!(z2, x.data());
        assert!(ld2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn total_logdet_is_sum_of_per_block_logdets() {
        let cfg = FlowConfig { dim: 5, blocks: 3, hidden: 6, scale_bound: 1.5 };
        let store = perturbed_store(&cfg, 3, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (_, full_ld) = forward_values(&store, &cfg, &x, 1).unwrap();

        // replay block by block with subnet_eval, accumulating log scales
        let p = cfg.split();
        let mut cur = x;
        let mut acc = 0.0;
        for block in 0..cfg.blocks {
            let cond: Vec<f64> =
                if block % 2 == 0 { cur[..p].to_vec() } else { cur[p..].to_vec() };
            let s_raw = subnet_eval(&store, block, "s", &cond, 1).unwrap();
            let t = subnet_eval(&store, block, "t", &cond, 1).unwrap();
            let (start, width) = if block % 2 == 0 { (p, cfg.dim - p) } else { (0, p) };
            for j in 0..width {
                let s = cfg.scale_bound * s_raw[j].tanh();
                acc += s;
                cur[start + j] = cur[start + j] * s.exp() + t[j];
            }
        }
        assert!((full_ld[0] - acc).abs() < 1e-12, "{} vs {acc}", full_ld[0]);
    }

    /// Finite-difference Jacobian plus direct Gaussian-elimination
    /// determinant: the independent oracle for the analytic log-det.
    fn numerical_logdet(store: &ParamStore, cfg: &FlowConfig, x: &[f64]) -> f64 {
        let n = cfg.dim;
        let eps = 1e-6;
        let mut jac = vec![0.0; n * n];
        for j in 0..n {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += eps;
            xm[j] -= eps;
            let (zp, _) = forward_values(store, cfg, &xp, 1).unwrap();
            let (zm, _) = forward_values(store, cfg, &xm, 1).unwrap();
            for i in 0..n {
                jac[i * n + j] = (zp[i] - zm[i]) / (2.0 * eps);
            }
        }
        // determinant by partial-pivot elimination
        let mut a = jac;
        let mut det: f64 = 1.0;
        for col in 0..n {
            let mut piv = col;
            for r in col + 1..n {
                if a[r * n + col].abs() > a[piv * n + col].abs() {
                    piv = r;
                }
            }
            if piv != col {
                for j in 0..n {
                    a.swap(col * n + j, piv * n + j);
                }
                det = -det;
            }
            let d = a[col * n + col];
            det *= d;
            if d == 0.0 {
                return f64::NEG_INFINITY;
            }
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                for j in col..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
            }
        }
        det.abs().ln()
    }

    #[test]
    fn logdet_matches_numerical_jacobian_for_small_dims() {
        for &dim in &[2usize, 4, 6] {
            let cfg = FlowConfig { dim, blocks: 4, hidden: 6, scale_bound: 1.0 };
            let store = perturbed_store(&cfg, dim as u64, 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(50 + dim as u64);
            for trial in 0..5 {
                let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let (_, ld) = forward_values(&store, &cfg, &x, 1).unwrap();
                let num = numerical_logdet(&store, &cfg, &x);
                assert!(
                    (ld[0] - num).abs() <= 1e-3,
                    "dim {dim} trial {trial}: analytic {} vs numerical {num}",
                    ld[0]
                );
            }
        }
    }

    #[test]
    fn roundtrip_inverse_max_norm_under_1e6() {
        let cfg = FlowConfig { dim: 12, blocks: 6, hidden: 8, scale_bound: 2.0 };
        let store = perturbed_store(&cfg, 9, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rows = 100;
        let x: Vec<f64> = (0..rows * 12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (z, _) = forward_values(&store, &cfg, &x, rows).unwrap();
        let back = inverse_values(&store, &cfg, &z, rows).unwrap();
        assert!(max_abs_diff(&back, &x) <= 1e-6);
        // other direction: forward(inverse(z)) == z
        let x2 = inverse_values(&store, &cfg, &z, rows).unwrap();
        let (z2, _) = forward_values(&store, &cfg, &x2, rows).unwrap();
        assert!(max_abs_diff(&z2, &z) <= 1e-6);
    }

    #[test]
    fn identity_flow_inverse_is_identity() {
        let cfg = FlowConfig { dim: 4, blocks: 2, hidden: 4, scale_bound: 2.0 };
        let mut store = ParamStore::new();
        init_flow_params(&cfg, &mut store, 11);
        let z = vec![0.3, -0.7, 0.1, 2.0];
        let x = inverse_values(&store, &cfg, &z, 1).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn forward_and_inverse_logdets_cancel() {
        // forward log_det at x plus the inverse-direction log_det at z must
        // vanish; the inverse direction is evaluated by re-running forward
        // at the reconstructed point.
        let cfg = FlowConfig { dim: 8, blocks: 5, hidden: 6, scale_bound: 1.5 };
        let store = perturbed_store(&cfg, 12, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (z, ld_fwd) = forward_values(&store, &cfg, &x, 1).unwrap();
        let back = inverse_values(&store, &cfg, &z, 1).unwrap();
        let (_, ld_back_fwd) = forward_values(&store, &cfg, &back, 1).unwrap();
        // log|d x / d z| = -log|d z / d x| evaluated at the same orbit point
        assert!((ld_fwd[0] - ld_back_fwd[0]).abs() <= 1e-6);
    }

    #[test]
    fn tape_and_raw_paths_agree() {
        let cfg = FlowConfig { dim: 10, blocks: 4, hidden: 8, scale_bound: 2.0 };
        let store = perturbed_store(&cfg, 14, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::new(vec![4, 10], (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (z_tape, ld_tape) = tape_forward(&store, &cfg, &x);
        let (z_raw, ld_raw) = forward_values(&store, &cfg, x.data(), 4).unwrap();
        assert!(max_abs_diff(z_tape.data(), &z_raw) <= 1e-12);
        assert!(max_abs_diff(ld_tape.data(), &ld_raw) <= 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = FlowConfig { dim: 6, blocks: 2, hidden: 4, scale_bound: 2.0 };
        let mut store = ParamStore::new();
        init_flow_params(&cfg, &mut store, 16);
        assert!(forward_values(&store, &cfg, &[0.0; 5], 1).is_err());
        assert!(inverse_values(&store, &cfg, &[0.0; 7], 1).is_err());
    }
}
