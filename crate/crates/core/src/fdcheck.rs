//! Central finite-difference gradient checking.
//!
//! The checker is the independent oracle for every differentiable operation:
//! it never touches the backward rules except to read the analytic gradient
//! it is judging.

use crate::error::{DegiaError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Max over coordinates of
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`
/// for a scalar-valued tensor function `f` at `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let out = f(&mut tape, xv)?;
        if tape.value(out).len() != 1 {
            return Err(DegiaError::contract(
                "finite_diff_check",
                format!("f must be scalar-valued, got shape {:?}", tape.shape(out)),
            ));
        }
        tape.backward(out)?;
        match tape.grad(xv) {
            Some(g) => g.to_vec(),
            None => vec![0.0; x.len()],
        }
    };

    let eval = |pt: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(pt.clone(), false);
        let out = f(&mut tape, xv)?;
        tape.value(out).item()
    };

    let mut max_rel: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_function_checks_near_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![6]);
        let err = finite_diff_check(
            |tape, xv| {
                let s = tape.sum(xv);
                Ok(tape.scale(s, 3.5))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "linear FD error {err}");
    }

    #[test]
    fn quadratic_function_checks_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, vec![8]);
        let err = finite_diff_check(
            |tape, xv| {
                let sq = tape.mul(xv, xv)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "quadratic FD error {err}");
    }

    #[test]
    fn non_scalar_function_is_contract_error() {
        let x = Tensor::zeros(vec![3]);
        let res = finite_diff_check(|_tape, xv| Ok(xv), &x, 1e-5);
        assert!(matches!(res, Err(DegiaError::Contract { .. })));
    }

    #[test]
    fn every_registered_op_passes_fd() {
        // Composite touching each differentiable op family; 20 seeds.
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, vec![2, 6]);
            let w = rand_tensor(&mut rng, vec![3, 4]);
            let row = rand_tensor(&mut rng, vec![4]);
            let err = finite_diff_check(
                |tape, xv| {
                    let a = tape.slice_cols(xv, 0, 3)?;
                    let b = tape.slice_cols(xv, 3, 6)?;
                    let wv = tape.constant(w.clone());
                    let rv = tape.constant(row.clone());
                    let h = tape.matmul(a, wv)?;
                    let h = tape.add_row(h, rv)?;
                    let h = tape.tanh(h);
                    let g = tape.softplus(b);
                    let g = tape.exp(g);
                    let g2 = tape.add_scalar(g, 0.5);
                    let g3 = tape.log(g2);
                    let cat = tape.concat_cols(h, g3)?;
                    let sq = tape.mul(cat, cat)?;
                    let num = tape.add_scalar(sq, 1.0);
                    let den = tape.add_scalar(sq, 2.0);
                    let rat = tape.div(num, den)?;
                    let diff = tape.sub(rat, sq)?;
                    let r = tape.relu(diff);
                    let rows = tape.sum_axis1(r)?;
                    Ok(tape.mean(rows))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: composite FD error {err}");
        }
    }

    #[test]
    fn conv_pool_bias_pipeline_passes_fd() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = rand_tensor(&mut rng, vec![1, 2, 4, 4]);
            let k = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
            let b = rand_tensor(&mut rng, vec![3]);
            // check w.r.t. input
            let (kc, bc) = (k.clone(), b.clone());
            let err = finite_diff_check(
                |tape, xv| {
                    let kv = tape.constant(kc.clone());
                    let bv = tape.constant(bc.clone());
                    let y = tape.conv2d(xv, kv, 1, 1)?;
                    let y = tape.bias_channels(y, bv)?;
                    let y = tape.relu(y);
                    let y = tape.avg_pool2(y)?;
                    Ok(tape.mean(y))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: conv-input FD error {err}");
            // check w.r.t. kernel
            let xc = x.clone();
            let err = finite_diff_check(
                |tape, kv| {
                    let xv = tape.constant(xc.clone());
                    let y = tape.conv2d(xv, kv, 1, 1)?;
                    let y = tape.tanh(y);
                    Ok(tape.mean(y))
                },
                &k,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: conv-kernel FD error {err}");
        }
    }

    #[test]
    fn cross_entropy_gradient_passes_fd() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let logits = rand_tensor(&mut rng, vec![3, 5]);
            let labels = vec![
                rng.gen_range(0..5usize),
                rng.gen_range(0..5usize),
                rng.gen_range(0..5usize),
            ];
            let err = finite_diff_check(
                |tape, lv| tape.cross_entropy_logits(lv, &labels),
                &logits,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: CE FD error {err}");
        }
    }
}
