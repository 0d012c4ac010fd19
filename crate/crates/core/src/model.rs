//! The discriminative task network: a small two-conv-block backbone with
//! either a classification head or a 34-value landmark regression head,
//! plus the task losses.

use crate::data::{ImageSample, Truth, LANDMARK_COUNT};
use crate::error::{DegiaError, Result};
use crate::params::{ParamBinding, ParamStore};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Output head of the task network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification { classes: usize },
    LandmarkRegression,
}

impl HeadKind {
    pub fn output_width(self) -> usize {
        match self {
            HeadKind::Classification { classes } => classes,
            HeadKind::LandmarkRegression => 2 * LANDMARK_COUNT,
        }
    }
}

/// Loss used under a classification head. Cross-entropy is the default;
/// MSE against one-hot targets is available for fidelity experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassLossKind {
    #[default]
    CrossEntropy,
    MseOneHot,
}

/// Architecture of the small backbone: two conv blocks (conv + bias + relu
/// + 2x2 average pool) into two fully connected layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskNetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub fc_hidden: usize,
    pub head: HeadKind,
}

impl TaskNetConfig {
    pub fn lenet_small(in_channels: usize, height: usize, width: usize, head: HeadKind) -> Self {
        TaskNetConfig {
            in_channels,
            height,
            width,
            conv1_filters: 8,
            conv2_filters: 16,
            kernel: 3,
            fc_hidden: 64,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(DegiaError::contract(
                "TaskNetConfig",
                format!("spatial dims {}x{} must be divisible by 4", self.height, self.width),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(DegiaError::contract("TaskNetConfig", "kernel must be odd".to_string()));
        }
        Ok(())
    }

    pub fn flat_dim(&self) -> usize {
        self.conv2_filters * (self.height / 4) * (self.width / 4)
    }
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller on explicit uniforms keeps the stream stable.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            std * (-2.0 * u1.ln()).sqrt() * u2.cos()
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

/// He-initialized backbone, zero-initialized final layer (a fresh head
/// predicts zeros for any input).
pub fn init_task_params(cfg: &TaskNetConfig, store: &mut ParamStore, seed: u64) {
    let mut rng = seeds::rng_for(seed, seeds::stream::PARAM_INIT, 0x7A5C);
    let k = cfg.kernel;
    let fan1 = cfg.in_channels * k * k;
    store.insert("task.conv1.w", he_tensor(&mut rng, vec![cfg.conv1_filters, cfg.in_channels, k, k], fan1));
    store.insert("task.conv1.b", Tensor::zeros(vec![cfg.conv1_filters]));
    let fan2 = cfg.conv1_filters * k * k;
    store.insert("task.conv2.w", he_tensor(&mut rng, vec![cfg.conv2_filters, cfg.conv1_filters, k, k], fan2));
    store.insert("task.conv2.b", Tensor::zeros(vec![cfg.conv2_filters]));
    let flat = cfg.flat_dim();
    store.insert("task.fc1.w", he_tensor(&mut rng, vec![flat, cfg.fc_hidden], flat));
    store.insert("task.fc1.b", Tensor::zeros(vec![cfg.fc_hidden]));
    store.insert("task.head.w", Tensor::zeros(vec![cfg.fc_hidden, cfg.head.output_width()]));
    store.insert("task.head.b", Tensor::zeros(vec![cfg.head.output_width()]));
}

/// Forward pass over a `[b, c, h, w]` batch; returns `[b, out]`.
pub fn task_forward(tape: &mut Tape, binding: &ParamBinding, cfg: &TaskNetConfig, x: Var) -> Result<Var> {
    let got = tape.shape(x).to_vec();
    if got.len() != 4 || got[1] != cfg.in_channels || got[2] != cfg.height || got[3] != cfg.width {
        return Err(DegiaError::shape(
            "task_forward",
            format!(
                "input {got:?} vs configured [_, {}, {}, {}]",
                cfg.in_channels, cfg.height, cfg.width
            ),
        ));
    }
    let b = got[0];
    let pad = cfg.kernel / 2;

    let w1 = binding.var("task.conv1.w")?;
    let b1 = binding.var("task.conv1.b")?;
    let h = tape.conv2d(x, w1, 1, pad)?;
    let h = tape.bias_channels(h, b1)?;
    let h = tape.relu(h);
    let h = tape.avg_pool2(h)?;

    let w2 = binding.var("task.conv2.w")?;
    let b2 = binding.var("task.conv2.b")?;
    let h = tape.conv2d(h, w2, 1, pad)?;
    let h = tape.bias_channels(h, b2)?;
    let h = tape.relu(h);
    let h = tape.avg_pool2(h)?;

    let h = tape.reshape(h, vec![b, cfg.flat_dim()])?;
    let wf = binding.var("task.fc1.w")?;
    let bf = binding.var("task.fc1.b")?;
    let h = tape.matmul(h, wf)?;
    let h = tape.add_row(h, bf)?;
    let h = tape.relu(h);

    let wh = binding.var("task.head.w")?;
    let bh = binding.var("task.head.b")?;
    let out = tape.matmul(h, wh)?;
    tape.add_row(out, bh)
}

/// Mean over batch and coordinates of the squared difference.
pub fn mse_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(truth) {
        return Err(DegiaError::shape(
            "mse_loss",
            format!("{:?} vs {:?}", tape.shape(pred), tape.shape(truth)),
        ));
    }
    let diff = tape.sub(pred, truth)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Per-sample squared error, mean over coordinates: `[b]`.
pub fn mse_rows(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let diff = tape.sub(pred, truth)?;
    let sq = tape.mul(diff, diff)?;
    let rows = tape.sum_axis1(sq)?;
    let width = tape.shape(pred)[1] as f64;
    Ok(tape.scale(rows, 1.0 / width))
}

/// Scalar classification loss under the configured kind.
pub fn classification_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    kind: ClassLossKind,
) -> Result<Var> {
    match kind {
        ClassLossKind::CrossEntropy => tape.cross_entropy_logits(logits, labels),
        ClassLossKind::MseOneHot => {
            let onehot = one_hot(labels, tape.shape(logits)[1])?;
            let truth = tape.constant(onehot);
            mse_loss(tape, logits, truth)
        }
    }
}

/// Per-sample classification loss `[b]`.
pub fn classification_rows(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    kind: ClassLossKind,
) -> Result<Var> {
    match kind {
        ClassLossKind::CrossEntropy => tape.cross_entropy_rows(logits, labels),
        ClassLossKind::MseOneHot => {
            let onehot = one_hot(labels, tape.shape(logits)[1])?;
            let truth = tape.constant(onehot);
            mse_rows(tape, logits, truth)
        }
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(DegiaError::contract(
                "one_hot",
                format!("label {l} out of range for {classes} classes"),
            ));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Stack samples into a `[b, c, h, w]` input tensor.
pub fn batch_input(samples: &[&ImageSample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| DegiaError::contract("batch_input", "empty batch".to_string()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if (s.channels, s.height, s.width) != (c, h, w) {
            return Err(DegiaError::shape(
                "batch_input",
                format!("mixed sample shapes in one batch: {}x{}x{}", s.height, s.width, s.channels),
            ));
        }
        data.extend(s.to_chw());
    }
    Tensor::new(vec![samples.len(), c, h, w], data)
}

/// Landmark truth as a `[b, 34]` tensor in (x, y) pair order.
pub fn batch_landmarks(samples: &[&ImageSample]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * 2 * LANDMARK_COUNT);
    for s in samples {
        match &s.truth {
            Truth::Landmarks(pts) => {
                for p in pts {
                    data.push(p[0]);
                    data.push(p[1]);
                }
            }
            Truth::Class(_) => {
                return Err(DegiaError::contract(
                    "batch_landmarks",
                    "class-labelled sample in a landmark batch".to_string(),
                ))
            }
        }
    }
    Tensor::new(vec![samples.len(), 2 * LANDMARK_COUNT], data)
}

/// Class labels of a batch.
pub fn batch_labels(samples: &[&ImageSample]) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| match s.truth {
            Truth::Class(c) => Ok(c),
            Truth::Landmarks(_) => Err(DegiaError::contract(
                "batch_labels",
                "landmark sample in a class batch".to_string(),
            )),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_digit_sample;
    use crate::fdcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> TaskNetConfig {
        TaskNetConfig::lenet_small(1, 8, 8, HeadKind::Classification { classes: 4 })
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_head_predicts_zero_for_any_input() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        init_task_params(&cfg, &mut store, 3);
        let mut tape = Tape::new();
        let binding = ParamBinding::bind(&mut tape, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = tape.leaf(rand_tensor(&mut rng, vec![2, 1, 8, 8]), false);
        let out = task_forward(&mut tape, &binding, &cfg, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_dimension_is_preserved() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        init_task_params(&cfg, &mut store, 3);
        let mut tape = Tape::new();
        let binding = ParamBinding::bind(&mut tape, &store, false);
        let x = tape.leaf(Tensor::zeros(vec![4, 1, 8, 8]), false);
        let out = task_forward(&mut tape, &binding, &cfg, x).unwrap();
        assert_eq!(tape.shape(out), &[4, 4]);
    }

    #[test]
    fn forward_is_bitwise_stable_across_runs() {
        let run = || {
            let cfg = small_cfg();
            let mut store = ParamStore::new();
            init_task_params(&cfg, &mut store, 11);
            let mut tape = Tape::new();
            let binding = ParamBinding::bind(&mut tape, &store, false);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            // break head zeros so the output is nontrivial
            let hw = rand_tensor(&mut rng, vec![cfg.fc_hidden, 4]);
            store.insert("task.head.w", hw);
            let mut tape2 = Tape::new();
            let binding2 = ParamBinding::bind(&mut tape2, &store, false);
            let x = tape2.leaf(rand_tensor(&mut rng, vec![2, 1, 8, 8]), false);
            let out = task_forward(&mut tape2, &binding2, &cfg, x).unwrap();
            let _ = (tape, binding);
            tape2.value(out).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        init_task_params(&cfg, &mut store, 3);
        let mut tape = Tape::new();
        let binding = ParamBinding::bind(&mut tape, &store, false);
        let x = tape.leaf(Tensor::zeros(vec![2, 1, 6, 8]), false);
        assert!(matches!(
            task_forward(&mut tape, &binding, &cfg, x),
            Err(DegiaError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mse_zero_for_equal_inputs_and_constant_residual_value() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(vec![2, 34], 0.3));
        let b = tape.constant(Tensor::full(vec![2, 34], 0.3));
        let l = mse_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);

        // uniform residual 0.1 over all coordinates -> 0.01
        let c = tape.constant(Tensor::full(vec![2, 34], 0.4));
        let l = mse_loss(&mut tape, a, c).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_scalar_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = rand_tensor(&mut rng, vec![3, 7]);
        let t = rand_tensor(&mut rng, vec![3, 7]);
        // independent scalar-loop oracle
        let mut acc = 0.0;
        for (a, b) in p.data().iter().zip(t.data()) {
            acc += (a - b) * (a - b);
        }
        let expect = acc / 21.0;
        let mut tape = Tape::new();
        let (pv, tv) = (tape.constant(p), tape.constant(t));
        let l = mse_loss(&mut tape, pv, tv).unwrap();
        assert!((tape.value(l).item().unwrap() - expect).abs() <= 1e-12);
    }

    #[test]
    fn mse_nonnegative_iff_equal_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = rand_tensor(&mut rng, vec![4, 5]);
        let t = rand_tensor(&mut rng, vec![4, 5]);
        let loss = |pred: &Tensor, truth: &Tensor| {
            let mut tape = Tape::new();
            let (pv, tv) = (tape.constant(pred.clone()), tape.constant(truth.clone()));
            let l = mse_loss(&mut tape, pv, tv).unwrap();
            tape.value(l).item().unwrap()
        };
        assert!(loss(&p, &t) > 0.0);
        assert_eq!(loss(&p, &p), 0.0);
        // permute batch rows identically in pred and truth
        let permute = |x: &Tensor| {
            let mut d = Vec::new();
            for &i in &[2usize, 0, 3, 1] {
                d.extend_from_slice(&x.data()[i * 5..(i + 1) * 5]);
            }
            Tensor::new(vec![4, 5], d).unwrap()
        };
        let a = loss(&p, &t);
        let b = loss(&permute(&p), &permute(&t));
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_and_monotone_one_hot() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 10]));
        let l = classification_loss(&mut tape, logits, &[4], ClassLossKind::CrossEntropy).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_10).abs() < 1e-12);

        // larger one-hot magnitude -> smaller loss, toward zero
        let mut prev = f64::INFINITY;
        for &mag in &[1.0, 10.0, 100.0] {
            let mut tape = Tape::new();
            let mut row = vec![0.0; 10];
            row[4] = mag;
            let logits = tape.constant(Tensor::new(vec![1, 10], row).unwrap());
            let l = tape.cross_entropy_logits(logits, &[4]).unwrap();
            let v = tape.value(l).item().unwrap();
            assert!(v < prev, "loss should fall with magnitude: {v} !< {prev}");
            prev = v;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = rand_tensor(&mut rng, vec![6, 9]);
        let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..9)).collect();
        // independent log-sum-exp oracle
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data()[i * 9..(i + 1) * 9];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expect += lse - row[y];
        }
        expect /= 6.0;
        let mut tape = Tape::new();
        let lv = tape.constant(logits);
        let l = tape.cross_entropy_logits(lv, &labels).unwrap();
        assert!((tape.value(l).item().unwrap() - expect).abs() <= 1e-10);
    }

    #[test]
    fn task_losses_pass_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let truth = rand_tensor(&mut rng, vec![3, 6]);
        let err = finite_diff_check(
            |tape, pred| {
                let tv = tape.constant(truth.clone());
                mse_loss(tape, pred, tv)
            },
            &rand_tensor(&mut rng, vec![3, 6]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "mse FD {err}");

        let labels = vec![1usize, 0, 3];
        for kind in [ClassLossKind::CrossEntropy, ClassLossKind::MseOneHot] {
            let err = finite_diff_check(
                |tape, logits| classification_loss(tape, logits, &labels, kind),
                &rand_tensor(&mut rng, vec![3, 4]),
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{kind:?} FD {err}");
        }
    }

    #[test]
    fn full_small_cnn_gradient_matches_finite_differences() {
        // gradient w.r.t. the input image through the whole network + loss
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        init_task_params(&cfg, &mut store, 21);
        // non-zero head so the loss actually depends on the input
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        store.insert("task.head.w", rand_tensor(&mut rng, vec![cfg.fc_hidden, 4]));
        let labels = vec![2usize, 0];
        let x = rand_tensor(&mut rng, vec![2, 1, 8, 8]);
        let err = finite_diff_check(
            |tape, xv| {
                let binding = ParamBinding::bind(tape, &store, false);
                let logits = task_forward(tape, &binding, &cfg, xv)?;
                tape.cross_entropy_logits(logits, &labels)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "CNN input FD error {err}");

        // gradient w.r.t. conv1 weights through the same pipeline
        let w1 = store.get("task.conv1.w").unwrap().clone();
        let xt = x.clone();
        let err = finite_diff_check(
            |tape, wv| {
                let mut probe = store.clone();
                probe.insert("task.conv1.w", tape.value(wv).clone());
                let binding = ParamBinding::bind_with_override(tape, &probe, "task.conv1.w", wv);
                let xc = tape.constant(xt.clone());
                let logits = task_forward(tape, &binding, &cfg, xc)?;
                tape.cross_entropy_logits(logits, &labels)
            },
            &w1,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "CNN weight FD error {err}");
    }

    #[test]
    fn batching_helpers_validate_truth_kinds() {
        let s = gen_digit_sample(3, 1, 28);
        let refs = vec![&s];
        assert!(batch_labels(&refs).is_ok());
        assert!(batch_landmarks(&refs).is_err());
    }
}
