//! Two-phase min-max training: minimization of the combined task +
//! negative-log-likelihood loss over the active training set, alternating
//! with adversarial synthesis of new samples by gradient ascent on input
//! pixels. Synthesized samples join the active set, and training continues
//! on the grown set.
//!
//! Schedule: an initial minimization segment always runs; each round then
//! adds one maximization phase followed by another minimization segment.
//! `max_rounds = 0` is therefore exactly the joint baseline with no
//! adversarial augmentation, sharing every line of minimization code with
//! the full path.

use crate::data::{DatasetSplit, ImageSample, Truth, DEQUANT_AMPLITUDE};
use crate::error::{DegiaError, Result};
use crate::flow::{forward_map, init_flow_params, log_likelihood_rows, FlowConfig};
use crate::gaussians::{init_bank_params, sample_noise, GaussianBankConfig};
use crate::metrics::MetricsLog;
use crate::model::{
    batch_input, batch_labels, batch_landmarks, classification_loss, classification_rows,
    init_task_params, mse_loss, mse_rows, task_forward, ClassLossKind, HeadKind, TaskNetConfig,
};
use crate::optim::Adam;
use crate::params::{ParamBinding, ParamStore};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How many samples each maximization round perturbs: a fraction of the
/// active set or a fixed count. Exactly one applies by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbBudget {
    Fraction(f64),
    FixedCount(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Lagrange weight on the distance penalties in the ascent objective.
    pub alpha: f64,
    pub perturb: PerturbBudget,
    /// Class-separation scale of the latent Gaussians.
    pub gamma: f64,
    /// Noise-shift weight of the latent Gaussians.
    pub lambda: f64,
    /// Weight on the mean negative log-likelihood term.
    pub w_nll: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Number of maximization rounds (each followed by a minimization
    /// segment). Zero disables adversarial augmentation entirely.
    pub max_rounds: usize,
    pub epochs_per_round: usize,
    pub ascent_steps: usize,
    pub ascent_step_size: f64,
    pub seed: u64,
    pub flow_blocks: usize,
    pub flow_hidden: usize,
    pub flow_scale_bound: f64,
    pub noise_dim: usize,
    pub class_loss: ClassLossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            perturb: PerturbBudget::Fraction(0.2),
            gamma: 1.0,
            lambda: 0.1,
            w_nll: 0.01,
            lr: 1e-4,
            batch_size: 128,
            max_rounds: 5,
            epochs_per_round: 1,
            ascent_steps: 15,
            ascent_step_size: 0.1,
            seed: 0,
            flow_blocks: 6,
            flow_hidden: 32,
            flow_scale_bound: 2.0,
            noise_dim: 8,
            class_loss: ClassLossKind::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match self.perturb {
            PerturbBudget::Fraction(b) if !(b > 0.0 && b <= 1.0) => {
                return Err(DegiaError::contract(
                    "TrainConfig",
                    format!("perturb fraction {b} outside (0, 1]"),
                ))
            }
            PerturbBudget::FixedCount(0) => {
                return Err(DegiaError::contract("TrainConfig", "fixed perturb count must be >= 1"))
            }
            _ => {}
        }
        if self.alpha < 0.0 {
            return Err(DegiaError::contract("TrainConfig", format!("alpha {} < 0", self.alpha)));
        }
        if !(self.lr > 0.0) {
            return Err(DegiaError::contract("TrainConfig", format!("lr {} <= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(DegiaError::contract("TrainConfig", "batch_size must be >= 1"));
        }
        if self.epochs_per_round == 0 {
            return Err(DegiaError::contract("TrainConfig", "epochs_per_round must be >= 1"));
        }
        Ok(())
    }
}

/// The three model configurations a training run instantiates together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub task: TaskNetConfig,
    pub flow: FlowConfig,
    pub bank: GaussianBankConfig,
    pub class_loss: ClassLossKind,
}

/// Training data plus named evaluation splits logged after each segment.
#[derive(Debug, Clone)]
pub struct TrainJob {
    pub train: DatasetSplit,
    pub evals: Vec<(String, DatasetSplit)>,
}

/// Provenance of one synthesized sample. Images are channel-major f32.
#[derive(Debug, Clone)]
pub struct PerturbationRecord {
    pub source_index: usize,
    pub x_src: Vec<f32>,
    pub x_new: Vec<f32>,
    pub loss_before: f64,
    pub loss_after: f64,
    pub round: u32,
}

impl PerturbationRecord {
    /// Euclidean distance between the source and synthesized images.
    pub fn shift_norm(&self) -> f64 {
        self.x_src
            .iter()
            .zip(&self.x_new)
            .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub params: ParamStore,
    pub metrics: MetricsLog,
    pub records: Vec<PerturbationRecord>,
}

/// Failure carrying the last consistent parameter snapshot, so callers can
/// checkpoint the state preceding the abort.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: DegiaError,
    pub last_good: Option<(ModelBundle, ParamStore)>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for TrainFailure {}

impl From<DegiaError> for TrainFailure {
    fn from(error: DegiaError) -> Self {
        TrainFailure { error, last_good: None }
    }
}

enum BatchTruth {
    Classes(Vec<usize>),
    Landmarks(Tensor),
}

fn batch_truth(samples: &[&ImageSample]) -> Result<BatchTruth> {
    match samples
        .first()
        .ok_or_else(|| DegiaError::contract("batch_truth", "empty batch".to_string()))?
        .truth
    {
        Truth::Class(_) => Ok(BatchTruth::Classes(batch_labels(samples)?)),
        Truth::Landmarks(_) => Ok(BatchTruth::Landmarks(batch_landmarks(samples)?)),
    }
}

fn bank_labels(truth: &BatchTruth, batch: usize) -> Vec<usize> {
    match truth {
        BatchTruth::Classes(labels) => labels.clone(),
        // single-class latent bank for regression tasks
        BatchTruth::Landmarks(_) => vec![0; batch],
    }
}

struct CombinedLoss {
    total: Var,
    task: Var,
    mean_nll: Var,
}

/// Eq.-style combined objective: task loss plus `w_nll` times the mean
/// negative log-likelihood of the batch under the flow.
fn combined_loss_parts(
    tape: &mut Tape,
    binding: &ParamBinding,
    bundle: &ModelBundle,
    x: Var,
    truth: &BatchTruth,
    noise: &[f64],
    dequant: &Tensor,
    w_nll: f64,
) -> Result<CombinedLoss> {
    let batch = tape.shape(x)[0];
    let pred = task_forward(tape, binding, &bundle.task, x)?;
    let task = match truth {
        BatchTruth::Classes(labels) => classification_loss(tape, pred, labels, bundle.class_loss)?,
        BatchTruth::Landmarks(t) => {
            let tv = tape.constant(t.clone());
            mse_loss(tape, pred, tv)?
        }
    };

    let flat = tape.reshape(x, vec![batch, bundle.flow.dim])?;
    let dq = tape.constant(dequant.clone());
    let flow_in = tape.add(flat, dq)?;
    let labels = bank_labels(truth, batch);
    let ll = log_likelihood_rows(tape, binding, &bundle.flow, &bundle.bank, flow_in, &labels, noise)?;
    let mean_ll = tape.mean(ll);
    let mean_nll = tape.scale(mean_ll, -1.0);
    let weighted = tape.scale(mean_nll, w_nll);
    let total = tape.add(task, weighted)?;
    Ok(CombinedLoss { total, task, mean_nll })
}

/// Public wrapper over the combined loss; returns the scalar objective.
pub fn combined_loss(
    tape: &mut Tape,
    binding: &ParamBinding,
    bundle: &ModelBundle,
    samples: &[&ImageSample],
    noise: &[f64],
    dequant: &Tensor,
    w_nll: f64,
) -> Result<Var> {
    let truth = batch_truth(samples)?;
    let x = tape.constant(batch_input(samples)?);
    Ok(combined_loss_parts(tape, binding, bundle, x, &truth, noise, dequant, w_nll)?.total)
}

struct PerturbObjective {
    /// Sum over the batch; ascending this is per-sample independent ascent.
    sum: Var,
    /// Per-sample objective values `[b]`.
    per_sample: Var,
}

/// The relaxed ascent objective
/// `J(x) = loss(x, y, c) - alpha * (d_latent(x, x_src) + d_output(x, x_src))`
/// with both distances mean-squared over their coordinates. `src_latent`
/// and `src_output` are the frozen F and M responses at the source images.
#[allow(clippy::too_many_arguments)]
fn perturbation_objective_parts(
    tape: &mut Tape,
    binding: &ParamBinding,
    bundle: &ModelBundle,
    x: Var,
    truth: &BatchTruth,
    noise: &[f64],
    dequant: &Tensor,
    src_latent: &Tensor,
    src_output: &Tensor,
    alpha: f64,
    w_nll: f64,
) -> Result<PerturbObjective> {
    let batch = tape.shape(x)[0];
    if src_latent.shape() != [batch, bundle.flow.dim] {
        return Err(DegiaError::shape(
            "perturbation_objective",
            format!("src_latent {:?} vs [{batch}, {}]", src_latent.shape(), bundle.flow.dim),
        ));
    }

    let pred = task_forward(tape, binding, &bundle.task, x)?;
    let task_rows = match truth {
        BatchTruth::Classes(labels) => classification_rows(tape, pred, labels, bundle.class_loss)?,
        BatchTruth::Landmarks(t) => {
            let tv = tape.constant(t.clone());
            mse_rows(tape, pred, tv)?
        }
    };

    let flat = tape.reshape(x, vec![batch, bundle.flow.dim])?;
    let dq = tape.constant(dequant.clone());
    let flow_in = tape.add(flat, dq)?;
    let labels = bank_labels(truth, batch);
    let (z, log_det) = forward_map(tape, binding, &bundle.flow, flow_in)?;
    let prior = crate::gaussians::log_density_rows(tape, binding, &bundle.bank, z, &labels, noise)?;
    let ll_rows = tape.add(prior, log_det)?;
    let nll_rows = tape.scale(ll_rows, -w_nll);
    let mut j = tape.add(task_rows, nll_rows)?;

    if alpha != 0.0 {
        let zsrc = tape.constant(src_latent.clone());
        let dz = tape.sub(z, zsrc)?;
        let dz2 = tape.mul(dz, dz)?;
        let dlat = tape.sum_axis1(dz2)?;
        let dlat = tape.scale(dlat, 1.0 / bundle.flow.dim as f64);

        let msrc = tape.constant(src_output.clone());
        let dm = tape.sub(pred, msrc)?;
        let dm2 = tape.mul(dm, dm)?;
        let dout = tape.sum_axis1(dm2)?;
        let dout = tape.scale(dout, 1.0 / bundle.task.head.output_width() as f64);

        let dist = tape.add(dlat, dout)?;
        let penalty = tape.scale(dist, -alpha);
        j = tape.add(j, penalty)?;
    }

    let sum = tape.sum(j);
    Ok(PerturbObjective { sum, per_sample: j })
}

/// Public wrapper: per-sample values of the ascent objective for a batch
/// of samples at their current pixels.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_objective(
    tape: &mut Tape,
    binding: &ParamBinding,
    bundle: &ModelBundle,
    samples: &[&ImageSample],
    noise: &[f64],
    dequant: &Tensor,
    src_latent: &Tensor,
    src_output: &Tensor,
    alpha: f64,
    w_nll: f64,
) -> Result<Var> {
    let truth = batch_truth(samples)?;
    let x = tape.constant(batch_input(samples)?);
    let obj = perturbation_objective_parts(
        tape, binding, bundle, x, &truth, noise, dequant, src_latent, src_output, alpha, w_nll,
    )?;
    Ok(obj.per_sample)
}

/// Uniform sample without replacement of the indices a maximization round
/// will perturb.
pub fn select_perturb_subset(
    active_len: usize,
    budget: &PerturbBudget,
    round_seed: u64,
) -> Result<Vec<usize>> {
    if active_len == 0 {
        return Err(DegiaError::contract("select_perturb_subset", "empty split".to_string()));
    }
    let count = match budget {
        PerturbBudget::Fraction(b) => (b * active_len as f64).round() as usize,
        PerturbBudget::FixedCount(c) => *c,
    };
    if count > active_len {
        return Err(DegiaError::contract(
            "select_perturb_subset",
            format!("requested {count} of {active_len} samples"),
        ));
    }
    let mut rng = seeds::rng_for(round_seed, seeds::stream::SUBSET, 0);
    let mut indices: Vec<usize> = (0..active_len).collect();
    indices.shuffle(&mut rng);
    indices.truncate(count);
    Ok(indices)
}

fn dequant_tensor(batch: usize, dim: usize, seed: u64, counter: u64) -> Tensor {
    let mut rng = seeds::rng_for(seed, seeds::stream::DEQUANT, counter);
    let data = (0..batch * dim).map(|_| rng.gen_range(0.0..DEQUANT_AMPLITUDE)).collect();
    Tensor::new(vec![batch, dim], data).expect("sized")
}

pub struct MaxPhaseOutcome {
    pub records: Vec<PerturbationRecord>,
    pub new_samples: Vec<ImageSample>,
    pub aborted: usize,
}

/// One maximization phase: gradient ascent on pixels of the selected
/// subset, model parameters frozen, iterates clipped to [0,1]. Samples
/// whose gradient goes non-finite are skipped with a diagnostic count.
pub fn maximization_phase(
    params: &ParamStore,
    bundle: &ModelBundle,
    active: &[ImageSample],
    subset: &[usize],
    cfg: &TrainConfig,
    round: u32,
    noise: &[f64],
) -> Result<MaxPhaseOutcome> {
    if subset.is_empty() {
        return Err(DegiaError::contract("maximization_phase", "empty subset".to_string()));
    }
    let mut outcome =
        MaxPhaseOutcome { records: Vec::with_capacity(subset.len()), new_samples: Vec::new(), aborted: 0 };
    let dim = bundle.flow.dim;

    for (chunk_no, chunk) in subset.chunks(cfg.batch_size).enumerate() {
        let samples: Vec<&ImageSample> = chunk.iter().map(|&i| &active[i]).collect();
        let truth = batch_truth(&samples)?;
        let b = samples.len();
        let x0 = batch_input(&samples)?;
        // one noise draw per chunk, shared across ascent steps so the
        // objective is stable during the climb
        let dequant = dequant_tensor(
            b,
            dim,
            seeds::mix(cfg.seed, 0xDEAD, round as u64),
            chunk_no as u64,
        );

        // frozen source responses
        let (src_latent, src_output, loss_before) = {
            let mut tape = Tape::new();
            let binding = ParamBinding::bind(&mut tape, params, false);
            let xv = tape.leaf(x0.clone(), false);
            let pred = task_forward(&mut tape, &binding, &bundle.task, xv)?;
            let flat = tape.reshape(xv, vec![b, dim])?;
            let dq = tape.constant(dequant.clone());
            let flow_in = tape.add(flat, dq)?;
            let (z, _) = forward_map(&mut tape, &binding, &bundle.flow, flow_in)?;
            let src_latent = tape.value(z).clone();
            let src_output = tape.value(pred).clone();
            // J at the source: both penalty terms vanish exactly
            let obj = perturbation_objective_parts(
                &mut tape,
                &binding,
                bundle,
                xv,
                &truth,
                noise,
                &dequant,
                &src_latent,
                &src_output,
                cfg.alpha,
                cfg.w_nll,
            )?;
            (src_latent, src_output, tape.value(obj.per_sample).data().to_vec())
        };

        let mut x_cur = x0.clone();
        let mut frozen = vec![false; b];
        for _step in 0..cfg.ascent_steps {
            let mut tape = Tape::new();
            let binding = ParamBinding::bind(&mut tape, params, false);
            let xv = tape.leaf(x_cur.clone(), true);
            let obj = perturbation_objective_parts(
                &mut tape,
                &binding,
                bundle,
                xv,
                &truth,
                noise,
                &dequant,
                &src_latent,
                &src_output,
                cfg.alpha,
                cfg.w_nll,
            )?;
            tape.backward(obj.sum)?;
            let g = tape
                .grad(xv)
                .ok_or_else(|| DegiaError::contract("maximization_phase", "missing ascent gradient"))?;
            let stride = dim;
            let data = x_cur.data_mut();
            for s in 0..b {
                if frozen[s] {
                    continue;
                }
                let gs = &g[s * stride..(s + 1) * stride];
                if gs.iter().any(|v| !v.is_finite()) {
                    frozen[s] = true;
                    continue;
                }
                for (xi, gi) in data[s * stride..(s + 1) * stride].iter_mut().zip(gs) {
                    *xi = (*xi + cfg.ascent_step_size * gi).clamp(0.0, 1.0);
                }
            }
        }

        // final objective values at the climbed points
        let loss_after = {
            let mut tape = Tape::new();
            let binding = ParamBinding::bind(&mut tape, params, false);
            let xv = tape.leaf(x_cur.clone(), false);
            let obj = perturbation_objective_parts(
                &mut tape,
                &binding,
                bundle,
                xv,
                &truth,
                noise,
                &dequant,
                &src_latent,
                &src_output,
                cfg.alpha,
                cfg.w_nll,
            )?;
            tape.value(obj.per_sample).data().to_vec()
        };

        for (s, &src_idx) in chunk.iter().enumerate() {
            if frozen[s] {
                outcome.aborted += 1;
                continue;
            }
            let x_src: Vec<f32> =
                x0.data()[s * dim..(s + 1) * dim].iter().map(|&v| v as f32).collect();
            let x_new: Vec<f32> =
                x_cur.data()[s * dim..(s + 1) * dim].iter().map(|&v| v as f32).collect();
            let mut sample = active[src_idx].clone();
            sample.set_from_chw(&x_cur.data()[s * dim..(s + 1) * dim])?;
            outcome.new_samples.push(sample);
            outcome.records.push(PerturbationRecord {
                source_index: src_idx,
                x_src,
                x_new,
                loss_before: loss_before[s],
                loss_after: loss_after[s],
                round,
            });
        }
    }
    Ok(outcome)
}

/// Evaluate arbitrary predictions against a split: classification accuracy
/// (percent) or landmark MSE under the mean-over-batch-and-coordinates
/// convention. The predictor is called per batch with sample references
/// and must return one output row per sample.
pub fn evaluate_with<F>(mut predict: F, split: &DatasetSplit, batch_size: usize) -> Result<(String, f64)>
where
    F: FnMut(&[&ImageSample]) -> Result<Vec<Vec<f64>>>,
{
    if split.is_empty() {
        return Err(DegiaError::contract("evaluate", "empty split".to_string()));
    }
    let classification = matches!(split.samples[0].truth, Truth::Class(_));
    for s in &split.samples {
        let is_class = matches!(s.truth, Truth::Class(_));
        if is_class != classification {
            return Err(DegiaError::contract(
                "evaluate",
                "mixed truth kinds in one split".to_string(),
            ));
        }
    }

    let mut correct = 0usize;
    let mut sq_sum = 0.0f64;
    let mut coord_count = 0usize;
    let refs: Vec<&ImageSample> = split.samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let outputs = predict(chunk)?;
        if outputs.len() != chunk.len() {
            return Err(DegiaError::contract(
                "evaluate",
                format!("{} outputs for {} samples", outputs.len(), chunk.len()),
            ));
        }
        for (sample, out) in chunk.iter().zip(&outputs) {
            match &sample.truth {
                Truth::Class(label) => {
                    let pred = out
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    if pred == *label {
                        correct += 1;
                    }
                }
                Truth::Landmarks(pts) => {
                    for (k, p) in pts.iter().enumerate() {
                        let dx = out[2 * k] - p[0];
                        let dy = out[2 * k + 1] - p[1];
                        sq_sum += dx * dx + dy * dy;
                        coord_count += 2;
                    }
                }
            }
        }
    }
    if classification {
        Ok(("accuracy_pct".to_string(), 100.0 * correct as f64 / split.len() as f64))
    } else {
        Ok(("landmark_mse".to_string(), sq_sum / coord_count as f64))
    }
}

/// Evaluate a trained task network on a split.
pub fn evaluate(
    params: &ParamStore,
    task_cfg: &TaskNetConfig,
    split: &DatasetSplit,
    batch_size: usize,
) -> Result<(String, f64)> {
    evaluate_with(
        |chunk| {
            let mut tape = Tape::new();
            let binding = ParamBinding::bind(&mut tape, params, false);
            let x = tape.constant(batch_input(chunk)?);
            let pred = task_forward(&mut tape, &binding, task_cfg, x)?;
            let width = task_cfg.head.output_width();
            let data = tape.value(pred).data();
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(i, _)| data[i * width..(i + 1) * width].to_vec())
                .collect())
        },
        split,
        batch_size,
    )
}

fn infer_bundle(cfg: &TrainConfig, job: &TrainJob) -> Result<ModelBundle> {
    let first = job
        .train
        .samples
        .first()
        .ok_or_else(|| DegiaError::contract("train", "empty training split".to_string()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    for (name, split) in std::iter::once((&"train".to_string(), &job.train))
        .chain(job.evals.iter().map(|(n, s)| (n, s)))
    {
        for s in &split.samples {
            if (s.channels, s.height, s.width) != (c, h, w) {
                return Err(DegiaError::shape(
                    "train",
                    format!("split {name:?} mixes sample shapes"),
                ));
            }
        }
    }
    let head = match first.truth {
        Truth::Class(_) => {
            let mut classes = 0usize;
            for split in std::iter::once(&job.train).chain(job.evals.iter().map(|(_, s)| s)) {
                for s in &split.samples {
                    if let Truth::Class(l) = s.truth {
                        classes = classes.max(l + 1);
                    }
                }
            }
            HeadKind::Classification { classes }
        }
        Truth::Landmarks(_) => HeadKind::LandmarkRegression,
    };
    let task = TaskNetConfig::lenet_small(c, h, w, head);
    task.validate()?;
    let flow = FlowConfig {
        dim: c * h * w,
        blocks: cfg.flow_blocks,
        hidden: cfg.flow_hidden,
        scale_bound: cfg.flow_scale_bound,
    };
    flow.validate()?;
    let bank = GaussianBankConfig {
        classes: match head {
            HeadKind::Classification { classes } => classes,
            HeadKind::LandmarkRegression => 1,
        },
        dim: flow.dim,
        noise_dim: cfg.noise_dim,
        gamma: cfg.gamma,
        lambda: cfg.lambda,
    };
    bank.validate()?;
    Ok(ModelBundle { task, flow, bank, class_loss: cfg.class_loss })
}

pub fn init_params(bundle: &ModelBundle, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_task_params(&bundle.task, &mut store, seed);
    init_flow_params(&bundle.flow, &mut store, seed);
    init_bank_params(&bundle.bank, &mut store, seed);
    store
}

/// Run the full min-max procedure. Deterministic for a fixed config and
/// job in single-threaded mode: reruns produce identical metrics,
/// parameters and records.
pub fn train(cfg: &TrainConfig, job: &TrainJob) -> std::result::Result<TrainOutput, TrainFailure> {
    cfg.validate()?;
    let bundle = infer_bundle(cfg, job)?;
    let mut params = init_params(&bundle, cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut metrics = MetricsLog::new();
    let mut records: Vec<PerturbationRecord> = Vec::new();
    let mut active: Vec<ImageSample> = job.train.samples.clone();
    let mut last_good = params.clone();

    let mut epoch_counter: u64 = 0;
    let mut batch_counter: u64 = 0;

    for round in 0..=cfg.max_rounds as u32 {
        let noise = sample_noise(&bundle.bank, seeds::mix(cfg.seed, 0x4E01, round as u64));

        if round > 0 {
            let subset = select_perturb_subset(
                active.len(),
                &cfg.perturb,
                seeds::mix(cfg.seed, 0x5B5E7, round as u64),
            )
            .map_err(|error| TrainFailure { error, last_good: snapshot(&bundle, &last_good) })?;
            let outcome = maximization_phase(&params, &bundle, &active, &subset, cfg, round, &noise)
                .map_err(|error| TrainFailure { error, last_good: snapshot(&bundle, &last_good) })?;
            let mean_shift = if outcome.records.is_empty() {
                0.0
            } else {
                outcome.records.iter().map(PerturbationRecord::shift_norm).sum::<f64>()
                    / outcome.records.len() as f64
            };
            metrics.push(round, 0, "perturb", "records", outcome.records.len() as f64, cfg.seed);
            metrics.push(round, 0, "perturb", "aborted", outcome.aborted as f64, cfg.seed);
            metrics.push(round, 0, "perturb", "mean_shift", mean_shift, cfg.seed);
            active.extend(outcome.new_samples);
            records.extend(outcome.records);
            metrics.push(round, 0, "train", "active_size", active.len() as f64, cfg.seed);
        }

        for epoch in 0..cfg.epochs_per_round as u32 {
            let mut order: Vec<usize> = (0..active.len()).collect();
            order.shuffle(&mut seeds::rng_for(cfg.seed, seeds::stream::SHUFFLE, epoch_counter));

            let (mut sum_total, mut sum_task, mut sum_nll, mut batches) = (0.0, 0.0, 0.0, 0u32);
            for chunk in order.chunks(cfg.batch_size) {
                let samples: Vec<&ImageSample> = chunk.iter().map(|&i| &active[i]).collect();
                let truth = batch_truth(&samples)
                    .map_err(|error| TrainFailure { error, last_good: snapshot(&bundle, &last_good) })?;
                let x0 = batch_input(&samples)
                    .map_err(|error| TrainFailure { error, last_good: snapshot(&bundle, &last_good) })?;
                let dequant = dequant_tensor(samples.len(), bundle.flow.dim, cfg.seed, batch_counter);
                batch_counter += 1;

                let step = (|| -> Result<(f64, f64, f64)> {
                    let mut tape = Tape::new();
                    let binding = ParamBinding::bind(&mut tape, &params, true);
                    let x = tape.leaf(x0.clone(), false);
                    let loss = combined_loss_parts(
                        &mut tape, &binding, &bundle, x, &truth, &noise, &dequant, cfg.w_nll,
                    )?;
                    let total = tape.value(loss.total).item()?;
                    if !total.is_finite() {
                        return Err(DegiaError::TrainAbort(format!(
                            "non-finite combined loss {total} in round {round} epoch {epoch}"
                        )));
                    }
                    let task = tape.value(loss.task).item()?;
                    let nll = tape.value(loss.mean_nll).item()?;
                    tape.backward(loss.total)?;
                    let grads = binding.gradients(&tape, &params)?;
                    drop(tape);
                    adam.step(&mut params, &grads)?;
                    Ok((total, task, nll))
                })();
                let (total, task, nll) = step.map_err(|error| TrainFailure {
                    error,
                    last_good: snapshot(&bundle, &last_good),
                })?;
                sum_total += total;
                sum_task += task;
                sum_nll += nll;
                batches += 1;
            }

            metrics.push(round, epoch, "train", "combined_loss", sum_total / batches as f64, cfg.seed);
            metrics.push(round, epoch, "train", "task_loss", sum_task / batches as f64, cfg.seed);
            metrics.push(round, epoch, "train", "mean_nll", sum_nll / batches as f64, cfg.seed);
            epoch_counter += 1;
            last_good = params.clone();
        }

        for (name, split) in &job.evals {
            let (metric, value) = evaluate(&params, &bundle.task, split, cfg.batch_size)
                .map_err(|error| TrainFailure { error, last_good: snapshot(&bundle, &last_good) })?;
            metrics.push(round, cfg.epochs_per_round as u32 - 1, name, &metric, value, cfg.seed);
        }
    }

    Ok(TrainOutput { bundle, params, metrics, records })
}

fn snapshot(bundle: &ModelBundle, params: &ParamStore) -> Option<(ModelBundle, ParamStore)> {
    Some((bundle.clone(), params.clone()))
}

/// One-at-a-time ablation over lambda, alpha and the perturb fraction,
/// everything else at the base configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AblationGrid {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub varied: String,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    /// (split, metric, value) triples from the cell's evaluation.
    pub results: Vec<(String, String, f64)>,
}

fn grid_configs(base: &TrainConfig, grid: &AblationGrid) -> Vec<(String, TrainConfig)> {
    let mut cells = Vec::new();
    for &l in &grid.lambdas {
        let mut c = base.clone();
        c.lambda = l;
        cells.push(("lambda".to_string(), c));
    }
    for &a in &grid.alphas {
        let mut c = base.clone();
        c.alpha = a;
        cells.push(("alpha".to_string(), c));
    }
    for &b in &grid.betas {
        let mut c = base.clone();
        c.perturb = PerturbBudget::Fraction(b);
        cells.push(("beta".to_string(), c));
    }
    cells
}

fn run_cell(varied: &str, cfg: &TrainConfig, job: &TrainJob) -> Result<AblationCell> {
    let out = train(cfg, job).map_err(|f| f.error)?;
    let mut results = Vec::new();
    for (name, split) in &job.evals {
        let (metric, value) = evaluate(&out.params, &out.bundle.task, split, cfg.batch_size)?;
        results.push((name.clone(), metric, value));
    }
    let beta = match cfg.perturb {
        PerturbBudget::Fraction(b) => b,
        PerturbBudget::FixedCount(c) => c as f64,
    };
    Ok(AblationCell {
        varied: varied.to_string(),
        lambda: cfg.lambda,
        alpha: cfg.alpha,
        beta,
        seed: cfg.seed,
        results,
    })
}

/// Run every grid cell with a shared base seed. Cells are independent
/// jobs; `threads > 1` fans them out while keeping results in grid order.
pub fn ablate(
    base: &TrainConfig,
    grid: &AblationGrid,
    job: &TrainJob,
    threads: usize,
) -> Result<Vec<AblationCell>> {
    let cells = grid_configs(base, grid);
    if cells.is_empty() {
        return Err(DegiaError::contract("ablate", "empty grid".to_string()));
    }
    if threads <= 1 {
        return cells.iter().map(|(v, c)| run_cell(v, c, job)).collect();
    }
    let per = cells.len().div_ceil(threads);
    let chunk_results: Vec<Vec<Result<AblationCell>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cells
            .chunks(per)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk.iter().map(|(v, c)| run_cell(v, c, job)).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    });
    chunk_results.into_iter().flatten().collect()
}
