use degia_core::data::{
    colorize_shift, gen_digit_sample, replicate_gray, ColorShiftConfig, DatasetSplit,
};
use degia_core::trainer::{train, PerturbBudget, TrainConfig, TrainJob};
use std::time::Instant;

fn mnist_job(n_train: usize, n_test: usize) -> TrainJob {
    let mut train = DatasetSplit::new("train", 0);
    for i in 0..n_train as u64 {
        let s = gen_digit_sample((i % 10) as usize, i, 28);
        train.samples.push(replicate_gray(&s).unwrap());
    }
    let mut test_src = DatasetSplit::new("test_source", 1);
    let mut test_shift = DatasetSplit::new("test_shift", 2);
    for i in 0..n_test as u64 {
        let seed = 1_000_000 + i;
        let s = gen_digit_sample((i % 10) as usize, seed, 28);
        test_src.samples.push(replicate_gray(&s).unwrap());
        test_shift
            .samples
            .push(colorize_shift(&s, seed, ColorShiftConfig::default()).unwrap());
    }
    TrainJob {
        train,
        evals: vec![("test_source".into(), test_src), ("test_shift".into(), test_shift)],
    }
}

#[test]
fn pilot_timing() {
    let t0 = Instant::now();
    let job = mnist_job(2000, 500);
    println!("data gen: {:?}", t0.elapsed());

    let cfg = TrainConfig {
        perturb: PerturbBudget::Fraction(0.2),
        max_rounds: 1,
        epochs_per_round: 2,
        ascent_steps: 10,
        ascent_step_size: 0.1,
        flow_hidden: 16,
        lr: 1e-4,
        seed: 42,
        ..TrainConfig::default()
    };
    let t1 = Instant::now();
    let out = train(&cfg, &job).unwrap();
    println!("train (2000 samples, 2 segs x 2 epochs + 1 max round): {:?}", t1.elapsed());
    for r in &out.metrics.rows {
        println!(
            "round {} epoch {} {} {} = {:.4}",
            r.round, r.epoch, r.split, r.metric_name, r.value
        );
    }
}
