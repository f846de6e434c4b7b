use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vicatda_core::catda::{catda_objective_step, loss_cat_adv_f, CatdaOptions, LabeledBatch};
use vicatda_core::numcore::GroupRates;
use vicatda_core::tdsr::{refine_features, ClusterState};
use vicatda_core::vicda::{vicatda_objective_step, BetaSampler};
use vicatda_core::{JointModel, Matrix, ModelConfig, OptimizerState};

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

fn batch(n: usize, rng: &mut ChaCha8Rng) -> LabeledBatch {
    let xs = random_matrix(n, 2, rng);
    let xt = random_matrix(n, 2, rng);
    LabeledBatch::new(xs, (0..n).map(|i| i % 2).collect(), xt).unwrap()
}

fn model() -> JointModel {
    JointModel::new(ModelConfig::new(2, vec![16, 16], 2), 0).unwrap()
}

fn forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = model();
    let b = batch(32, &mut rng);
    c.bench_function("forward_32", |bench| bench.iter(|| m.forward(&b.xs).unwrap()));
    c.bench_function("category_loss_and_gradient_32", |bench| {
        bench.iter(|| loss_cat_adv_f(&m, &b).unwrap())
    });
}

fn steps(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = batch(32, &mut rng);
    let opts = CatdaOptions::default();
    let rates = GroupRates::uniform(0.01);
    c.bench_function("catda_step_32", |bench| {
        bench.iter_batched(
            || {
                let m = model();
                let opt = OptimizerState::with_defaults(&m.params);
                (m, opt)
            },
            |(mut m, mut opt)| catda_objective_step(&mut m, &b, 0.5, &opts, &mut opt, rates).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("vicatda_step_32", |bench| {
        bench.iter_batched(
            || {
                let m = model();
                let opt = OptimizerState::with_defaults(&m.params);
                (m, opt, BetaSampler::new(0.2, 3).unwrap())
            },
            |(mut m, mut opt, mut s)| vicatda_objective_step(&mut m, &b, 0.5, &opts, &mut s, &mut opt, rates).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn clustering(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let features = random_matrix(500, 16, &mut rng);
    let labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
    let state = ClusterState::from_labels(&features, &labels, 4).unwrap();
    c.bench_function("spherical_kmeans_500x16", |bench| {
        bench.iter_batched(
            || state.clone(),
            |s| refine_features(s, &features, 100).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, forward_backward, steps, clustering);
criterion_main!(benches);
