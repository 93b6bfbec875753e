use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use pmgan_core::tensor::{conv_same, matmul};
use pmgan_core::trainer::{run_epochs, NoObserver, TrainState};
use pmgan_core::{synthesize, SynthConfig, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("matmul");
    for &(m, k, n) in &[(30, 128, 12), (30, 128, 1), (128, 128, 128)] {
        let (a, b) = (random(&[m, k], &mut rng), random(&[k, n], &mut rng));
        g.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), &(a, b), |bench, (a, b)| {
            bench.iter(|| matmul(black_box(a), black_box(b)).unwrap())
        });
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("conv_same");
    for &(hw, d, k) in &[(4, 8, 3), (4, 8, 1), (16, 16, 3)] {
        let x = random(&[hw, hw, d], &mut rng);
        let w = random(&[k, k, d, d], &mut rng);
        let b = random(&[d], &mut rng);
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{hw}x{hw}x{d}_k{k}")),
            &(x, w, b),
            |bench, (x, w, b)| bench.iter(|| conv_same(black_box(x), black_box(w), black_box(b)).unwrap()),
        );
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    // one batch per epoch, so an epoch is one D step and one G step plus
    // the epoch statistics
    let split =
        synthesize(&SynthConfig { classes: 12, samples_per_class: 4, seed: 2, ..SynthConfig::default() }).unwrap();
    let config = TrainConfig { batch_size: split.train.len(), ..TrainConfig::default() };
    let state = TrainState::new(&split, &config).unwrap();
    c.bench_function("train_step_batch36_default_dims", |bench| {
        bench.iter_batched(
            || state.clone(),
            |mut s| run_epochs(&mut s, &split, 1, &mut NoObserver).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_matmul, bench_conv, bench_train_step);
criterion_main!(benches);
