use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use covid_rate_core::losses::{hybrid_loss, LossConfig};
use covid_rate_core::metrics::{confusion, dsc, infection_rate};
use covid_rate_core::network::{build_model, forward, loss_and_gradients, Mode, ModelConfig};
use covid_rate_core::ops::{conv2d, conv2d_backward, Conv2dOptions};
use covid_rate_core::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn binary(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| f32::from(u8::from(rng.gen_bool(p))))
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d_3x3");
    for (channels, size) in [(16, 64), (64, 16)] {
        let x = random(&[4, channels, size, size], &mut rng);
        let k = random(&[channels, channels, 3, 3], &mut rng);
        let b = random(&[channels], &mut rng);
        let id = format!("{channels}ch_{size}px");
        for dilation in [1, 4] {
            let opts = Conv2dOptions::dilated(dilation);
            group.bench_with_input(
                BenchmarkId::new(format!("forward_d{dilation}"), &id),
                &opts,
                |bench, o| bench.iter(|| conv2d(black_box(&x), &k, Some(&b), o).unwrap()),
            );
        }
        let opts = Conv2dOptions::default();
        let y = conv2d(&x, &k, Some(&b), &opts).unwrap();
        let g = random(y.shape(), &mut rng);
        group.bench_with_input(BenchmarkId::new("backward", &id), &opts, |bench, o| {
            bench.iter(|| conv2d_backward(black_box(&x), &k, &g, o).unwrap())
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = build_model(ModelConfig {
        base_width: 8,
        cpb_enabled: true,
        seed: 0,
    })
    .unwrap();
    let images = random(&[4, 1, 64, 64], &mut rng);
    let masks = binary(&[4, 1, 64, 64], 0.1, &mut rng);
    let mut group = c.benchmark_group("network_w8_4x64x64");
    group.sample_size(10);
    group.bench_function("forward_eval", |b| {
        b.iter(|| forward(&params, black_box(&images), Mode::Eval).unwrap())
    });
    group.bench_function("train_step", |b| {
        b.iter(|| {
            loss_and_gradients(
                &params,
                black_box(&images),
                &masks,
                &LossConfig::default(),
                1e-4,
                Mode::Train,
            )
            .unwrap()
        })
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pred = binary(&[512, 512], 0.05, &mut rng);
    let gt = binary(&[512, 512], 0.05, &mut rng);
    let lung = binary(&[512, 512], 0.4, &mut rng);
    let probs = Tensor::from_fn(vec![1, 1, 512, 512], |_| rng.gen_range(0.01..0.99));
    let truth = gt.clone().reshape(vec![1, 1, 512, 512]).unwrap();
    let mut group = c.benchmark_group("metrics_512");
    group.bench_function("dsc", |b| b.iter(|| dsc(&confusion(black_box(&pred), &gt).unwrap())));
    group.bench_function("infection_rate", |b| {
        b.iter(|| infection_rate(black_box(&pred), &lung).unwrap())
    });
    group.bench_function("hybrid_loss", |b| {
        b.iter(|| hybrid_loss(black_box(&probs), &truth, &LossConfig::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, network, metrics);
criterion_main!(benches);
