use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ric_core::autodiff::{ConvAlgo, ConvSpec, Tape};
use ric_core::data::generate_corpus;
use ric_core::model::{Model, Noise, Objective};
use ric_core::params::Binder;
use ric_core::stl::{build_grid, sample, Kernel};
use ric_core::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = random(&[32, 32, 16], 1);
    let k = random(&[3, 3, 16, 32], 2);
    let mut g = c.benchmark_group("conv2d_32x32x16_to_32");
    for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{algo:?}")), &algo, |b, &algo| {
            b.iter(|| {
                let tape = Tape::new();
                let out = tape.leaf(x.clone(), true).conv2d(tape.leaf(k.clone(), true), ConvSpec { stride: 1, pad: 1, algo }).unwrap();
                tape.backward(out.sum()).unwrap()
            })
        });
    }
    g.finish();
}

fn warp(c: &mut Criterion) {
    let cube = random(&[8, 8, 32], 3);
    let theta = Tensor::vector(vec![0.7, 0.1, 0.05, -0.1, 0.8, 0.0]);
    c.bench_function("sample_bilinear_8x8x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let grid = build_grid(tape.leaf(theta.clone(), true), 8, 8).unwrap();
            let out = sample(tape.leaf(cube.clone(), true), grid, Kernel::Bilinear).unwrap();
            tape.backward(out.sum()).unwrap()
        })
    });
}

fn recurrent(c: &mut Criterion) {
    let s = &generate_corpus(1, 7)[0];
    let (store, model) = Model::build(0, Default::default(), 14).unwrap();
    let objective = Objective::default();
    c.bench_function("recurrent_forward_backward_T3", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let binder = Binder::new(&tape, &store);
            let out = model.forward(&binder, &s.image, &[4, 5, 6, 7, 8], &objective, &mut Noise::new(0, 3, 8), 0.0).unwrap();
            tape.backward(out.loss).unwrap()
        })
    });
}

criterion_group!(benches, conv, warp, recurrent);
criterion_main!(benches);
