use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use groupnet_core::bitcore::{binary_conv2d, pack_filters, BitTensor, ConvGeometry, PadValue};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use groupnet_bench::{float_conv3x3, high_precision_add};

// Small standard shapes only; the full 11-case sweep is `groupnet bench`.
const SHAPES: [(usize, usize); 3] = [(64, 28), (64, 56), (128, 56)];

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let geom = ConvGeometry::new(1, 1, 1).with_pad_value(PadValue::ZeroSkip);
    let mut g = c.benchmark_group("conv3x3");
    g.sample_size(10);
    for (ch, s) in SHAPES {
        let x = random(&mut rng, ch * s * s);
        let w = random(&mut rng, ch * ch * 9);
        let filters = pack_filters(&w, [ch, ch, 3, 3]).unwrap();
        let id = format!("{ch}x{s}");
        g.bench_with_input(BenchmarkId::new("binary", &id), &x, |b, x| {
            b.iter(|| {
                let packed = BitTensor::pack_signs(x, &[1, ch, s, s], 1).unwrap();
                binary_conv2d(&packed, &filters, &geom).unwrap()
            })
        });
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let wf: Vec<f32> = w.iter().map(|&v| v as f32).collect();
        g.bench_with_input(BenchmarkId::new("float", &id), &xf, |b, xf| {
            b.iter(|| float_conv3x3(xf, &wf, ch, s))
        });
        let packed = BitTensor::pack_signs(&x, &[1, ch, s, s], 1).unwrap();
        let y = binary_conv2d(&packed, &filters, &geom).unwrap();
        let mut acc = vec![0f32; ch * s * s];
        g.bench_function(BenchmarkId::new("hadd", &id), |b| {
            b.iter(|| high_precision_add(&mut acc, &y.data, 0.5))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
