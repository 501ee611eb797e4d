use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fasternam::blocks::{fasternet_block, pconv, FasterNetBlockParams, FasterNetSpec, PConvSpec};
use fasternam::init::seeded_rng;
use fasternam::nam::{nam_channel, NamChannelParams};
use fasternam::ops::{conv2d, ConvSpec};
use fasternam::{Shape, Tensor4};

const C: usize = 32;
const HW: usize = 32;

fn conv_vs_partial(c: &mut Criterion) {
    let mut rng = seeded_rng(0);
    let x = Tensor4::random_uniform(Shape::new(1, C, HW, HW), -1.0, 1.0, &mut rng);
    let mut group = c.benchmark_group("3x3 conv, 32 channels, 32x32");

    let full = ConvSpec::same(C, C, 3);
    let w = Tensor4::random_uniform(full.kernel_shape(), -0.1, 0.1, &mut rng);
    let bias = vec![0.0; C];
    group.bench_function("conv2d", |b| {
        b.iter(|| conv2d(black_box(&x), &w, &bias, &full).unwrap())
    });

    for c_p in [C / 2, C / 4, C / 8] {
        let spec = PConvSpec::new(C, c_p, 3).unwrap();
        let w = spec.init_weights(&mut rng);
        group.bench_with_input(
            BenchmarkId::new("pconv", format!("cp={c_p}")),
            &spec,
            |b, spec| b.iter(|| pconv(black_box(&x), &w, spec).unwrap()),
        );
    }

    let params = FasterNetBlockParams::init(FasterNetSpec::new(C, C / 4, 3, 2).unwrap(), &mut rng);
    group.bench_function("fasternet_block cp=8 e=2", |b| {
        b.iter(|| fasternet_block(black_box(&x), &params, false).unwrap())
    });
    let nam = NamChannelParams::new(C);
    group.bench_function("nam_channel", |b| {
        b.iter(|| nam_channel(black_box(&x), &nam, false).unwrap())
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = conv_vs_partial
}
criterion_main!(benches);
