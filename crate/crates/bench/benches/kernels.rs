use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rgmps_bench::{demos, pattern, scan_input};
use rgmps_core::autograd::Tape;
use rgmps_core::gmm::{GmmModel, GmmOptions};
use rgmps_core::model::{loss_and_grad, predict, stack_batch, RasNet, RasNetConfig};
use rgmps_core::spatial::{wkv_scan, WkvMode};

fn conv(c: &mut Criterion) {
    let x = pattern(&[8, 32, 32, 32]);
    let w = pattern(&[32, 32, 3, 3]);
    c.bench_function("conv3x3 32ch 32x32 b8 fwd+bwd", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone()).unwrap();
            let wv = t.leaf(w.clone()).unwrap();
            let y = t.conv2d(xv, wv, 1, 1).unwrap();
            let s = t.sum(y).unwrap();
            black_box(t.backward(s).unwrap());
        })
    });
}

fn scan(c: &mut Criterion) {
    let seq = scan_input(256, 32);
    c.bench_function("wkv scan 256x32", |b| b.iter(|| black_box(wkv_scan(&seq, WkvMode::Adaptive).unwrap())));
}

fn rasnet(c: &mut Criterion) {
    let mut net = RasNet::new(RasNetConfig::default()).unwrap();
    let image = pattern(&[1, 3, 64, 64]);
    c.bench_function("rasnet inference b1", |b| b.iter(|| black_box(predict(&mut net, &image).unwrap())));

    let samples = demos(8);
    let refs: Vec<_> = samples.iter().collect();
    let (images, targets) = stack_batch(&refs).unwrap();
    c.bench_function("rasnet loss+grad b8", |b| {
        b.iter(|| {
            net.store.zero_grad();
            black_box(loss_and_grad(&mut net, &images, &targets).unwrap())
        })
    });
}

fn mixture(c: &mut Criterion) {
    let actions: Vec<Vec<f64>> = demos(200).into_iter().map(|s| s.action).collect();
    let opts = GmmOptions {
        omega: Some(vec![2, 3, 4, 5]),
        ..GmmOptions::default()
    };
    c.bench_function("gmm fit k6 n200", |b| b.iter(|| black_box(GmmModel::fit(&actions, &opts).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, scan, rasnet, mixture
}
criterion_main!(benches);
