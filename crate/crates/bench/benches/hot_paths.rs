use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use rrlp_bench::{image_batch, lenet};
use rrlp_core::lrp::{backpropagate_relevance, LrpConfig};
use rrlp_core::memory::herd_select;
use rrlp_core::nncore::{argmax, backward_sample, NetGrads};
use rrlp_core::taskinfer::{fit_forest, ForestConfig};

fn bench_forward_backward(c: &mut Criterion) {
    let net = lenet(7);
    let batch = image_batch(8);
    let mut grads = NetGrads::zeros_like(&net);
    c.bench_function("forward_backward_lenet_batch8", |b| {
        b.iter(|| {
            grads.clear();
            let mut loss = 0.0;
            for s in &batch {
                let (_, trace) = net.forward(black_box(&s.input), 0).unwrap();
                loss += backward_sample(&net, &trace, s.label, &mut grads).unwrap();
            }
            black_box(loss)
        })
    });
}

fn bench_lrp(c: &mut Criterion) {
    let net = lenet(7);
    let batch = image_batch(8);
    let cfg = LrpConfig::default();
    c.bench_function("lrp_lenet_batch8", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for s in &batch {
                let (logits, trace) = net.forward(black_box(&s.input), 0).unwrap();
                let class = argmax(logits.values());
                let rmap = backpropagate_relevance(&net, &trace, 0, class, &cfg).unwrap();
                acc += rmap.input_layer().iter().sum::<f64>();
            }
            black_box(acc)
        })
    });
}

fn bench_herding(c: &mut Criterion) {
    let samples: Vec<Vec<f64>> = (0..500)
        .map(|i| (0..20).map(|j| ((i * 31 + j * 7) % 97) as f64 / 97.0).collect())
        .collect();
    c.bench_function("herd_select_500x20_k50", |b| {
        b.iter(|| black_box(herd_select(black_box(&samples), 50).unwrap()))
    });
}

fn bench_forest(c: &mut Criterion) {
    let x: Vec<Vec<f64>> = (0..200)
        .map(|i| (0..10).map(|j| ((i * 13 + j * 5) % 89) as f64 / 89.0).collect())
        .collect();
    let y: Vec<usize> = (0..200).map(|i| usize::from(x[i][0] > 0.5)).collect();
    let cfg = ForestConfig { n_trees: 50, ..ForestConfig::default() };
    c.bench_function("fit_forest_200x10_50trees", |b| {
        b.iter(|| black_box(fit_forest(black_box(&x), &y, &cfg).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_forward_backward,
    bench_lrp,
    bench_herding,
    bench_forest
);
criterion_main!(benches);
