use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tabseq_core::codec::{build_structure_vocab, merge_html, Task};
use tabseq_core::metrics::teds;
use tabseq_core::model::{EncoderConfig, TaskConfig, TaskModel};
use tabseq_core::synthgen::{generate_sample, GenConfig};
use tabseq_core::tensor::{ConvGeom, Tape, Tensor};

/// Deterministic filler values in [-1, 1).
fn filled(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| ((i * 7919) % 2003) as f32 / 1001.5 - 1.0)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn kernels(c: &mut Criterion) {
    let (a, b) = (filled(&[256, 256]), filled(&[256, 256]));
    c.bench_function("matmul 256 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (x, y) = (t.leaf(a.clone(), true), t.leaf(b.clone(), true));
            let z = t.matmul(x, y).unwrap();
            let s = t.sum(z).unwrap();
            black_box(t.backward(s).unwrap());
        })
    });
    let (x, w) = (filled(&[8, 32, 56, 56]), filled(&[64, 32, 4, 4]));
    c.bench_function("conv2d 8x32x56x56 k4s2 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(x.clone(), true), t.leaf(w.clone(), true));
            let y = t.conv2d(xv, wv, None, ConvGeom::new(2, 1)).unwrap();
            let s = t.sum(y).unwrap();
            black_box(t.backward(s).unwrap());
        })
    });
}

fn table_html(index: usize) -> String {
    let ann = generate_sample(&GenConfig::default(), 7, index)
        .unwrap()
        .annotation;
    merge_html(&ann.structure_tokens, &ann.contents).unwrap()
}

fn tree_edit(c: &mut Criterion) {
    let (a, b) = (table_html(0), table_html(1));
    c.bench_function("teds synthetic pair", |bench| {
        bench.iter(|| black_box(teds(&a, &b, false)))
    });
}

fn decoding(c: &mut Criterion) {
    let model = TaskModel::new(
        TaskConfig::new(Task::Structure, EncoderConfig::tiny()),
        build_structure_vocab(),
        0,
    )
    .unwrap();
    let image = generate_sample(&GenConfig::default(), 7, 0).unwrap().image;
    let mut group = c.benchmark_group("decode");
    group.sample_size(10);
    group.bench_function("greedy structure 64 steps", |bench| {
        bench.iter(|| black_box(model.greedy_decode(&image, 64).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, kernels, tree_edit, decoding);
criterion_main!(benches);
