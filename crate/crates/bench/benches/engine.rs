use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use persona_bench::{adapter, desk_model};
use persona_core::format::{decode_adapter, decode_model, encode_adapter, encode_model};
use persona_core::lora;

fn forward(c: &mut Criterion) {
    let (vocab, model) = desk_model();
    let src = vocab.tokenize("[USER]female,20-years[SEP]what is your hobby?").unwrap();
    let tgt = vocab.tokenize("i like tennis for sure.").unwrap();
    let a = adapter(&model, "user", 12, 2);
    let mut g = c.benchmark_group("forward");
    g.bench_function("base", |b| b.iter(|| model.forward(None, black_box(std::slice::from_ref(&src)), std::slice::from_ref(&tgt)).unwrap()));
    g.bench_function("lora", |b| b.iter(|| model.forward(Some(&a), black_box(std::slice::from_ref(&src)), std::slice::from_ref(&tgt)).unwrap()));
    g.finish();
}

fn greedy(c: &mut Criterion) {
    let (vocab, model) = desk_model();
    let src = vocab.tokenize("[USER]male,30-years[SEP]do you cook?").unwrap();
    c.bench_function("greedy_decode_16", |b| b.iter(|| model.greedy_decode(None, black_box(&src), 16).unwrap()));
}

/// Switching users: decode an adapter and use it on the shared base, versus
/// decode a whole fine-tuned model.
fn swap(c: &mut Criterion) {
    let (_, model) = desk_model();
    let a = adapter(&model, "user", 12, 3);
    let adapter_bytes = encode_adapter(&a, &model.config().hash()).unwrap();
    let model_bytes = encode_model(&model, &[]).unwrap();
    let path = std::path::Path::new("bench");
    let mut g = c.benchmark_group("user_switch");
    g.bench_function("lora_load", |b| b.iter(|| decode_adapter(black_box(&adapter_bytes), path).unwrap()));
    g.bench_function("lora_merge", |b| b.iter(|| lora::merge(&model, black_box(&a)).unwrap()));
    g.bench_function("full_load", |b| b.iter(|| decode_model(black_box(&model_bytes), path).unwrap()));
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, greedy, swap
}
criterion_main!(benches);
