//! Sequential vs. data-parallel execution of the per-question hot paths.
//! Build with `--no-default-features` to measure the fallback alone.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kbqa_core::dataset::SplitProportions;
use kbqa_core::model::{Model, ModelConfig};
use kbqa_core::par::Execution;
use kbqa_core::synth::{desk_templates, generate_dataset, generate_kb, KbProfile};
use kbqa_core::train::{build_vocab, candidate_sets, evaluate};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench(c: &mut Criterion) {
    let kb = generate_kb(&KbProfile::desk(), 1).unwrap();
    let ds = generate_dataset(&kb, &desk_templates(), SplitProportions::default(), 1).unwrap();
    let qs: Vec<_> = ds.instances.iter().collect();
    let cands = candidate_sets(&kb, &qs, Execution::Sequential).unwrap();
    let vocab = build_vocab(&kb, &qs, &cands, 2);
    let model = Model::new(ModelConfig::with_dims(32), vocab, 0).unwrap();

    let mut g = c.benchmark_group("candidate_sets");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(candidate_sets(&kb, &qs, exec).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(evaluate(&model, &qs, &cands, 0.2, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
