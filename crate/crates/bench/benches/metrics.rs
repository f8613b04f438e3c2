use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use pairsim_bench::synthetic_log;
use pairsim_core::engine::EventLog;
use pairsim_core::metrics::{export, summarize};
use std::hint::black_box;

fn summaries(c: &mut Criterion) {
    let mut group = c.benchmark_group("summarize");
    for n in [30usize, 2_000] {
        let log = synthetic_log(n);
        group.throughput(Throughput::Elements(log.len() as u64));
        group.bench_with_input(BenchmarkId::from_parameter(log.len()), &log, |b, log| b.iter(|| summarize(black_box(log)).unwrap()));
    }
    group.finish();
}

fn exports(c: &mut Criterion) {
    let summary = summarize(&synthetic_log(30)).unwrap();
    let mut group = c.benchmark_group("export");
    for format in ["csv", "json", "svg_time", "svg_errors"] {
        group.bench_function(format, |b| b.iter(|| export(black_box(&summary), format).unwrap()));
    }
    group.finish();
}

fn jsonl(c: &mut Criterion) {
    let log = synthetic_log(250);
    let text = log.to_jsonl();
    let mut group = c.benchmark_group("jsonl");
    group.throughput(Throughput::Bytes(text.len() as u64));
    group.bench_function("write", |b| b.iter(|| black_box(&log).to_jsonl()));
    group.bench_function("read", |b| b.iter(|| EventLog::from_jsonl(black_box(&text)).unwrap()));
    group.finish();
}

criterion_group!(benches, summaries, exports, jsonl);
criterion_main!(benches);
