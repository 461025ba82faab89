use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;
use vqtok_bench::{tiles, tokenizer};
use vqtok_core::codec::{compress_tiles, decompress_tiles, IndexStream};

const DIM: usize = 64;

fn encode(c: &mut Criterion) {
    let tok = tokenizer(DIM);
    let tile = &tiles(DIM, 1)[0];
    c.bench_function("msvq_encode/tile", |b| b.iter(|| tok.msvq_encode(black_box(tile)).unwrap()));
}

fn codec(c: &mut Criterion) {
    let tok = tokenizer(DIM);
    let mut group = c.benchmark_group("codec");
    group.sample_size(10);
    for n in [16u64, 64] {
        let batch = tiles(DIM, n);
        let stream = compress_tiles(&tok, &batch).unwrap();
        group.throughput(Throughput::Elements(n));
        group.bench_with_input(BenchmarkId::new("compress", n), &batch, |b, t| b.iter(|| compress_tiles(&tok, t).unwrap()));
        group.bench_with_input(BenchmarkId::new("decompress", n), &stream, |b, s| b.iter(|| decompress_tiles(&tok, s).unwrap()));
    }
    group.finish();
}

fn stream_bytes(c: &mut Criterion) {
    let tok = tokenizer(DIM);
    let stream = compress_tiles(&tok, &tiles(DIM, 256)).unwrap();
    let bytes = stream.to_bytes().unwrap();
    let mut group = c.benchmark_group("stream");
    group.throughput(Throughput::Bytes(bytes.len() as u64));
    group.bench_function("to_bytes", |b| b.iter(|| black_box(&stream).to_bytes().unwrap()));
    group.bench_function("from_bytes", |b| b.iter(|| IndexStream::from_bytes(black_box(&bytes)).unwrap()));
    group.finish();
}

criterion_group!(benches, encode, codec, stream_bytes);
criterion_main!(benches);
