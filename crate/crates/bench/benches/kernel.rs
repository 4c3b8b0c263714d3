use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use shoal::clock::SimRng;
use shoal::types::{crc32, logical_checksum, Row, Scn};
use shoal_bench::{engine_rig, preload_rows, warmed_arc, STREAM, TABLET};

fn bench_crc32(c: &mut Criterion) {
    let mut group = c.benchmark_group("crc32");
    for size in [64usize, 4096, 65536] {
        let data = vec![0xA5u8; size];
        group.throughput(Throughput::Bytes(size as u64));
        group.bench_with_input(BenchmarkId::from_parameter(size), &data, |b, data| {
            b.iter(|| crc32(black_box(data)))
        });
    }
    group.finish();
}

fn bench_logical_checksum(c: &mut Criterion) {
    let rows: Vec<Row> = (0..1000)
        .map(|i| Row::put(format!("key{i:06}").into_bytes(), vec![b'v'; 64], Scn(i + 1)))
        .collect();
    c.bench_function("logical_checksum/1000_rows", |b| {
        b.iter(|| logical_checksum(black_box(&rows)))
    });
}

fn bench_arc_access(c: &mut Criterion) {
    let mut group = c.benchmark_group("arc_access");
    for capacity in [16usize, 64, 256] {
        group.bench_with_input(
            BenchmarkId::from_parameter(capacity),
            &capacity,
            |b, &capacity| {
                let mut arc = warmed_arc(capacity, 10_000, capacity as u64 * 4);
                let mut rng = SimRng::new(7);
                b.iter(|| {
                    let key = rng.below(capacity as u64 * 4);
                    black_box(arc.access(key));
                })
            },
        );
    }
    group.finish();
}

fn bench_engine_writes(c: &mut Criterion) {
    c.bench_function("engine_write_row", |b| {
        let rig = engine_rig();
        let mut scn = 0u64;
        b.iter(|| {
            scn += 1;
            let row = Row::put(
                format!("key{:08}", scn % 10_000).into_bytes(),
                vec![b'v'; 64],
                Scn(scn),
            );
            rig.engine.write_row(TABLET, row).unwrap();
        })
    });
}

fn bench_engine_reads(c: &mut Criterion) {
    let rig = engine_rig();
    preload_rows(&rig, 10_000);
    rig.engine.mini_compact(TABLET).unwrap();
    rig.engine.flush_dumps(TABLET).unwrap();
    rig.engine.upload_increments(TABLET).unwrap();
    let mut rng = SimRng::new(11);
    c.bench_function("engine_read_shared_sstable", |b| {
        b.iter(|| {
            let key = format!("key{:08}", rng.below(10_000)).into_bytes();
            black_box(rig.engine.read(TABLET, &key, Scn(20_000)).unwrap());
        })
    });
}

fn bench_log_append(c: &mut Criterion) {
    let mut group = c.benchmark_group("log_append");
    for batch in [1usize, 16, 64] {
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_with_input(BenchmarkId::from_parameter(batch), &batch, |b, &batch| {
            let rig = engine_rig();
            let leader = rig.log.current_leader(STREAM).unwrap();
            let payloads: Vec<Vec<u8>> = (0..batch).map(|i| vec![i as u8; 128]).collect();
            let mut scn = 0u64;
            b.iter(|| {
                scn += 1;
                rig.log
                    .append(STREAM, leader, &payloads, shoal::log::LogKind::CLog, Scn(scn))
                    .unwrap();
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_crc32,
    bench_logical_checksum,
    bench_arc_access,
    bench_engine_writes,
    bench_engine_reads,
    bench_log_append
);
criterion_main!(benches);
