//! Kernel benchmarks: packed dot products against the unpacked integer
//! reference, the two popcount paths, and parallel vs sequential engine
//! execution at realistic shapes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use cobra_core::oracle::matmul_int;
use cobra_core::rbmm::{compute_theta, QuantParams, RbmmMode};
use cobra_core::synth;
use cobra_core::{
    pack_matrix, popcount, unpack_matrix, Engine, EngineOptions, ModelConfig, PopcountMode, Scheme,
};

fn bench_rbvm(c: &mut Criterion) {
    let mut rng = synth::rng(11);
    let (a, _) = synth::random_bitmatrix(&mut rng, 1, 768, Scheme::SignedPM1);
    let (b, _) = synth::random_bitmatrix(&mut rng, 1, 768, Scheme::SignedPM1);
    let av = unpack_matrix(&a);
    let bv = unpack_matrix(&b);

    let mut group = c.benchmark_group("rbvm-768");
    group.throughput(Throughput::Elements(768));
    group.bench_function("packed-native", |bench| {
        bench.iter(|| {
            cobra_core::rbmm::rbvm(a.row_words(0), b.row_words(0), 768, Scheme::SignedPM1, None)
                .unwrap()
        })
    });
    group.bench_function("packed-compressor", |bench| {
        bench.iter(|| {
            let words: Vec<u64> = a
                .row_words(0)
                .iter()
                .zip(b.row_words(0))
                .map(|(x, y)| !(x ^ y))
                .collect();
            let mut masked = words;
            *masked.last_mut().unwrap() &= u64::MAX;
            2 * popcount::popcount_wide(&masked, 768).unwrap() as i32 - 768
        })
    });
    group.bench_function("unpacked-oracle", |bench| {
        bench.iter(|| {
            (0..768)
                .map(|i| av.get(0, i) * bv.get(0, i))
                .sum::<i32>()
        })
    });
    group.finish();
}

fn bench_popcount(c: &mut Criterion) {
    let mut rng = synth::rng(13);
    let (m, _) = synth::random_bitmatrix(&mut rng, 1, 768, Scheme::Unsigned01);
    let words = m.row_words(0);

    let mut group = c.benchmark_group("popcount-768");
    group.throughput(Throughput::Elements(768));
    group.bench_function("native", |bench| {
        bench.iter(|| words.iter().map(|w| w.count_ones()).sum::<u32>())
    });
    group.bench_function("compressor-tree", |bench| {
        bench.iter(|| popcount::popcount_wide(words, 768).unwrap())
    });
    group.finish();
}

fn bench_engine_m4(c: &mut Criterion) {
    let cfg = ModelConfig::new(768, 12, 128, 4, 1, 32).unwrap();
    let mut rng = synth::rng(17);
    let x_vals = synth::random_pm1_matrix(&mut rng, cfg.l, cfg.d);
    let w_vals = synth::random_pm1_matrix(&mut rng, cfg.d, cfg.d);
    let (x, _) = pack_matrix(&x_vals, Scheme::SignedPM1).unwrap();
    let (w, _) = pack_matrix(&w_vals.transposed(), Scheme::SignedPM1).unwrap();
    let mode = RbmmMode::m4(&cfg);

    let mut group = c.benchmark_group("rbmm-m4-l128-d768");
    group.sample_size(20);
    group.throughput(Throughput::Elements((cfg.l * cfg.d * cfg.d) as u64));
    for (name, sequential) in [("parallel", false), ("sequential", true)] {
        let engine = Engine::new(EngineOptions {
            popcount: PopcountMode::Native,
            sequential,
        });
        group.bench_with_input(BenchmarkId::new("packed", name), &engine, |bench, eng| {
            bench.iter(|| {
                eng.execute(&mode, &x, None, &w, None, None, None)
                    .unwrap()
                    .integers
                    .unwrap()
            })
        });
    }
    group.bench_function("unpacked-oracle", |bench| {
        bench.iter(|| matmul_int(&x_vals, &w_vals).unwrap())
    });
    group.finish();
}

fn bench_ffn(c: &mut Criterion) {
    let cfg = ModelConfig::new(768, 12, 64, 4, 1, 32).unwrap();
    let mut rng = synth::rng(19);
    let w = synth::random_layer_weights(&mut rng, &cfg);
    let x = synth::random_input(&mut rng, &cfg);
    let theta = compute_theta(&w.quant_f1);
    let _ = QuantParams::new(1, vec![0], Scheme::SignedPM1, false);

    let mut group = c.benchmark_group("ffn-l64-d768-r4");
    group.sample_size(10);
    for (name, sequential) in [("parallel", false), ("sequential", true)] {
        let engine = Engine::new(EngineOptions {
            popcount: PopcountMode::Native,
            sequential,
        });
        group.bench_function(name, |bench| {
            bench.iter(|| {
                engine
                    .ffn_decomposed(&cfg, &x, &w.ffn_y, &w.ffn_z, &theta)
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_rbvm, bench_popcount, bench_engine_m4, bench_ffn);
criterion_main!(benches);
