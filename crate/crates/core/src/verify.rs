//! Built-in verification checks: every packed-path result is compared against
//! the independent reference implementations, sized for a quick smoke pass or
//! a full sweep. The command-line `verify` subcommand and the acceptance
//! suite both run these.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::bitpack::{pack_matrix, transpose_packed, unpack_matrix, BitMatrix, DCVector, Scheme};
use crate::matrix::IntMatrix;
use crate::oracle;
use crate::par::map_indexed;
use crate::perf;
use crate::pipeline::{
    encoder_layer_forward, layernorm_fixed, model_forward, FixedPoint16, ModelConfig,
    PipelineOptions,
};
use crate::popcount::{compress_6_3, popcount_tree36, popcount_wide};
use crate::rbmm::{
    compute_theta, quantize_unified, rbvm, rbvm_split_accumulate, AttentionMask, Engine, ModeTag,
    QuantParams, RbmmMode, RbvmSegment,
};
use crate::sps::{
    distortion, lambda_grid, search_thresholds, sps_apply, Granularity, LayerSps, SpsThresholds,
};
use crate::synth;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Bounded to roughly a minute of wall clock.
    Quick,
    Full,
}

/// A deliberately wrong answer injected into one comparison, used to prove
/// the checks can actually fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    FlipRbvmBit,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub counterexample: Option<String>,
    pub seconds: f64,
}

impl CheckResult {
    fn run(name: &str, body: impl FnOnce() -> Result<String, String>) -> Self {
        let start = Instant::now();
        let (passed, detail, counterexample) = match body() {
            Ok(detail) => (true, detail, None),
            Err(cx) => (false, "failed".to_string(), Some(cx)),
        };
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
            counterexample,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

fn bit_value(word: u64, i: usize, scheme: Scheme) -> i32 {
    let b = (word >> i) & 1;
    match scheme {
        Scheme::SignedPM1 => 2 * b as i32 - 1,
        Scheme::Unsigned01 => b as i32,
    }
}

/// Integer dot product of two packed single-word operands, evaluated bit by
/// bit; the oracle for the popcount identities.
fn dot_oracle(a: u64, b: u64, nbits: usize, scheme_a: Scheme) -> i32 {
    (0..nbits)
        .map(|i| bit_value(a, i, scheme_a) * bit_value(b, i, Scheme::SignedPM1))
        .sum()
}

/// Exhaustive packed-dot equivalence over all operand pairs up to
/// `max_bits`, both schemes.
pub fn check_rbvm_exhaustive(max_bits: usize) -> CheckResult {
    CheckResult::run(&format!("rbvm-exhaustive-n{max_bits}"), || {
        let mut cases = 0u64;
        for n in 1..=max_bits {
            let side = 1u64 << n;
            let failures: Vec<String> = map_indexed(side as usize, false, |a_raw| {
                let a = a_raw as u64;
                let delta = n as u32 - a.count_ones();
                for b in 0..side {
                    for scheme in [Scheme::SignedPM1, Scheme::Unsigned01] {
                        let d = match scheme {
                            Scheme::SignedPM1 => None,
                            Scheme::Unsigned01 => Some(delta),
                        };
                        let got = rbvm(&[a], &[b], n, scheme, d).expect("valid operands");
                        let want = dot_oracle(a, b, n, scheme);
                        if got != want {
                            return Some(format!(
                                "n={n} a={a:#x} b={b:#x} scheme={} got {got} want {want}",
                                scheme.name()
                            ));
                        }
                    }
                }
                None
            })
            .into_iter()
            .flatten()
            .collect();
            if let Some(f) = failures.first() {
                return Err(f.clone());
            }
            cases += side * side * 2;
        }
        Ok(format!("{cases} operand pairs"))
    })
}

/// Randomized packed-dot equivalence on wide datapacks, both schemes and
/// both popcount paths.
pub fn check_rbvm_random(
    trials: usize,
    nbits: usize,
    seed: u64,
    fault: Option<Fault>,
) -> CheckResult {
    CheckResult::run(&format!("rbvm-random-{nbits}bit"), || {
        let mut rng = synth::rng(seed);
        for trial in 0..trials {
            let scheme = if rng.gen::<bool>() {
                Scheme::SignedPM1
            } else {
                Scheme::Unsigned01
            };
            let (a, dc) = synth::random_bitmatrix(&mut rng, 1, nbits, scheme);
            let (b, _) = synth::random_bitmatrix(&mut rng, 1, nbits, Scheme::SignedPM1);
            let delta = match scheme {
                Scheme::SignedPM1 => None,
                Scheme::Unsigned01 => Some(dc.0[0]),
            };
            let mut got =
                rbvm(a.row_words(0), b.row_words(0), nbits, scheme, delta).expect("valid");
            if fault == Some(Fault::FlipRbvmBit) && trial == 0 {
                got ^= 1;
            }
            let av = unpack_matrix(&a);
            let bv = unpack_matrix(&b);
            let want: i32 = (0..nbits).map(|i| av.get(0, i) * bv.get(0, i)).sum();
            if got != want {
                return Err(format!(
                    "seed={seed} trial={trial} nbits={nbits} scheme={} got {got} want {want}",
                    scheme.name()
                ));
            }
        }
        Ok(format!("{trials} random {nbits}-bit pairs"))
    })
}

/// Segmented accumulation equals the whole-pack dot for random cut points.
pub fn check_split_accumulate(trials: usize, seed: u64) -> CheckResult {
    CheckResult::run("rbvm-split-accumulate", || {
        let mut rng = synth::rng(seed);
        for trial in 0..trials {
            let nbits = 768;
            let scheme = if rng.gen::<bool>() {
                Scheme::SignedPM1
            } else {
                Scheme::Unsigned01
            };
            let (a, dc) = synth::random_bitmatrix(&mut rng, 1, nbits, scheme);
            let (b, _) = synth::random_bitmatrix(&mut rng, 1, nbits, Scheme::SignedPM1);
            let delta = match scheme {
                Scheme::SignedPM1 => None,
                Scheme::Unsigned01 => Some(dc.0[0]),
            };
            let whole =
                rbvm(a.row_words(0), b.row_words(0), nbits, scheme, delta).expect("valid") as i64;

            // cut into 1..=12 segments at random sorted points
            let n_cuts = rng.gen_range(0..12usize);
            let mut cuts: Vec<usize> = (0..n_cuts).map(|_| rng.gen_range(1..nbits)).collect();
            cuts.push(0);
            cuts.push(nbits);
            cuts.sort_unstable();
            cuts.dedup();

            let mut a_bufs = Vec::new();
            let mut b_bufs = Vec::new();
            for w in cuts.windows(2) {
                let (start, len) = (w[0], w[1] - w[0]);
                let a_seg = a.extract_cols(start, len);
                let b_seg = b.extract_cols(start, len);
                let seg_delta = match scheme {
                    Scheme::SignedPM1 => None,
                    Scheme::Unsigned01 => Some((len - a_seg.row_popcount(0)) as u32),
                };
                a_bufs.push((a_seg, len, seg_delta));
                b_bufs.push((b_seg, len));
            }
            let a_parts: Vec<RbvmSegment> = a_bufs
                .iter()
                .map(|(m, len, d)| RbvmSegment {
                    words: m.row_words(0),
                    nbits: *len,
                    scheme,
                    delta: *d,
                })
                .collect();
            let b_parts: Vec<(&[u64], usize)> =
                b_bufs.iter().map(|(m, len)| (m.row_words(0), *len)).collect();
            let split = rbvm_split_accumulate(&a_parts, &b_parts).expect("valid segments");
            if split != whole {
                return Err(format!(
                    "seed={seed} trial={trial} cuts={cuts:?} split {split} whole {whole}"
                ));
            }
        }
        Ok(format!("{trials} random segmentations"))
    })
}

/// Compressor-tree popcount equals the native instruction on the exhaustive
/// small domains and on random wide inputs.
pub fn check_popcount(random36: usize, seed: u64) -> CheckResult {
    CheckResult::run("popcount-equivalence", || {
        for x in 0u64..64 {
            if compress_6_3(x) != x.count_ones() {
                return Err(format!("compressor rom at {x:#08b}"));
            }
        }
        for x in 0u64..=0xffff {
            if popcount_tree36(x) != x.count_ones() {
                return Err(format!("tree36 composed 16-bit at {x:#x}"));
            }
        }
        let mut rng = synth::rng(seed);
        for trial in 0..random36 {
            let x = rng.gen::<u64>() & ((1 << 36) - 1);
            if popcount_tree36(x) != x.count_ones() {
                return Err(format!("seed={seed} trial={trial} tree36 at {x:#x}"));
            }
        }
        for trial in 0..random36 / 10 {
            let (m, _) = synth::random_bitmatrix(&mut rng, 1, 768, Scheme::Unsigned01);
            let want: u32 = m.row_words(0).iter().map(|w| w.count_ones()).sum();
            if popcount_wide(m.row_words(0), 768).expect("clean pads") != want {
                return Err(format!("seed={seed} trial={trial} wide 768"));
            }
        }
        Ok(format!(
            "64 + 65536 exhaustive, {random36} random 36-bit, {} wide packs",
            random36 / 10
        ))
    })
}

/// Folded threshold equals the two-step clip/round/sign reference over a
/// swept input range and random quantizers.
pub fn check_quant_fusion(c_max: i32, q_trials: usize, seed: u64) -> CheckResult {
    CheckResult::run("quantization-fusion", || {
        let mut rng = synth::rng(seed);
        for trial in 0..q_trials {
            let relu = rng.gen_bool(0.25);
            let scheme = if relu || rng.gen::<bool>() {
                Scheme::Unsigned01
            } else {
                Scheme::SignedPM1
            };
            let alpha = rng.gen_range(1..=64);
            let beta = if relu {
                rng.gen_range(0..=c_max / 2)
            } else {
                rng.gen_range(-c_max / 2..=c_max / 2)
            };
            let q = QuantParams::new(alpha, vec![beta], scheme, relu).expect("positive alpha");
            let theta = compute_theta(&q);
            for c in -c_max..=c_max {
                let fused = quantize_unified(c, theta.theta[0]);
                let two_step = oracle::quantize_two_step(c, alpha, beta, scheme, relu) == 1;
                if fused != two_step {
                    return Err(format!(
                        "seed={seed} trial={trial} c={c} alpha={alpha} beta={beta} \
                         scheme={} relu={relu}: fused {fused} two-step {two_step}",
                        scheme.name()
                    ));
                }
            }
        }
        Ok(format!(
            "{q_trials} quantizers x {} inputs",
            2 * c_max + 1
        ))
    })
}

fn random_toy_cfg(rng: &mut ChaCha8Rng) -> ModelConfig {
    let shapes = [(8, 1), (8, 2), (16, 2), (16, 4), (32, 4), (32, 2)];
    let (d, h) = shapes[rng.gen_range(0..shapes.len())];
    let l = rng.gen_range(2..=16);
    let r = rng.gen_range(1..=2);
    let n_pe = [1, 3, 4, 8][rng.gen_range(0..4)];
    ModelConfig::new(d, h, l, r, 1, n_pe).expect("toy dims are valid")
}

fn random_mask(rng: &mut ChaCha8Rng, l: usize) -> Option<AttentionMask> {
    match rng.gen_range(0..3) {
        0 => None,
        1 => Some(AttentionMask::causal(l)),
        _ => Some(AttentionMask::padding(l, rng.gen_range(1..=l)).expect("valid len")),
    }
}

fn pack_math_weight(rng: &mut ChaCha8Rng, d: usize) -> (IntMatrix, BitMatrix) {
    let math = synth::random_pm1_matrix(rng, d, d);
    let packed = pack_matrix(&math.transposed(), Scheme::SignedPM1)
        .expect("pm1 domain")
        .0;
    (math, packed)
}

fn compare_bits(got: &BitMatrix, want: &IntMatrix, what: &str) -> Result<(), String> {
    let got_vals = unpack_matrix(got);
    if &got_vals != want {
        for i in 0..want.rows() {
            for j in 0..want.cols() {
                if got_vals.get(i, j) != want.get(i, j) {
                    return Err(format!(
                        "{what}: first mismatch at ({i},{j}): engine {} oracle {}",
                        got_vals.get(i, j),
                        want.get(i, j)
                    ));
                }
            }
        }
    }
    Ok(())
}

fn compare_dc(got: &DCVector, want: &[u32], what: &str) -> Result<(), String> {
    if got.0 != want {
        return Err(format!("{what}: dc {:?} vs oracle {:?}", got.0, want));
    }
    Ok(())
}

/// One engine mode against its integer-domain mirror on random toy shapes.
pub fn check_mode_equivalence(tag: ModeTag, configs: usize, seed: u64) -> CheckResult {
    CheckResult::run(&format!("mode-{}-oracle-equivalence", tag.name()), || {
        let mut rng = synth::rng(seed ^ tag.index() as u64);
        let engine = Engine::default();
        for case in 0..configs {
            let cfg = random_toy_cfg(&mut rng);
            let cx = |e: String| format!("seed={seed} case={case} cfg={cfg:?}: {e}");
            match tag {
                ModeTag::M1Qkv => {
                    let x_vals = synth::random_pm1_matrix(&mut rng, cfg.l, cfg.d);
                    let (x, _) = pack_matrix(&x_vals, Scheme::SignedPM1).expect("pm1");
                    let (w_math, w_packed) = pack_math_weight(&mut rng, cfg.d);
                    let q = synth::random_quant(
                        &mut rng,
                        cfg.d,
                        Scheme::SignedPM1,
                        false,
                        cfg.d as i32 / 2,
                    );
                    let theta = compute_theta(&q);
                    let out = engine
                        .execute(&RbmmMode::m1(&cfg), &x, None, &w_packed, Some(&theta), None, None)
                        .expect("m1 executes");
                    let reference =
                        oracle::ref_m1(&x_vals, &w_math, &q, cfg.h).expect("ref m1");
                    compare_bits(out.binary.as_ref().unwrap(), &reference.values, "M1 bits")
                        .map_err(&cx)?;
                    compare_dc(&out.dc_full, &reference.zeros_full, "M1 dc_full").map_err(&cx)?;
                    let heads = out.dc_heads.as_ref().expect("m1 tracks heads");
                    for (k, want) in reference.zeros_heads.iter().enumerate() {
                        compare_dc(&heads[k], want, "M1 dc_head").map_err(&cx)?;
                    }
                }
                ModeTag::M2AttnScore => {
                    let q_vals = synth::random_pm1_matrix(&mut rng, cfg.l, cfg.d);
                    let k_vals = synth::random_pm1_matrix(&mut rng, cfg.l, cfg.d);
                    let (qb, _) = pack_matrix(&q_vals, Scheme::SignedPM1).expect("pm1");
                    let (kb, _) = pack_matrix(&k_vals, Scheme::SignedPM1).expect("pm1");
                    let grid = lambda_grid(0.05).expect("grid");
                    let sps = if case % 3 == 2 {
                        let lams: Vec<f64> = (0..cfg.h * cfg.l)
                            .map(|_| grid[rng.gen_range(0..grid.len())])
                            .collect();
                        LayerSps::per_row(lams, cfg.h, cfg.d_h, cfg.l).expect("in range")
                    } else {
                        let lams: Vec<f64> = (0..cfg.h)
                            .map(|_| grid[rng.gen_range(0..grid.len())])
                            .collect();
                        LayerSps::per_head(lams, cfg.d_h, cfg.l).expect("in range")
                    };
                    let mask = random_mask(&mut rng, cfg.l);
                    let mode = RbmmMode::m2(&cfg, mask.clone());
                    let out = engine
                        .execute(&mode, &qb, None, &kb, None, Some(&sps), None)
                        .expect("m2 executes");
                    let (ref_maps, ref_zeros) =
                        oracle::ref_m2(&q_vals, &k_vals, cfg.h, cfg.d_h, &sps, mask.as_ref());
                    let maps = out.head_maps(cfg.h).expect("concat output");
                    let dc_heads = out.dc_heads.as_ref().expect("m2 reports head dc");
                    for k in 0..cfg.h {
                        compare_bits(&maps[k], &ref_maps[k], "M2 map").map_err(&cx)?;
                        compare_dc(&dc_heads[k], &ref_zeros[k], "M2 dc_head").map_err(&cx)?;
                    }
                }
                ModeTag::M3Context => {
                    let mut maps_int = Vec::new();
                    let mut maps_bits = Vec::new();
                    for _ in 0..cfg.h {
                        let m = synth::random_01_matrix(&mut rng, cfg.l, cfg.l);
                        let (bits, _) = pack_matrix(&m, Scheme::Unsigned01).expect("01");
                        maps_int.push(m);
                        maps_bits.push(bits);
                    }
                    let refs: Vec<&BitMatrix> = maps_bits.iter().collect();
                    let stacked = BitMatrix::stack_rows(&refs).expect("same shape");
                    let dc = DCVector::recount(&stacked);
                    let v_vals = synth::random_pm1_matrix(&mut rng, cfg.l, cfg.d);
                    let (v_bits, _) = pack_matrix(&v_vals, Scheme::SignedPM1).expect("pm1");
                    let v_t = transpose_packed(&v_bits);
                    let q = synth::random_quant(
                        &mut rng,
                        cfg.d,
                        Scheme::SignedPM1,
                        false,
                        cfg.l as i32 / 2,
                    );
                    let theta = compute_theta(&q);
                    let out = engine
                        .execute(
                            &RbmmMode::m3(&cfg),
                            &stacked,
                            Some(&dc),
                            &v_t,
                            Some(&theta),
                            None,
                            None,
                        )
                        .expect("m3 executes");
                    let reference =
                        oracle::ref_m3(&maps_int, &v_vals, &q, cfg.d_h).expect("ref m3");
                    compare_bits(out.binary.as_ref().unwrap(), &reference.values, "M3 bits")
                        .map_err(&cx)?;
                    compare_dc(&out.dc_full, &reference.zeros_full, "M3 dc_full").map_err(&cx)?;
                }
                ModeTag::M4Linear => {
                    let x_vals = synth::random_pm1_matrix(&mut rng, cfg.l, cfg.d);
                    let (x, _) = pack_matrix(&x_vals, Scheme::SignedPM1).expect("pm1");
                    let (w_math, w_packed) = pack_math_weight(&mut rng, cfg.d);
                    let out = engine
                        .execute(&RbmmMode::m4(&cfg), &x, None, &w_packed, None, None, None)
                        .expect("m4 executes");
                    let got = out.integers.as_ref().unwrap();
                    let want = oracle::ref_m4(&x_vals, &w_math).expect("ref m4");
                    if got != &want {
                        return Err(cx("M4 integer mismatch".into()));
                    }
                    let bound = 1i64 << cfg.output_bits();
                    if got.max_abs() >= bound {
                        return Err(cx(format!("M4 exceeds {bound}")));
                    }
                }
                ModeTag::F1Ffn1 => {
                    let x_vals = synth::random_pm1_matrix(&mut rng, cfg.l, cfg.d);
                    let (x, _) = pack_matrix(&x_vals, Scheme::SignedPM1).expect("pm1");
                    let (y_math, y_packed) = pack_math_weight(&mut rng, cfg.d);
                    let q = synth::random_quant(
                        &mut rng,
                        cfg.d,
                        Scheme::Unsigned01,
                        true,
                        cfg.d as i32 / 4,
                    );
                    let theta = compute_theta(&q);
                    let out = engine
                        .execute(&RbmmMode::f1(&cfg), &x, None, &y_packed, Some(&theta), None, None)
                        .expect("f1 executes");
                    let reference = oracle::ref_f1(&x_vals, &y_math, &q).expect("ref f1");
                    compare_bits(out.binary.as_ref().unwrap(), &reference.values, "F1 bits")
                        .map_err(&cx)?;
                    compare_dc(&out.dc_full, &reference.zeros_full, "F1 dc").map_err(&cx)?;
                }
                ModeTag::F2Ffn2 => {
                    let e_vals = synth::random_01_matrix(&mut rng, cfg.l, cfg.d);
                    let (e, dc) = pack_matrix(&e_vals, Scheme::Unsigned01).expect("01");
                    let (z_math, z_packed) = pack_math_weight(&mut rng, cfg.d);
                    let mut acc_prev = IntMatrix::zeros(cfg.l, cfg.d);
                    for i in 0..cfg.l {
                        for j in 0..cfg.d {
                            acc_prev.set(i, j, rng.gen_range(-8..=8));
                        }
                    }
                    let mut acc = acc_prev.clone();
                    engine
                        .execute(
                            &RbmmMode::f2(&cfg),
                            &e,
                            Some(&dc),
                            &z_packed,
                            None,
                            None,
                            Some(&mut acc),
                        )
                        .expect("f2 executes");
                    let mut want = acc_prev;
                    oracle::ref_f2(&e_vals, &z_math, &mut want).expect("ref f2");
                    if acc != want {
                        return Err(cx("F2 accumulated integers mismatch".into()));
                    }
                }
            }
        }
        Ok(format!("{configs} random toy configs"))
    })
}

fn slice_cols(m: &IntMatrix, start: usize, len: usize) -> IntMatrix {
    let mut out = IntMatrix::zeros(m.rows(), len);
    for i in 0..m.rows() {
        for j in 0..len {
            out.set(i, j, m.get(i, start + j));
        }
    }
    out
}

fn slice_rows(m: &IntMatrix, start: usize, len: usize) -> IntMatrix {
    let mut out = IntMatrix::zeros(len, m.cols());
    for i in 0..len {
        for j in 0..m.cols() {
            out.set(i, j, m.get(start + i, j));
        }
    }
    out
}

/// Block-decomposed FFN equals the monolithic two-pass oracle; the engine
/// allocates exactly its two working buffers.
pub fn check_ffn_decomposition(instances: usize, seed: u64) -> CheckResult {
    CheckResult::run("ffn-decomposition", || {
        let mut rng = synth::rng(seed);
        let engine = Engine::default();
        for case in 0..instances {
            let r = [1usize, 2, 4][case % 3];
            let d = if r == 4 { 16 } else { 16 * (3 - r) };
            let h = 2;
            let l = rng.gen_range(2..=12);
            let cfg = ModelConfig::new(d, h, l, r, 1, [1, 4, 8][case % 3]).expect("valid toy");
            let cx = |e: String| format!("seed={seed} case={case} cfg={cfg:?}: {e}");

            let x_vals = synth::random_pm1_matrix(&mut rng, cfg.l, cfg.d);
            let (x, _) = pack_matrix(&x_vals, Scheme::SignedPM1).expect("pm1");
            let y_full = synth::random_pm1_matrix(&mut rng, cfg.d, cfg.ff_size);
            let z_full = synth::random_pm1_matrix(&mut rng, cfg.ff_size, cfg.d);
            let q_f1 = synth::random_quant(
                &mut rng,
                cfg.ff_size,
                Scheme::Unsigned01,
                true,
                cfg.d as i32 / 4,
            );
            let theta_f1 = compute_theta(&q_f1);

            let y_blocks: Vec<BitMatrix> = (0..r)
                .map(|i| {
                    let blk = slice_cols(&y_full, i * cfg.d, cfg.d);
                    pack_matrix(&blk.transposed(), Scheme::SignedPM1).expect("pm1").0
                })
                .collect();
            let z_blocks: Vec<BitMatrix> = (0..r)
                .map(|i| {
                    let blk = slice_rows(&z_full, i * cfg.d, cfg.d);
                    pack_matrix(&blk.transposed(), Scheme::SignedPM1).expect("pm1").0
                })
                .collect();

            let before = engine.stats().ffn_working_buffers;
            let got = engine
                .ffn_decomposed(&cfg, &x, &y_blocks, &z_blocks, &theta_f1)
                .expect("ffn executes");
            let allocs = engine.stats().ffn_working_buffers - before;
            if allocs != 2 {
                return Err(cx(format!("allocated {allocs} working buffers")));
            }
            let want =
                oracle::ref_ffn_monolithic(&x_vals, &y_full, &z_full, &q_f1).expect("ref ffn");
            if got != want {
                return Err(cx("decomposed vs monolithic mismatch".into()));
            }
            let bound = 1i64 << cfg.output_bits();
            if got.max_abs() >= bound {
                return Err(cx(format!("FFN output exceeds {bound}")));
            }

            // R = 1 degenerates to one F1 pass followed by one F2 pass.
            if r == 1 {
                let e = engine
                    .execute(&RbmmMode::f1(&cfg), &x, None, &y_blocks[0], Some(&theta_f1), None, None)
                    .expect("f1 executes");
                let mut acc = IntMatrix::zeros(cfg.l, cfg.d);
                engine
                    .execute(
                        &RbmmMode::f2(&cfg),
                        e.binary.as_ref().unwrap(),
                        Some(&e.dc_full),
                        &z_blocks[0],
                        None,
                        None,
                        Some(&mut acc),
                    )
                    .expect("f2 executes");
                if acc != got {
                    return Err(cx("R=1 differs from sequential F1 then F2".into()));
                }
            }
        }
        Ok(format!("{instances} random instances over R in {{1,2,4}}"))
    })
}

/// Grid search returns the exhaustive-grid minimum with smallest-lambda tie
/// break, at every granularity.
pub fn check_sps_search(seed: u64) -> CheckResult {
    CheckResult::run("sps-search-optimality", || {
        let mut rng = synth::rng(seed);
        let (layers, h, l, d_h) = (2usize, 2usize, 8usize, 8usize);
        let calib = synth::random_calibration(&mut rng, layers, h, l, d_h, 4, 0.18)
            .map_err(|e| e.to_string())?;
        let grid = lambda_grid(0.05).expect("grid");

        // independent exhaustive evaluation straight from the definition
        let eval_head = |layer: usize, head: usize, lam: f64| -> f64 {
            let mut acc = 0.0;
            for s in &calib.samples {
                let qv = unpack_matrix(&s.q[layer]);
                let kv = unpack_matrix(&s.k[layer]);
                let mut scores = crate::oracle::RealMatrix::zeros(l, l);
                for i in 0..l {
                    for j in 0..l {
                        let dot: i32 = (0..d_h)
                            .map(|m| qv.get(i, head * d_h + m) * kv.get(j, head * d_h + m))
                            .sum();
                        scores.set(i, j, dot as f64 / (d_h as f64).sqrt());
                    }
                }
                let map = sps_apply(&scores, lam);
                acc += distortion(&s.reference[layer][head], &map).expect("same shape");
            }
            acc / calib.samples.len() as f64
        };

        let searched = search_thresholds(&calib, Granularity::PerHead, 0.05)
            .map_err(|e| e.to_string())?;
        for layer in 0..layers {
            for head in 0..h {
                let mut best = (f64::INFINITY, 0.0);
                for &lam in &grid {
                    let dist = eval_head(layer, head, lam);
                    if dist < best.0 {
                        best = (dist, lam);
                    }
                }
                let got = searched.lambda(layer, head, 0);
                let got_dist = searched.distortions[layer * h + head];
                if got != best.1 || got_dist != best.0 {
                    return Err(format!(
                        "seed={seed} layer={layer} head={head}: search ({got}, {got_dist}) \
                         brute force ({}, {})",
                        best.1, best.0
                    ));
                }
                if got_dist > eval_head(layer, head, 0.0) {
                    return Err(format!(
                        "seed={seed} layer={layer} head={head}: worse than lambda=0"
                    ));
                }
            }
        }

        // all-agreeing calibration: zero distortion everywhere ties to 0
        let ones_calib = {
            let mut c = synth::random_calibration(&mut rng, 1, 1, 4, 8, 2, 0.25)
                .map_err(|e| e.to_string())?;
            for s in &mut c.samples {
                let ones = IntMatrix::from_rows(&vec![vec![1; 8]; 4]).expect("rect");
                let (q, _) = pack_matrix(&ones, Scheme::SignedPM1).expect("pm1");
                s.q = vec![q.clone()];
                s.k = vec![q.clone()];
                let mut all = BitMatrix::zeros(4, 4, Scheme::Unsigned01);
                for i in 0..4 {
                    for j in 0..4 {
                        all.set(i, j, true);
                    }
                }
                s.reference = vec![vec![all]];
            }
            c
        };
        let t = search_thresholds(&ones_calib, Granularity::PerHead, 0.05)
            .map_err(|e| e.to_string())?;
        if t.lambda(0, 0, 0) != 0.0 || t.distortions[0] != 0.0 {
            return Err(format!(
                "tie-break: expected lambda 0 with zero distortion, got {} {}",
                t.lambda(0, 0, 0),
                t.distortions[0]
            ));
        }

        // single-head model: per-head equals per-layer
        let single = synth::random_calibration(&mut rng, 2, 1, 8, 8, 3, 0.2)
            .map_err(|e| e.to_string())?;
        let by_head = search_thresholds(&single, Granularity::PerHead, 0.05)
            .map_err(|e| e.to_string())?;
        let by_layer = search_thresholds(&single, Granularity::PerLayer, 0.05)
            .map_err(|e| e.to_string())?;
        if by_head.lambdas != by_layer.lambdas {
            return Err("single-head per-head differs from per-layer".into());
        }

        // per-row optimality on one small pair
        let per_row = search_thresholds(&calib, Granularity::PerRow, 0.05)
            .map_err(|e| e.to_string())?;
        for row in 0..l {
            let mut best = (f64::INFINITY, 0.0);
            for &lam in &grid {
                let mut acc = 0.0;
                for s in &calib.samples {
                    let qv = unpack_matrix(&s.q[0]);
                    let kv = unpack_matrix(&s.k[0]);
                    let mut diff = 0u32;
                    for j in 0..l {
                        let dot: i32 =
                            (0..d_h).map(|m| qv.get(row, m) * kv.get(j, m)).sum();
                        let z = dot as f64 / (d_h as f64).sqrt();
                        let bit = z >= lam;
                        if bit != s.reference[0][0].get(row, j) {
                            diff += 1;
                        }
                    }
                    acc += diff as f64 / l as f64;
                }
                let dist = acc / calib.samples.len() as f64;
                if dist < best.0 {
                    best = (dist, lam);
                }
            }
            if per_row.lambda(0, 0, row) != best.1 {
                return Err(format!(
                    "seed={seed} per-row row={row}: search {} brute {}",
                    per_row.lambda(0, 0, row),
                    best.1
                ));
            }
        }
        Ok("per-head, per-layer, per-row against exhaustive grid".into())
    })
}

/// Fixed-point LayerNorm: exact against the same-rule reference, within a
/// half Q8.8 scale step of the double-precision one.
pub fn check_layernorm(seed: u64) -> CheckResult {
    CheckResult::run("layernorm-fixed-point", || {
        let mut rng = synth::rng(seed);
        for trial in 0..500 {
            let n = rng.gen_range(2..=768usize);
            let span = *[2i32, 100, 800, 3000].get(trial % 4).unwrap();
            let x: Vec<i32> = (0..n).map(|_| rng.gen_range(-span..=span)).collect();
            let gain: Vec<FixedPoint16> = (0..n)
                .map(|_| FixedPoint16::from_f64(rng.gen_range(0.25..2.0)))
                .collect();
            let bias: Vec<FixedPoint16> = (0..n)
                .map(|_| FixedPoint16::from_f64(rng.gen_range(-1.0..1.0)))
                .collect();
            let fixed = layernorm_fixed(&x, &gain, &bias).map_err(|e| e.to_string())?;

            let gain_raw: Vec<i16> = gain.iter().map(|g| g.raw()).collect();
            let bias_raw: Vec<i16> = bias.iter().map(|b| b.raw()).collect();
            let reference = oracle::ref_layernorm_q88(&x, &gain_raw, &bias_raw);
            let got_raw: Vec<i16> = fixed.iter().map(|f| f.raw()).collect();
            if got_raw != reference {
                return Err(format!("seed={seed} trial={trial}: fixed rule mismatch"));
            }

            let gain_f: Vec<f64> = gain.iter().map(|g| g.to_f64()).collect();
            let bias_f: Vec<f64> = bias.iter().map(|b| b.to_f64()).collect();
            let exact = oracle::layernorm_f64(&x, &gain_f, &bias_f);
            for (i, (&raw, e)) in got_raw.iter().zip(&exact).enumerate() {
                let got = raw as f64 / 256.0;
                // saturated outputs are compared against the clamp range
                if raw == i16::MAX || raw == i16::MIN {
                    continue;
                }
                if (got - e).abs() > 1.0 / 128.0 {
                    return Err(format!(
                        "seed={seed} trial={trial} n={n} elem {i}: fixed {got} vs f64 {e}"
                    ));
                }
            }
        }
        Ok("500 random rows, exact rule + 2^-7 float tolerance".into())
    })
}

/// Whole encoder layers and a two-layer model against the oracle pipeline,
/// including masks, spill emulation and bit-exact reruns.
pub fn check_pipeline(seed: u64) -> CheckResult {
    CheckResult::run("pipeline-end-to-end", || {
        let mut rng = synth::rng(seed);
        let engine = Engine::default();
        for case in 0..6 {
            let cfg = ModelConfig::new(16, 2, 8, 2, 2, [1, 4, 16][case % 3]).expect("toy");
            let layers = synth::random_model(&mut rng, &cfg);
            let x = synth::random_input(&mut rng, &cfg);
            let mask = random_mask(&mut rng, cfg.l);
            let opts = PipelineOptions {
                spill_emulation: case % 2 == 1,
            };
            let cx = |e: String| format!("seed={seed} case={case}: {e}");

            let got = model_forward(&engine, &cfg, &x, &layers, mask.as_ref(), &opts)
                .map_err(|e| cx(e.to_string()))?;
            let want = oracle::ref_model_forward(&cfg, &unpack_matrix(&x), &layers, mask.as_ref())
                .map_err(|e| cx(e.to_string()))?;
            compare_bits(&got.hidden, &want.hidden, "model hidden").map_err(&cx)?;
            if got.logits != want.ln2_raw {
                return Err(cx("model integer outputs differ from oracle".into()));
            }

            // single layer equals one model step
            let single = encoder_layer_forward(&engine, &cfg, &x, &layers[0], mask.as_ref(), &opts)
                .map_err(|e| cx(e.to_string()))?;
            let ref_single =
                oracle::ref_encoder_layer(&cfg, &unpack_matrix(&x), &layers[0], mask.as_ref())
                    .map_err(|e| cx(e.to_string()))?;
            compare_bits(&single.hidden, &ref_single.hidden, "layer hidden").map_err(&cx)?;

            // spill emulation cannot change results
            let no_spill = model_forward(
                &engine,
                &cfg,
                &x,
                &layers,
                mask.as_ref(),
                &PipelineOptions {
                    spill_emulation: false,
                },
            )
            .map_err(|e| cx(e.to_string()))?;
            if no_spill.hidden != got.hidden || no_spill.logits != got.logits {
                return Err(cx("spill emulation changed results".into()));
            }

            // determinism
            let again = model_forward(&engine, &cfg, &x, &layers, mask.as_ref(), &opts)
                .map_err(|e| cx(e.to_string()))?;
            if again.hidden != got.hidden || again.logits != got.logits {
                return Err(cx("repeated run differed".into()));
            }
        }
        Ok("6 toy models vs oracle, spill/mask/determinism".into())
    })
}

/// Closed-form invocation counts equal the live engine counters; serial
/// scheduling inflates the cycle estimate.
pub fn check_perf_consistency(cfg: &ModelConfig, seed: u64) -> CheckResult {
    CheckResult::run(&format!("perf-model-consistency-d{}", cfg.d), || {
        let mut rng = synth::rng(seed);
        let engine = Engine::default();
        let w = synth::random_layer_weights(&mut rng, cfg);
        let x = synth::random_input(&mut rng, cfg);
        engine.reset_stats();
        encoder_layer_forward(&engine, cfg, &x, &w, None, &PipelineOptions::default())
            .map_err(|e| e.to_string())?;
        let snap = engine.stats();
        let measured = perf::ModeCounts::from_snapshot(&snap);
        let predicted = perf::invocation_counts(cfg);
        if measured != predicted {
            return Err(format!(
                "instrumented {measured:?} vs closed form {predicted:?}"
            ));
        }
        if snap.total_executes() != perf::fills_per_layer(cfg) {
            return Err(format!(
                "executes {} vs fills {}",
                snap.total_executes(),
                perf::fills_per_layer(cfg)
            ));
        }
        let pipelined =
            perf::estimate_throughput(cfg, 3e8, perf::DEFAULT_FILL_LATENCY, perf::Schedule::Pipelined);
        let serial =
            perf::estimate_throughput(cfg, 3e8, perf::DEFAULT_FILL_LATENCY, perf::Schedule::Serial);
        let ratio = serial.cycles as f64 / pipelined.cycles as f64;
        if ratio < 4.0 {
            return Err(format!("serial inflation only {ratio:.2}x"));
        }
        Ok(format!(
            "counters match closed form; serial {ratio:.2}x pipelined"
        ))
    })
}

/// Engine output thresholds agree between the integer popcount path and the
/// real-valued comparison for every head width and grid value.
pub fn check_sps_threshold_paths() -> CheckResult {
    CheckResult::run("sps-threshold-paths", || {
        let grid = lambda_grid(0.05).expect("grid");
        for d_h in 1..=64usize {
            for &lam in &grid {
                let t = crate::sps::popcount_threshold(lam, d_h) as i64;
                for p in 0..=d_h as i64 {
                    let z = (2 * p - d_h as i64) as f64 / (d_h as f64).sqrt();
                    if (p >= t) != (z >= lam) {
                        return Err(format!("d_h={d_h} lambda={lam} p={p}"));
                    }
                }
            }
        }
        Ok("all d_h <= 64, all grid values, all popcounts".into())
    })
}

/// Threshold table files and calibration files round-trip unchanged.
pub fn check_file_round_trips(seed: u64) -> CheckResult {
    CheckResult::run("file-round-trips", || {
        let mut rng = synth::rng(seed);
        let calib = synth::random_calibration(&mut rng, 2, 2, 8, 8, 2, 0.2)
            .map_err(|e| e.to_string())?;
        let bytes = calib.write_bytes();
        let back = crate::sps::CalibrationSet::read_bytes(&bytes).map_err(|e| e.to_string())?;
        if back.write_bytes() != bytes {
            return Err("calibration bytes not stable".into());
        }
        let table = search_thresholds(&calib, Granularity::PerHead, 0.05)
            .map_err(|e| e.to_string())?;
        let text = table.write_table();
        let parsed = SpsThresholds::parse_table(&text).map_err(|e| e.to_string())?;
        // lambdas are canonical at three decimals so they reload exactly;
        // distortions carry six decimals in the file, so stability is judged
        // on the serialized form
        if parsed.write_table() != text || parsed.lambdas != table.lambdas {
            return Err("threshold table not stable".into());
        }
        Ok("calibration and threshold table write-read-write stable".into())
    })
}

/// Run the whole suite at the given scale. A fault, when injected, must
/// surface as at least one failing check.
pub fn run(scale: Scale, seed: u64, fault: Option<Fault>) -> Vec<CheckResult> {
    let (ex_bits, rand_trials, split, pop36, c_max, q_trials, mode_cfgs, ffn) = match scale {
        Scale::Quick => (8, 10_000, 1_000, 100_000, 1_024, 100, 12, 12),
        Scale::Full => (12, 100_000, 10_000, 1_000_000, 4_096, 1_000, 60, 48),
    };
    let mut results = vec![
        check_rbvm_exhaustive(ex_bits),
        check_rbvm_random(rand_trials, 768, seed, fault),
        check_split_accumulate(split, seed.wrapping_add(1)),
        check_popcount(pop36, seed.wrapping_add(2)),
        check_quant_fusion(c_max, q_trials, seed.wrapping_add(3)),
    ];
    for tag in ModeTag::ALL {
        results.push(check_mode_equivalence(tag, mode_cfgs, seed.wrapping_add(4)));
    }
    results.push(check_ffn_decomposition(ffn, seed.wrapping_add(5)));
    results.push(check_sps_threshold_paths());
    results.push(check_sps_search(seed.wrapping_add(6)));
    results.push(check_layernorm(seed.wrapping_add(7)));
    results.push(check_pipeline(seed.wrapping_add(8)));
    results.push(check_file_round_trips(seed.wrapping_add(9)));
    let toy = ModelConfig::new(16, 2, 8, 2, 1, 4).expect("toy");
    results.push(check_perf_consistency(&toy, seed.wrapping_add(10)));
    if scale == Scale::Full {
        results.push(check_perf_consistency(
            &ModelConfig::bert_base(32),
            seed.wrapping_add(11),
        ));
    }
    results
}
