//! Mode-configured engine executions.
//!
//! One engine instance serves every matrix multiplication of an encoder
//! layer. A mode selects operand schemes, head routing (accumulate across
//! head partials vs concatenate per-head bits), output kind and don't-care
//! bookkeeping:
//!
//! * `M1` QKV projection: `(-1,1) x (-1,1)`, binarized output.
//! * `M2` attention score: per-head dot products, polarized-softmax
//!   threshold, optional mask, h-bit concatenated output.
//! * `M3` context: `(0,1)` attention maps against transposed values,
//!   binarized, heads laid out contiguously.
//! * `M4` output linear: as `M1` but integer output for LayerNorm.
//! * `F1`/`F2` FFN halves: ReLU-fused binarization, then integer
//!   accumulation consuming the don't-care counts `F1` produced.
//!
//! Rows of the output are independent, so execution is row-parallel; inputs
//! are read-only and shareable, and no two executions may share an output or
//! accumulator buffer.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::bitpack::{words_for, BitMatrix, DCVector, Scheme, WORD_BITS};
use crate::error::{CobraError, Result};
use crate::matrix::IntMatrix;
use crate::par::map_row_chunks_mut;
use crate::pipeline::ModelConfig;
use crate::popcount::PopcountMode;
use crate::rbmm::{quantize_unified, rbvm_words, ThetaVector};
use crate::sps::LayerSps;

/// Per-row attention mask: in row `i`, columns greater than `bound[i]` are
/// masked to zero. Covers padding masks (same bound everywhere) and causal
/// masks (bound equals the row index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    bounds: Vec<usize>,
}

impl AttentionMask {
    pub fn new(bounds: Vec<usize>) -> Self {
        AttentionMask { bounds }
    }

    /// Row `i` may attend to columns `0..=i`.
    pub fn causal(rows: usize) -> Self {
        AttentionMask {
            bounds: (0..rows).collect(),
        }
    }

    /// Every row may attend to columns `0..valid_len`.
    pub fn padding(rows: usize, valid_len: usize) -> Result<Self> {
        if valid_len == 0 {
            return Err(CobraError::InvalidConfig(
                "padding mask needs at least one valid position".into(),
            ));
        }
        Ok(AttentionMask {
            bounds: vec![valid_len - 1; rows],
        })
    }

    #[inline]
    pub fn masked(&self, row: usize, col: usize) -> bool {
        col > self.bounds[row]
    }

    pub fn bounds(&self) -> &[usize] {
        &self.bounds
    }

    fn validate(&self, l: usize) -> Result<()> {
        if self.bounds.len() != l || self.bounds.iter().any(|&b| b >= l) {
            return Err(CobraError::DimMismatch {
                context: "attention mask",
                expected: format!("{l} bounds < {l}"),
                got: format!("{} bounds", self.bounds.len()),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModeTag {
    M1Qkv,
    M2AttnScore,
    M3Context,
    M4Linear,
    F1Ffn1,
    F2Ffn2,
}

impl ModeTag {
    pub const ALL: [ModeTag; 6] = [
        ModeTag::M1Qkv,
        ModeTag::M2AttnScore,
        ModeTag::M3Context,
        ModeTag::M4Linear,
        ModeTag::F1Ffn1,
        ModeTag::F2Ffn2,
    ];

    pub fn index(self) -> usize {
        match self {
            ModeTag::M1Qkv => 0,
            ModeTag::M2AttnScore => 1,
            ModeTag::M3Context => 2,
            ModeTag::M4Linear => 3,
            ModeTag::F1Ffn1 => 4,
            ModeTag::F2Ffn2 => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModeTag::M1Qkv => "M1",
            ModeTag::M2AttnScore => "M2",
            ModeTag::M3Context => "M3",
            ModeTag::M4Linear => "M4",
            ModeTag::F1Ffn1 => "F1",
            ModeTag::F2Ffn2 => "F2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Binary,
    Integer,
    ConcatHeads,
}

/// A fully resolved engine configuration for one operation.
#[derive(Debug, Clone)]
pub struct RbmmMode {
    pub tag: ModeTag,
    pub cfg: ModelConfig,
    /// `(n, x, y, z)`: `n` multiplications of an `x by y` matrix against a
    /// `y by z` matrix. For `F1`/`F2` this describes the whole FFN layer;
    /// each execute call consumes one of its `R` width-`d` blocks.
    pub dims: (usize, usize, usize, usize),
    pub mask: Option<AttentionMask>,
    pub output_kind: OutputKind,
}

impl RbmmMode {
    pub fn m1(cfg: &ModelConfig) -> Self {
        RbmmMode {
            tag: ModeTag::M1Qkv,
            cfg: *cfg,
            dims: (1, cfg.l, cfg.d, cfg.d),
            mask: None,
            output_kind: OutputKind::Binary,
        }
    }

    pub fn m2(cfg: &ModelConfig, mask: Option<AttentionMask>) -> Self {
        RbmmMode {
            tag: ModeTag::M2AttnScore,
            cfg: *cfg,
            dims: (cfg.h, cfg.l, cfg.d_h, cfg.l),
            mask,
            output_kind: OutputKind::ConcatHeads,
        }
    }

    pub fn m3(cfg: &ModelConfig) -> Self {
        RbmmMode {
            tag: ModeTag::M3Context,
            cfg: *cfg,
            dims: (cfg.h, cfg.l, cfg.l, cfg.d_h),
            mask: None,
            output_kind: OutputKind::Binary,
        }
    }

    pub fn m4(cfg: &ModelConfig) -> Self {
        RbmmMode {
            tag: ModeTag::M4Linear,
            cfg: *cfg,
            dims: (1, cfg.l, cfg.d, cfg.d),
            mask: None,
            output_kind: OutputKind::Integer,
        }
    }

    pub fn f1(cfg: &ModelConfig) -> Self {
        RbmmMode {
            tag: ModeTag::F1Ffn1,
            cfg: *cfg,
            dims: (1, cfg.l, cfg.d, cfg.ff_size),
            mask: None,
            output_kind: OutputKind::Binary,
        }
    }

    pub fn f2(cfg: &ModelConfig) -> Self {
        RbmmMode {
            tag: ModeTag::F2Ffn2,
            cfg: *cfg,
            dims: (1, cfg.l, cfg.ff_size, cfg.d),
            mask: None,
            output_kind: OutputKind::Integer,
        }
    }
}

/// Result of one engine execution.
#[derive(Debug, Clone)]
pub struct RbmmOutput {
    /// Binarized output (`M1`, `M3`, `F1`).
    pub binary: Option<BitMatrix>,
    /// Integer output (`M4`) or the h-bit concatenated attention maps (`M2`).
    /// `F2` accumulates into the caller's buffer instead.
    pub integers: Option<IntMatrix>,
    /// Zeros per output row; empty for integer-only outputs.
    pub dc_full: DCVector,
    /// Zeros per head segment per row (`M1`) or per head map row (`M2`).
    pub dc_heads: Option<Vec<DCVector>>,
    /// Engine invocations this execution consumed.
    pub invocations: u64,
}

impl RbmmOutput {
    /// Split the `M2` concatenated output into its per-head `(0,1)` maps.
    pub fn head_maps(&self, h: usize) -> Result<Vec<BitMatrix>> {
        let concat = self.integers.as_ref().ok_or(CobraError::DimMismatch {
            context: "RbmmOutput::head_maps",
            expected: "concatenated head output".into(),
            got: "no integer output".into(),
        })?;
        let l = concat.rows();
        let mut maps = Vec::with_capacity(h);
        for k in 0..h {
            let mut m = BitMatrix::zeros(l, concat.cols(), Scheme::Unsigned01);
            for i in 0..l {
                for j in 0..concat.cols() {
                    if (concat.get(i, j) >> k) & 1 == 1 {
                        m.set(i, j, true);
                    }
                }
            }
            maps.push(m);
        }
        Ok(maps)
    }

    /// Stack the per-head maps (head-major) into the `M3` input operand,
    /// chaining the returned don't-care counts as the next DC INPUT.
    pub fn stacked_attention(&self, h: usize) -> Result<(BitMatrix, DCVector)> {
        let maps = self.head_maps(h)?;
        let refs: Vec<&BitMatrix> = maps.iter().collect();
        let stacked = BitMatrix::stack_rows(&refs)?;
        let dcs = self.dc_heads.as_ref().ok_or(CobraError::MissingDcInput)?;
        let dc_refs: Vec<&DCVector> = dcs.iter().collect();
        Ok((stacked, DCVector::concat(&dc_refs)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineOptions {
    pub popcount: PopcountMode,
    /// Force sequential row processing even when the `parallel` feature is
    /// compiled in. Benchmarks use this to compare the two paths.
    pub sequential: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            popcount: PopcountMode::Native,
            sequential: false,
        }
    }
}

#[derive(Default)]
struct EngineStats {
    invocations: [AtomicU64; 6],
    executes: [AtomicU64; 6],
    ffn_working_buffers: AtomicU64,
}

/// Counter snapshot; the closed-form performance model must reproduce the
/// invocation numbers exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    pub invocations: [u64; 6],
    pub executes: [u64; 6],
    pub ffn_working_buffers: u64,
}

impl StatsSnapshot {
    pub fn invocations_for(&self, tag: ModeTag) -> u64 {
        self.invocations[tag.index()]
    }

    pub fn total_invocations(&self) -> u64 {
        self.invocations.iter().sum()
    }

    pub fn total_executes(&self) -> u64 {
        self.executes.iter().sum()
    }
}

/// Metadata one output row reports back from the in-place fill.
struct RowMeta {
    dc_full: u32,
    dc_heads: Vec<u32>,
    invocations: u64,
}

pub struct Engine {
    opts: EngineOptions,
    stats: EngineStats,
}

impl Default for Engine {
    fn default() -> Self {
        Engine::new(EngineOptions::default())
    }
}

impl Engine {
    pub fn new(opts: EngineOptions) -> Self {
        Engine {
            opts,
            stats: EngineStats::default(),
        }
    }

    pub fn options(&self) -> EngineOptions {
        self.opts
    }

    pub fn stats(&self) -> StatsSnapshot {
        let mut snap = StatsSnapshot::default();
        for i in 0..6 {
            snap.invocations[i] = self.stats.invocations[i].load(Ordering::Relaxed);
            snap.executes[i] = self.stats.executes[i].load(Ordering::Relaxed);
        }
        snap.ffn_working_buffers = self.stats.ffn_working_buffers.load(Ordering::Relaxed);
        snap
    }

    pub fn reset_stats(&self) {
        for i in 0..6 {
            self.stats.invocations[i].store(0, Ordering::Relaxed);
            self.stats.executes[i].store(0, Ordering::Relaxed);
        }
        self.stats.ffn_working_buffers.store(0, Ordering::Relaxed);
    }

    fn record(&self, tag: ModeTag, invocations: u64) {
        self.stats.executes[tag.index()].fetch_add(1, Ordering::Relaxed);
        self.stats.invocations[tag.index()].fetch_add(invocations, Ordering::Relaxed);
    }

    /// Run one mode-configured multiplication.
    ///
    /// `dc_in` is required when `a` is a `(0,1)` operand (`M3`, `F2`);
    /// `sps` only for `M2`; `acc` only for `F2`, which accumulates in place.
    #[allow(clippy::too_many_arguments)]
    pub fn execute(
        &self,
        mode: &RbmmMode,
        a: &BitMatrix,
        dc_in: Option<&DCVector>,
        b: &BitMatrix,
        theta: Option<&ThetaVector>,
        sps: Option<&LayerSps>,
        acc: Option<&mut IntMatrix>,
    ) -> Result<RbmmOutput> {
        mode.cfg.validate()?;
        match mode.tag {
            ModeTag::M1Qkv | ModeTag::F1Ffn1 => {
                let relu = mode.tag == ModeTag::F1Ffn1;
                let theta = require_theta(theta, mode.tag.name(), relu)?;
                let out_scheme = if relu {
                    Scheme::Unsigned01
                } else {
                    Scheme::SignedPM1
                };
                let mut out = BitMatrix::zeros(mode.cfg.l, mode.cfg.d, out_scheme);
                let (dc_full, dc_heads, invocations) =
                    self.dense_binary_into(mode, a, b, theta, &mut out)?;
                self.record(mode.tag, invocations);
                Ok(RbmmOutput {
                    binary: Some(out),
                    integers: None,
                    dc_full,
                    dc_heads,
                    invocations,
                })
            }
            ModeTag::M4Linear => {
                let mut out = IntMatrix::zeros(mode.cfg.l, mode.cfg.d);
                let invocations = self.dense_integer_into(mode, a, None, b, &mut out)?;
                self.record(mode.tag, invocations);
                Ok(RbmmOutput {
                    binary: None,
                    integers: Some(out),
                    dc_full: DCVector::default(),
                    dc_heads: None,
                    invocations,
                })
            }
            ModeTag::F2Ffn2 => {
                let dc = dc_in.ok_or(CobraError::MissingDcInput)?;
                let acc = acc.ok_or(CobraError::MissingAccumulator)?;
                let invocations = self.dense_integer_into(mode, a, Some(dc), b, acc)?;
                self.record(mode.tag, invocations);
                Ok(RbmmOutput {
                    binary: None,
                    integers: None,
                    dc_full: DCVector::default(),
                    dc_heads: None,
                    invocations,
                })
            }
            ModeTag::M2AttnScore => {
                let sps = sps.ok_or(CobraError::MissingSpsThresholds)?;
                let out = self.attention_score(mode, a, b, sps)?;
                self.record(mode.tag, out.invocations);
                Ok(out)
            }
            ModeTag::M3Context => {
                let dc = dc_in.ok_or(CobraError::MissingDcInput)?;
                let theta = require_theta(theta, "M3", false)?;
                let out = self.context(mode, a, dc, b, theta)?;
                self.record(mode.tag, out.invocations);
                Ok(out)
            }
        }
    }

    /// `M1` / `F1` block body: dense `(-1,1) x (-1,1)` with binarized output
    /// written into `out` row by row.
    fn dense_binary_into(
        &self,
        mode: &RbmmMode,
        a: &BitMatrix,
        b: &BitMatrix,
        theta: &ThetaVector,
        out: &mut BitMatrix,
    ) -> Result<(DCVector, Option<Vec<DCVector>>, u64)> {
        let cfg = &mode.cfg;
        check_dims(mode.tag.name(), a, cfg.l, cfg.d, Scheme::SignedPM1)?;
        check_dims(mode.tag.name(), b, cfg.d, cfg.d, Scheme::SignedPM1)?;
        check_theta_len(mode.tag.name(), theta, cfg.d)?;
        let track_heads = mode.tag == ModeTag::M1Qkv;
        let (n_pe, h, d_h, d, nbits) = (cfg.n_pe, cfg.h, cfg.d_h, cfg.d, cfg.d);
        let pop = self.opts.popcount;
        let wpr = out.words_per_row();

        let meta = map_row_chunks_mut(out.data_mut(), wpr, self.opts.sequential, |i, row| {
            row.fill(0);
            let a_words = a.row_words(i);
            let mut m = RowMeta {
                dc_full: 0,
                dc_heads: vec![0u32; if track_heads { h } else { 0 }],
                invocations: 0,
            };
            let mut p = 0usize;
            while p < d {
                m.invocations += 1;
                for j in p..(p + n_pe).min(d) {
                    let dot = rbvm_words(a_words, b.row_words(j), nbits, Scheme::SignedPM1, 0, pop);
                    if quantize_unified(dot, theta.theta[j]) {
                        row[j / WORD_BITS] |= 1u64 << (j % WORD_BITS);
                    } else {
                        m.dc_full += 1;
                        if track_heads {
                            m.dc_heads[j / d_h] += 1;
                        }
                    }
                }
                p += n_pe;
            }
            m
        });

        debug_assert!(out.validate_pads().is_ok());
        Ok(gather_meta(meta, track_heads.then_some(h)))
    }

    /// `M4` / `F2` block body: dense multiply with integer output assigned
    /// (`M4`) or accumulated (`F2`) into `target`.
    #[allow(clippy::needless_range_loop)]
    fn dense_integer_into(
        &self,
        mode: &RbmmMode,
        a: &BitMatrix,
        dc_in: Option<&DCVector>,
        b: &BitMatrix,
        target: &mut IntMatrix,
    ) -> Result<u64> {
        let cfg = &mode.cfg;
        let accumulate = mode.tag == ModeTag::F2Ffn2;
        let scheme = if accumulate {
            Scheme::Unsigned01
        } else {
            Scheme::SignedPM1
        };
        check_dims(mode.tag.name(), a, cfg.l, cfg.d, scheme)?;
        check_dims(mode.tag.name(), b, cfg.d, cfg.d, Scheme::SignedPM1)?;
        if let Some(dc) = dc_in {
            check_dc_len(mode.tag.name(), dc, cfg.l)?;
        } else if scheme == Scheme::Unsigned01 {
            return Err(CobraError::MissingDcInput);
        }
        if target.rows() != cfg.l || target.cols() != cfg.d {
            return Err(CobraError::DimMismatch {
                context: "integer output buffer",
                expected: format!("{}x{}", cfg.l, cfg.d),
                got: format!("{}x{}", target.rows(), target.cols()),
            });
        }
        let (n_pe, d, nbits) = (cfg.n_pe, cfg.d, cfg.d);
        let pop = self.opts.popcount;
        let bound = 1i64 << cfg.output_bits();

        let meta = map_row_chunks_mut(target.data_mut(), d, self.opts.sequential, |i, row| {
            let a_words = a.row_words(i);
            let delta = dc_in.map_or(0, |dc| dc.0[i]);
            let mut invocations = 0u64;
            let mut p = 0usize;
            while p < d {
                invocations += 1;
                for j in p..(p + n_pe).min(d) {
                    let dot = rbvm_words(a_words, b.row_words(j), nbits, scheme, delta, pop);
                    if accumulate {
                        row[j] += dot;
                    } else {
                        row[j] = dot;
                    }
                    debug_assert!((row[j] as i64).abs() < bound);
                }
                p += n_pe;
            }
            invocations
        });
        Ok(meta.into_iter().sum())
    }

    /// `M2`: per-head scores against the keys, thresholded in the polarized
    /// softmax, mask applied by index comparison. All heads of one `(row,
    /// col)` result are produced together and concatenated bitwise.
    #[allow(clippy::needless_range_loop)]
    fn attention_score(
        &self,
        mode: &RbmmMode,
        q: &BitMatrix,
        k: &BitMatrix,
        sps: &LayerSps,
    ) -> Result<RbmmOutput> {
        let cfg = &mode.cfg;
        check_dims("M2 Q", q, cfg.l, cfg.d, Scheme::SignedPM1)?;
        check_dims("M2 K", k, cfg.l, cfg.d, Scheme::SignedPM1)?;
        sps.check_shape(cfg.h, cfg.l, cfg.d_h)?;
        if let Some(mask) = &mode.mask {
            mask.validate(cfg.l)?;
        }
        let (h, d_h, l, n_pe) = (cfg.h, cfg.d_h, cfg.l, cfg.n_pe);
        let pop = self.opts.popcount;

        // Head segments appear consecutively in the d-bit datapacks; slice
        // them out once so the inner loop works on head-width packs.
        let q_heads: Vec<BitMatrix> = (0..h).map(|t| q.extract_cols(t * d_h, d_h)).collect();
        let k_heads: Vec<BitMatrix> = (0..h).map(|t| k.extract_cols(t * d_h, d_h)).collect();
        let mask = mode.mask.as_ref();

        let mut out = IntMatrix::zeros(l, l);
        let meta = map_row_chunks_mut(out.data_mut(), l, self.opts.sequential, |i, concat| {
            let mut m = RowMeta {
                dc_full: 0,
                dc_heads: vec![0u32; h],
                invocations: 0,
            };
            let mut j0 = 0usize;
            while j0 < l {
                m.invocations += 1;
                for j in j0..(j0 + n_pe).min(l) {
                    let masked = mask.is_some_and(|ms| ms.masked(i, j));
                    let mut value = 0i32;
                    for (t, (qh, kh)) in q_heads.iter().zip(&k_heads).enumerate() {
                        let dot = rbvm_words(
                            qh.row_words(i),
                            kh.row_words(j),
                            d_h,
                            Scheme::SignedPM1,
                            0,
                            pop,
                        );
                        let p = ((dot + d_h as i32) / 2) as u32;
                        let bit = !masked && p >= sps.threshold(t, i);
                        if bit {
                            value |= 1 << t;
                        } else {
                            m.dc_heads[t] += 1;
                            m.dc_full += 1;
                        }
                    }
                    concat[j] = value;
                }
                j0 += n_pe;
            }
            m
        });

        let (dc_full, dc_heads, invocations) = gather_meta(meta, Some(h));
        Ok(RbmmOutput {
            binary: None,
            integers: Some(out),
            dc_full,
            dc_heads,
            invocations,
        })
    }

    /// `M3`: per-head `(0,1)` attention maps (stacked head-major into one
    /// `h*l by l` operand) against the transposed value datapacks; binarized
    /// head outputs are laid out contiguously to form an `l by d` matrix.
    fn context(
        &self,
        mode: &RbmmMode,
        a: &BitMatrix,
        dc_in: &DCVector,
        v_t: &BitMatrix,
        theta: &ThetaVector,
    ) -> Result<RbmmOutput> {
        let cfg = &mode.cfg;
        check_dims("M3 attention", a, cfg.h * cfg.l, cfg.l, Scheme::Unsigned01)?;
        check_dims("M3 V^T", v_t, cfg.d, cfg.l, Scheme::SignedPM1)?;
        check_dc_len("M3", dc_in, cfg.h * cfg.l)?;
        check_theta_len("M3", theta, cfg.d)?;
        let (h, d_h, l, n_pe) = (cfg.h, cfg.d_h, cfg.l, cfg.n_pe);
        let pop = self.opts.popcount;

        let mut out = BitMatrix::zeros(l, cfg.d, Scheme::SignedPM1);
        let wpr = out.words_per_row();
        let meta = map_row_chunks_mut(out.data_mut(), wpr, self.opts.sequential, |i, row| {
            row.fill(0);
            let mut m = RowMeta {
                dc_full: 0,
                dc_heads: Vec::new(),
                invocations: 0,
            };
            for t in 0..h {
                let a_words = a.row_words(t * l + i);
                let delta = dc_in.0[t * l + i];
                let mut c0 = 0usize;
                while c0 < d_h {
                    m.invocations += 1;
                    for c in c0..(c0 + n_pe).min(d_h) {
                        let col = t * d_h + c;
                        let dot = rbvm_words(
                            a_words,
                            v_t.row_words(col),
                            l,
                            Scheme::Unsigned01,
                            delta,
                            pop,
                        );
                        if quantize_unified(dot, theta.theta[col]) {
                            row[col / WORD_BITS] |= 1u64 << (col % WORD_BITS);
                        } else {
                            m.dc_full += 1;
                        }
                    }
                    c0 += n_pe;
                }
            }
            m
        });

        debug_assert!(out.validate_pads().is_ok());
        let (dc_full, _, invocations) = gather_meta(meta, None);
        Ok(RbmmOutput {
            binary: Some(out),
            integers: None,
            dc_full,
            dc_heads: None,
            invocations,
        })
    }

    /// Decomposed FFN: `R` alternating `F1`/`F2` block passes over column
    /// blocks of `Y` and row blocks of `Z`, reusing one binary activation
    /// buffer and one integer accumulator of size `l by d` each.
    ///
    /// The result equals the monolithic ReLU-binarized `(X Y) Z` without ever
    /// materializing an `l by FF_size` intermediate.
    pub fn ffn_decomposed(
        &self,
        cfg: &ModelConfig,
        x: &BitMatrix,
        y_blocks: &[BitMatrix],
        z_blocks: &[BitMatrix],
        theta_f1: &ThetaVector,
    ) -> Result<IntMatrix> {
        cfg.validate()?;
        if y_blocks.len() != cfg.r || z_blocks.len() != cfg.r {
            return Err(CobraError::DimMismatch {
                context: "ffn_decomposed blocks",
                expected: format!("{} Y and Z blocks", cfg.r),
                got: format!("{} and {}", y_blocks.len(), z_blocks.len()),
            });
        }
        if !theta_f1.relu_fused {
            return Err(CobraError::MissingTheta("F1 (relu-fused)"));
        }
        check_theta_len("ffn_decomposed", theta_f1, cfg.ff_size)?;

        // The two l x d working buffers of the decomposition; every block
        // pass rewrites them in place.
        let mut e = BitMatrix::zeros(cfg.l, cfg.d, Scheme::Unsigned01);
        self.stats.ffn_working_buffers.fetch_add(1, Ordering::Relaxed);
        let mut acc = IntMatrix::zeros(cfg.l, cfg.d);
        self.stats.ffn_working_buffers.fetch_add(1, Ordering::Relaxed);

        let f1 = RbmmMode::f1(cfg);
        let f2 = RbmmMode::f2(cfg);
        for r in 0..cfg.r {
            let theta_r = theta_f1.slice(r * cfg.d..(r + 1) * cfg.d);
            let (e_dc, _, inv) = self.dense_binary_into(&f1, x, &y_blocks[r], &theta_r, &mut e)?;
            self.record(ModeTag::F1Ffn1, inv);
            let inv = self.dense_integer_into(&f2, &e, Some(&e_dc), &z_blocks[r], &mut acc)?;
            self.record(ModeTag::F2Ffn2, inv);
        }
        Ok(acc)
    }
}

fn gather_meta(
    meta: Vec<RowMeta>,
    heads: Option<usize>,
) -> (DCVector, Option<Vec<DCVector>>, u64) {
    let rows = meta.len();
    let mut dc_full = Vec::with_capacity(rows);
    let mut dc_heads = heads.map(|h| vec![DCVector::zeros(rows); h]);
    let mut invocations = 0u64;
    for (i, m) in meta.into_iter().enumerate() {
        dc_full.push(m.dc_full);
        if let Some(per_head) = &mut dc_heads {
            for (k, z) in m.dc_heads.into_iter().enumerate() {
                per_head[k].0[i] = z;
            }
        }
        invocations += m.invocations;
    }
    (DCVector(dc_full), dc_heads, invocations)
}

fn require_theta<'t>(
    theta: Option<&'t ThetaVector>,
    mode: &'static str,
    relu: bool,
) -> Result<&'t ThetaVector> {
    let t = theta.ok_or(CobraError::MissingTheta(mode))?;
    if t.relu_fused != relu {
        return Err(CobraError::MissingTheta(mode));
    }
    Ok(t)
}

fn check_dims(
    context: &'static str,
    m: &BitMatrix,
    rows: usize,
    cols: usize,
    scheme: Scheme,
) -> Result<()> {
    if m.rows() != rows || m.cols() != cols || m.scheme() != scheme {
        return Err(CobraError::DimMismatch {
            context,
            expected: format!("{rows}x{cols} {}", scheme.name()),
            got: format!("{}x{} {}", m.rows(), m.cols(), m.scheme().name()),
        });
    }
    debug_assert_eq!(m.words_per_row(), words_for(cols));
    Ok(())
}

fn check_dc_len(context: &'static str, dc: &DCVector, len: usize) -> Result<()> {
    if dc.len() != len {
        return Err(CobraError::DimMismatch {
            context,
            expected: format!("{len} dc counts"),
            got: format!("{}", dc.len()),
        });
    }
    Ok(())
}

fn check_theta_len(context: &'static str, theta: &ThetaVector, len: usize) -> Result<()> {
    if theta.len() != len {
        return Err(CobraError::DimMismatch {
            context,
            expected: format!("{len} thresholds"),
            got: format!("{}", theta.len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack::pack_matrix;
    use crate::matrix::IntMatrix;
    use crate::rbmm::{compute_theta, QuantParams};

    fn toy_cfg() -> ModelConfig {
        ModelConfig::new(16, 2, 8, 2, 1, 4).unwrap()
    }

    fn const_matrix(rows: usize, cols: usize, v: i32) -> IntMatrix {
        let mut m = IntMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, v);
            }
        }
        m
    }

    #[test]
    fn m1_all_agreeing_operands_saturate_to_ones() {
        let cfg = toy_cfg();
        let engine = Engine::default();
        let (a, _) = pack_matrix(&const_matrix(cfg.l, cfg.d, 1), Scheme::SignedPM1).unwrap();
        let (b, _) = pack_matrix(&const_matrix(cfg.d, cfg.d, 1), Scheme::SignedPM1).unwrap();
        let q = QuantParams::new(1, vec![cfg.d as i32; cfg.d], Scheme::SignedPM1, false).unwrap();
        let theta = compute_theta(&q);
        let out = engine
            .execute(&RbmmMode::m1(&cfg), &a, None, &b, Some(&theta), None, None)
            .unwrap();
        let bits = out.binary.unwrap();
        for i in 0..cfg.l {
            assert_eq!(bits.row_popcount(i), cfg.d);
        }
        assert!(out.dc_full.0.iter().all(|&z| z == 0));
    }

    #[test]
    fn m2_self_attention_diagonal_is_one_at_zero_threshold() {
        let cfg = toy_cfg();
        let engine = Engine::default();
        let mut vals = IntMatrix::zeros(cfg.l, cfg.d);
        let mut s = 99u64;
        for r in 0..cfg.l {
            for c in 0..cfg.d {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                vals.set(r, c, if (s >> 40) & 1 == 1 { 1 } else { -1 });
            }
        }
        let (q, _) = pack_matrix(&vals, Scheme::SignedPM1).unwrap();
        let sps = LayerSps::per_head(vec![0.0; cfg.h], cfg.d_h, cfg.l).unwrap();
        let out = engine
            .execute(&RbmmMode::m2(&cfg, None), &q, None, &q, None, Some(&sps), None)
            .unwrap();
        let concat = out.integers.unwrap();
        for i in 0..cfg.l {
            assert_eq!(concat.get(i, i), (1 << cfg.h) - 1, "diagonal row {i}");
        }
    }

    #[test]
    fn missing_arguments_are_rejected() {
        let cfg = toy_cfg();
        let engine = Engine::default();
        let (a, dc) = pack_matrix(&const_matrix(cfg.l, cfg.d, 1), Scheme::Unsigned01).unwrap();
        let (b, _) = pack_matrix(&const_matrix(cfg.d, cfg.d, 1), Scheme::SignedPM1).unwrap();
        let (s, _) = pack_matrix(&const_matrix(cfg.l, cfg.d, 1), Scheme::SignedPM1).unwrap();

        // M2 without thresholds
        let err = engine
            .execute(&RbmmMode::m2(&cfg, None), &s, None, &s, None, None, None)
            .unwrap_err();
        assert!(matches!(err, CobraError::MissingSpsThresholds));

        // F2 without accumulator
        let err = engine
            .execute(&RbmmMode::f2(&cfg), &a, Some(&dc), &b, None, None, None)
            .unwrap_err();
        assert!(matches!(err, CobraError::MissingAccumulator));

        // F2 without dc counts
        let mut acc = IntMatrix::zeros(cfg.l, cfg.d);
        let err = engine
            .execute(&RbmmMode::f2(&cfg), &a, None, &b, None, None, Some(&mut acc))
            .unwrap_err();
        assert!(matches!(err, CobraError::MissingDcInput));

        // M1 with wrong operand shape
        let q = QuantParams::new(1, vec![0; cfg.d], Scheme::SignedPM1, false).unwrap();
        let theta = compute_theta(&q);
        let (small, _) = pack_matrix(&const_matrix(2, cfg.d, 1), Scheme::SignedPM1).unwrap();
        let err = engine
            .execute(&RbmmMode::m1(&cfg), &small, None, &b, Some(&theta), None, None)
            .unwrap_err();
        assert!(matches!(err, CobraError::DimMismatch { .. }));
    }

    #[test]
    fn invocation_counts_follow_the_tiling() {
        let cfg = toy_cfg();
        let engine = Engine::default();
        let (a, _) = pack_matrix(&const_matrix(cfg.l, cfg.d, 1), Scheme::SignedPM1).unwrap();
        let (b, _) = pack_matrix(&const_matrix(cfg.d, cfg.d, 1), Scheme::SignedPM1).unwrap();
        let q = QuantParams::new(1, vec![0; cfg.d], Scheme::SignedPM1, false).unwrap();
        let theta = compute_theta(&q);
        let out = engine
            .execute(&RbmmMode::m1(&cfg), &a, None, &b, Some(&theta), None, None)
            .unwrap();
        let expected = (cfg.l * cfg.d.div_ceil(cfg.n_pe)) as u64;
        assert_eq!(out.invocations, expected);
        assert_eq!(engine.stats().invocations_for(ModeTag::M1Qkv), expected);
    }

    #[test]
    fn causal_mask_zeroes_upper_triangle() {
        let cfg = toy_cfg();
        let engine = Engine::default();
        let (q, _) = pack_matrix(&const_matrix(cfg.l, cfg.d, 1), Scheme::SignedPM1).unwrap();
        let sps = LayerSps::per_head(vec![0.0; cfg.h], cfg.d_h, cfg.l).unwrap();
        let mode = RbmmMode::m2(&cfg, Some(AttentionMask::causal(cfg.l)));
        let out = engine
            .execute(&mode, &q, None, &q, None, Some(&sps), None)
            .unwrap();
        let concat = out.integers.unwrap();
        for i in 0..cfg.l {
            for j in 0..cfg.l {
                if j > i {
                    assert_eq!(concat.get(i, j), 0, "({i},{j}) should be masked");
                } else {
                    assert_eq!(concat.get(i, j), (1 << cfg.h) - 1);
                }
            }
        }
        // masked zeros are counted in the per-head returns
        let dc = out.dc_heads.unwrap();
        for head in &dc {
            for i in 0..cfg.l {
                assert_eq!(head.0[i] as usize, cfg.l - 1 - i);
            }
        }
    }

    #[test]
    fn ffn_uses_exactly_two_working_buffers() {
        let cfg = toy_cfg();
        let engine = Engine::default();
        let (x, _) = pack_matrix(&const_matrix(cfg.l, cfg.d, 1), Scheme::SignedPM1).unwrap();
        let mk = |v| {
            pack_matrix(&const_matrix(cfg.d, cfg.d, v), Scheme::SignedPM1)
                .unwrap()
                .0
        };
        let y: Vec<BitMatrix> = (0..cfg.r).map(|_| mk(1)).collect();
        let z: Vec<BitMatrix> = (0..cfg.r).map(|_| mk(-1)).collect();
        let q = QuantParams::new(2, vec![0; cfg.ff_size], Scheme::Unsigned01, true).unwrap();
        let theta = compute_theta(&q);
        let before = engine.stats().ffn_working_buffers;
        engine.ffn_decomposed(&cfg, &x, &y, &z, &theta).unwrap();
        assert_eq!(engine.stats().ffn_working_buffers - before, 2);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let cfg = toy_cfg();
        let par = Engine::default();
        let seq = Engine::new(EngineOptions {
            sequential: true,
            ..EngineOptions::default()
        });
        let mut vals = IntMatrix::zeros(cfg.l, cfg.d);
        let mut wvals = IntMatrix::zeros(cfg.d, cfg.d);
        let mut s = 7u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            s
        };
        for r in 0..cfg.l {
            for c in 0..cfg.d {
                vals.set(r, c, if next() & 1 == 1 { 1 } else { -1 });
            }
        }
        for r in 0..cfg.d {
            for c in 0..cfg.d {
                wvals.set(r, c, if next() & 1 == 1 { 1 } else { -1 });
            }
        }
        let (a, _) = pack_matrix(&vals, Scheme::SignedPM1).unwrap();
        let (b, _) = pack_matrix(&wvals, Scheme::SignedPM1).unwrap();
        let q = QuantParams::new(1, vec![1; cfg.d], Scheme::SignedPM1, false).unwrap();
        let theta = compute_theta(&q);
        let mode = RbmmMode::m1(&cfg);
        let o1 = par
            .execute(&mode, &a, None, &b, Some(&theta), None, None)
            .unwrap();
        let o2 = seq
            .execute(&mode, &a, None, &b, Some(&theta), None, None)
            .unwrap();
        assert_eq!(o1.binary, o2.binary);
        assert_eq!(o1.dc_full, o2.dc_full);
        assert_eq!(o1.invocations, o2.invocations);
    }
}
