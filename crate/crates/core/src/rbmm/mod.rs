//! Real-binary vector and matrix multiplication.
//!
//! The dot product of bit-packed operands reduces to bitwise logic plus a
//! popcount. With both operands in `(-1,1)` the identity is
//! `2*popcount(XNOR(a, b)) - N`; with `a` in `(0,1)` it becomes
//! `2*popcount(AND(a, b)) - N + delta`, where `delta` is the number of true
//! zeros in `a` ("don't care" count). `b` is always `(-1,1)`-encoded.
//!
//! Output binarization folds the scale/shift quantizer into a single integer
//! threshold comparison per output column, optionally absorbing the FFN ReLU.

mod engine;

pub use engine::{
    AttentionMask, Engine, EngineOptions, ModeTag, OutputKind, RbmmMode, RbmmOutput,
    StatsSnapshot,
};

use crate::bitpack::{tail_mask, words_for, Scheme};
use crate::error::{CobraError, Result};
use crate::popcount::{popcount_words_tree, PopcountMode};

/// A packed vector operand: `nbits` live bits in `words`, pads zero.
#[derive(Debug, Clone, Copy)]
pub struct RbvmSegment<'a> {
    pub words: &'a [u64],
    pub nbits: usize,
    pub scheme: Scheme,
    pub delta: Option<u32>,
}

/// Dot product of one packed row against one packed `(-1,1)` column.
///
/// `delta_a` must be supplied exactly when `scheme_a` is `(0,1)`.
pub fn rbvm(
    a: &[u64],
    b: &[u64],
    nbits: usize,
    scheme_a: Scheme,
    delta_a: Option<u32>,
) -> Result<i32> {
    check_operand(a, nbits)?;
    check_operand(b, nbits)?;
    let delta = match (scheme_a, delta_a) {
        (Scheme::SignedPM1, None) => 0,
        (Scheme::SignedPM1, Some(_)) => return Err(CobraError::UnexpectedDcInput),
        (Scheme::Unsigned01, Some(d)) => d,
        (Scheme::Unsigned01, None) => return Err(CobraError::MissingDcInput),
    };
    Ok(rbvm_words(a, b, nbits, scheme_a, delta, PopcountMode::Native))
}

fn check_operand(words: &[u64], nbits: usize) -> Result<()> {
    let needed = words_for(nbits);
    if words.len() != needed {
        return Err(CobraError::BitLengthMismatch {
            a: words.len() * 64,
            b: nbits,
        });
    }
    if needed > 0 && words[needed - 1] & !tail_mask(nbits) != 0 {
        return Err(CobraError::StrayBits { nbits });
    }
    Ok(())
}

/// Unchecked kernel; callers guarantee matching lengths and clean pads.
#[inline]
pub(crate) fn rbvm_words(
    a: &[u64],
    b: &[u64],
    nbits: usize,
    scheme_a: Scheme,
    delta_a: u32,
    mode: PopcountMode,
) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    debug_assert_eq!(a.len(), words_for(nbits));
    let n = a.len();
    let p = match mode {
        PopcountMode::Native => {
            let mut p = 0u32;
            match scheme_a {
                Scheme::SignedPM1 => {
                    for i in 0..n {
                        let mut x = !(a[i] ^ b[i]);
                        if i == n - 1 {
                            x &= tail_mask(nbits);
                        }
                        p += x.count_ones();
                    }
                }
                Scheme::Unsigned01 => {
                    for i in 0..n {
                        p += (a[i] & b[i]).count_ones();
                    }
                }
            }
            p
        }
        PopcountMode::CompressorTree => {
            let mut buf = [0u64; 16];
            let (slice, mut heap);
            if n <= buf.len() {
                for i in 0..n {
                    buf[i] = combine(a[i], b[i], scheme_a);
                }
                if n > 0 {
                    buf[n - 1] &= tail_mask(nbits);
                }
                slice = &buf[..n];
            } else {
                heap = vec![0u64; n];
                for i in 0..n {
                    heap[i] = combine(a[i], b[i], scheme_a);
                }
                heap[n - 1] &= tail_mask(nbits);
                slice = &heap;
            }
            popcount_words_tree(slice, nbits)
        }
    };
    2 * p as i32 - nbits as i32 + delta_a as i32
}

#[inline]
fn combine(a: u64, b: u64, scheme: Scheme) -> u64 {
    match scheme {
        Scheme::SignedPM1 => !(a ^ b),
        Scheme::Unsigned01 => a & b,
    }
}

/// Segmented dot product: the sum of per-segment RBVMs equals the RBVM of the
/// concatenated datapacks. This is the accumulation performed across head
/// partials before a full-width result is produced.
pub fn rbvm_split_accumulate(a_parts: &[RbvmSegment], b_parts: &[(&[u64], usize)]) -> Result<i64> {
    if a_parts.len() != b_parts.len() {
        return Err(CobraError::DimMismatch {
            context: "rbvm_split_accumulate",
            expected: format!("{} segments", a_parts.len()),
            got: format!("{} segments", b_parts.len()),
        });
    }
    let mut total = 0i64;
    for (a, (b_words, b_bits)) in a_parts.iter().zip(b_parts) {
        if a.nbits != *b_bits {
            return Err(CobraError::BitLengthMismatch {
                a: a.nbits,
                b: *b_bits,
            });
        }
        total += rbvm(a.words, b_words, a.nbits, a.scheme, a.delta)? as i64;
    }
    Ok(total)
}

/// Scale/shift quantizer parameters for one engine output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantParams {
    /// Scaling factor, a positive integer.
    pub alpha: u32,
    /// Shift per output column.
    pub beta: Vec<i32>,
    /// Domain of the produced binary output.
    pub scheme: Scheme,
    /// Fold the FFN ReLU into the threshold; `(0,1)` outputs only.
    pub relu_fused: bool,
}

impl QuantParams {
    pub fn new(alpha: u32, beta: Vec<i32>, scheme: Scheme, relu_fused: bool) -> Result<Self> {
        if alpha == 0 {
            return Err(CobraError::InvalidAlpha(0.0));
        }
        if relu_fused && scheme != Scheme::Unsigned01 {
            return Err(CobraError::InvalidConfig(
                "ReLU fusion applies to (0,1) outputs only".into(),
            ));
        }
        Ok(QuantParams {
            alpha,
            beta,
            scheme,
            relu_fused,
        })
    }
}

/// Per-column integer thresholds folded out of [`QuantParams`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaVector {
    pub theta: Vec<i32>,
    pub relu_fused: bool,
}

impl ThetaVector {
    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Contiguous column sub-range, e.g. one FFN block out of a full-width
    /// threshold vector.
    pub fn slice(&self, range: std::ops::Range<usize>) -> ThetaVector {
        ThetaVector {
            theta: self.theta[range].to_vec(),
            relu_fused: self.relu_fused,
        }
    }
}

/// Round half toward positive infinity, i.e. `ceil` at exact halves.
///
/// Applied to `alpha/2 + beta`, this is the unique rounding that makes the
/// folded threshold agree with the two-step clip(round(.)) quantizer for
/// every integer input, shifts of either sign included.
#[inline]
pub(crate) fn round_half_up_div2(numer: i64) -> i64 {
    (numer + 1).div_euclid(2)
}

/// Fold quantizer parameters into per-column integer thresholds.
///
/// `(-1,1)` outputs threshold at `beta_j`; `(0,1)` outputs at
/// `round(alpha/2 + beta_j)`, clamped at zero when the ReLU is fused in.
pub fn compute_theta(q: &QuantParams) -> ThetaVector {
    let theta = q
        .beta
        .iter()
        .map(|&b| {
            let t = match q.scheme {
                Scheme::SignedPM1 => b as i64,
                Scheme::Unsigned01 => round_half_up_div2(q.alpha as i64 + 2 * b as i64),
            };
            let t = if q.relu_fused { t.max(0) } else { t };
            i32::try_from(t).expect("threshold exceeds 32-bit range")
        })
        .collect();
    ThetaVector {
        theta,
        relu_fused: q.relu_fused,
    }
}

/// Unified binarization: bit is `1` exactly when `c - theta_j >= 0`.
#[inline]
pub fn quantize_unified(c: i32, theta_j: i32) -> bool {
    c >= theta_j
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_signed_packs_max_out() {
        let a = [0b101101u64];
        assert_eq!(rbvm(&a, &a, 6, Scheme::SignedPM1, None).unwrap(), 6);
    }

    #[test]
    fn complementary_signed_packs_min_out() {
        let a = [0b101101u64];
        let b = [!0b101101u64 & 0x3f];
        assert_eq!(rbvm(&a, &b, 6, Scheme::SignedPM1, None).unwrap(), -6);
    }

    #[test]
    fn zero_unsigned_vector_gives_zero() {
        let a = [0u64];
        for b in [0u64, 0b111111, 0b010101] {
            assert_eq!(rbvm(&a, &[b], 6, Scheme::Unsigned01, Some(6)).unwrap(), 0);
        }
    }

    #[test]
    fn delta_pairing_is_enforced() {
        let a = [0u64];
        assert!(matches!(
            rbvm(&a, &a, 6, Scheme::Unsigned01, None),
            Err(CobraError::MissingDcInput)
        ));
        assert!(matches!(
            rbvm(&a, &a, 6, Scheme::SignedPM1, Some(0)),
            Err(CobraError::UnexpectedDcInput)
        ));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let a = [0u64, 0];
        let b = [0u64];
        assert!(matches!(
            rbvm(&a, &b, 70, Scheme::SignedPM1, None),
            Err(CobraError::BitLengthMismatch { .. })
        ));
    }

    #[test]
    fn both_popcount_modes_agree() {
        let mut s = 0x1234_5678_9abc_def0u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            s
        };
        for nbits in [1usize, 6, 63, 64, 65, 128, 768, 1100] {
            let n = nbits.div_ceil(64);
            for _ in 0..50 {
                let mut a: Vec<u64> = (0..n).map(|_| next()).collect();
                let mut b: Vec<u64> = (0..n).map(|_| next()).collect();
                a[n - 1] &= tail_mask(nbits);
                b[n - 1] &= tail_mask(nbits);
                for scheme in [Scheme::SignedPM1, Scheme::Unsigned01] {
                    let delta = match scheme {
                        Scheme::SignedPM1 => 0,
                        Scheme::Unsigned01 => {
                            nbits as u32 - a.iter().map(|w| w.count_ones()).sum::<u32>()
                        }
                    };
                    let native = rbvm_words(&a, &b, nbits, scheme, delta, PopcountMode::Native);
                    let tree =
                        rbvm_words(&a, &b, nbits, scheme, delta, PopcountMode::CompressorTree);
                    assert_eq!(native, tree, "nbits={nbits} scheme={scheme:?}");
                }
            }
        }
    }

    #[test]
    fn single_segment_split_equals_rbvm() {
        let a = [0b110010u64];
        let b = [0b011010u64];
        let whole = rbvm(&a, &b, 6, Scheme::SignedPM1, None).unwrap();
        let seg = RbvmSegment {
            words: &a,
            nbits: 6,
            scheme: Scheme::SignedPM1,
            delta: None,
        };
        assert_eq!(
            rbvm_split_accumulate(&[seg], &[(&b[..], 6)]).unwrap(),
            whole as i64
        );
    }

    #[test]
    fn head_segmented_768_pack_matches_whole() {
        let mut s = 0x0badc0deu64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            s
        };
        let a: Vec<u64> = (0..12).map(|_| next()).collect();
        let b: Vec<u64> = (0..12).map(|_| next()).collect();
        let whole = rbvm(&a, &b, 768, Scheme::SignedPM1, None).unwrap();
        let a_parts: Vec<RbvmSegment> = (0..12)
            .map(|k| RbvmSegment {
                words: &a[k..k + 1],
                nbits: 64,
                scheme: Scheme::SignedPM1,
                delta: None,
            })
            .collect();
        let b_parts: Vec<(&[u64], usize)> = (0..12).map(|k| (&b[k..k + 1], 64)).collect();
        assert_eq!(
            rbvm_split_accumulate(&a_parts, &b_parts).unwrap(),
            whole as i64
        );
    }

    #[test]
    fn mismatched_segmentation_is_rejected() {
        let a = [0u64];
        let seg = RbvmSegment {
            words: &a,
            nbits: 64,
            scheme: Scheme::SignedPM1,
            delta: None,
        };
        assert!(rbvm_split_accumulate(&[seg], &[]).is_err());
        assert!(rbvm_split_accumulate(&[seg], &[(&a[..], 32)]).is_err());
    }

    #[test]
    fn theta_signed_is_beta() {
        let q = QuantParams::new(4, vec![5], Scheme::SignedPM1, false).unwrap();
        assert_eq!(compute_theta(&q).theta, vec![5]);
    }

    #[test]
    fn theta_unsigned_rounds_half_alpha_plus_beta() {
        let q = QuantParams::new(4, vec![3], Scheme::Unsigned01, false).unwrap();
        assert_eq!(compute_theta(&q).theta, vec![5]);
    }

    #[test]
    fn theta_relu_clamps_at_zero() {
        let q = QuantParams::new(4, vec![-10], Scheme::Unsigned01, true).unwrap();
        assert_eq!(compute_theta(&q).theta, vec![0]);
    }

    #[test]
    fn quantize_boundary_is_inclusive() {
        assert!(quantize_unified(7, 7));
        assert!(!quantize_unified(6, 7));
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(QuantParams::new(0, vec![], Scheme::Unsigned01, false).is_err());
        assert!(QuantParams::new(1, vec![], Scheme::SignedPM1, true).is_err());
    }

    /// Two-step reference: clip(round((c - beta)/alpha), 0, 1) for (0,1),
    /// sign((c - beta)/alpha) with sign(0) = 1 for (-1,1); ReLU applied first
    /// when fused. Evaluated without the folded threshold.
    fn two_step_bit(c: i32, alpha: u32, beta: i32, scheme: Scheme, relu: bool) -> bool {
        let c = if relu { c.max(0) } else { c };
        let x = (c as f64 - beta as f64) / alpha as f64;
        match scheme {
            Scheme::SignedPM1 => x >= 0.0,
            Scheme::Unsigned01 => {
                let rounded = (x + 0.5).floor();
                rounded.clamp(0.0, 1.0) == 1.0
            }
        }
    }

    proptest! {
        #[test]
        fn fused_equals_two_step(alpha in 1u32..64, beta in -200i32..200, relu in any::<bool>()) {
            // ReLU fusion is defined for non-negative shifts.
            let beta = if relu { beta.abs() } else { beta };
            let scheme = if relu || beta % 2 == 0 { Scheme::Unsigned01 } else { Scheme::SignedPM1 };
            let q = QuantParams::new(alpha, vec![beta], scheme, relu).unwrap();
            let t = compute_theta(&q);
            for c in -500..=500 {
                prop_assert_eq!(
                    quantize_unified(c, t.theta[0]),
                    two_step_bit(c, alpha, beta, scheme, relu),
                    "c={} alpha={} beta={} scheme={:?} relu={}", c, alpha, beta, scheme, relu
                );
            }
        }

        #[test]
        fn split_accumulate_equals_whole(seed in any::<u64>(), cut1 in 1usize..300, cut2 in 300usize..700) {
            let mut s = seed.max(1);
            let mut next = move || { s ^= s << 13; s ^= s >> 7; s ^= s << 17; s };
            let nbits = 768usize;
            let mut a: Vec<u64> = (0..12).map(|_| next()).collect();
            let mut b: Vec<u64> = (0..12).map(|_| next()).collect();
            a[11] &= tail_mask(nbits);
            b[11] &= tail_mask(nbits);
            let whole = rbvm(&a, &b, nbits, Scheme::SignedPM1, None).unwrap() as i64;

            // re-pack three arbitrary cut segments
            let cuts = [0, cut1, cut2, nbits];
            let mut a_bufs = Vec::new();
            let mut b_bufs = Vec::new();
            for w in cuts.windows(2) {
                let (start, end) = (w[0], w[1]);
                let len = end - start;
                let mut abuf = vec![0u64; len.div_ceil(64)];
                let mut bbuf = vec![0u64; len.div_ceil(64)];
                for bit in 0..len {
                    let src = start + bit;
                    if a[src / 64] >> (src % 64) & 1 == 1 { abuf[bit / 64] |= 1 << (bit % 64); }
                    if b[src / 64] >> (src % 64) & 1 == 1 { bbuf[bit / 64] |= 1 << (bit % 64); }
                }
                a_bufs.push((abuf, len));
                b_bufs.push((bbuf, len));
            }
            let a_parts: Vec<RbvmSegment> = a_bufs.iter().map(|(w, n)| RbvmSegment {
                words: w, nbits: *n, scheme: Scheme::SignedPM1, delta: None,
            }).collect();
            let b_parts: Vec<(&[u64], usize)> = b_bufs.iter().map(|(w, n)| (w.as_slice(), *n)).collect();
            prop_assert_eq!(rbvm_split_accumulate(&a_parts, &b_parts).unwrap(), whole);
        }
    }
}
