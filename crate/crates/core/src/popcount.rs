//! Population count: native instruction path and a faithful software model of
//! the ROM-based 6:3 compressor tree that counts 36 bits in three stages.
//! Both paths are bit-equivalent; only their cost differs, which is what the
//! kernel ablation benchmarks measure.

use crate::bitpack::{tail_mask, WORD_BITS};
use crate::error::{CobraError, Result};

/// Which popcount implementation the engine runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PopcountMode {
    #[default]
    Native,
    CompressorTree,
}

impl PopcountMode {
    pub fn name(self) -> &'static str {
        match self {
            PopcountMode::Native => "native",
            PopcountMode::CompressorTree => "compressor",
        }
    }
}

/// The 64-entry ROM of the 6:3 compressor, built bit by bit so the table is
/// independent of the native popcount it gets tested against.
const COMPRESS_6_3_ROM: [u8; 64] = {
    let mut rom = [0u8; 64];
    let mut x = 0usize;
    while x < 64 {
        let mut count = 0u8;
        let mut bit = 0;
        while bit < 6 {
            count += ((x >> bit) & 1) as u8;
            bit += 1;
        }
        rom[x] = count;
        x += 1;
    }
    rom
};

/// Count the set bits of a 6-bit value through the compressor ROM.
///
/// The domain is enforced by masking, mirroring a 6-bit address bus.
#[inline]
pub fn compress_6_3(x: u64) -> u32 {
    COMPRESS_6_3_ROM[(x & 0x3f) as usize] as u32
}

/// Count the set bits of a 36-bit value with the three-stage compressor tree.
///
/// Stage 1 feeds each of the six 6-bit groups through a compressor. Stage 2
/// compresses the third, second and first bits of those six partial counts
/// separately. Stage 3 recombines the three stage-2 counts with a shift-add.
pub fn popcount_tree36(x: u64) -> u32 {
    debug_assert!(x < (1u64 << 36));
    let mut stage1 = [0u32; 6];
    for (g, slot) in stage1.iter_mut().enumerate() {
        *slot = compress_6_3(x >> (6 * g));
    }
    let mut thirds = 0u64;
    let mut seconds = 0u64;
    let mut firsts = 0u64;
    for (g, c) in stage1.iter().enumerate() {
        thirds |= (((c >> 2) & 1) as u64) << g;
        seconds |= (((c >> 1) & 1) as u64) << g;
        firsts |= ((c & 1) as u64) << g;
    }
    let n4 = compress_6_3(thirds);
    let n2 = compress_6_3(seconds);
    let n1 = compress_6_3(firsts);
    let total = (n4 << 2) + (n2 << 1) + n1;
    debug_assert_eq!(total, stage1.iter().sum::<u32>());
    total
}

/// Count set bits of an `nbits`-wide datapack stored in `words`.
///
/// The pack is consumed in 36-bit groups fed to [`popcount_tree36`]; a final
/// short group is zero padded. Any set bit beyond `nbits` is rejected.
pub fn popcount_wide(words: &[u64], nbits: usize) -> Result<u32> {
    check_tail(words, nbits)?;
    Ok(popcount_words_tree(words, nbits))
}

fn check_tail(words: &[u64], nbits: usize) -> Result<()> {
    let needed = nbits.div_ceil(WORD_BITS);
    if words.len() < needed {
        return Err(CobraError::BitLengthMismatch {
            a: words.len() * WORD_BITS,
            b: nbits,
        });
    }
    if needed > 0 && words[needed - 1] & !tail_mask(nbits) != 0 {
        return Err(CobraError::StrayBits { nbits });
    }
    if words[needed..].iter().any(|&w| w != 0) {
        return Err(CobraError::StrayBits { nbits });
    }
    Ok(())
}

/// Tree-path popcount over a pad-clean word slice (no validation).
pub(crate) fn popcount_words_tree(words: &[u64], nbits: usize) -> u32 {
    let mut total = 0u32;
    let mut consumed = 0usize;
    while consumed < nbits {
        let group = (nbits - consumed).min(36);
        total += popcount_tree36(extract_group(words, consumed, group));
        consumed += group;
    }
    total
}

/// Pull `len <= 36` bits starting at `offset` out of a word slice.
#[inline]
fn extract_group(words: &[u64], offset: usize, len: usize) -> u64 {
    let w = offset / WORD_BITS;
    let shift = offset % WORD_BITS;
    let mut v = words[w] >> shift;
    if shift != 0 && w + 1 < words.len() {
        v |= words[w + 1] << (WORD_BITS - shift);
    }
    v & ((1u64 << len) - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> impl FnMut() -> u64 {
        let mut s = seed.max(1);
        move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            s
        }
    }

    #[test]
    fn compressor_rom_edge_values() {
        assert_eq!(compress_6_3(0b000000), 0);
        assert_eq!(compress_6_3(0b111111), 6);
    }

    #[test]
    fn compressor_rom_matches_native_exhaustively() {
        for x in 0u64..64 {
            assert_eq!(compress_6_3(x), x.count_ones());
        }
    }

    #[test]
    fn tree36_edges_and_random_match_native() {
        assert_eq!(popcount_tree36(0), 0);
        assert_eq!(popcount_tree36((1 << 36) - 1), 36);
        let mut next = rng(0x5eed);
        for _ in 0..100_000 {
            let x = next() & ((1 << 36) - 1);
            assert_eq!(popcount_tree36(x), x.count_ones());
        }
    }

    #[test]
    fn wide_768_zero_and_full() {
        let zeros = [0u64; 12];
        assert_eq!(popcount_wide(&zeros, 768).unwrap(), 0);
        let ones = [u64::MAX; 12];
        assert_eq!(popcount_wide(&ones, 768).unwrap(), 768);
    }

    #[test]
    fn wide_random_matches_native_sum() {
        let mut next = rng(0xfeed);
        for nbits in [1usize, 36, 37, 64, 100, 768] {
            for _ in 0..200 {
                let n_words = nbits.div_ceil(64);
                let mut words: Vec<u64> = (0..n_words).map(|_| next()).collect();
                words[n_words - 1] &= tail_mask(nbits);
                let expect: u32 = words.iter().map(|w| w.count_ones()).sum();
                assert_eq!(popcount_wide(&words, nbits).unwrap(), expect, "nbits={nbits}");
            }
        }
    }

    #[test]
    fn wide_rejects_stray_bits() {
        let words = [0u64, 1 << 10];
        let err = popcount_wide(&words, 70).unwrap_err();
        assert!(matches!(err, CobraError::StrayBits { nbits: 70 }));
    }

    #[test]
    fn composed_16_bit_domain_exhaustive() {
        for x in 0u64..=0xffff {
            assert_eq!(popcount_tree36(x), x.count_ones());
        }
    }
}
