//! Bit-packed binary matrices.
//!
//! Both binarization domains share one physical representation: an element is
//! a single bit, `1` meaning `+1` and `0` meaning `-1` or `0` depending on the
//! scheme tag. Rows are packed LSB-first into 64-bit words so that column `c`
//! lives in word `c / 64` at bit `c % 64`; trailing pad bits of the last word
//! in each row are always zero. `(0,1)` operands additionally carry a per-row
//! count of their zeros (the "don't care" count) which downstream dot products
//! need to correct the popcount identity.

use crate::error::{CobraError, Result};
use crate::matrix::IntMatrix;

pub const WORD_BITS: usize = 64;

/// Binarization domain of a packed matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Elements in `{-1, +1}`, `-1` encoded as bit `0`.
    SignedPM1,
    /// Elements in `{0, 1}`, kept literal; zeros tracked by [`DCVector`].
    Unsigned01,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::SignedPM1 => "(-1,1)",
            Scheme::Unsigned01 => "(0,1)",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Scheme::SignedPM1 => 0,
            Scheme::Unsigned01 => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Scheme::SignedPM1),
            1 => Some(Scheme::Unsigned01),
            _ => None,
        }
    }
}

/// Per-row zero counts of a `(0,1)` operand.
///
/// For a `(-1,1)` operand the counts are all zero and unused.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DCVector(pub Vec<u32>);

impl DCVector {
    pub fn zeros(rows: usize) -> Self {
        DCVector(vec![0; rows])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Recount zeros straight from an unsigned matrix.
    pub fn recount(m: &BitMatrix) -> Self {
        DCVector(
            (0..m.rows())
                .map(|r| (m.cols() - m.row_popcount(r)) as u32)
                .collect(),
        )
    }

    /// Concatenate several per-head vectors into one stacked vector.
    pub fn concat(parts: &[&DCVector]) -> Self {
        DCVector(parts.iter().flat_map(|d| d.0.iter().copied()).collect())
    }
}

/// A binary matrix packed one bit per element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    scheme: Scheme,
    words_per_row: usize,
    data: Vec<u64>,
}

pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask covering the live bits of the final word of an `nbits` row.
pub(crate) fn tail_mask(nbits: usize) -> u64 {
    match nbits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize, scheme: Scheme) -> Self {
        let words_per_row = words_for(cols);
        BitMatrix {
            rows,
            cols,
            scheme,
            words_per_row,
            data: vec![0; rows * words_per_row],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.rows && c < self.cols);
        let w = self.data[r * self.words_per_row + c / WORD_BITS];
        (w >> (c % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, bit: bool) {
        debug_assert!(r < self.rows && c < self.cols);
        let w = &mut self.data[r * self.words_per_row + c / WORD_BITS];
        let m = 1u64 << (c % WORD_BITS);
        if bit {
            *w |= m;
        } else {
            *w &= !m;
        }
    }

    #[inline]
    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.data[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [u64] {
        &mut self.data
    }

    pub fn row_popcount(&self, r: usize) -> usize {
        self.row_words(r).iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Every pad bit must be zero; checked after construction and mutation.
    pub fn validate_pads(&self) -> Result<()> {
        let mask = tail_mask(self.cols);
        if mask != u64::MAX || self.words_per_row * WORD_BITS != self.cols {
            for r in 0..self.rows {
                let last = self.row_words(r)[self.words_per_row - 1];
                if last & !mask != 0 {
                    return Err(CobraError::PadBitsNonzero);
                }
            }
        }
        Ok(())
    }

    /// Copy a column range `[start, start + len)` out of every row.
    ///
    /// Used to slice per-head segments out of full-width datapacks; the
    /// segment need not be word aligned.
    pub fn extract_cols(&self, start: usize, len: usize) -> BitMatrix {
        assert!(start + len <= self.cols, "column range out of bounds");
        let mut out = BitMatrix::zeros(self.rows, len, self.scheme);
        let out_words = out.words_per_row;
        for r in 0..self.rows {
            let src = self.row_words(r);
            for ow in 0..out_words {
                let bit_off = start + ow * WORD_BITS;
                let w_idx = bit_off / WORD_BITS;
                let shift = bit_off % WORD_BITS;
                let mut word = src[w_idx] >> shift;
                if shift != 0 && w_idx + 1 < src.len() {
                    word |= src[w_idx + 1] << (WORD_BITS - shift);
                }
                out.data[r * out_words + ow] = word;
            }
            let last = &mut out.data[r * out_words + out_words - 1];
            *last &= tail_mask(len);
        }
        out
    }

    /// Stack matrices with identical shape and scheme on top of each other.
    pub fn stack_rows(parts: &[&BitMatrix]) -> Result<BitMatrix> {
        let first = parts.first().ok_or(CobraError::DimMismatch {
            context: "BitMatrix::stack_rows",
            expected: "at least one part".into(),
            got: "none".into(),
        })?;
        let mut out = BitMatrix::zeros(0, first.cols, first.scheme);
        out.words_per_row = first.words_per_row;
        for p in parts {
            if p.cols != first.cols || p.scheme != first.scheme {
                return Err(CobraError::DimMismatch {
                    context: "BitMatrix::stack_rows",
                    expected: format!("{} cols, scheme {}", first.cols, first.scheme.name()),
                    got: format!("{} cols, scheme {}", p.cols, p.scheme.name()),
                });
            }
            out.data.extend_from_slice(&p.data);
            out.rows += p.rows;
        }
        Ok(out)
    }

    /// Serialized blob: rows u32 LE, cols u32 LE, scheme u8, 3 pad bytes,
    /// then `ceil(cols/64) * rows` little-endian u64 words.
    pub fn write_blob(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.push(self.scheme.tag());
        out.extend_from_slice(&[0u8; 3]);
        for w in &self.data {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }

    /// Parse a blob produced by [`BitMatrix::write_blob`], advancing `offset`.
    pub fn read_blob(bytes: &[u8], offset: &mut usize) -> Result<BitMatrix> {
        let fail = |at: usize, detail: &str| CobraError::Format {
            format: "packed-matrix blob",
            offset: at,
            detail: detail.into(),
        };
        let start = *offset;
        if bytes.len() < start + 12 {
            return Err(fail(start, "truncated header"));
        }
        let rows = u32::from_le_bytes(bytes[start..start + 4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[start + 4..start + 8].try_into().unwrap()) as usize;
        let scheme = Scheme::from_tag(bytes[start + 8])
            .ok_or_else(|| fail(start + 8, "unknown scheme tag"))?;
        if bytes[start + 9..start + 12] != [0, 0, 0] {
            return Err(fail(start + 9, "nonzero header padding"));
        }
        let words = words_for(cols) * rows;
        let body = start + 12;
        if bytes.len() < body + words * 8 {
            return Err(fail(body, "truncated word data"));
        }
        let mut data = Vec::with_capacity(words);
        for i in 0..words {
            let at = body + i * 8;
            data.push(u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
        }
        *offset = body + words * 8;
        let m = BitMatrix {
            rows,
            cols,
            scheme,
            words_per_row: words_for(cols),
            data,
        };
        m.validate_pads()
            .map_err(|_| fail(body, "nonzero pad bits"))?;
        Ok(m)
    }
}

/// Pack an integer matrix into bits under the given scheme.
///
/// `+1` packs to bit `1`; `-1` and `0` pack to bit `0`. The returned
/// [`DCVector`] counts zeros per row for `(0,1)` input and is all zero for
/// `(-1,1)` input.
#[allow(clippy::needless_range_loop)]
pub fn pack_matrix(values: &IntMatrix, scheme: Scheme) -> Result<(BitMatrix, DCVector)> {
    let mut m = BitMatrix::zeros(values.rows(), values.cols(), scheme);
    let mut dc = vec![0u32; values.rows()];
    for r in 0..values.rows() {
        for c in 0..values.cols() {
            let v = values.get(r, c);
            let ok = match scheme {
                Scheme::SignedPM1 => v == -1 || v == 1,
                Scheme::Unsigned01 => v == 0 || v == 1,
            };
            if !ok {
                return Err(CobraError::DomainValue {
                    row: r,
                    col: c,
                    value: v,
                    scheme: scheme.name(),
                });
            }
            if v == 1 {
                m.set(r, c, true);
            } else if scheme == Scheme::Unsigned01 {
                dc[r] += 1;
            }
        }
    }
    debug_assert!(m.validate_pads().is_ok());
    Ok((m, DCVector(dc)))
}

/// Exact inverse of [`pack_matrix`] under the matrix's own scheme.
pub fn unpack_matrix(m: &BitMatrix) -> IntMatrix {
    let zero = match m.scheme() {
        Scheme::SignedPM1 => -1,
        Scheme::Unsigned01 => 0,
    };
    let mut out = IntMatrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.set(r, c, if m.get(r, c) { 1 } else { zero });
        }
    }
    out
}

/// Transpose, preserving scheme and the pad-bit invariant.
pub fn transpose_packed(m: &BitMatrix) -> BitMatrix {
    let mut out = BitMatrix::zeros(m.cols(), m.rows(), m.scheme());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            if m.get(r, c) {
                out.set(c, r, true);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn int_matrix(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> i32) -> IntMatrix {
        let mut m = IntMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, f(r, c));
            }
        }
        m
    }

    #[test]
    fn all_minus_one_row_packs_to_zero_bits() {
        let values = int_matrix(1, 6, |_, _| -1);
        let (m, dc) = pack_matrix(&values, Scheme::SignedPM1).unwrap();
        assert_eq!(m.row_words(0), &[0]);
        assert_eq!(dc.0, vec![0]);
    }

    #[test]
    fn unsigned_row_packs_lsb_first_and_counts_zeros() {
        let values = int_matrix(1, 6, |_, c| [0, 1, 0, 1, 1, 0][c]);
        let (m, dc) = pack_matrix(&values, Scheme::Unsigned01).unwrap();
        // bits LSB-first 011010 -> word 0b011010
        assert_eq!(m.row_words(0), &[0b011010]);
        assert_eq!(dc.0, vec![3]);
    }

    #[test]
    fn unpack_all_zero_and_all_one_words() {
        let m = BitMatrix::zeros(1, 6, Scheme::SignedPM1);
        assert_eq!(unpack_matrix(&m).row(0), &[-1; 6]);
        let mut m = BitMatrix::zeros(1, 6, Scheme::Unsigned01);
        for c in 0..6 {
            m.set(0, c, true);
        }
        assert_eq!(unpack_matrix(&m).row(0), &[1; 6]);
    }

    #[test]
    fn out_of_domain_value_is_rejected_with_location() {
        let values = int_matrix(2, 3, |r, c| if (r, c) == (1, 2) { 0 } else { 1 });
        let err = pack_matrix(&values, Scheme::SignedPM1).unwrap_err();
        match err {
            CobraError::DomainValue { row, col, value, .. } => {
                assert_eq!((row, col, value), (1, 2, 0));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn transpose_matches_hand_case() {
        let values = int_matrix(2, 2, |r, c| [[1, 0], [1, 1]][r][c]);
        let (m, _) = pack_matrix(&values, Scheme::Unsigned01).unwrap();
        let t = transpose_packed(&m);
        assert_eq!(unpack_matrix(&t).row(0), &[1, 1]);
        assert_eq!(unpack_matrix(&t).row(1), &[0, 1]);
    }

    #[test]
    fn transpose_of_scalar_is_identity() {
        let values = int_matrix(1, 1, |_, _| 1);
        let (m, _) = pack_matrix(&values, Scheme::SignedPM1).unwrap();
        assert_eq!(transpose_packed(&m), m);
    }

    #[test]
    fn extract_cols_matches_per_bit_reads() {
        let values = int_matrix(3, 130, |r, c| ((r * 31 + c * 7) % 3 == 0) as i32);
        let (m, _) = pack_matrix(&values, Scheme::Unsigned01).unwrap();
        for (start, len) in [(0, 130), (1, 64), (63, 3), (64, 66), (97, 33)] {
            let sub = m.extract_cols(start, len);
            sub.validate_pads().unwrap();
            for r in 0..3 {
                for c in 0..len {
                    assert_eq!(sub.get(r, c), m.get(r, start + c), "at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn blob_round_trip_is_byte_identical() {
        let values = int_matrix(3, 70, |r, c| ((r + c) % 2 == 0) as i32 * 2 - 1);
        let (m, _) = pack_matrix(&values, Scheme::SignedPM1).unwrap();
        let mut bytes = Vec::new();
        m.write_blob(&mut bytes);
        let mut off = 0;
        let back = BitMatrix::read_blob(&bytes, &mut off).unwrap();
        assert_eq!(off, bytes.len());
        assert_eq!(back, m);
        let mut again = Vec::new();
        back.write_blob(&mut again);
        assert_eq!(again, bytes);
    }

    #[test]
    fn blob_rejects_bad_scheme_and_dirty_pads() {
        let values = int_matrix(1, 6, |_, _| 1);
        let (m, _) = pack_matrix(&values, Scheme::SignedPM1).unwrap();
        let mut bytes = Vec::new();
        m.write_blob(&mut bytes);
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(BitMatrix::read_blob(&bad, &mut 0).is_err());
        let mut dirty = bytes.clone();
        *dirty.last_mut().unwrap() |= 0x80; // bit 63 of a 6-col row
        assert!(BitMatrix::read_blob(&dirty, &mut 0).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(rows in 1usize..6, cols in 1usize..150, seed in any::<u64>()) {
            let mut s = seed;
            let mut next = move || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 33) & 1
            };
            for &scheme in &[Scheme::SignedPM1, Scheme::Unsigned01] {
                let zero = if scheme == Scheme::SignedPM1 { -1 } else { 0 };
                let values = int_matrix(rows, cols, |_, _| if next() == 1 { 1 } else { zero });
                let (m, dc) = pack_matrix(&values, scheme).unwrap();
                prop_assert!(m.validate_pads().is_ok());
                prop_assert_eq!(unpack_matrix(&m), values);
                // re-pack is bit identical
                let (m2, dc2) = pack_matrix(&unpack_matrix(&m), scheme).unwrap();
                prop_assert_eq!(&m2, &m);
                prop_assert_eq!(dc2, dc.clone());
                // dc correctness: zeros + popcount = cols
                if scheme == Scheme::Unsigned01 {
                    for r in 0..rows {
                        prop_assert_eq!(dc.0[r] as usize + m.row_popcount(r), cols);
                    }
                } else {
                    prop_assert!(dc.0.iter().all(|&z| z == 0));
                }
            }
        }

        #[test]
        fn double_transpose_is_identity(rows in 1usize..70, cols in 1usize..140, seed in any::<u64>()) {
            let mut s = seed;
            let mut next = move || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 33) & 1
            };
            let values = int_matrix(rows, cols, |_, _| if next() == 1 { 1 } else { -1 });
            let (m, _) = pack_matrix(&values, Scheme::SignedPM1).unwrap();
            let tt = transpose_packed(&transpose_packed(&m));
            prop_assert!(transpose_packed(&m).validate_pads().is_ok());
            prop_assert_eq!(tt, m);
        }
    }
}
