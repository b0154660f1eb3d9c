//! Full-precision reference implementations used as test oracles and
//! calibration-reference generators: softmax, elastic binarization of
//! attention probabilities, naive integer matrix multiplication, the
//! two-step quantizer, and integer-domain mirrors of every engine mode up to
//! whole encoder layers.
//!
//! Nothing here shares a kernel with the packed path: multiplications are
//! plain triple loops over unpacked values, binarization is the explicit
//! clip/round/sign form, and attention thresholds compare real-valued scores.
//! Speed is a non-goal.

use crate::bitpack::{unpack_matrix, BitMatrix, Scheme};
use crate::error::{CobraError, Result};
use crate::matrix::IntMatrix;
use crate::pipeline::{LayerWeights, ModelConfig, MAX_SEQUENCE_LEN};
use crate::rbmm::{AttentionMask, QuantParams};
use crate::sps::LayerSps;

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        for r in rows {
            if r.len() != cols || r.iter().any(|v| !v.is_finite()) {
                return Err(CobraError::DimMismatch {
                    context: "RealMatrix::from_rows",
                    expected: format!("{cols} finite entries per row"),
                    got: "ragged or non-finite row".into(),
                });
            }
        }
        Ok(RealMatrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Numerically stable softmax over one row.
pub fn softmax_row(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(CobraError::DimMismatch {
            context: "softmax_row",
            expected: "nonempty vector".into(),
            got: "0 elements".into(),
        });
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Round half toward positive infinity.
fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Elastic binarization of the attention probabilities: softmax of the
/// scaled score matrix, rescaled by `alpha`, rounded and clipped to `{0,1}`.
/// `q` and `k` are single-head packed operands of shape `l x d_h`.
pub fn bit_attention_prob(q: &BitMatrix, k: &BitMatrix, alpha: f64) -> Result<BitMatrix> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(CobraError::InvalidAlpha(alpha));
    }
    if q.rows() != k.rows() || q.cols() != k.cols() {
        return Err(CobraError::DimMismatch {
            context: "bit_attention_prob",
            expected: format!("{}x{}", q.rows(), q.cols()),
            got: format!("{}x{}", k.rows(), k.cols()),
        });
    }
    let l = q.rows();
    let d_h = q.cols();
    let qv = unpack_matrix(q);
    let kv = unpack_matrix(k);
    let scale = (d_h as f64).sqrt();
    let mut out = BitMatrix::zeros(l, l, Scheme::Unsigned01);
    for i in 0..l {
        let scores: Vec<f64> = (0..l)
            .map(|j| {
                let dot: i64 = (0..d_h)
                    .map(|m| qv.get(i, m) as i64 * kv.get(j, m) as i64)
                    .sum();
                dot as f64 / scale
            })
            .collect();
        let probs = softmax_row(&scores)?;
        for (j, p) in probs.into_iter().enumerate() {
            if round_half_up(p / alpha).clamp(0.0, 1.0) == 1.0 {
                out.set(i, j, true);
            }
        }
    }
    Ok(out)
}

/// Naive integer matrix multiplication, the unpacked reference the packed
/// kernels are measured against.
pub fn matmul_int(a: &IntMatrix, b: &IntMatrix) -> Result<IntMatrix> {
    if a.cols() != b.rows() {
        return Err(CobraError::DimMismatch {
            context: "matmul_int",
            expected: format!("{} inner", a.cols()),
            got: format!("{}", b.rows()),
        });
    }
    let mut out = IntMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0i64;
            for k in 0..a.cols() {
                acc += a.get(i, k) as i64 * b.get(k, j) as i64;
            }
            out.set(i, j, acc as i32);
        }
    }
    Ok(out)
}

/// Two-step quantizer: `clip(round((c - beta)/alpha), 0, 1)` for `(0,1)`
/// outputs, `sign((c - beta)/alpha)` with sign(0) = 1 for `(-1,1)` outputs,
/// ReLU applied first when fused. Returns the encoded value (`0/1` or
/// `-1/1`), computed in exact integer arithmetic.
pub fn quantize_two_step(c: i32, alpha: u32, beta: i32, scheme: Scheme, relu_fused: bool) -> i32 {
    let e = if relu_fused { c.max(0) } else { c } as i64;
    let b = beta as i64;
    let a = alpha as i64;
    match scheme {
        Scheme::SignedPM1 => {
            if e - b >= 0 {
                1
            } else {
                -1
            }
        }
        Scheme::Unsigned01 => {
            let rounded = (2 * (e - b) + a).div_euclid(2 * a);
            rounded.clamp(0, 1) as i32
        }
    }
}

fn quantize_matrix_two_step(raw: &IntMatrix, q: &QuantParams) -> IntMatrix {
    let mut out = IntMatrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        for j in 0..raw.cols() {
            out.set(
                i,
                j,
                quantize_two_step(raw.get(i, j), q.alpha, q.beta[j], q.scheme, q.relu_fused),
            );
        }
    }
    out
}

fn zeros_per_row(bits: &IntMatrix) -> Vec<u32> {
    (0..bits.rows())
        .map(|i| bits.row(i).iter().filter(|&&v| v != 1).count() as u32)
        .collect()
}

/// Reference result of a binarizing mode: raw integer products, encoded
/// values, and the zero-bit bookkeeping the engine reports.
#[derive(Debug, Clone)]
pub struct RefBinarized {
    pub raw: IntMatrix,
    pub values: IntMatrix,
    pub zeros_full: Vec<u32>,
    pub zeros_heads: Vec<Vec<u32>>,
}

/// `M1` mirror: projection then two-step binarization; weights in
/// mathematical orientation (`x` is `l x d`, `w` is `d x d`).
pub fn ref_m1(x: &IntMatrix, w: &IntMatrix, q: &QuantParams, h: usize) -> Result<RefBinarized> {
    let raw = matmul_int(x, w)?;
    let values = quantize_matrix_two_step(&raw, q);
    let d_h = raw.cols() / h;
    let zeros_heads = (0..h)
        .map(|k| {
            (0..values.rows())
                .map(|i| {
                    (k * d_h..(k + 1) * d_h)
                        .filter(|&j| values.get(i, j) != 1)
                        .count() as u32
                })
                .collect()
        })
        .collect();
    Ok(RefBinarized {
        zeros_full: zeros_per_row(&values),
        zeros_heads,
        raw,
        values,
    })
}

/// `M2` mirror: per-head real-valued polarized softmax over
/// `q k^T / sqrt(d_h)` with optional mask. Returns `(0,1)` maps per head and
/// the per-head zero counts per row.
pub fn ref_m2(
    q: &IntMatrix,
    k: &IntMatrix,
    h: usize,
    d_h: usize,
    sps: &LayerSps,
    mask: Option<&AttentionMask>,
) -> (Vec<IntMatrix>, Vec<Vec<u32>>) {
    let l = q.rows();
    let scale = (d_h as f64).sqrt();
    let mut maps = Vec::with_capacity(h);
    let mut zeros = Vec::with_capacity(h);
    for head in 0..h {
        let mut map = IntMatrix::zeros(l, l);
        let mut z_rows = Vec::with_capacity(l);
        for i in 0..l {
            let mut z_count = 0u32;
            for j in 0..l {
                let masked = mask.is_some_and(|m| m.masked(i, j));
                let dot: i64 = (0..d_h)
                    .map(|m| {
                        q.get(i, head * d_h + m) as i64 * k.get(j, head * d_h + m) as i64
                    })
                    .sum();
                let score = dot as f64 / scale;
                let bit = !masked && score >= sps.lambda(head, i);
                if bit {
                    map.set(i, j, 1);
                } else {
                    z_count += 1;
                }
            }
            z_rows.push(z_count);
        }
        maps.push(map);
        zeros.push(z_rows);
    }
    (maps, zeros)
}

/// `M3` mirror: per-head context from the `(0,1)` maps and the values,
/// binarized and laid out head-contiguously.
pub fn ref_m3(
    maps: &[IntMatrix],
    v: &IntMatrix,
    q: &QuantParams,
    d_h: usize,
) -> Result<RefBinarized> {
    let h = maps.len();
    let l = v.rows();
    let mut raw = IntMatrix::zeros(l, h * d_h);
    for (head, map) in maps.iter().enumerate() {
        for i in 0..l {
            for c in 0..d_h {
                let col = head * d_h + c;
                let mut acc = 0i64;
                for j in 0..l {
                    acc += map.get(i, j) as i64 * v.get(j, col) as i64;
                }
                raw.set(i, col, acc as i32);
            }
        }
    }
    let values = quantize_matrix_two_step(&raw, q);
    Ok(RefBinarized {
        zeros_full: zeros_per_row(&values),
        zeros_heads: Vec::new(),
        raw,
        values,
    })
}

/// `M4` mirror: plain integer projection, no binarization.
pub fn ref_m4(x: &IntMatrix, w: &IntMatrix) -> Result<IntMatrix> {
    matmul_int(x, w)
}

/// `F1` block mirror: projection then ReLU-fused two-step binarization to
/// `(0,1)` values.
pub fn ref_f1(x: &IntMatrix, y: &IntMatrix, q_block: &QuantParams) -> Result<RefBinarized> {
    let raw = matmul_int(x, y)?;
    let values = quantize_matrix_two_step(&raw, q_block);
    Ok(RefBinarized {
        zeros_full: zeros_per_row(&values),
        zeros_heads: Vec::new(),
        raw,
        values,
    })
}

/// `F2` block mirror: accumulate `e z` onto the previous output.
pub fn ref_f2(e: &IntMatrix, z: &IntMatrix, acc: &mut IntMatrix) -> Result<()> {
    let prod = matmul_int(e, z)?;
    acc.add_assign(&prod)
}

/// Monolithic FFN oracle: materializes the full `l x FF_size` intermediate,
/// applies the ReLU-fused binarization column-wise, then one multiplication
/// by the full second weight. The decomposed engine path must match exactly.
pub fn ref_ffn_monolithic(
    x: &IntMatrix,
    y_full: &IntMatrix,
    z_full: &IntMatrix,
    q_f1: &QuantParams,
) -> Result<IntMatrix> {
    let raw = matmul_int(x, y_full)?;
    let e = quantize_matrix_two_step(&raw, q_f1);
    matmul_int(&e, z_full)
}

/// Round half away from zero for integer division.
fn div_round_ref(n: i64, d: i64) -> i64 {
    let q = n / d;
    if 2 * (n % d).abs() >= d {
        q + n.signum()
    } else {
        q
    }
}

/// Reference Q8.8 LayerNorm under the same rule as the fixed-point unit:
/// exact integer statistics, integer square root of the 2^32-scaled
/// variance, one rounded division into Q8.8.
pub fn ref_layernorm_q88(x: &[i32], gain_raw: &[i16], bias_raw: &[i16]) -> Vec<i16> {
    let n = x.len() as i64;
    let sum: i64 = x.iter().map(|&v| v as i64).sum();
    let sq: i64 = x.iter().map(|&v| (v as i64) * (v as i64)).sum();
    let var_scaled = n * sq - sum * sum;
    let std_scaled = ((var_scaled as u128) << 32).isqrt() as i64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let norm = if std_scaled == 0 {
                0
            } else {
                div_round_ref((n * v as i64 - sum) << 24, std_scaled)
            }
            .clamp(i16::MIN as i64, i16::MAX as i64);
            let scaled = div_round_ref(gain_raw[i] as i64 * norm, 256)
                .clamp(i16::MIN as i64, i16::MAX as i64) as i16;
            scaled.saturating_add(bias_raw[i])
        })
        .collect()
}

/// Double-precision LayerNorm with population variance; the fixed-point unit
/// must stay within one half Q8.8 step of scale of this.
pub fn layernorm_f64(x: &[i32], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let norm = if std == 0.0 { 0.0 } else { (v as f64 - mean) / std };
            gain[i] * norm + bias[i]
        })
        .collect()
}

fn ref_layernorm_matrix(x: &IntMatrix, gain: &[i16], bias: &[i16]) -> IntMatrix {
    let mut out = IntMatrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = ref_layernorm_q88(x.row(i), gain, bias);
        for (j, v) in row.into_iter().enumerate() {
            out.set(i, j, v as i32);
        }
    }
    out
}

/// Unpack a stored (engine-oriented, transposed) weight back to mathematical
/// orientation.
fn unpack_weight(w: &BitMatrix) -> IntMatrix {
    unpack_matrix(w).transposed()
}

fn raws(v: &[crate::pipeline::FixedPoint16]) -> Vec<i16> {
    v.iter().map(|f| f.raw()).collect()
}

/// Reference layer output: encoded hidden values and the second LayerNorm's
/// raw Q8.8 matrix.
#[derive(Debug, Clone)]
pub struct RefLayerOutput {
    pub hidden: IntMatrix,
    pub ln2_raw: IntMatrix,
}

/// Integer-domain mirror of a whole encoder layer; must agree with the
/// packed pipeline on every bit and every integer.
pub fn ref_encoder_layer(
    cfg: &ModelConfig,
    x_values: &IntMatrix,
    w: &LayerWeights,
    mask: Option<&AttentionMask>,
) -> Result<RefLayerOutput> {
    let w_q = unpack_weight(&w.w_q);
    let w_k = unpack_weight(&w.w_k);
    let w_v = unpack_weight(&w.w_v);
    let w_o = unpack_weight(&w.w_o);

    let q = ref_m1(x_values, &w_q, &w.quant_q, cfg.h)?;
    let k = ref_m1(x_values, &w_k, &w.quant_k, cfg.h)?;
    let v = ref_m1(x_values, &w_v, &w.quant_v, cfg.h)?;

    let (maps, _zeros) = ref_m2(&q.values, &k.values, cfg.h, cfg.d_h, &w.sps, mask);
    let ctx = ref_m3(&maps, &v.values, &w.quant_ctx, cfg.d_h)?;

    let mut r1 = ref_m4(&ctx.values, &w_o)?;
    r1.add_assign(x_values)?;
    let ln1 = ref_layernorm_matrix(&r1, &raws(&w.ln1_gain), &raws(&w.ln1_bias));

    let x_ffn = quantize_matrix_two_step(&ln1, &w.quant_ffn_in);

    let y_full = concat_cols(&w.ffn_y.iter().map(unpack_weight).collect::<Vec<_>>());
    let z_full = concat_rows(&w.ffn_z.iter().map(unpack_weight).collect::<Vec<_>>());
    let mut r2 = ref_ffn_monolithic(&x_ffn, &y_full, &z_full, &w.quant_f1)?;
    r2.add_assign(&x_ffn)?;
    let ln2 = ref_layernorm_matrix(&r2, &raws(&w.ln2_gain), &raws(&w.ln2_bias));

    let hidden = quantize_matrix_two_step(&ln2, &w.quant_next);
    Ok(RefLayerOutput {
        hidden,
        ln2_raw: ln2,
    })
}

/// Mirror of the sequential encoder stack.
pub fn ref_model_forward(
    cfg: &ModelConfig,
    x_values: &IntMatrix,
    layers: &[LayerWeights],
    mask: Option<&AttentionMask>,
) -> Result<RefLayerOutput> {
    let mut hidden = x_values.clone();
    let mut ln2 = IntMatrix::zeros(cfg.l, cfg.d);
    for w in layers {
        let out = ref_encoder_layer(cfg, &hidden, w, mask)?;
        hidden = out.hidden;
        ln2 = out.ln2_raw;
    }
    Ok(RefLayerOutput {
        hidden,
        ln2_raw: ln2,
    })
}

fn concat_cols(blocks: &[IntMatrix]) -> IntMatrix {
    let rows = blocks[0].rows();
    let total: usize = blocks.iter().map(IntMatrix::cols).sum();
    let mut out = IntMatrix::zeros(rows, total);
    let mut base = 0;
    for b in blocks {
        for i in 0..rows {
            for j in 0..b.cols() {
                out.set(i, base + j, b.get(i, j));
            }
        }
        base += b.cols();
    }
    out
}

fn concat_rows(blocks: &[IntMatrix]) -> IntMatrix {
    let cols = blocks[0].cols();
    let total: usize = blocks.iter().map(IntMatrix::rows).sum();
    let mut out = IntMatrix::zeros(total, cols);
    let mut base = 0;
    for b in blocks {
        for i in 0..b.rows() {
            for j in 0..cols {
                out.set(base + i, j, b.get(i, j));
            }
        }
        base += b.rows();
    }
    out
}

/// Guard against silently running the naive reference at production scale.
pub fn check_oracle_scale(cfg: &ModelConfig) -> Result<()> {
    if cfg.l > MAX_SEQUENCE_LEN {
        return Err(CobraError::InvalidConfig("sequence too long".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack::pack_matrix;

    #[test]
    fn softmax_of_singleton_is_one() {
        assert_eq!(softmax_row(&[0.0]).unwrap(), vec![1.0]);
        assert!(softmax_row(&[]).is_err());
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let p = softmax_row(&[1.0, 1.0, 1.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let a = softmax_row(&[0.3, -1.2, 2.0, 0.0]).unwrap();
        let b = softmax_row(&[0.3 + 5.0, -1.2 + 5.0, 2.0 + 5.0, 5.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_two_by_two_matmul() {
        let a = IntMatrix::from_rows(&[vec![1, -1], vec![-1, 1]]).unwrap();
        let b = IntMatrix::from_rows(&[vec![1, 1], vec![1, -1]]).unwrap();
        let c = matmul_int(&a, &b).unwrap();
        assert_eq!(c.row(0), &[0, 2]);
        assert_eq!(c.row(1), &[0, -2]);
    }

    #[test]
    fn attention_prob_forced_arithmetic() {
        // uniform scores over l=4: softmax = 0.25 per entry
        let l = 4;
        let vals = IntMatrix::from_rows(&vec![vec![1, 1]; l]).unwrap();
        let (q, _) = pack_matrix(&vals, Scheme::SignedPM1).unwrap();
        // alpha >= 1: round(0.25) = 0 -> all zeros
        let map = bit_attention_prob(&q, &q, 1.0).unwrap();
        assert!((0..l).all(|i| map.row_popcount(i) == 0));
        // alpha = 0.25: round(1.0) = 1 -> all ones
        let map = bit_attention_prob(&q, &q, 0.25).unwrap();
        assert!((0..l).all(|i| map.row_popcount(i) == l));
        assert!(bit_attention_prob(&q, &q, 0.0).is_err());
    }

    #[test]
    fn two_step_quantizer_hand_values() {
        // (0,1): alpha=4, beta=3: threshold at c >= 5
        assert_eq!(quantize_two_step(5, 4, 3, Scheme::Unsigned01, false), 1);
        assert_eq!(quantize_two_step(4, 4, 3, Scheme::Unsigned01, false), 0);
        // (-1,1): sign of zero is 1
        assert_eq!(quantize_two_step(3, 7, 3, Scheme::SignedPM1, false), 1);
        assert_eq!(quantize_two_step(2, 7, 3, Scheme::SignedPM1, false), -1);
        // relu keeps negatives at the zero side
        assert_eq!(quantize_two_step(-50, 4, 0, Scheme::Unsigned01, true), 0);
    }

    #[test]
    fn fixed_layernorm_reference_matches_f64_to_q88_scale() {
        let mut s = 41u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            s
        };
        for _ in 0..200 {
            let n = 4 + (next() % 60) as usize;
            let x: Vec<i32> = (0..n).map(|_| (next() % 2001) as i32 - 1000).collect();
            let gain_raw: Vec<i16> = (0..n).map(|_| (next() % 512) as i16).collect();
            let bias_raw: Vec<i16> = (0..n).map(|_| (next() % 256) as i16 - 128).collect();
            let fixed = ref_layernorm_q88(&x, &gain_raw, &bias_raw);
            let gain: Vec<f64> = gain_raw.iter().map(|&g| g as f64 / 256.0).collect();
            let bias: Vec<f64> = bias_raw.iter().map(|&b| b as f64 / 256.0).collect();
            let exact = layernorm_f64(&x, &gain, &bias);
            for (f, e) in fixed.iter().zip(&exact) {
                let got = *f as f64 / 256.0;
                assert!(
                    (got - e).abs() <= 1.0 / 128.0,
                    "fixed {got} vs f64 {e} (n={n})"
                );
            }
        }
    }
}
