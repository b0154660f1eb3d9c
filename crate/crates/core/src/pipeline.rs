//! Full binary encoder layers composed from engine modes: QKV projection,
//! attention score with polarized softmax, context, output linear, Q8.8
//! fixed-point LayerNorm with residuals, and the two decomposed FFN halves.
//!
//! Integer matrices and binary matrices never substitute for each other:
//! LayerNorm and residuals consume the integer outputs of `M4`/`F2` plus the
//! unpacked `+-1` values of the sublayer's binary input, and every binary
//! operand is produced by an explicit binarization.

use serde::Deserialize;

use crate::bitpack::{pack_matrix, transpose_packed, unpack_matrix, BitMatrix, Scheme};
use crate::error::{CobraError, Result};
use crate::matrix::IntMatrix;
use crate::rbmm::{
    compute_theta, quantize_unified, AttentionMask, Engine, QuantParams, RbmmMode, ThetaVector,
};
use crate::sps::LayerSps;

/// Dimension contract every operation validates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(try_from = "RawModelConfig")]
pub struct ModelConfig {
    /// Hidden dimension.
    pub d: usize,
    /// Attention heads.
    pub h: usize,
    /// Per-head width, `d / h`.
    pub d_h: usize,
    /// Sequence length.
    pub l: usize,
    /// FFN hidden dimension, `r * d`.
    pub ff_size: usize,
    pub r: usize,
    pub num_layers: usize,
    /// Processing elements: RBVM results per engine invocation. Performance
    /// accounting only; results do not depend on it.
    pub n_pe: usize,
}

#[derive(Deserialize)]
struct RawModelConfig {
    d: usize,
    h: usize,
    l: usize,
    r: usize,
    num_layers: usize,
    n_pe: usize,
}

impl TryFrom<RawModelConfig> for ModelConfig {
    type Error = String;

    fn try_from(raw: RawModelConfig) -> std::result::Result<Self, String> {
        ModelConfig::new(raw.d, raw.h, raw.l, raw.r, raw.num_layers, raw.n_pe)
            .map_err(|e| e.to_string())
    }
}

pub const MAX_SEQUENCE_LEN: usize = 512;

impl ModelConfig {
    pub fn new(
        d: usize,
        h: usize,
        l: usize,
        r: usize,
        num_layers: usize,
        n_pe: usize,
    ) -> Result<Self> {
        let cfg = ModelConfig {
            d,
            h,
            d_h: d.checked_div(h).unwrap_or(0),
            l,
            ff_size: r * d,
            r,
            num_layers,
            n_pe,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The BERT-base shape: d=768, h=12, l=512, FFN 3072, 12 layers.
    pub fn bert_base(n_pe: usize) -> Self {
        ModelConfig::new(768, 12, 512, 4, 12, n_pe).expect("bert-base dims are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CobraError::InvalidConfig(msg));
        if self.d == 0 || self.h == 0 || self.l == 0 || self.r == 0 || self.num_layers == 0 {
            return fail("all dimensions must be positive".into());
        }
        if self.n_pe == 0 {
            return fail("n_pe must be positive".into());
        }
        if self.h * self.d_h != self.d || !self.d.is_multiple_of(self.h) {
            return fail(format!("d={} not divisible into {} heads", self.d, self.h));
        }
        if self.ff_size != self.r * self.d {
            return fail(format!(
                "ff_size={} inconsistent with r*d={}",
                self.ff_size,
                self.r * self.d
            ));
        }
        if self.l > MAX_SEQUENCE_LEN {
            return fail(format!(
                "sequence length {} exceeds the supported maximum {}",
                self.l, MAX_SEQUENCE_LEN
            ));
        }
        if self.h > 30 || self.output_bits() > 31 {
            return fail("output width exceeds the 32-bit integer lane".into());
        }
        Ok(())
    }

    /// Output integer width: `max(ceil(log2(FF_size)) + 1, h)` bits.
    pub fn output_bits(&self) -> u32 {
        let ff_bits = self.ff_size.next_power_of_two().trailing_zeros() + 1;
        ff_bits.max(self.h as u32)
    }
}

/// Q8.8 signed fixed point: 8 integer bits, 8 fraction bits, saturating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FixedPoint16 {
    raw: i16,
}

impl FixedPoint16 {
    pub const ONE: FixedPoint16 = FixedPoint16 { raw: 256 };

    pub fn from_raw(raw: i16) -> Self {
        FixedPoint16 { raw }
    }

    /// Nearest representable value, halves away from zero, saturating at the
    /// ends of the `[-128, 128)` range.
    pub fn from_f64(v: f64) -> Self {
        let scaled = v * 256.0;
        let rounded = if scaled >= 0.0 {
            (scaled + 0.5).floor()
        } else {
            (scaled - 0.5).ceil()
        };
        FixedPoint16 {
            raw: rounded.clamp(i16::MIN as f64, i16::MAX as f64) as i16,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.raw as f64 / 256.0
    }

    pub fn raw(self) -> i16 {
        self.raw
    }
}

/// Rounding division, halves away from zero.
#[inline]
fn div_round(n: i64, d: i64) -> i64 {
    debug_assert!(d > 0);
    let q = n / d;
    let r = n % d;
    if 2 * r.abs() >= d {
        q + n.signum()
    } else {
        q
    }
}

/// Fixed-point LayerNorm over one row.
///
/// Statistics are exact integers: `n*x_i - sum` over `n*sigma` scaled by
/// 2^16 through an integer square root, rounded once into a Q8.8 normalized
/// value, then `gain * norm + bias` in Q8.8 with saturating adds. Rows with
/// zero variance normalize to zero, so the output is the bias vector.
pub fn layernorm_fixed(
    x: &[i32],
    gain: &[FixedPoint16],
    bias: &[FixedPoint16],
) -> Result<Vec<FixedPoint16>> {
    let n = x.len();
    if n == 0 {
        return Err(CobraError::DimMismatch {
            context: "layernorm_fixed",
            expected: "nonempty row".into(),
            got: "0 elements".into(),
        });
    }
    if gain.len() != n || bias.len() != n {
        return Err(CobraError::DimMismatch {
            context: "layernorm_fixed",
            expected: format!("{n} gain/bias entries"),
            got: format!("{}/{}", gain.len(), bias.len()),
        });
    }
    let n_i = n as i64;
    let sum: i64 = x.iter().map(|&v| v as i64).sum();
    let sq: i64 = x.iter().map(|&v| (v as i64) * (v as i64)).sum();
    // n^2 * variance, exact.
    let var_scaled = n_i * sq - sum * sum;
    // n * sigma in Q16.16; zero variance short-circuits to zero deviations.
    let std_scaled = ((var_scaled as u128) << 32).isqrt() as i64;

    let mut out = Vec::with_capacity(n);
    for (i, &v) in x.iter().enumerate() {
        let norm = if std_scaled == 0 {
            0
        } else {
            // (n*x_i - sum) * 2^24 / (n*sigma*2^16) = Q8.8 normalized value
            div_round((n_i * v as i64 - sum) << 24, std_scaled)
        };
        let norm = norm.clamp(i16::MIN as i64, i16::MAX as i64);
        let scaled = div_round(gain[i].raw() as i64 * norm, 256)
            .clamp(i16::MIN as i64, i16::MAX as i64) as i16;
        out.push(FixedPoint16::from_raw(scaled.saturating_add(bias[i].raw())));
    }
    Ok(out)
}

/// Everything one encoder layer needs. Weight matrices are stored in engine
/// orientation: row `p` of a stored matrix is the datapack of output column
/// `p`, i.e. the mathematical weight transposed.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub w_q: BitMatrix,
    pub w_k: BitMatrix,
    pub w_v: BitMatrix,
    pub w_o: BitMatrix,
    /// `R` column blocks of the first FFN weight, each `d x d`.
    pub ffn_y: Vec<BitMatrix>,
    /// `R` row blocks of the second FFN weight, each `d x d`.
    pub ffn_z: Vec<BitMatrix>,
    pub quant_q: QuantParams,
    pub quant_k: QuantParams,
    pub quant_v: QuantParams,
    pub quant_ctx: QuantParams,
    /// Binarization of the first LayerNorm output (Q8.8 raw scale).
    pub quant_ffn_in: QuantParams,
    /// ReLU-fused binarization of the first FFN half; shifts span `FF_size`.
    pub quant_f1: QuantParams,
    /// Binarization of the second LayerNorm output (Q8.8 raw scale).
    pub quant_next: QuantParams,
    pub ln1_gain: Vec<FixedPoint16>,
    pub ln1_bias: Vec<FixedPoint16>,
    pub ln2_gain: Vec<FixedPoint16>,
    pub ln2_bias: Vec<FixedPoint16>,
    pub sps: LayerSps,
}

impl LayerWeights {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d;
        let check = |m: &BitMatrix, what: &'static str| -> Result<()> {
            if m.rows() != d || m.cols() != d || m.scheme() != Scheme::SignedPM1 {
                return Err(CobraError::DimMismatch {
                    context: what,
                    expected: format!("{d}x{d} (-1,1)"),
                    got: format!("{}x{} {}", m.rows(), m.cols(), m.scheme().name()),
                });
            }
            Ok(())
        };
        check(&self.w_q, "W_Q")?;
        check(&self.w_k, "W_K")?;
        check(&self.w_v, "W_V")?;
        check(&self.w_o, "W_O")?;
        if self.ffn_y.len() != cfg.r || self.ffn_z.len() != cfg.r {
            return Err(CobraError::DimMismatch {
                context: "FFN blocks",
                expected: format!("{} blocks", cfg.r),
                got: format!("{}/{}", self.ffn_y.len(), self.ffn_z.len()),
            });
        }
        for blk in self.ffn_y.iter().chain(&self.ffn_z) {
            check(blk, "FFN block")?;
        }
        for (q, len, scheme, relu) in [
            (&self.quant_q, d, Scheme::SignedPM1, false),
            (&self.quant_k, d, Scheme::SignedPM1, false),
            (&self.quant_v, d, Scheme::SignedPM1, false),
            (&self.quant_ctx, d, Scheme::SignedPM1, false),
            (&self.quant_ffn_in, d, Scheme::SignedPM1, false),
            (&self.quant_f1, cfg.ff_size, Scheme::Unsigned01, true),
            (&self.quant_next, d, Scheme::SignedPM1, false),
        ] {
            if q.beta.len() != len || q.scheme != scheme || q.relu_fused != relu {
                return Err(CobraError::InvalidConfig(format!(
                    "quantizer expects {len} shifts, scheme {}, relu={relu}",
                    scheme.name()
                )));
            }
        }
        for v in [&self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias] {
            if v.len() != d {
                return Err(CobraError::DimMismatch {
                    context: "layernorm parameters",
                    expected: format!("{d} values"),
                    got: format!("{}", v.len()),
                });
            }
        }
        self.sps.check_shape(cfg.h, cfg.l, cfg.d_h)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineOptions {
    /// Route the layer's integer intermediates through a byte-serialized
    /// staging area, exercising the off-chip spill dataflow. Results are
    /// identical with or without it.
    pub spill_emulation: bool,
}

/// One layer's outputs: the binarized hidden state plus the raw Q8.8 values
/// of the final LayerNorm (the integer representation the next consumer
/// would see).
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub hidden: BitMatrix,
    pub ln2_raw: IntMatrix,
}

/// Binarize an integer matrix column-wise against folded thresholds.
fn binarize(m: &IntMatrix, theta: &ThetaVector, scheme: Scheme) -> BitMatrix {
    let mut out = BitMatrix::zeros(m.rows(), m.cols(), scheme);
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            if quantize_unified(m.get(r, c), theta.theta[c]) {
                out.set(r, c, true);
            }
        }
    }
    out
}

fn layernorm_matrix(
    x: &IntMatrix,
    gain: &[FixedPoint16],
    bias: &[FixedPoint16],
) -> Result<IntMatrix> {
    let mut out = IntMatrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = layernorm_fixed(x.row(r), gain, bias)?;
        for (c, v) in row.into_iter().enumerate() {
            out.set(r, c, v.raw() as i32);
        }
    }
    Ok(out)
}

/// Byte-serialized staging round trip for spill emulation; exact for i32.
fn spill_stage(m: IntMatrix) -> IntMatrix {
    let (rows, cols) = (m.rows(), m.cols());
    let mut bytes = Vec::with_capacity(m.data().len() * 4);
    for v in m.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    IntMatrix::from_vec(rows, cols, data).expect("staging preserves shape")
}

/// Run one encoder layer.
///
/// The flow is `M1` (Q, K, V), `M2` attention score with the layer's
/// polarized-softmax thresholds, `M3` context, `M4` linear, LayerNorm over
/// the residual sum, decomposed FFN, second LayerNorm, final binarization.
/// Residuals add the unpacked `+-1` values of the sublayer's binary input to
/// the integer sublayer output. Outputs are byte-identical across runs.
pub fn encoder_layer_forward(
    engine: &Engine,
    cfg: &ModelConfig,
    x: &BitMatrix,
    w: &LayerWeights,
    mask: Option<&AttentionMask>,
    opts: &PipelineOptions,
) -> Result<LayerOutput> {
    cfg.validate()?;
    w.validate(cfg)?;
    if x.rows() != cfg.l || x.cols() != cfg.d || x.scheme() != Scheme::SignedPM1 {
        return Err(CobraError::DimMismatch {
            context: "layer input",
            expected: format!("{}x{} (-1,1)", cfg.l, cfg.d),
            got: format!("{}x{} {}", x.rows(), x.cols(), x.scheme().name()),
        });
    }

    let stage = |m: IntMatrix| if opts.spill_emulation { spill_stage(m) } else { m };

    // Attention sublayer.
    let m1 = RbmmMode::m1(cfg);
    let theta_q = compute_theta(&w.quant_q);
    let theta_k = compute_theta(&w.quant_k);
    let theta_v = compute_theta(&w.quant_v);
    let q_b = engine
        .execute(&m1, x, None, &w.w_q, Some(&theta_q), None, None)?
        .binary
        .expect("M1 produces binary output");
    let k_b = engine
        .execute(&m1, x, None, &w.w_k, Some(&theta_k), None, None)?
        .binary
        .expect("M1 produces binary output");
    let v_b = engine
        .execute(&m1, x, None, &w.w_v, Some(&theta_v), None, None)?
        .binary
        .expect("M1 produces binary output");

    let m2 = RbmmMode::m2(cfg, mask.cloned());
    let scores = engine.execute(&m2, &q_b, None, &k_b, None, Some(&w.sps), None)?;

    let (att_stacked, att_dc) = scores.stacked_attention(cfg.h)?;
    let v_t = transpose_packed(&v_b);
    let theta_ctx = compute_theta(&w.quant_ctx);
    let ctx = engine
        .execute(
            &RbmmMode::m3(cfg),
            &att_stacked,
            Some(&att_dc),
            &v_t,
            Some(&theta_ctx),
            None,
            None,
        )?
        .binary
        .expect("M3 produces binary output");

    let attn_out = stage(
        engine
            .execute(&RbmmMode::m4(cfg), &ctx, None, &w.w_o, None, None, None)?
            .integers
            .expect("M4 produces integer output"),
    );

    // Residual over the unpacked +-1 input, then fixed-point LayerNorm.
    let mut r1 = attn_out;
    r1.add_assign(&unpack_matrix(x))?;
    let r1 = stage(r1);
    let ln1 = layernorm_matrix(&r1, &w.ln1_gain, &w.ln1_bias)?;

    // FFN sublayer on the re-binarized stream.
    let theta_ffn_in = compute_theta(&w.quant_ffn_in);
    let x_ffn = binarize(&ln1, &theta_ffn_in, Scheme::SignedPM1);
    let theta_f1 = compute_theta(&w.quant_f1);
    let ffn_out = stage(engine.ffn_decomposed(cfg, &x_ffn, &w.ffn_y, &w.ffn_z, &theta_f1)?);

    let mut r2 = ffn_out;
    r2.add_assign(&unpack_matrix(&x_ffn))?;
    let ln2 = layernorm_matrix(&r2, &w.ln2_gain, &w.ln2_bias)?;

    let theta_next = compute_theta(&w.quant_next);
    let hidden = binarize(&ln2, &theta_next, Scheme::SignedPM1);
    Ok(LayerOutput {
        hidden,
        ln2_raw: ln2,
    })
}

/// Model outputs: final hidden bits and the last layer's integer values.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub hidden: BitMatrix,
    pub logits: IntMatrix,
}

/// Sequential application of the encoder stack to a pre-binarized input.
pub fn model_forward(
    engine: &Engine,
    cfg: &ModelConfig,
    x: &BitMatrix,
    layers: &[LayerWeights],
    mask: Option<&AttentionMask>,
    opts: &PipelineOptions,
) -> Result<ModelOutput> {
    if layers.len() != cfg.num_layers {
        return Err(CobraError::DimMismatch {
            context: "model weights",
            expected: format!("{} layers", cfg.num_layers),
            got: format!("{}", layers.len()),
        });
    }
    let mut hidden = x.clone();
    let mut logits = IntMatrix::zeros(cfg.l, cfg.d);
    for w in layers {
        let out = encoder_layer_forward(engine, cfg, &hidden, w, mask, opts)?;
        hidden = out.hidden;
        logits = out.ln2_raw;
    }
    Ok(ModelOutput { hidden, logits })
}

/// Round-trip helper so tests and tools can binarize integer activations the
/// same way the pipeline does.
pub fn binarize_matrix(m: &IntMatrix, q: &QuantParams) -> BitMatrix {
    binarize(m, &compute_theta(q), q.scheme)
}

/// Pack a `+-1` integer activation matrix for the pipeline input.
pub fn pack_input(values: &IntMatrix) -> Result<BitMatrix> {
    Ok(pack_matrix(values, Scheme::SignedPM1)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validates_divisibility_and_bounds() {
        assert!(ModelConfig::new(16, 2, 8, 2, 1, 4).is_ok());
        assert!(ModelConfig::new(15, 2, 8, 2, 1, 4).is_err());
        assert!(ModelConfig::new(16, 2, 1000, 2, 1, 4).is_err());
        assert!(ModelConfig::new(16, 2, 8, 2, 1, 0).is_err());
        let bert = ModelConfig::bert_base(32);
        assert_eq!(
            (bert.d, bert.h, bert.d_h, bert.l, bert.ff_size, bert.num_layers),
            (768, 12, 64, 512, 3072, 12)
        );
        assert_eq!(bert.output_bits(), 13);
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg: ModelConfig =
            toml::from_str("d = 16\nh = 2\nl = 8\nr = 2\nnum_layers = 1\nn_pe = 4\n").unwrap();
        assert_eq!(cfg.d_h, 8);
        assert_eq!(cfg.ff_size, 32);
        assert!(toml::from_str::<ModelConfig>("d = 15\nh = 2\nl = 8\nr = 2\nnum_layers = 1\nn_pe = 4\n").is_err());
    }

    #[test]
    fn fixed_point_conversions_saturate() {
        assert_eq!(FixedPoint16::from_f64(1.0).raw(), 256);
        assert_eq!(FixedPoint16::from_f64(-1.0).raw(), -256);
        assert_eq!(FixedPoint16::from_f64(1000.0).raw(), i16::MAX);
        assert_eq!(FixedPoint16::from_f64(-1000.0).raw(), i16::MIN);
        assert_eq!(FixedPoint16::from_f64(0.5).to_f64(), 0.5);
    }

    #[test]
    fn layernorm_constant_row_returns_bias() {
        let gain = vec![FixedPoint16::ONE; 4];
        let bias = vec![FixedPoint16::from_raw(7); 4];
        let out = layernorm_fixed(&[5, 5, 5, 5], &gain, &bias).unwrap();
        assert!(out.iter().all(|v| v.raw() == 7));
        let zero_bias = vec![FixedPoint16::default(); 4];
        let out = layernorm_fixed(&[5, 5, 5, 5], &gain, &zero_bias).unwrap();
        assert!(out.iter().all(|v| v.raw() == 0));
    }

    #[test]
    fn layernorm_symmetric_pair_is_unit_deviation() {
        let gain = vec![FixedPoint16::ONE; 2];
        let bias = vec![FixedPoint16::default(); 2];
        let out = layernorm_fixed(&[-1, 1], &gain, &bias).unwrap();
        assert_eq!(out[0].raw(), -256);
        assert_eq!(out[1].raw(), 256);
    }

    #[test]
    fn layernorm_rejects_empty_and_mismatched() {
        assert!(layernorm_fixed(&[], &[], &[]).is_err());
        assert!(layernorm_fixed(&[1], &[FixedPoint16::ONE; 2], &[FixedPoint16::ONE]).is_err());
    }

    #[test]
    fn layernorm_huge_gain_saturates() {
        let gain = vec![FixedPoint16::from_raw(i16::MAX); 2];
        let bias = vec![FixedPoint16::from_raw(i16::MAX); 2];
        let out = layernorm_fixed(&[-100, 100], &gain, &bias).unwrap();
        assert_eq!(out[1].raw(), i16::MAX);
    }

    #[test]
    fn spill_stage_is_exact() {
        let m = IntMatrix::from_rows(&[vec![1, -2, 3], vec![i32::MAX, i32::MIN, 0]]).unwrap();
        assert_eq!(spill_stage(m.clone()), m);
    }
}
