//! Model file formats.
//!
//! * `CBRT` raw interchange: dimensions plus ternary i8 values in `{-1,0,1}`
//!   for every weight matrix in mathematical orientation, together with
//!   quantizer and LayerNorm parameters. This is what converters produce.
//! * `CBRW` packed weights: the same model with every matrix bit-packed in
//!   engine orientation (row `p` holds output column `p`), produced by
//!   `pack` once and loaded for inference. Word width is fixed at 64 bits in
//!   the serialized form, so files are bit-exact across platforms.
//! * Tensor files: a bare packed-matrix blob for inputs; `CBRO` for the
//!   inference output (hidden bits plus integer values).
//!
//! All multi-byte fields are little endian. Writers are deterministic:
//! writing, reading and rewriting any of these files is byte-identical.

use crate::bitpack::{pack_matrix, BitMatrix, Scheme};
use crate::error::{CobraError, Result};
use crate::matrix::IntMatrix;
use crate::pipeline::{FixedPoint16, LayerWeights, ModelConfig};
use crate::rbmm::QuantParams;
use crate::sps::SpsThresholds;

pub const WEIGHT_MAGIC: &[u8; 4] = b"CBRW";
pub const RAW_MAGIC: &[u8; 4] = b"CBRT";
pub const OUTPUT_MAGIC: &[u8; 4] = b"CBRO";
pub const FORMAT_VERSION: u32 = 1;

fn fail(format: &'static str, offset: usize, detail: impl Into<String>) -> CobraError {
    CobraError::Format {
        format,
        offset,
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Reader {
            bytes,
            offset: 0,
            format,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.offset + n {
            return Err(fail(self.format, self.offset, "unexpected end of data"));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            return Err(fail(self.format, 0, "bad magic"));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(fail(
                self.format,
                self.offset - 4,
                format!("unsupported version {v}"),
            ));
        }
        Ok(())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.offset;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| fail(self.format, at, "invalid utf-8 string"))
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(fail(self.format, self.offset, "trailing bytes"));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_config(out: &mut Vec<u8>, cfg: &ModelConfig) {
    for v in [
        cfg.d,
        cfg.h,
        cfg.l,
        cfg.ff_size,
        cfg.r,
        cfg.num_layers,
        cfg.n_pe,
    ] {
        put_u32(out, v as u32);
    }
}

fn read_config(r: &mut Reader) -> Result<ModelConfig> {
    let at = r.offset;
    let vals: Vec<usize> = (0..7)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let cfg = ModelConfig::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6])
        .map_err(|e| fail(r.format, at, e.to_string()))?;
    if cfg.ff_size != vals[3] {
        return Err(fail(r.format, at, "ff_size inconsistent with r*d"));
    }
    Ok(cfg)
}

fn put_quant(out: &mut Vec<u8>, q: &QuantParams) {
    put_u32(out, q.alpha);
    out.push(match q.scheme {
        Scheme::SignedPM1 => 0,
        Scheme::Unsigned01 => 1,
    });
    out.push(q.relu_fused as u8);
    out.extend_from_slice(&[0u8; 2]);
    put_u32(out, q.beta.len() as u32);
    for b in &q.beta {
        out.extend_from_slice(&b.to_le_bytes());
    }
}

fn read_quant(r: &mut Reader) -> Result<QuantParams> {
    let at = r.offset;
    let alpha = r.u32()?;
    let tag = r.take(1)?[0];
    let scheme = match tag {
        0 => Scheme::SignedPM1,
        1 => Scheme::Unsigned01,
        _ => return Err(fail(r.format, at + 4, "unknown scheme tag")),
    };
    let relu = match r.take(1)?[0] {
        0 => false,
        1 => true,
        _ => return Err(fail(r.format, at + 5, "bad relu flag")),
    };
    r.take(2)?;
    let len = r.u32()? as usize;
    let mut beta = Vec::with_capacity(len);
    for _ in 0..len {
        beta.push(r.i32()?);
    }
    QuantParams::new(alpha, beta, scheme, relu).map_err(|e| fail(r.format, at, e.to_string()))
}

fn put_fixed(out: &mut Vec<u8>, v: &[FixedPoint16]) {
    for f in v {
        out.extend_from_slice(&f.raw().to_le_bytes());
    }
}

fn read_fixed(r: &mut Reader, n: usize) -> Result<Vec<FixedPoint16>> {
    (0..n).map(|_| r.i16().map(FixedPoint16::from_raw)).collect()
}

/// One layer as stored in the packed weight file: everything an encoder
/// layer needs except the attention thresholds, which live in the threshold
/// table file the header references.
#[derive(Debug, Clone)]
pub struct StoredLayer {
    pub w_q: BitMatrix,
    pub w_k: BitMatrix,
    pub w_v: BitMatrix,
    pub w_o: BitMatrix,
    pub ffn_y: Vec<BitMatrix>,
    pub ffn_z: Vec<BitMatrix>,
    pub quant_q: QuantParams,
    pub quant_k: QuantParams,
    pub quant_v: QuantParams,
    pub quant_ctx: QuantParams,
    pub quant_ffn_in: QuantParams,
    pub quant_f1: QuantParams,
    pub quant_next: QuantParams,
    pub ln1_gain: Vec<FixedPoint16>,
    pub ln1_bias: Vec<FixedPoint16>,
    pub ln2_gain: Vec<FixedPoint16>,
    pub ln2_bias: Vec<FixedPoint16>,
}

/// The `CBRW` packed weight file.
#[derive(Debug, Clone)]
pub struct WeightFile {
    pub cfg: ModelConfig,
    /// Path or name of the threshold table this model was searched with;
    /// informational, the run manifest decides what is actually loaded.
    pub threshold_ref: String,
    pub layers: Vec<StoredLayer>,
}

impl WeightFile {
    pub fn from_layers(cfg: ModelConfig, layers: &[LayerWeights], threshold_ref: &str) -> Self {
        WeightFile {
            cfg,
            threshold_ref: threshold_ref.to_string(),
            layers: layers
                .iter()
                .map(|w| StoredLayer {
                    w_q: w.w_q.clone(),
                    w_k: w.w_k.clone(),
                    w_v: w.w_v.clone(),
                    w_o: w.w_o.clone(),
                    ffn_y: w.ffn_y.clone(),
                    ffn_z: w.ffn_z.clone(),
                    quant_q: w.quant_q.clone(),
                    quant_k: w.quant_k.clone(),
                    quant_v: w.quant_v.clone(),
                    quant_ctx: w.quant_ctx.clone(),
                    quant_ffn_in: w.quant_ffn_in.clone(),
                    quant_f1: w.quant_f1.clone(),
                    quant_next: w.quant_next.clone(),
                    ln1_gain: w.ln1_gain.clone(),
                    ln1_bias: w.ln1_bias.clone(),
                    ln2_gain: w.ln2_gain.clone(),
                    ln2_bias: w.ln2_bias.clone(),
                })
                .collect(),
        }
    }

    /// Attach per-layer threshold slices to produce runnable layer weights.
    pub fn into_layer_weights(self, thresholds: &SpsThresholds) -> Result<Vec<LayerWeights>> {
        if thresholds.layers != self.cfg.num_layers
            || thresholds.h != self.cfg.h
            || thresholds.d_h != self.cfg.d_h
        {
            return Err(CobraError::DimMismatch {
                context: "threshold table",
                expected: format!(
                    "{} layers, {} heads, d_h {}",
                    self.cfg.num_layers, self.cfg.h, self.cfg.d_h
                ),
                got: format!(
                    "{} layers, {} heads, d_h {}",
                    thresholds.layers, thresholds.h, thresholds.d_h
                ),
            });
        }
        self.layers
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(LayerWeights {
                    w_q: s.w_q,
                    w_k: s.w_k,
                    w_v: s.w_v,
                    w_o: s.w_o,
                    ffn_y: s.ffn_y,
                    ffn_z: s.ffn_z,
                    quant_q: s.quant_q,
                    quant_k: s.quant_k,
                    quant_v: s.quant_v,
                    quant_ctx: s.quant_ctx,
                    quant_ffn_in: s.quant_ffn_in,
                    quant_f1: s.quant_f1,
                    quant_next: s.quant_next,
                    ln1_gain: s.ln1_gain,
                    ln1_bias: s.ln1_bias,
                    ln2_gain: s.ln2_gain,
                    ln2_bias: s.ln2_bias,
                    sps: thresholds.layer_slice(i)?,
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_config(&mut out, &self.cfg);
        put_string(&mut out, &self.threshold_ref);
        for layer in &self.layers {
            for m in [&layer.w_q, &layer.w_k, &layer.w_v, &layer.w_o] {
                m.write_blob(&mut out);
            }
            for m in layer.ffn_y.iter().chain(&layer.ffn_z) {
                m.write_blob(&mut out);
            }
            for q in [
                &layer.quant_q,
                &layer.quant_k,
                &layer.quant_v,
                &layer.quant_ctx,
                &layer.quant_ffn_in,
                &layer.quant_f1,
                &layer.quant_next,
            ] {
                put_quant(&mut out, q);
            }
            for v in [
                &layer.ln1_gain,
                &layer.ln1_bias,
                &layer.ln2_gain,
                &layer.ln2_bias,
            ] {
                put_fixed(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "weight file");
        r.magic(WEIGHT_MAGIC)?;
        r.version()?;
        let cfg = read_config(&mut r)?;
        let threshold_ref = r.string()?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let mut mats = Vec::with_capacity(4 + 2 * cfg.r);
            for _ in 0..4 + 2 * cfg.r {
                let at = r.offset;
                let m = BitMatrix::read_blob(bytes, &mut r.offset)?;
                if m.rows() != cfg.d || m.cols() != cfg.d || m.scheme() != Scheme::SignedPM1 {
                    return Err(fail("weight file", at, "weight matrix has wrong shape"));
                }
                mats.push(m);
            }
            let mut it = mats.into_iter();
            let (w_q, w_k, w_v, w_o) = (
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
            );
            let ffn_y: Vec<BitMatrix> = it.by_ref().take(cfg.r).collect();
            let ffn_z: Vec<BitMatrix> = it.collect();
            let quant_q = read_quant(&mut r)?;
            let quant_k = read_quant(&mut r)?;
            let quant_v = read_quant(&mut r)?;
            let quant_ctx = read_quant(&mut r)?;
            let quant_ffn_in = read_quant(&mut r)?;
            let quant_f1 = read_quant(&mut r)?;
            let quant_next = read_quant(&mut r)?;
            let ln1_gain = read_fixed(&mut r, cfg.d)?;
            let ln1_bias = read_fixed(&mut r, cfg.d)?;
            let ln2_gain = read_fixed(&mut r, cfg.d)?;
            let ln2_bias = read_fixed(&mut r, cfg.d)?;
            layers.push(StoredLayer {
                w_q,
                w_k,
                w_v,
                w_o,
                ffn_y,
                ffn_z,
                quant_q,
                quant_k,
                quant_v,
                quant_ctx,
                quant_ffn_in,
                quant_f1,
                quant_next,
                ln1_gain,
                ln1_bias,
                ln2_gain,
                ln2_bias,
            });
        }
        r.finish()?;
        Ok(WeightFile {
            cfg,
            threshold_ref,
            layers,
        })
    }
}

/// A raw interchange matrix: ternary i8 values in mathematical orientation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMatrix {
    pub rows: usize,
    pub cols: usize,
    pub scheme: Scheme,
    pub values: Vec<i8>,
}

impl RawMatrix {
    /// Transpose to engine orientation and bit-pack, rejecting any value
    /// outside the scheme's domain with its location.
    pub fn pack_transposed(&self, what: &str) -> Result<BitMatrix> {
        if self.values.len() != self.rows * self.cols {
            return Err(CobraError::InvalidConfig(format!(
                "{what}: {} values for {}x{}",
                self.values.len(),
                self.rows,
                self.cols
            )));
        }
        let mut ints = IntMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                ints.set(c, r, self.values[r * self.cols + c] as i32);
            }
        }
        let (packed, _) = pack_matrix(&ints, self.scheme).map_err(|e| match e {
            // report the location in the raw (untransposed) matrix
            CobraError::DomainValue {
                row,
                col,
                value,
                scheme,
            } => CobraError::Format {
                format: "raw weights",
                offset: 0,
                detail: format!("{what}: value {value} at ({col}, {row}) outside {scheme}"),
            },
            other => other,
        })?;
        Ok(packed)
    }
}

/// One layer of the raw interchange file.
#[derive(Debug, Clone)]
pub struct RawLayer {
    pub w_q: RawMatrix,
    pub w_k: RawMatrix,
    pub w_v: RawMatrix,
    pub w_o: RawMatrix,
    pub ffn_y: Vec<RawMatrix>,
    pub ffn_z: Vec<RawMatrix>,
    pub quant_q: QuantParams,
    pub quant_k: QuantParams,
    pub quant_v: QuantParams,
    pub quant_ctx: QuantParams,
    pub quant_ffn_in: QuantParams,
    pub quant_f1: QuantParams,
    pub quant_next: QuantParams,
    pub ln1_gain: Vec<FixedPoint16>,
    pub ln1_bias: Vec<FixedPoint16>,
    pub ln2_gain: Vec<FixedPoint16>,
    pub ln2_bias: Vec<FixedPoint16>,
}

/// The `CBRT` raw interchange file.
#[derive(Debug, Clone)]
pub struct RawModelFile {
    pub cfg: ModelConfig,
    pub threshold_ref: String,
    pub layers: Vec<RawLayer>,
}

impl RawModelFile {
    /// Export runnable layer weights back to the raw interchange form
    /// (mathematical orientation, i8 values). The inverse of `pack` up to the
    /// attention thresholds, which travel in the threshold table instead.
    pub fn from_layer_weights(
        cfg: ModelConfig,
        layers: &[LayerWeights],
        threshold_ref: &str,
    ) -> Self {
        let to_raw = |m: &BitMatrix| -> RawMatrix {
            let math = crate::bitpack::unpack_matrix(m).transposed();
            RawMatrix {
                rows: math.rows(),
                cols: math.cols(),
                scheme: Scheme::SignedPM1,
                values: math.data().iter().map(|&v| v as i8).collect(),
            }
        };
        RawModelFile {
            cfg,
            threshold_ref: threshold_ref.to_string(),
            layers: layers
                .iter()
                .map(|w| RawLayer {
                    w_q: to_raw(&w.w_q),
                    w_k: to_raw(&w.w_k),
                    w_v: to_raw(&w.w_v),
                    w_o: to_raw(&w.w_o),
                    ffn_y: w.ffn_y.iter().map(&to_raw).collect(),
                    ffn_z: w.ffn_z.iter().map(&to_raw).collect(),
                    quant_q: w.quant_q.clone(),
                    quant_k: w.quant_k.clone(),
                    quant_v: w.quant_v.clone(),
                    quant_ctx: w.quant_ctx.clone(),
                    quant_ffn_in: w.quant_ffn_in.clone(),
                    quant_f1: w.quant_f1.clone(),
                    quant_next: w.quant_next.clone(),
                    ln1_gain: w.ln1_gain.clone(),
                    ln1_bias: w.ln1_bias.clone(),
                    ln2_gain: w.ln2_gain.clone(),
                    ln2_bias: w.ln2_bias.clone(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RAW_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_config(&mut out, &self.cfg);
        put_string(&mut out, &self.threshold_ref);
        for layer in &self.layers {
            for m in [&layer.w_q, &layer.w_k, &layer.w_v, &layer.w_o]
                .into_iter()
                .chain(&layer.ffn_y)
                .chain(&layer.ffn_z)
            {
                put_u32(&mut out, m.rows as u32);
                put_u32(&mut out, m.cols as u32);
                out.push(match m.scheme {
                    Scheme::SignedPM1 => 0,
                    Scheme::Unsigned01 => 1,
                });
                out.extend_from_slice(&[0u8; 3]);
                out.extend_from_slice(bytemuck_i8(&m.values));
            }
            for q in [
                &layer.quant_q,
                &layer.quant_k,
                &layer.quant_v,
                &layer.quant_ctx,
                &layer.quant_ffn_in,
                &layer.quant_f1,
                &layer.quant_next,
            ] {
                put_quant(&mut out, q);
            }
            for v in [
                &layer.ln1_gain,
                &layer.ln1_bias,
                &layer.ln2_gain,
                &layer.ln2_bias,
            ] {
                put_fixed(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "raw weights");
        r.magic(RAW_MAGIC)?;
        r.version()?;
        let cfg = read_config(&mut r)?;
        let threshold_ref = r.string()?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let mut mats = Vec::with_capacity(4 + 2 * cfg.r);
            for _ in 0..4 + 2 * cfg.r {
                let at = r.offset;
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let scheme = match r.take(1)?[0] {
                    0 => Scheme::SignedPM1,
                    1 => Scheme::Unsigned01,
                    _ => return Err(fail("raw weights", at + 8, "unknown scheme tag")),
                };
                r.take(3)?;
                if rows != cfg.d || cols != cfg.d {
                    return Err(fail(
                        "raw weights",
                        at,
                        format!("matrix {rows}x{cols}, expected {0}x{0}", cfg.d),
                    ));
                }
                let values = r.take(rows * cols)?.iter().map(|&b| b as i8).collect();
                mats.push(RawMatrix {
                    rows,
                    cols,
                    scheme,
                    values,
                });
            }
            let mut it = mats.into_iter();
            let (w_q, w_k, w_v, w_o) = (
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
            );
            let ffn_y: Vec<RawMatrix> = it.by_ref().take(cfg.r).collect();
            let ffn_z: Vec<RawMatrix> = it.collect();
            layers.push(RawLayer {
                w_q,
                w_k,
                w_v,
                w_o,
                ffn_y,
                ffn_z,
                quant_q: read_quant(&mut r)?,
                quant_k: read_quant(&mut r)?,
                quant_v: read_quant(&mut r)?,
                quant_ctx: read_quant(&mut r)?,
                quant_ffn_in: read_quant(&mut r)?,
                quant_f1: read_quant(&mut r)?,
                quant_next: read_quant(&mut r)?,
                ln1_gain: read_fixed(&mut r, cfg.d)?,
                ln1_bias: read_fixed(&mut r, cfg.d)?,
                ln2_gain: read_fixed(&mut r, cfg.d)?,
                ln2_bias: read_fixed(&mut r, cfg.d)?,
            });
        }
        r.finish()?;
        Ok(RawModelFile {
            cfg,
            threshold_ref,
            layers,
        })
    }

    /// Pack every matrix into the engine-oriented weight file. Deterministic,
    /// so packing the same raw file twice is byte-identical.
    pub fn pack(&self) -> Result<WeightFile> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let name = |what: &str| format!("layer {idx} {what}");
            let mut ffn_y = Vec::with_capacity(layer.ffn_y.len());
            for (i, m) in layer.ffn_y.iter().enumerate() {
                ffn_y.push(m.pack_transposed(&name(&format!("Y_{}", i + 1)))?);
            }
            let mut ffn_z = Vec::with_capacity(layer.ffn_z.len());
            for (i, m) in layer.ffn_z.iter().enumerate() {
                ffn_z.push(m.pack_transposed(&name(&format!("Z_{}", i + 1)))?);
            }
            layers.push(StoredLayer {
                w_q: layer.w_q.pack_transposed(&name("W_Q"))?,
                w_k: layer.w_k.pack_transposed(&name("W_K"))?,
                w_v: layer.w_v.pack_transposed(&name("W_V"))?,
                w_o: layer.w_o.pack_transposed(&name("W_O"))?,
                ffn_y,
                ffn_z,
                quant_q: layer.quant_q.clone(),
                quant_k: layer.quant_k.clone(),
                quant_v: layer.quant_v.clone(),
                quant_ctx: layer.quant_ctx.clone(),
                quant_ffn_in: layer.quant_ffn_in.clone(),
                quant_f1: layer.quant_f1.clone(),
                quant_next: layer.quant_next.clone(),
                ln1_gain: layer.ln1_gain.clone(),
                ln1_bias: layer.ln1_bias.clone(),
                ln2_gain: layer.ln2_gain.clone(),
                ln2_bias: layer.ln2_bias.clone(),
            });
        }
        Ok(WeightFile {
            cfg: self.cfg,
            threshold_ref: self.threshold_ref.clone(),
            layers,
        })
    }
}

fn bytemuck_i8(v: &[i8]) -> &[u8] {
    // i8 and u8 share layout
    unsafe { std::slice::from_raw_parts(v.as_ptr() as *const u8, v.len()) }
}

/// Inference output file: hidden bits plus the integer values of the last
/// layer.
pub fn write_output_file(hidden: &BitMatrix, logits: &IntMatrix) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OUTPUT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    hidden.write_blob(&mut out);
    put_u32(&mut out, logits.rows() as u32);
    put_u32(&mut out, logits.cols() as u32);
    for v in logits.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_output_file(bytes: &[u8]) -> Result<(BitMatrix, IntMatrix)> {
    let mut r = Reader::new(bytes, "output file");
    r.magic(OUTPUT_MAGIC)?;
    r.version()?;
    let hidden = BitMatrix::read_blob(bytes, &mut r.offset)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.i32()?);
    }
    r.finish()?;
    let logits = IntMatrix::from_vec(rows, cols, data)
        .map_err(|e| fail("output file", 0, e.to_string()))?;
    Ok((hidden, logits))
}

/// Input tensor file: a bare packed-matrix blob.
pub fn write_input_file(input: &BitMatrix) -> Vec<u8> {
    let mut out = Vec::new();
    input.write_blob(&mut out);
    out
}

pub fn read_input_file(bytes: &[u8], cfg: &ModelConfig) -> Result<BitMatrix> {
    let mut offset = 0;
    let m = BitMatrix::read_blob(bytes, &mut offset)?;
    if offset != bytes.len() {
        return Err(fail("input tensor", offset, "trailing bytes"));
    }
    if m.rows() != cfg.l || m.cols() != cfg.d || m.scheme() != Scheme::SignedPM1 {
        return Err(CobraError::DimMismatch {
            context: "input tensor",
            expected: format!("{}x{} (-1,1)", cfg.l, cfg.d),
            got: format!("{}x{} {}", m.rows(), m.cols(), m.scheme().name()),
        });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_matrix_pack_reports_location_in_raw_orientation() {
        let raw = RawMatrix {
            rows: 2,
            cols: 3,
            scheme: Scheme::SignedPM1,
            values: vec![1, -1, 1, 1, 0, 1],
        };
        let err = raw.pack_transposed("W_Q").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("W_Q"), "{msg}");
        assert!(msg.contains("(1, 1)"), "{msg}");
    }

    #[test]
    fn output_file_round_trip() {
        let mut hidden = BitMatrix::zeros(2, 5, Scheme::SignedPM1);
        hidden.set(0, 3, true);
        hidden.set(1, 0, true);
        let logits = IntMatrix::from_rows(&[vec![1, -7, 300, 0, 9], vec![5, 5, 5, 5, 5]]).unwrap();
        let bytes = write_output_file(&hidden, &logits);
        let (h, lg) = read_output_file(&bytes).unwrap();
        assert_eq!(h, hidden);
        assert_eq!(lg, logits);
        assert_eq!(write_output_file(&h, &lg), bytes);
    }
}
