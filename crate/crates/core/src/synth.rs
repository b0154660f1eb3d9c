//! Seeded generators for synthetic inputs, weights and calibration sets.
//! Everything is driven by a counter-based ChaCha stream, so a seed fully
//! determines the produced tensors on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitpack::{pack_matrix, BitMatrix, DCVector, Scheme};
use crate::error::Result;
use crate::matrix::IntMatrix;
use crate::oracle::bit_attention_prob;
use crate::pipeline::{FixedPoint16, LayerWeights, ModelConfig};
use crate::rbmm::QuantParams;
use crate::sps::{lambda_grid, CalibrationSample, CalibrationSet, LayerSps};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_pm1_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> IntMatrix {
    let mut m = IntMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, if rng.gen::<bool>() { 1 } else { -1 });
        }
    }
    m
}

pub fn random_01_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> IntMatrix {
    let mut m = IntMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, rng.gen_range(0..=1));
        }
    }
    m
}

pub fn random_bitmatrix(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    scheme: Scheme,
) -> (BitMatrix, DCVector) {
    let values = match scheme {
        Scheme::SignedPM1 => random_pm1_matrix(rng, rows, cols),
        Scheme::Unsigned01 => random_01_matrix(rng, rows, cols),
    };
    pack_matrix(&values, scheme).expect("generated values are in domain")
}

/// Random quantizer with shifts small enough to keep outputs mixed rather
/// than saturated. ReLU-fused quantizers draw non-negative shifts, the
/// domain the fusion identity is defined on.
pub fn random_quant(
    rng: &mut ChaCha8Rng,
    len: usize,
    scheme: Scheme,
    relu_fused: bool,
    beta_span: i32,
) -> QuantParams {
    let alpha = rng.gen_range(1..=4);
    let beta = (0..len)
        .map(|_| {
            if relu_fused {
                rng.gen_range(0..=beta_span.max(1))
            } else {
                rng.gen_range(-beta_span..=beta_span)
            }
        })
        .collect();
    QuantParams::new(alpha, beta, scheme, relu_fused).expect("alpha is positive")
}

fn random_fixed(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<FixedPoint16> {
    (0..len)
        .map(|_| FixedPoint16::from_f64(rng.gen_range(lo..hi)))
        .collect()
}

fn grid_lambda(rng: &mut ChaCha8Rng) -> f64 {
    let grid = lambda_grid(0.05).expect("default grid");
    grid[rng.gen_range(0..grid.len())]
}

/// Random but well-conditioned weights for one encoder layer.
pub fn random_layer_weights(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> LayerWeights {
    let d = cfg.d;
    let mat = |rng: &mut ChaCha8Rng| {
        pack_matrix(&random_pm1_matrix(rng, d, d), Scheme::SignedPM1)
            .expect("pm1 values")
            .0
    };
    let beta_proj = (d as i32 / 4).max(1);
    // LayerNorm output magnitudes are Q8.8 raws, a few hundred in scale.
    let beta_raw = 128;
    LayerWeights {
        w_q: mat(rng),
        w_k: mat(rng),
        w_v: mat(rng),
        w_o: mat(rng),
        ffn_y: (0..cfg.r).map(|_| mat(rng)).collect(),
        ffn_z: (0..cfg.r).map(|_| mat(rng)).collect(),
        quant_q: random_quant(rng, d, Scheme::SignedPM1, false, beta_proj),
        quant_k: random_quant(rng, d, Scheme::SignedPM1, false, beta_proj),
        quant_v: random_quant(rng, d, Scheme::SignedPM1, false, beta_proj),
        quant_ctx: random_quant(rng, d, Scheme::SignedPM1, false, (cfg.l as i32 / 4).max(1)),
        quant_ffn_in: random_quant(rng, d, Scheme::SignedPM1, false, beta_raw),
        quant_f1: random_quant(rng, cfg.ff_size, Scheme::Unsigned01, true, beta_proj),
        quant_next: random_quant(rng, d, Scheme::SignedPM1, false, beta_raw),
        ln1_gain: random_fixed(rng, d, 0.5, 1.5),
        ln1_bias: random_fixed(rng, d, -0.5, 0.5),
        ln2_gain: random_fixed(rng, d, 0.5, 1.5),
        ln2_bias: random_fixed(rng, d, -0.5, 0.5),
        sps: LayerSps::per_head(
            (0..cfg.h).map(|_| grid_lambda(rng)).collect(),
            cfg.d_h,
            cfg.l,
        )
        .expect("grid lambdas are in range"),
    }
}

pub fn random_model(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Vec<LayerWeights> {
    (0..cfg.num_layers)
        .map(|_| random_layer_weights(rng, cfg))
        .collect()
}

pub fn random_input(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> BitMatrix {
    random_bitmatrix(rng, cfg.l, cfg.d, Scheme::SignedPM1).0
}

/// Synthetic calibration set whose reference maps come from the elastic
/// binarization of real softmax attention at scale `alpha`.
pub fn random_calibration(
    rng: &mut ChaCha8Rng,
    layers: usize,
    h: usize,
    l: usize,
    d_h: usize,
    samples: usize,
    alpha: f64,
) -> Result<CalibrationSet> {
    let d = h * d_h;
    let mut out = CalibrationSet {
        layers,
        h,
        l,
        d_h,
        sampling_fraction: 0.1,
        samples: Vec::with_capacity(samples),
    };
    for _ in 0..samples {
        let mut sample = CalibrationSample {
            q: Vec::with_capacity(layers),
            k: Vec::with_capacity(layers),
            reference: Vec::with_capacity(layers),
        };
        for _ in 0..layers {
            let (q, _) = random_bitmatrix(rng, l, d, Scheme::SignedPM1);
            let (k, _) = random_bitmatrix(rng, l, d, Scheme::SignedPM1);
            let mut maps = Vec::with_capacity(h);
            for head in 0..h {
                let q_h = q.extract_cols(head * d_h, d_h);
                let k_h = k.extract_cols(head * d_h, d_h);
                maps.push(bit_attention_prob(&q_h, &k_h, alpha)?);
            }
            sample.q.push(q);
            sample.k.push(k);
            sample.reference.push(maps);
        }
        out.samples.push(sample);
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seed_deterministic() {
        let cfg = ModelConfig::new(16, 2, 8, 2, 2, 4).unwrap();
        let a = random_model(&mut rng(7), &cfg);
        let b = random_model(&mut rng(7), &cfg);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.w_q, y.w_q);
            assert_eq!(x.quant_f1, y.quant_f1);
            assert_eq!(x.ln1_gain, y.ln1_gain);
        }
        let c1 = random_calibration(&mut rng(9), 2, 2, 8, 8, 3, 0.2).unwrap();
        let c2 = random_calibration(&mut rng(9), 2, 2, 8, 8, 3, 0.2).unwrap();
        assert_eq!(c1.write_bytes(), c2.write_bytes());
    }

    #[test]
    fn generated_weights_validate() {
        let cfg = ModelConfig::new(32, 4, 12, 1, 1, 8).unwrap();
        let w = random_layer_weights(&mut rng(3), &cfg);
        w.validate(&cfg).unwrap();
    }
}
