//! Shifted polarized softmax: thresholding that replaces softmax plus
//! binarization in binary attention, and the distortion-minimizing grid
//! search that picks its thresholds at layer, head or row granularity.
//!
//! A score polarizes to `1` exactly when `z >= lambda`. Inside the engine the
//! comparison runs on raw popcounts: with `dot = 2p - d_h` the real-valued
//! test `dot / sqrt(d_h) >= lambda` is equivalent to `p >= T` with
//! `T = ceil((lambda * sqrt(d_h) + d_h) / 2)`, so thresholds are folded to a
//! single integer per head at load time.

use std::fmt::Write as _;

use crate::bitpack::{BitMatrix, Scheme};
use crate::error::{CobraError, Result};
use crate::oracle::RealMatrix;
use crate::par::map_indexed;

/// Threshold sharing level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerLayer,
    PerHead,
    PerRow,
}

impl Granularity {
    pub fn name(self) -> &'static str {
        match self {
            Granularity::PerLayer => "layer",
            Granularity::PerHead => "head",
            Granularity::PerRow => "row",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "layer" => Some(Granularity::PerLayer),
            "head" => Some(Granularity::PerHead),
            "row" => Some(Granularity::PerRow),
            _ => None,
        }
    }
}

/// Integer popcount threshold equivalent to the real-valued comparison
/// `(2p - d_h) / sqrt(d_h) >= lambda` for integer popcounts `p`.
pub fn popcount_threshold(lambda: f64, d_h: usize) -> u32 {
    let t = ((lambda * (d_h as f64).sqrt() + d_h as f64) / 2.0).ceil();
    t as u32
}

/// One layer's worth of thresholds in engine form.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSps {
    d_h: usize,
    rows: usize,
    per_row: bool,
    /// Head-major: `h` values, or `h * rows` when row granular.
    lambdas: Vec<f64>,
    thresholds: Vec<u32>,
}

impl LayerSps {
    /// One threshold per head.
    pub fn per_head(lambdas: Vec<f64>, d_h: usize, rows: usize) -> Result<Self> {
        check_lambdas(&lambdas)?;
        let thresholds = lambdas.iter().map(|&l| popcount_threshold(l, d_h)).collect();
        Ok(LayerSps {
            d_h,
            rows,
            per_row: false,
            lambdas,
            thresholds,
        })
    }

    /// One threshold per head per attention-map row, head-major.
    pub fn per_row(lambdas: Vec<f64>, heads: usize, d_h: usize, rows: usize) -> Result<Self> {
        check_lambdas(&lambdas)?;
        if lambdas.len() != heads * rows {
            return Err(CobraError::DimMismatch {
                context: "LayerSps::per_row",
                expected: format!("{} lambdas", heads * rows),
                got: format!("{}", lambdas.len()),
            });
        }
        let thresholds = lambdas.iter().map(|&l| popcount_threshold(l, d_h)).collect();
        Ok(LayerSps {
            d_h,
            rows,
            per_row: true,
            lambdas,
            thresholds,
        })
    }

    pub fn heads(&self) -> usize {
        if self.per_row {
            self.lambdas.len() / self.rows
        } else {
            self.lambdas.len()
        }
    }

    #[inline]
    pub fn threshold(&self, head: usize, row: usize) -> u32 {
        if self.per_row {
            self.thresholds[head * self.rows + row]
        } else {
            self.thresholds[head]
        }
    }

    pub fn lambda(&self, head: usize, row: usize) -> f64 {
        if self.per_row {
            self.lambdas[head * self.rows + row]
        } else {
            self.lambdas[head]
        }
    }

    pub(crate) fn check_shape(&self, h: usize, l: usize, d_h: usize) -> Result<()> {
        let ok = self.heads() == h && self.d_h == d_h && (!self.per_row || self.rows == l);
        if !ok {
            return Err(CobraError::DimMismatch {
                context: "LayerSps",
                expected: format!("h={h}, l={l}, d_h={d_h}"),
                got: format!(
                    "h={}, rows={}, d_h={}, per_row={}",
                    self.heads(),
                    self.rows,
                    self.d_h,
                    self.per_row
                ),
            });
        }
        Ok(())
    }
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    for &l in lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(CobraError::InvalidConfig(format!(
                "sps threshold {l} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Polarize real scores: bit is `1` exactly when `score >= lambda`.
pub fn sps_apply(scores: &RealMatrix, lambda: f64) -> BitMatrix {
    let mut out = BitMatrix::zeros(scores.rows(), scores.cols(), Scheme::Unsigned01);
    for r in 0..scores.rows() {
        for c in 0..scores.cols() {
            if scores.get(r, c) >= lambda {
                out.set(r, c, true);
            }
        }
    }
    out
}

/// Polarize raw popcounts through the derived integer threshold. Agrees
/// bit-for-bit with [`sps_apply`] on `z = (2p - d_h)/sqrt(d_h)`.
pub fn sps_apply_popcounts(popcounts: &crate::matrix::IntMatrix, d_h: usize, lambda: f64) -> BitMatrix {
    let t = popcount_threshold(lambda, d_h) as i32;
    let mut out = BitMatrix::zeros(popcounts.rows(), popcounts.cols(), Scheme::Unsigned01);
    for r in 0..popcounts.rows() {
        for c in 0..popcounts.cols() {
            if popcounts.get(r, c) >= t {
                out.set(r, c, true);
            }
        }
    }
    out
}

/// Channel distortion rate: mean squared error between two binary maps,
/// which for binary entries is the Hamming distance over the element count.
pub fn distortion(a1: &BitMatrix, a2: &BitMatrix) -> Result<f64> {
    if a1.rows() != a2.rows() || a1.cols() != a2.cols() {
        return Err(CobraError::DimMismatch {
            context: "distortion",
            expected: format!("{}x{}", a1.rows(), a1.cols()),
            got: format!("{}x{}", a2.rows(), a2.cols()),
        });
    }
    let mut differing = 0u64;
    for r in 0..a1.rows() {
        for (wa, wb) in a1.row_words(r).iter().zip(a2.row_words(r)) {
            differing += (wa ^ wb).count_ones() as u64;
        }
    }
    Ok(differing as f64 / (a1.rows() * a1.cols()) as f64)
}

/// Candidate grid `{0, step, 2*step, ..., 1}`, each value canonicalized to
/// three decimals so grid values, table files and reloaded thresholds are the
/// same floats everywhere.
pub fn lambda_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) || !step.is_finite() {
        return Err(CobraError::InvalidConfig(format!(
            "grid step {step} outside (0, 1]"
        )));
    }
    let n = (1.0 / step).round() as usize;
    let mut grid: Vec<f64> = (0..=n)
        .map(|k| canonical_lambda(k as f64 * step))
        .filter(|&l| l <= 1.0)
        .collect();
    grid.dedup();
    Ok(grid)
}

fn canonical_lambda(x: f64) -> f64 {
    format!("{x:.3}").parse().expect("canonical lambda reparse")
}

/// Calibration material for the threshold search: per sample and layer the
/// binarized queries and keys plus the reference attention maps the search
/// matches against (one `(0,1)` map of shape `l x l` per head).
#[derive(Debug, Clone)]
pub struct CalibrationSample {
    pub q: Vec<BitMatrix>,
    pub k: Vec<BitMatrix>,
    pub reference: Vec<Vec<BitMatrix>>,
}

#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub layers: usize,
    pub h: usize,
    pub l: usize,
    pub d_h: usize,
    /// Fraction of the source data the samples were drawn from; recorded
    /// metadata only.
    pub sampling_fraction: f64,
    pub samples: Vec<CalibrationSample>,
}

const CALIB_MAGIC: &[u8; 4] = b"CBRC";
const CALIB_VERSION: u32 = 1;

impl CalibrationSet {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(CobraError::EmptyCalibration);
        }
        let d = self.h * self.d_h;
        for (s, sample) in self.samples.iter().enumerate() {
            let ok = sample.q.len() == self.layers
                && sample.k.len() == self.layers
                && sample.reference.len() == self.layers;
            if !ok {
                return Err(CobraError::DimMismatch {
                    context: "calibration sample",
                    expected: format!("{} layers", self.layers),
                    got: format!("sample {s}"),
                });
            }
            for layer in 0..self.layers {
                let q = &sample.q[layer];
                let k = &sample.k[layer];
                let shape_ok = q.rows() == self.l
                    && q.cols() == d
                    && q.scheme() == Scheme::SignedPM1
                    && k.rows() == self.l
                    && k.cols() == d
                    && k.scheme() == Scheme::SignedPM1
                    && sample.reference[layer].len() == self.h
                    && sample.reference[layer].iter().all(|m| {
                        m.rows() == self.l && m.cols() == self.l && m.scheme() == Scheme::Unsigned01
                    });
                if !shape_ok {
                    return Err(CobraError::DimMismatch {
                        context: "calibration tensors",
                        expected: format!("Q/K {}x{}, {} reference maps {0}x{0}", self.l, d, self.h),
                        got: format!("sample {s}, layer {layer}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn write_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CALIB_MAGIC);
        out.extend_from_slice(&CALIB_VERSION.to_le_bytes());
        for v in [
            self.layers as u32,
            self.h as u32,
            self.l as u32,
            self.d_h as u32,
            self.samples.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.sampling_fraction.to_le_bytes());
        for sample in &self.samples {
            for layer in 0..self.layers {
                sample.q[layer].write_blob(&mut out);
                sample.k[layer].write_blob(&mut out);
                for map in &sample.reference[layer] {
                    map.write_blob(&mut out);
                }
            }
        }
        out
    }

    pub fn read_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, detail: &str| CobraError::Format {
            format: "calibration set",
            offset,
            detail: detail.into(),
        };
        if bytes.len() < 36 {
            return Err(fail(0, "truncated header"));
        }
        if &bytes[0..4] != CALIB_MAGIC {
            return Err(fail(0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CALIB_VERSION {
            return Err(fail(4, &format!("unsupported version {version}")));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (layers, h, l, d_h, n_samples) = (field(0), field(1), field(2), field(3), field(4));
        let sampling_fraction = f64::from_le_bytes(bytes[28..36].try_into().unwrap());
        let mut offset = 36;
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let mut sample = CalibrationSample {
                q: Vec::with_capacity(layers),
                k: Vec::with_capacity(layers),
                reference: Vec::with_capacity(layers),
            };
            for _ in 0..layers {
                sample.q.push(BitMatrix::read_blob(bytes, &mut offset)?);
                sample.k.push(BitMatrix::read_blob(bytes, &mut offset)?);
                let mut maps = Vec::with_capacity(h);
                for _ in 0..h {
                    maps.push(BitMatrix::read_blob(bytes, &mut offset)?);
                }
                sample.reference.push(maps);
            }
            samples.push(sample);
        }
        if offset != bytes.len() {
            return Err(fail(offset, "trailing bytes"));
        }
        let set = CalibrationSet {
            layers,
            h,
            l,
            d_h,
            sampling_fraction,
            samples,
        };
        set.validate()?;
        Ok(set)
    }
}

/// Searched thresholds for a whole model plus the achieved distortion per
/// search unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SpsThresholds {
    pub granularity: Granularity,
    pub layers: usize,
    pub h: usize,
    pub l: usize,
    pub d_h: usize,
    /// Unit-major: `layers`, `layers*h`, or `layers*h*l` values.
    pub lambdas: Vec<f64>,
    pub distortions: Vec<f64>,
}

impl SpsThresholds {
    fn unit_count(&self) -> usize {
        match self.granularity {
            Granularity::PerLayer => self.layers,
            Granularity::PerHead => self.layers * self.h,
            Granularity::PerRow => self.layers * self.h * self.l,
        }
    }

    pub fn lambda(&self, layer: usize, head: usize, row: usize) -> f64 {
        match self.granularity {
            Granularity::PerLayer => self.lambdas[layer],
            Granularity::PerHead => self.lambdas[layer * self.h + head],
            Granularity::PerRow => self.lambdas[(layer * self.h + head) * self.l + row],
        }
    }

    pub fn threshold(&self, layer: usize, head: usize, row: usize) -> u32 {
        popcount_threshold(self.lambda(layer, head, row), self.d_h)
    }

    /// Engine-form slice for one layer.
    pub fn layer_slice(&self, layer: usize) -> Result<LayerSps> {
        match self.granularity {
            Granularity::PerLayer => {
                LayerSps::per_head(vec![self.lambdas[layer]; self.h], self.d_h, self.l)
            }
            Granularity::PerHead => LayerSps::per_head(
                self.lambdas[layer * self.h..(layer + 1) * self.h].to_vec(),
                self.d_h,
                self.l,
            ),
            Granularity::PerRow => {
                let base = layer * self.h * self.l;
                LayerSps::per_row(
                    self.lambdas[base..base + self.h * self.l].to_vec(),
                    self.h,
                    self.d_h,
                    self.l,
                )
            }
        }
    }

    /// Uniform thresholds without a search; handy for synthetic runs.
    pub fn uniform(
        granularity: Granularity,
        layers: usize,
        h: usize,
        l: usize,
        d_h: usize,
        lambda: f64,
    ) -> Result<Self> {
        check_lambdas(&[lambda])?;
        let t = SpsThresholds {
            granularity,
            layers,
            h,
            l,
            d_h,
            lambdas: Vec::new(),
            distortions: Vec::new(),
        };
        let units = t.unit_count();
        Ok(SpsThresholds {
            lambdas: vec![lambda; units],
            distortions: vec![0.0; units],
            ..t
        })
    }

    /// Structured-text table: header plus one `layer/head(/row) -> lambda, T,
    /// distortion` line per unit. Writing, parsing and rewriting is
    /// byte-identical.
    pub fn write_table(&self) -> String {
        let mut out = String::new();
        out.push_str("# sps threshold table v1\n");
        let _ = writeln!(out, "granularity = {}", self.granularity.name());
        let _ = writeln!(out, "layers = {}", self.layers);
        let _ = writeln!(out, "heads = {}", self.h);
        let _ = writeln!(out, "rows = {}", self.l);
        let _ = writeln!(out, "d_h = {}", self.d_h);
        let mut unit = 0usize;
        for layer in 0..self.layers {
            match self.granularity {
                Granularity::PerLayer => {
                    let lam = self.lambdas[unit];
                    let _ = writeln!(
                        out,
                        "layer={layer} lambda={lam:.3} T={} distortion={:.6}",
                        popcount_threshold(lam, self.d_h),
                        self.distortions[unit]
                    );
                    unit += 1;
                }
                Granularity::PerHead => {
                    for head in 0..self.h {
                        let lam = self.lambdas[unit];
                        let _ = writeln!(
                            out,
                            "layer={layer} head={head} lambda={lam:.3} T={} distortion={:.6}",
                            popcount_threshold(lam, self.d_h),
                            self.distortions[unit]
                        );
                        unit += 1;
                    }
                }
                Granularity::PerRow => {
                    for head in 0..self.h {
                        for row in 0..self.l {
                            let lam = self.lambdas[unit];
                            let _ = writeln!(
                                out,
                                "layer={layer} head={head} row={row} lambda={lam:.3} T={} distortion={:.6}",
                                popcount_threshold(lam, self.d_h),
                                self.distortions[unit]
                            );
                            unit += 1;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn parse_table(text: &str) -> Result<Self> {
        let fail = |line: usize, detail: &str| CobraError::Format {
            format: "threshold table",
            offset: line,
            detail: detail.into(),
        };
        let mut granularity = None;
        let mut header = [None::<usize>; 4]; // layers, heads, rows, d_h
        let mut lambdas = Vec::new();
        let mut distortions = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((key, value)) = line.split_once(" = ") {
                match key {
                    "granularity" => {
                        granularity = Some(
                            Granularity::parse(value).ok_or_else(|| fail(ln, "bad granularity"))?,
                        )
                    }
                    "layers" | "heads" | "rows" | "d_h" => {
                        let idx = ["layers", "heads", "rows", "d_h"]
                            .iter()
                            .position(|k| *k == key)
                            .unwrap();
                        header[idx] =
                            Some(value.parse().map_err(|_| fail(ln, "bad header value"))?);
                    }
                    _ => return Err(fail(ln, "unknown header key")),
                }
                continue;
            }
            let mut lambda = None;
            let mut t_field = None;
            let mut dist = None;
            for part in line.split_whitespace() {
                let (key, value) = part.split_once('=').ok_or_else(|| fail(ln, "bad field"))?;
                match key {
                    "layer" | "head" | "row" => {}
                    "lambda" => {
                        lambda = Some(value.parse::<f64>().map_err(|_| fail(ln, "bad lambda"))?)
                    }
                    "T" => t_field = Some(value.parse::<u32>().map_err(|_| fail(ln, "bad T"))?),
                    "distortion" => {
                        dist = Some(value.parse::<f64>().map_err(|_| fail(ln, "bad distortion"))?)
                    }
                    _ => return Err(fail(ln, "unknown field")),
                }
            }
            let lam = lambda.ok_or_else(|| fail(ln, "missing lambda"))?;
            lambdas.push(lam);
            distortions.push(dist.unwrap_or(0.0));
            if let (Some(t), Some(d_h)) = (t_field, header[3]) {
                if t != popcount_threshold(lam, d_h) {
                    return Err(fail(ln, "derived threshold inconsistent with lambda"));
                }
            }
        }
        let granularity = granularity.ok_or_else(|| fail(0, "missing granularity"))?;
        let [layers, h, l, d_h] = header;
        let (layers, h, l, d_h) = (
            layers.ok_or_else(|| fail(0, "missing layers"))?,
            h.ok_or_else(|| fail(0, "missing heads"))?,
            l.ok_or_else(|| fail(0, "missing rows"))?,
            d_h.ok_or_else(|| fail(0, "missing d_h"))?,
        );
        let table = SpsThresholds {
            granularity,
            layers,
            h,
            l,
            d_h,
            lambdas,
            distortions,
        };
        if table.lambdas.len() != table.unit_count() {
            return Err(fail(0, "wrong number of threshold lines"));
        }
        check_lambdas(&table.lambdas)?;
        Ok(table)
    }
}

/// Histogram of reference bits over popcount values for one map: counts of
/// positions with reference bit 0 and 1 at each popcount `p` in `0..=d_h`.
struct MapHistogram {
    ref0: Vec<u32>,
    ref1: Vec<u32>,
}

impl MapHistogram {
    fn build(q: &BitMatrix, k: &BitMatrix, reference: &BitMatrix, head: usize, d_h: usize) -> Self {
        let q_h = q.extract_cols(head * d_h, d_h);
        let k_h = k.extract_cols(head * d_h, d_h);
        let mut hist = MapHistogram {
            ref0: vec![0; d_h + 1],
            ref1: vec![0; d_h + 1],
        };
        let l = q.rows();
        for i in 0..l {
            let qw = q_h.row_words(i);
            for j in 0..l {
                let mut p = 0u32;
                for (a, b) in qw.iter().zip(k_h.row_words(j)) {
                    p += (!(a ^ b)).count_ones();
                }
                p -= (q_h.words_per_row() * 64 - d_h) as u32; // pad bits xnor to 1
                if reference.get(i, j) {
                    hist.ref1[p as usize] += 1;
                } else {
                    hist.ref0[p as usize] += 1;
                }
            }
        }
        hist
    }

    /// As `build` but one histogram per attention-map row.
    fn build_rows(
        q: &BitMatrix,
        k: &BitMatrix,
        reference: &BitMatrix,
        head: usize,
        d_h: usize,
    ) -> Vec<MapHistogram> {
        let q_h = q.extract_cols(head * d_h, d_h);
        let k_h = k.extract_cols(head * d_h, d_h);
        let l = q.rows();
        let pad = (q_h.words_per_row() * 64 - d_h) as u32;
        (0..l)
            .map(|i| {
                let mut hist = MapHistogram {
                    ref0: vec![0; d_h + 1],
                    ref1: vec![0; d_h + 1],
                };
                let qw = q_h.row_words(i);
                for j in 0..l {
                    let mut p = 0u32;
                    for (a, b) in qw.iter().zip(k_h.row_words(j)) {
                        p += (!(a ^ b)).count_ones();
                    }
                    p -= pad;
                    if reference.get(i, j) {
                        hist.ref1[p as usize] += 1;
                    } else {
                        hist.ref0[p as usize] += 1;
                    }
                }
                hist
            })
            .collect()
    }

    /// Bits differing from the reference when thresholding at popcount `t`:
    /// reference ones below the threshold plus reference zeros at or above.
    fn differing(&self, t: u32) -> u64 {
        let t = t as usize;
        let miss: u64 = self.ref1[..t.min(self.ref1.len())].iter().map(|&c| c as u64).sum();
        let hit0: u64 = self.ref0[t.min(self.ref0.len())..].iter().map(|&c| c as u64).sum();
        miss + hit0
    }
}

/// Pick the grid value minimizing the mean distortion of the maps a unit
/// covers; ties break toward the smallest lambda. The mean runs over the
/// unit's maps in (sample, head) order, each map contributing its own MSE.
fn best_lambda(grid: &[f64], d_h: usize, elems_per_map: usize, hists: &[&MapHistogram]) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    for &lam in grid {
        let t = popcount_threshold(lam, d_h);
        let mut acc = 0.0;
        for h in hists {
            acc += h.differing(t) as f64 / elems_per_map as f64;
        }
        let mean = acc / hists.len() as f64;
        if mean < best.0 {
            best = (mean, lam);
        }
    }
    (best.1, best.0)
}

/// Grid search for the thresholds minimizing distortion against the
/// calibration reference maps.
///
/// Units scan the grid independently (in parallel) and deterministically;
/// the reported distortion is the achieved minimum per unit.
pub fn search_thresholds(
    calib: &CalibrationSet,
    granularity: Granularity,
    grid_step: f64,
) -> Result<SpsThresholds> {
    calib.validate()?;
    let grid = lambda_grid(grid_step)?;
    let (layers, h, l, d_h) = (calib.layers, calib.h, calib.l, calib.d_h);
    let elems = l * l;

    let mut lambdas;
    let mut distortions;
    match granularity {
        Granularity::PerLayer => {
            let per_layer = map_indexed(layers, false, |layer| {
                let hists: Vec<MapHistogram> = calib
                    .samples
                    .iter()
                    .flat_map(|s| {
                        (0..h).map(move |head| {
                            MapHistogram::build(
                                &s.q[layer],
                                &s.k[layer],
                                &s.reference[layer][head],
                                head,
                                d_h,
                            )
                        })
                    })
                    .collect();
                let refs: Vec<&MapHistogram> = hists.iter().collect();
                best_lambda(&grid, d_h, elems, &refs)
            });
            lambdas = Vec::with_capacity(layers);
            distortions = Vec::with_capacity(layers);
            for (lam, dist) in per_layer {
                lambdas.push(lam);
                distortions.push(dist);
            }
        }
        Granularity::PerHead => {
            let per_unit = map_indexed(layers * h, false, |unit| {
                let (layer, head) = (unit / h, unit % h);
                let hists: Vec<MapHistogram> = calib
                    .samples
                    .iter()
                    .map(|s| {
                        MapHistogram::build(
                            &s.q[layer],
                            &s.k[layer],
                            &s.reference[layer][head],
                            head,
                            d_h,
                        )
                    })
                    .collect();
                let refs: Vec<&MapHistogram> = hists.iter().collect();
                best_lambda(&grid, d_h, elems, &refs)
            });
            lambdas = Vec::with_capacity(layers * h);
            distortions = Vec::with_capacity(layers * h);
            for (lam, dist) in per_unit {
                lambdas.push(lam);
                distortions.push(dist);
            }
        }
        Granularity::PerRow => {
            let per_pair = map_indexed(layers * h, false, |unit| {
                let (layer, head) = (unit / h, unit % h);
                // One histogram per (sample, row); rows are the units.
                let sample_rows: Vec<Vec<MapHistogram>> = calib
                    .samples
                    .iter()
                    .map(|s| {
                        MapHistogram::build_rows(
                            &s.q[layer],
                            &s.k[layer],
                            &s.reference[layer][head],
                            head,
                            d_h,
                        )
                    })
                    .collect();
                (0..l)
                    .map(|row| {
                        let refs: Vec<&MapHistogram> =
                            sample_rows.iter().map(|rows| &rows[row]).collect();
                        best_lambda(&grid, d_h, l, &refs)
                    })
                    .collect::<Vec<_>>()
            });
            lambdas = Vec::with_capacity(layers * h * l);
            distortions = Vec::with_capacity(layers * h * l);
            for rows in per_pair {
                for (lam, dist) in rows {
                    lambdas.push(lam);
                    distortions.push(dist);
                }
            }
        }
    }

    Ok(SpsThresholds {
        granularity,
        layers,
        h,
        l,
        d_h,
        lambdas,
        distortions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::IntMatrix;

    #[test]
    fn boundary_score_polarizes_to_one() {
        let scores = RealMatrix::from_rows(&[vec![0.3, 0.29999]]).unwrap();
        let bits = sps_apply(&scores, 0.3);
        assert!(bits.get(0, 0));
        assert!(!bits.get(0, 1));
    }

    #[test]
    fn all_below_threshold_gives_empty_map() {
        let scores = RealMatrix::from_rows(&[vec![-0.5; 6]]).unwrap();
        let bits = sps_apply(&scores, 0.0);
        assert_eq!(bits.row_popcount(0), 0);
    }

    #[test]
    fn integer_threshold_path_matches_real_path_exhaustively() {
        // every head width up to 64, every grid lambda, every popcount
        let grid = lambda_grid(0.05).unwrap();
        for d_h in 1..=64usize {
            for &lam in &grid {
                let t = popcount_threshold(lam, d_h) as i64;
                for p in 0..=d_h as i64 {
                    let z = (2 * p - d_h as i64) as f64 / (d_h as f64).sqrt();
                    assert_eq!(
                        p >= t,
                        z >= lam,
                        "d_h={d_h} lambda={lam} p={p} T={t} z={z}"
                    );
                }
            }
        }
    }

    #[test]
    fn apply_is_antitone_in_lambda() {
        let mut scores = RealMatrix::zeros(4, 4);
        let mut s = 3u64;
        for r in 0..4 {
            for c in 0..4 {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                scores.set(r, c, ((s >> 33) % 2000) as f64 / 1000.0 - 1.0);
            }
        }
        let grid = lambda_grid(0.05).unwrap();
        for pair in grid.windows(2) {
            let low = sps_apply(&scores, pair[0]);
            let high = sps_apply(&scores, pair[1]);
            for r in 0..4 {
                for c in 0..4 {
                    assert!(!(high.get(r, c) && !low.get(r, c)), "raising lambda set a bit");
                }
            }
        }
    }

    #[test]
    fn distortion_edges() {
        let a = BitMatrix::zeros(3, 5, Scheme::Unsigned01);
        assert_eq!(distortion(&a, &a).unwrap(), 0.0);
        let mut b = BitMatrix::zeros(3, 5, Scheme::Unsigned01);
        for r in 0..3 {
            for c in 0..5 {
                b.set(r, c, true);
            }
        }
        assert_eq!(distortion(&a, &b).unwrap(), 1.0);
        let c = BitMatrix::zeros(3, 4, Scheme::Unsigned01);
        assert!(distortion(&a, &c).is_err());
    }

    #[test]
    fn distortion_counts_differing_entries() {
        let mut a = BitMatrix::zeros(2, 4, Scheme::Unsigned01);
        let mut b = BitMatrix::zeros(2, 4, Scheme::Unsigned01);
        a.set(0, 1, true);
        b.set(1, 3, true);
        b.set(0, 1, true);
        assert_eq!(distortion(&a, &b).unwrap(), 1.0 / 8.0);
    }

    #[test]
    fn grid_for_default_step_has_21_values() {
        let grid = lambda_grid(0.05).unwrap();
        assert_eq!(grid.len(), 21);
        assert_eq!(grid[0], 0.0);
        assert_eq!(*grid.last().unwrap(), 1.0);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn popcount_path_agrees_with_real_apply() {
        let d_h = 8usize;
        let mut pops = IntMatrix::zeros(3, 9);
        let mut scores = RealMatrix::zeros(3, 9);
        for r in 0..3 {
            for c in 0..9 {
                let p = ((r * 9 + c) % (d_h + 1)) as i32;
                pops.set(r, c, p);
                scores.set(r, c, (2 * p - d_h as i32) as f64 / (d_h as f64).sqrt());
            }
        }
        for &lam in &lambda_grid(0.05).unwrap() {
            assert_eq!(
                sps_apply_popcounts(&pops, d_h, lam),
                sps_apply(&scores, lam),
                "lambda={lam}"
            );
        }
    }

    #[test]
    fn table_round_trip_is_byte_identical() {
        let t = SpsThresholds {
            granularity: Granularity::PerHead,
            layers: 2,
            h: 3,
            l: 4,
            d_h: 8,
            lambdas: vec![0.0, 0.05, 0.1, 0.15, 0.2, 1.0],
            distortions: vec![0.1, 0.2, 0.25, 0.0, 0.5, 0.125],
        };
        let text = t.write_table();
        let parsed = SpsThresholds::parse_table(&text).unwrap();
        assert_eq!(parsed, t);
        assert_eq!(parsed.write_table(), text);
    }

    #[test]
    fn table_rejects_inconsistent_derived_threshold() {
        let t = SpsThresholds::uniform(Granularity::PerLayer, 1, 2, 4, 8, 0.25).unwrap();
        let good = popcount_threshold(0.25, 8);
        let text = t
            .write_table()
            .replace(&format!("T={good}"), &format!("T={}", good + 1));
        assert!(SpsThresholds::parse_table(&text).is_err());
    }
}
