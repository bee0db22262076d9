//! Pixel embedding: each 8-bit colour component selects a column of a shared
//! `d × 256` lookup table, and the column is quantized to `Q`-bit codes.
//!
//! Training keeps a float table followed by the activation quantizer so the
//! table learns through the straight-through estimator. For inference the
//! two collapse into a [`MergedTable`] of `256 · d` codes (`256 · d · Q`
//! bits), and embedding becomes a pure table lookup.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{ImageBatch, COMPONENTS};
use crate::quant::{QuantConfig, QuantizedCode};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of distinct 8-bit component values.
pub const PIXEL_VALUES: usize = 256;

/// A validated index into the 256-entry vocabulary of component values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct OneHotIndex(u8);

impl OneHotIndex {
    pub fn new(value: usize) -> Result<Self> {
        u8::try_from(value)
            .map(Self)
            .map_err(|_| Error::IndexOutOfRange {
                index: value,
                len: PIXEL_VALUES,
            })
    }

    pub fn value(self) -> usize {
        self.0 as usize
    }
}

impl From<u8> for OneHotIndex {
    fn from(v: u8) -> Self {
        Self(v)
    }
}

/// Length-`n` indicator vector with a single 1 at position `p` (0-based).
pub fn one_hot(p: usize, n: usize) -> Result<Vec<u8>> {
    if p >= n {
        return Err(Error::IndexOutOfRange { index: p, len: n });
    }
    let mut h = vec![0u8; n];
    h[p] = 1;
    Ok(h)
}

/// Initial distribution of table entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TableInit {
    /// Independent uniform draws over the quantizer's range.
    Uniform,
    /// Uniform draws over the quantizer's range, each row sorted by pixel
    /// value. Every dimension starts as a random monotone staircase, so
    /// intensity order survives the lookup from the first step.
    #[default]
    SortedUniform,
    /// Deterministic ramps over the pixel range, row `k` shifted by `k / d`
    /// of a quantizer step. The `d · (2^Q - 1)` code thresholds land evenly
    /// spaced over `0..=255`, so the initial lookup is a fine thermometer
    /// code rather than `d` near-copies of one coarse one.
    StaggeredRamp,
}

impl TableInit {
    pub fn name(self) -> &'static str {
        match self {
            TableInit::Uniform => "uniform",
            TableInit::SortedUniform => "sorted-uniform",
            TableInit::StaggeredRamp => "staggered-ramp",
        }
    }
}

impl std::str::FromStr for TableInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TableInit::Uniform),
            "sorted-uniform" => Ok(TableInit::SortedUniform),
            "staggered-ramp" => Ok(TableInit::StaggeredRamp),
            _ => Err(Error::InvalidConfig(format!("unknown table init {s:?}"))),
        }
    }
}

/// Trainable float table; column `p` is the embedding of component value `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    weights: Tensor,
    quant: QuantConfig,
}

impl EmbeddingTable {
    /// Uniform initialization over the quantizer's range.
    pub fn random(d: usize, quant: QuantConfig, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be at least 1".into()));
        }
        let data = (0..d * PIXEL_VALUES)
            .map(|_| rng.gen_range(quant.lo()..=quant.hi()))
            .collect();
        Self::from_weights(Tensor::new(&[d, PIXEL_VALUES], data)?, quant)
    }

    pub fn init(d: usize, quant: QuantConfig, init: TableInit, rng: &mut impl Rng) -> Result<Self> {
        let mut table = Self::random(d, quant, rng)?;
        match init {
            TableInit::Uniform => {}
            TableInit::SortedUniform => {
                for row in table.weights.data_mut().chunks_mut(PIXEL_VALUES) {
                    row.sort_by(f32::total_cmp);
                }
            }
            TableInit::StaggeredRamp => {
                let (lo, span) = (quant.lo(), quant.hi() - quant.lo());
                let levels = quant.max_code() as f32;
                for (k, row) in table.weights.data_mut().chunks_mut(PIXEL_VALUES).enumerate() {
                    // Thresholds sit at half steps; shifting row k by
                    // ((k + 1/2) / d - 1/2) steps interleaves the rows.
                    let shift = ((k as f32 + 0.5) / d as f32 - 0.5) / levels;
                    for (p, x) in row.iter_mut().enumerate() {
                        let t = (p as f32 + 0.5) / PIXEL_VALUES as f32 - shift;
                        *x = lo + span * t.clamp(0.0, 1.0);
                    }
                }
            }
        }
        Ok(table)
    }

    pub fn from_weights(weights: Tensor, quant: QuantConfig) -> Result<Self> {
        match weights.shape() {
            &[d, PIXEL_VALUES] if d > 0 => Ok(Self { weights, quant }),
            s => Err(Error::shape("embedding-table", s, &[0, PIXEL_VALUES])),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn quant(&self) -> &QuantConfig {
        &self.quant
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn into_weights(self) -> Tensor {
        self.weights
    }

    /// Float column `p`, i.e. `E · h(p)`.
    pub fn column(&self, p: OneHotIndex) -> Vec<f32> {
        let d = self.dim();
        (0..d)
            .map(|k| self.weights.data()[k * PIXEL_VALUES + p.value()])
            .collect()
    }
}

/// Clamps table entries into the quantizer's range so the clipped STE keeps
/// passing gradient to every column.
pub fn clamp_table(weights: &mut Tensor, quant: &QuantConfig) {
    for v in weights.data_mut() {
        *v = v.clamp(quant.lo(), quant.hi());
    }
}

/// Training-path pixel embedding on a tape.
///
/// `table` must be a `(d, 256)` node. Output is `(N, 3d, H, W)`; channels
/// `c·d .. c·d + d` hold the quantized embedding of component `c` (R, G, B).
pub fn embed_train(tape: &mut Tape, images: &ImageBatch, table: Var, quant: &QuantConfig) -> Result<Var> {
    let d = match tape.value(table).shape() {
        &[d, PIXEL_VALUES] => d,
        s => return Err(Error::shape("embed", s, &[0, PIXEL_VALUES])),
    };
    let (n, h, w) = (images.len(), images.height(), images.width());
    let gathered = tape.gather_columns(table, &images.nchw_indices())?;
    let split = tape.reshape(gathered, &[d, n, COMPONENTS, h * w])?;
    let moved = tape.permute(split, &[1, 2, 0, 3])?;
    let maps = tape.reshape(moved, &[n, COMPONENTS * d, h, w])?;
    Ok(tape.quantize_activation(maps, quant))
}

/// Float forward of the training path without keeping a tape.
pub fn embed_forward(images: &ImageBatch, table: &EmbeddingTable) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let t = tape.leaf(table.weights().clone());
    let out = embed_train(&mut tape, images, t, table.quant())?;
    Ok(tape.value(out).clone())
}

/// Inference table: `256` entries of `d` codes each, in pixel-value order.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedTable {
    d: usize,
    quant: QuantConfig,
    entries: Vec<u8>,
}

pub fn merge_table(table: &EmbeddingTable) -> MergedTable {
    let d = table.dim();
    let w = table.weights().data();
    let mut entries = vec![0u8; PIXEL_VALUES * d];
    for p in 0..PIXEL_VALUES {
        for k in 0..d {
            entries[p * d + k] = table.quant().code(w[k * PIXEL_VALUES + p]);
        }
    }
    MergedTable {
        d,
        quant: *table.quant(),
        entries,
    }
}

impl MergedTable {
    pub fn from_entries(d: usize, quant: QuantConfig, entries: Vec<u8>) -> Result<Self> {
        if d == 0 || entries.len() != PIXEL_VALUES * d {
            return Err(Error::shape("merged-table", &[PIXEL_VALUES, d], &[entries.len()]));
        }
        if let Some(&bad) = entries.iter().find(|&&c| c > quant.max_code()) {
            return Err(Error::InvalidInput(format!(
                "merged-table code {bad} exceeds {} bits",
                quant.bits()
            )));
        }
        Ok(Self { d, quant, entries })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn quant(&self) -> &QuantConfig {
        &self.quant
    }

    pub fn entry(&self, p: OneHotIndex) -> &[u8] {
        &self.entries[p.value() * self.d..(p.value() + 1) * self.d]
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    pub fn dequantize_entry(&self, p: OneHotIndex) -> Vec<f32> {
        self.entry(p).iter().map(|&c| self.quant.dequantize(c)).collect()
    }

    /// Size of the bit-packed payload: `ceil(256 · d · Q / 8)` bytes.
    pub fn payload_len(d: usize, bits: u8) -> usize {
        (PIXEL_VALUES * d * bits as usize).div_ceil(8)
    }

    /// Codes packed LSB-first, `Q` bits each, in entry order, zero-padded to
    /// a whole byte.
    pub fn to_payload(&self) -> Vec<u8> {
        let q = self.quant.bits() as usize;
        let mut out = vec![0u8; Self::payload_len(self.d, self.quant.bits())];
        for (i, &code) in self.entries.iter().enumerate() {
            for b in 0..q {
                if code >> b & 1 == 1 {
                    let bit = i * q + b;
                    out[bit / 8] |= 1 << (bit % 8);
                }
            }
        }
        out
    }

    pub fn from_payload(d: usize, quant: QuantConfig, payload: &[u8]) -> Result<Self> {
        let expected = Self::payload_len(d, quant.bits());
        if payload.len() != expected {
            return Err(Error::shape("merged-table-payload", &[expected], &[payload.len()]));
        }
        let q = quant.bits() as usize;
        let entries = (0..PIXEL_VALUES * d)
            .map(|i| {
                (0..q).fold(0u8, |acc, b| {
                    let bit = i * q + b;
                    acc | ((payload[bit / 8] >> (bit % 8)) & 1) << b
                })
            })
            .collect();
        Self::from_entries(d, quant, entries)
    }
}

/// Inference-path pixel embedding: a pure lookup producing `(N, 3d, H, W)` codes.
pub fn embed_infer(images: &ImageBatch, merged: &MergedTable) -> QuantizedCode {
    let d = merged.d;
    let (n, h, w) = (images.len(), images.height(), images.width());
    let plane = h * w;
    let mut codes = vec![0u8; n * COMPONENTS * d * plane];
    let px = images.pixels();
    for i in 0..n {
        for p in 0..plane {
            for c in 0..COMPONENTS {
                let v = px[(i * plane + p) * COMPONENTS + c] as usize;
                let entry = &merged.entries[v * d..(v + 1) * d];
                for (k, &code) in entry.iter().enumerate() {
                    codes[((i * COMPONENTS + c) * d + k) * plane + p] = code;
                }
            }
        }
    }
    QuantizedCode::new_unchecked(vec![n, COMPONENTS * d, h, w], codes, merged.quant)
}

/// Renders one entry as a digit string, one base-`2^Q` digit per dimension
/// (e.g. `[3, 3, 0, 1]` at `Q = 2` gives `"3301"`). Codes wider than four
/// bits are written in decimal, space separated.
pub fn format_codes(codes: &[u8], bits: u8) -> String {
    if bits <= 4 {
        codes
            .iter()
            .map(|&c| char::from_digit(c as u32, 16).expect("code below 16"))
            .collect()
    } else {
        codes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
    }
}
