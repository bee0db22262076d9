//! Uniform activation quantizer, sign-and-scale weight binarizer, and the
//! straight-through gradient rules that pair with them.
//!
//! The activation quantizer maps a bounded range `[lo, hi]` onto
//! `2^Q` evenly spaced levels:
//!
//! ```text
//! y = lo + round((clamp(x) - lo) / (hi - lo) * L) / L * (hi - lo),   L = 2^Q - 1
//! ```
//!
//! with rounding half away from zero. Its backward pass is the clipped STE:
//! the upstream gradient passes where `lo <= x <= hi` and is zeroed outside.
//!
//! Weights are binarized per output channel as `alpha_c * sign(w_c)` with
//! `alpha_c = mean(|w_c|)` and `sign(0) = +1`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    activation_bits: u8,
    weight_bits: u8,
    lo: f32,
    hi: f32,
}

impl Default for QuantConfig {
    /// 2-bit activations over `[0, 1]`, binary weights.
    fn default() -> Self {
        Self {
            activation_bits: 2,
            weight_bits: 1,
            lo: 0.0,
            hi: 1.0,
        }
    }
}

impl QuantConfig {
    pub fn new(activation_bits: u8, lo: f32, hi: f32) -> Result<Self> {
        Self::with_weight_bits(activation_bits, 1, lo, hi)
    }

    pub fn with_weight_bits(activation_bits: u8, weight_bits: u8, lo: f32, hi: f32) -> Result<Self> {
        if !(1..=8).contains(&activation_bits) {
            return Err(Error::InvalidConfig(format!(
                "activation bits must be in 1..=8, got {activation_bits}"
            )));
        }
        if weight_bits != 1 {
            return Err(Error::InvalidConfig(format!(
                "only binary weights are supported, got {weight_bits} bits"
            )));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidConfig(format!(
                "activation range must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            activation_bits,
            weight_bits,
            lo,
            hi,
        })
    }

    /// Activation quantizer with the default `[0, 1]` range.
    pub fn activations(bits: u8) -> Result<Self> {
        Self::new(bits, 0.0, 1.0)
    }

    pub fn bits(&self) -> u8 {
        self.activation_bits
    }

    pub fn weight_bits(&self) -> u8 {
        self.weight_bits
    }

    pub fn lo(&self) -> f32 {
        self.lo
    }

    pub fn hi(&self) -> f32 {
        self.hi
    }

    /// Highest code, `2^Q - 1`.
    pub fn max_code(&self) -> u8 {
        ((1u16 << self.activation_bits) - 1) as u8
    }

    /// Real distance between adjacent levels.
    pub fn step(&self) -> f32 {
        (self.hi - self.lo) / self.max_code() as f32
    }

    pub fn code(&self, x: f32) -> u8 {
        let levels = self.max_code() as f32;
        let t = (x.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo) * levels;
        // f32::round rounds half away from zero; the `as` cast saturates NaN to 0.
        t.round() as u8
    }

    pub fn dequantize(&self, code: u8) -> f32 {
        self.lo + code as f32 / self.max_code() as f32 * (self.hi - self.lo)
    }

    pub fn quantize(&self, x: f32) -> f32 {
        self.dequantize(self.code(x))
    }

    pub fn in_clip(&self, x: f32) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Integer codes plus the affine map back to real values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCode {
    shape: Vec<usize>,
    codes: Vec<u8>,
    config: QuantConfig,
}

impl QuantizedCode {
    pub fn new(shape: &[usize], codes: Vec<u8>, config: QuantConfig) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != codes.len() {
            return Err(Error::shape("quantized-code", shape, &[codes.len()]));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c > config.max_code()) {
            return Err(Error::InvalidInput(format!(
                "code {bad} exceeds {}-bit range",
                config.bits()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            codes,
            config,
        })
    }

    /// Skips the range check; packing rejects out-of-range codes later.
    pub fn new_unchecked(shape: Vec<usize>, codes: Vec<u8>, config: QuantConfig) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), codes.len());
        Self {
            shape,
            codes,
            config,
        }
    }

    pub fn from_tensor(x: &Tensor, config: QuantConfig) -> Self {
        Self {
            shape: x.shape().to_vec(),
            codes: x.data().iter().map(|&v| config.code(v)).collect(),
            config,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn scale(&self) -> f32 {
        self.config.step()
    }

    /// Code whose real value is (closest to) zero.
    pub fn zero_level(&self) -> i32 {
        (-self.config.lo() / self.config.step()).round() as i32
    }

    pub fn dequantize(&self) -> Tensor {
        let data = self.codes.iter().map(|&c| self.config.dequantize(c)).collect();
        Tensor::new(&self.shape, data).expect("shape checked at construction")
    }
}

pub fn quantize_activation(x: &Tensor, config: &QuantConfig) -> Tensor {
    x.map(|v| config.quantize(v))
}

/// `sign` with the tie `sign(0) = +1`.
#[inline]
pub fn binary_sign(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScaling {
    PerOutputChannel,
    PerTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedWeights {
    pub values: Tensor,
    /// One scale per output channel (repeated when scaling is per tensor).
    pub scales: Vec<f32>,
    /// Output channels whose weights are all zero (scale forced to 0).
    pub degenerate_channels: Vec<usize>,
}

pub fn quantize_weight(w: &Tensor) -> Result<BinarizedWeights> {
    binarize(w, WeightScaling::PerOutputChannel)
}

/// Binarizes a conv kernel `(out, in, kh, kw)` or FC matrix `(out, in)`.
pub fn binarize(w: &Tensor, scaling: WeightScaling) -> Result<BinarizedWeights> {
    if !matches!(w.rank(), 2 | 4) {
        return Err(Error::shape("quantize-weight", w.shape(), &[0, 0, 0, 0]));
    }
    let out = w.shape()[0];
    let per = w.len() / out;
    let mut scales: Vec<f32> = match scaling {
        WeightScaling::PerOutputChannel => w
            .data()
            .chunks(per)
            .map(|ch| ch.iter().map(|v| v.abs()).sum::<f32>() / per as f32)
            .collect(),
        WeightScaling::PerTensor => {
            let a = w.data().iter().map(|v| v.abs()).sum::<f32>() / w.len() as f32;
            vec![a; out]
        }
    };
    let degenerate_channels: Vec<usize> = w
        .data()
        .chunks(per)
        .enumerate()
        .filter(|(_, ch)| ch.iter().all(|&v| v == 0.0))
        .map(|(c, _)| c)
        .collect();
    if !degenerate_channels.is_empty() {
        log::warn!(
            "binarized weights have all-zero output channels {:?}; their scale is 0",
            degenerate_channels
        );
        if scaling == WeightScaling::PerOutputChannel {
            for &c in &degenerate_channels {
                scales[c] = 0.0;
            }
        }
    }
    let mut data = Vec::with_capacity(w.len());
    for (ch, &a) in w.data().chunks(per).zip(&scales) {
        data.extend(ch.iter().map(|&v| a * binary_sign(v)));
    }
    Ok(BinarizedWeights {
        values: Tensor::new(w.shape(), data)?,
        scales,
        degenerate_channels,
    })
}

/// Masks `upstream` to zero wherever `forward_input` lies outside `clip`.
/// With no clip range this is the identity.
pub fn ste_backward(upstream: &Tensor, forward_input: &Tensor, clip: Option<(f32, f32)>) -> Result<Tensor> {
    if upstream.shape() != forward_input.shape() {
        return Err(Error::shape("ste", upstream.shape(), forward_input.shape()));
    }
    let Some((lo, hi)) = clip else {
        return Ok(upstream.clone());
    };
    let data = upstream
        .data()
        .iter()
        .zip(forward_input.data())
        .map(|(&g, &x)| if lo <= x && x <= hi { g } else { 0.0 })
        .collect();
    Tensor::new(upstream.shape(), data)
}
