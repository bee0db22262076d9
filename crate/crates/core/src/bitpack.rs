//! Bit-plane packed activations and binary weights, and the popcount
//! convolution over them.
//!
//! Activations are `Q`-bit codes. Plane `k` of a [`PackedTensor`] holds bit
//! `k` of every code at one spatial position, channels packed 64 to a word
//! (channel `c` is bit `c % 64` of word `c / 64`), padded lanes zero.
//! A binary weight is stored as one bit per input channel, `1` meaning `+1`.
//! For one kernel tap the signed dot product of codes with signs is
//!
//! ```text
//! sum_k 2^k * (popcount(a_k & pos) - popcount(a_k & neg))
//! ```
//!
//! where `neg` is the complement of `pos` restricted to real channel lanes.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{binarize, binary_sign, QuantConfig, QuantizedCode, WeightScaling};
use crate::tensor::Tensor;

const LANES: usize = 64;
/// Output channels processed together in the popcount kernel.
const OUT_BLOCK: usize = 8;

fn words_for(channels: usize) -> usize {
    channels.div_ceil(LANES)
}

/// Mask of real lanes in word `word` of a `channels`-wide row.
pub fn lane_mask(channels: usize, word: usize) -> u64 {
    let used = channels.saturating_sub(word * LANES).min(LANES);
    if used == LANES {
        u64::MAX
    } else {
        (1u64 << used) - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    shape: [usize; 4],
    config: QuantConfig,
    words_per_plane: usize,
    /// `[n][y][x][plane][word]`
    storage: Vec<u64>,
}

impl PackedTensor {
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn bits(&self) -> u8 {
        self.config.bits()
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn words_per_plane(&self) -> usize {
        self.words_per_plane
    }

    pub fn storage(&self) -> &[u64] {
        &self.storage
    }

    fn position_stride(&self) -> usize {
        self.bits() as usize * self.words_per_plane
    }

    /// Inverse of [`pack_activations`].
    pub fn unpack(&self) -> QuantizedCode {
        let [n, c, h, w] = self.shape;
        let q = self.bits() as usize;
        let wpp = self.words_per_plane;
        let mut codes = vec![0u8; n * c * h * w];
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let base = ((i * h + y) * w + x) * q * wpp;
                    for ch in 0..c {
                        let (word, bit) = (ch / LANES, ch % LANES);
                        let code = (0..q).fold(0u8, |acc, k| {
                            acc | (((self.storage[base + k * wpp + word] >> bit) & 1) as u8) << k
                        });
                        codes[((i * c + ch) * h + y) * w + x] = code;
                    }
                }
            }
        }
        QuantizedCode::new_unchecked(vec![n, c, h, w], codes, self.config)
    }
}

/// Packs `(N, C, H, W)` codes into bit planes.
pub fn pack_activations(codes: &QuantizedCode) -> Result<PackedTensor> {
    let [n, c, h, w] = match codes.shape() {
        &[n, c, h, w] => [n, c, h, w],
        s => return Err(Error::shape("pack-activations", s, &[0, 0, 0, 0])),
    };
    let config = *codes.config();
    if let Some(&bad) = codes.codes().iter().find(|&&v| v > config.max_code()) {
        return Err(Error::InvalidInput(format!(
            "activation code {bad} exceeds {} bits",
            config.bits()
        )));
    }
    let q = config.bits() as usize;
    let wpp = words_for(c);
    let plane = h * w;
    let mut storage = vec![0u64; n * plane * q * wpp];
    let src = codes.codes();
    for i in 0..n {
        for ch in 0..c {
            let (word, bit) = (ch / LANES, ch % LANES);
            let row = &src[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            for (p, &code) in row.iter().enumerate() {
                if code == 0 {
                    continue;
                }
                let base = (i * plane + p) * q * wpp + word;
                for k in 0..q {
                    storage[base + k * wpp] |= (((code >> k) & 1) as u64) << bit;
                }
            }
        }
    }
    Ok(PackedTensor {
        shape: [n, c, h, w],
        config,
        words_per_plane: wpp,
        storage,
    })
}

/// Packs channels-last codes `[n][y][x][c]` with logical shape
/// `(N, C, H, W)`. Codes must already fit in `config.bits()`.
pub fn pack_channels_last(shape: [usize; 4], codes: &[u8], config: QuantConfig) -> Result<PackedTensor> {
    let [n, c, h, w] = shape;
    if codes.len() != n * c * h * w {
        return Err(Error::shape("pack-channels-last", &shape, &[codes.len()]));
    }
    if let Some(&bad) = codes.iter().find(|&&v| v > config.max_code()) {
        return Err(Error::InvalidInput(format!(
            "activation code {bad} exceeds {} bits",
            config.bits()
        )));
    }
    let q = config.bits() as usize;
    let wpp = words_for(c);
    let mut storage = vec![0u64; n * h * w * q * wpp];
    for (row, dst) in codes.chunks(c).zip(storage.chunks_mut(q * wpp)) {
        for (word, lanes) in row.chunks(LANES).enumerate() {
            for k in 0..q {
                let mut bits = 0u64;
                for (lane, &code) in lanes.iter().enumerate() {
                    bits |= (((code >> k) & 1) as u64) << lane;
                }
                dst[k * wpp + word] = bits;
            }
        }
    }
    Ok(PackedTensor {
        shape,
        config,
        words_per_plane: wpp,
        storage,
    })
}

/// Binary weights `alpha_c * sign(w)` with sign bits packed along the input
/// channel axis.
///
/// The bits of one output channel form a patch bitstream: bit `t * in + ic`
/// is the sign of input channel `ic` at kernel tap `t = ky * kw + kx`. The
/// stream is cut into 64-bit words and stored `[word][out]` so the kernel's
/// inner loop walks output channels contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeights {
    shape: [usize; 4],
    patch_words: usize,
    /// Row stride of `positive`: `out` rounded up to a multiple of 8.
    out_stride: usize,
    positive: Vec<u64>,
    scales: Vec<f32>,
    /// Sum of signs over every real weight of each output channel.
    sign_sums: Vec<i32>,
}

impl PackedWeights {
    /// Binarizes float `(out, in, kh, kw)` weights (per-channel scales).
    pub fn from_float(w: &Tensor) -> Result<Self> {
        Self::from_float_with(w, WeightScaling::PerOutputChannel)
    }

    /// Also accepts `(out, in)` matrices as 1x1 kernels.
    pub fn from_float_with(w: &Tensor, scaling: WeightScaling) -> Result<Self> {
        let shape = match w.shape() {
            &[o, i, kh, kw] => [o, i, kh, kw],
            &[o, i] => [o, i, 1, 1],
            s => return Err(Error::shape("pack-weights", s, &[0, 0, 0, 0])),
        };
        let b = binarize(w, scaling)?;
        let signs: Vec<bool> = w.data().iter().map(|&v| binary_sign(v) > 0.0).collect();
        Self::from_signs(shape, &signs, b.scales)
    }

    /// `signs` in `(out, in, kh, kw)` order, `true` meaning `+1`.
    pub fn from_signs(shape: [usize; 4], signs: &[bool], scales: Vec<f32>) -> Result<Self> {
        let [o, ci, kh, kw] = shape;
        if o == 0 || ci == 0 || kh == 0 || kw == 0 || signs.len() != o * ci * kh * kw || scales.len() != o {
            return Err(Error::shape("pack-weights", &shape, &[signs.len(), scales.len()]));
        }
        let taps = kh * kw;
        let patch_words = (taps * ci).div_ceil(LANES);
        let out_stride = o.next_multiple_of(OUT_BLOCK);
        let mut positive = vec![0u64; patch_words * out_stride];
        let mut sign_sums = vec![0i32; o];
        for oc in 0..o {
            for ic in 0..ci {
                for t in 0..taps {
                    let s = signs[(oc * ci + ic) * taps + t];
                    sign_sums[oc] += if s { 1 } else { -1 };
                    if s {
                        let bit = t * ci + ic;
                        positive[(bit / LANES) * out_stride + oc] |= 1u64 << (bit % LANES);
                    }
                }
            }
        }
        Ok(Self {
            shape,
            patch_words,
            out_stride,
            positive,
            scales,
            sign_sums,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn sign_sums(&self) -> &[i32] {
        &self.sign_sums
    }

    pub fn sign(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f32 {
        let [_, ci, _, kw] = self.shape;
        let bit = (ky * kw + kx) * ci + ic;
        if (self.positive[(bit / LANES) * self.out_stride + oc] >> (bit % LANES)) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Reconstructs `alpha_c * sign(w)` as a float tensor.
    pub fn unpack(&self) -> Tensor {
        let [o, ci, kh, kw] = self.shape;
        let mut data = Vec::with_capacity(o * ci * kh * kw);
        for oc in 0..o {
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        data.push(self.scales[oc] * self.sign(oc, ic, ky, kx));
                    }
                }
            }
        }
        Tensor::new(&self.shape, data).expect("consistent extents")
    }

    /// Sign bits as `[word][out]` (no row padding).
    pub fn positive_words(&self) -> Vec<u64> {
        let o = self.shape[0];
        self.positive
            .chunks(self.out_stride)
            .flat_map(|row| row[..o].iter().copied())
            .collect()
    }

    pub fn from_parts(shape: [usize; 4], positive: Vec<u64>, scales: Vec<f32>) -> Result<Self> {
        let [o, ci, kh, kw] = shape;
        let bits = kh * kw * ci;
        let patch_words = bits.div_ceil(LANES);
        if o == 0 || bits == 0 || positive.len() != patch_words * o || scales.len() != o {
            return Err(Error::shape("pack-weights", &shape, &[positive.len(), scales.len()]));
        }
        for word in 0..patch_words {
            let stray = !lane_mask(bits, word);
            if positive[word * o..(word + 1) * o].iter().any(|w| w & stray != 0) {
                return Err(Error::InvalidInput("sign bits set beyond the patch length".into()));
            }
        }
        let mut signs = Vec::with_capacity(o * bits);
        for oc in 0..o {
            for ic in 0..ci {
                for t in 0..kh * kw {
                    let bit = t * ci + ic;
                    signs.push((positive[(bit / LANES) * o + oc] >> (bit % LANES)) & 1 == 1);
                }
            }
        }
        Self::from_signs(shape, &signs, scales)
    }
}

/// Integer accumulators of a packed convolution with logical shape
/// `(N, O, Ho, Wo)`, stored channels-last as `[n][y][x][o]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvAccumulators {
    shape: [usize; 4],
    values: Vec<i32>,
}

impl ConvAccumulators {
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    /// Channels-last storage.
    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn get(&self, i: usize, oc: usize, y: usize, x: usize) -> i32 {
        let [_, o, ho, wo] = self.shape;
        self.values[((i * ho + y) * wo + x) * o + oc]
    }

    /// Values in `(N, O, Ho, Wo)` order.
    pub fn to_nchw(&self) -> Vec<i32> {
        let [n, o, ho, wo] = self.shape;
        let plane = ho * wo;
        let mut out = Vec::with_capacity(self.values.len());
        for i in 0..n {
            let img = &self.values[i * plane * o..(i + 1) * plane * o];
            for oc in 0..o {
                out.extend(img.iter().skip(oc).step_by(o));
            }
        }
        out
    }

    /// Maps accumulators back to reals: `alpha_c * (step * acc + lo * sign_sum_c)`.
    /// Zero padding contributes code 0, i.e. the value `lo`.
    pub fn dequantize(&self, activations: &QuantConfig, weights: &PackedWeights) -> Tensor {
        let [_, o, ho, wo] = self.shape;
        let plane = ho * wo;
        let step = activations.step();
        let lo = activations.lo();
        let bias: Vec<f32> = weights.sign_sums.iter().map(|&s| lo * s as f32).collect();
        let mut data = vec![0.0f32; self.values.len()];
        for (i, img) in self.values.chunks(plane * o).enumerate() {
            let dst = &mut data[i * plane * o..(i + 1) * plane * o];
            for (pos, accs) in img.chunks(o).enumerate() {
                for (oc, &acc) in accs.iter().enumerate() {
                    dst[oc * plane + pos] = weights.scales[oc] * (step * acc as f32 + bias[oc]);
                }
            }
        }
        Tensor::new(&self.shape, data).expect("consistent extents")
    }
}

/// ORs the low `nbits` bits of `src` into `dst` starting at bit `offset`.
#[inline]
fn insert_bits(dst: &mut [u64], offset: usize, src: &[u64], nbits: usize) {
    let (word, shift) = (offset / LANES, offset % LANES);
    let n_src = nbits.div_ceil(LANES);
    if shift == 0 {
        for (d, s) in dst[word..word + n_src].iter_mut().zip(src) {
            *d |= *s;
        }
        return;
    }
    for (j, &s) in src[..n_src].iter().enumerate() {
        dst[word + j] |= s << shift;
        let spill = s >> (LANES - shift);
        if spill != 0 {
            dst[word + j + 1] |= spill;
        }
    }
}

#[inline(always)]
fn accumulate_block(sums: &mut [u64; OUT_BLOCK], weights: &[u64; OUT_BLOCK], a: u64, shift: u32) {
    for j in 0..OUT_BLOCK {
        sums[j] += ((a & weights[j]).count_ones() as u64) << shift;
    }
}

/// Popcount convolution of packed `Q`-bit activations with binary weights.
pub fn packed_conv2d(
    x: &PackedTensor,
    w: &PackedWeights,
    stride: usize,
    padding: usize,
) -> Result<ConvAccumulators> {
    let [n, c, h, wd] = x.shape;
    let [o, ci, kh, kw] = w.shape;
    if c != ci || stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::shape("packed-conv2d", &x.shape, &w.shape));
    }
    let q = x.bits() as usize;
    let bound = (c * kh * kw) as u64 * x.config.max_code() as u64;
    if bound > i32::MAX as u64 {
        return Err(Error::InvalidInput(format!(
            "accumulator bound {bound} overflows i32"
        )));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let wpp = x.words_per_plane;
    let pos_stride = x.position_stride();
    let pw = w.patch_words;
    let mut values = vec![0i32; n * ho * wo * o];

    // One task per (sample, output row).
    values
        .par_chunks_mut(wo * o)
        .enumerate()
        .for_each(|(row, out)| {
            let (i, oy) = (row / ho, row % ho);
            let mut patch = vec![0u64; q * pw];
            let mut acc = vec![0u64; w.out_stride];
            for ox in 0..wo {
                // Gather the receptive field into one bitstream per plane.
                patch.fill(0);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let t = ky * kw + kx;
                        let base = ((i * h + iy as usize) * wd + ix as usize) * pos_stride;
                        for k in 0..q {
                            let src = &x.storage[base + k * wpp..base + (k + 1) * wpp];
                            insert_bits(&mut patch[k * pw..(k + 1) * pw], t * c, src, c);
                        }
                    }
                }
                let mut weighted_total = 0i64;
                for k in 0..q {
                    for word in 0..pw {
                        let a = patch[k * pw + word];
                        if a == 0 {
                            continue;
                        }
                        weighted_total += (a.count_ones() as i64) << k;
                    }
                }
                let ostride = w.out_stride;
                for (block, lanes) in acc.chunks_exact_mut(OUT_BLOCK).enumerate() {
                    let mut sums = [0u64; OUT_BLOCK];
                    for k in 0..q {
                        for word in 0..pw {
                            let a = patch[k * pw + word];
                            let wrow: &[u64; OUT_BLOCK] = w.positive
                                [word * ostride + block * OUT_BLOCK..word * ostride + (block + 1) * OUT_BLOCK]
                                .try_into()
                                .expect("block-sized row");
                            accumulate_block(&mut sums, wrow, a, k as u32);
                        }
                    }
                    lanes.copy_from_slice(&sums);
                }
                // popcount(a & neg) = popcount(a) - popcount(a & pos): padded
                // lanes of `a` are zero, so `neg` is implicitly restricted to
                // real lanes.
                for (dst, &pos) in out[ox * o..(ox + 1) * o].iter_mut().zip(&acc) {
                    *dst = (2 * pos as i64 - weighted_total) as i32;
                }
            }
        });
    Ok(ConvAccumulators {
        shape: [n, o, ho, wo],
        values,
    })
}

/// Output channels per lookup block of the fused kernel.
const FUSED_BLOCK: usize = 64;
/// Pixel slots per component in the fused table; slot 256 is the all-zero
/// row used for padding.
const FUSED_SLOTS: usize = 257;

/// First-layer kernel that folds a merged embedding table into binary
/// convolution weights.
///
/// With pixel-embedding input every input channel of the first convolution
/// is a code looked up from an 8-bit component. The signed contribution of
/// component `c` with value `p` at tap `t` to output channel `o` is
/// `sum_k sign(o, c*d + k, t) * code_k(p)`, which depends only on
/// `(c, p, t, o)`. Precomputing it turns the layer into byte lookups and
/// integer adds over the raw image. Results are identical to
/// `packed_conv2d(&pack_activations(&embed_infer(..))?, ..)`.
#[derive(Clone, PartialEq)]
pub struct FusedEmbeddingConv {
    shape: [usize; 4],
    out_stride: usize,
    /// Byte sums of this many rows cannot overflow `i8`.
    group: usize,
    /// `[component][slot][tap][out_stride]`
    lut: Vec<i8>,
}

impl fmt::Debug for FusedEmbeddingConv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FusedEmbeddingConv")
            .field("shape", &self.shape)
            .field("group", &self.group)
            .field("lut_bytes", &self.lut.len())
            .finish()
    }
}

impl FusedEmbeddingConv {
    /// Fails when a single contribution does not fit in `i8` or a full
    /// receptive field does not fit in `i16`.
    pub fn new(merged: &crate::embed::MergedTable, weights: &PackedWeights) -> Result<Self> {
        let [o, ci, kh, kw] = weights.shape;
        let d = merged.dim();
        let comps = crate::image::COMPONENTS;
        if ci != comps * d {
            return Err(Error::shape("fused-embedding-conv", &[comps * d], &weights.shape));
        }
        let taps = kh * kw;
        let max_code = merged.quant().max_code() as usize;
        let row_bound = (d * max_code).max(1);
        if row_bound > i8::MAX as usize || taps * ci * max_code > i16::MAX as usize {
            return Err(Error::InvalidInput(format!(
                "fused accumulators overflow for d={d}, max code {max_code}, {taps} taps"
            )));
        }
        let out_stride = o.next_multiple_of(FUSED_BLOCK);
        let mut lut = vec![0i8; comps * FUSED_SLOTS * taps * out_stride];
        for c in 0..comps {
            for p in 0..256usize {
                let entry = merged.entry(crate::embed::OneHotIndex::from(p as u8));
                for t in 0..taps {
                    let row = &mut lut[((c * FUSED_SLOTS + p) * taps + t) * out_stride..][..o];
                    for (oc, slot) in row.iter_mut().enumerate() {
                        let mut v = 0i32;
                        for (k, &code) in entry.iter().enumerate() {
                            let bit = t * ci + c * d + k;
                            let word = weights.positive[(bit / LANES) * weights.out_stride + oc];
                            if (word >> (bit % LANES)) & 1 == 1 {
                                v += code as i32;
                            } else {
                                v -= code as i32;
                            }
                        }
                        *slot = v as i8;
                    }
                }
            }
        }
        Ok(Self {
            shape: weights.shape,
            out_stride,
            group: i8::MAX as usize / row_bound,
            lut,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn forward(&self, images: &crate::image::ImageBatch, stride: usize, padding: usize) -> Result<ConvAccumulators> {
        self.forward_with(images, stride, padding, true)
    }

    /// Same as [`forward`](Self::forward) without SIMD.
    pub fn forward_scalar(&self, images: &crate::image::ImageBatch, stride: usize, padding: usize) -> Result<ConvAccumulators> {
        self.forward_with(images, stride, padding, false)
    }

    fn forward_with(
        &self,
        images: &crate::image::ImageBatch,
        stride: usize,
        padding: usize,
        allow_simd: bool,
    ) -> Result<ConvAccumulators> {
        let [o, _, kh, kw] = self.shape;
        let (n, h, wd) = (images.len(), images.height(), images.width());
        if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape("fused-embedding-conv", &[n, h, wd], &self.shape));
        }
        let comps = crate::image::COMPONENTS;
        let taps = kh * kw;
        let os = self.out_stride;
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (wd + 2 * padding - kw) / stride + 1;
        let (ph, pw) = (h + 2 * padding, wd + 2 * padding);
        let geom = RowGeometry {
            kh,
            kw,
            stride,
            pw,
            wo,
            o,
            os,
            group: self.group,
        };
        let mut values = vec![0i32; n * ho * wo * o];
        values.par_chunks_mut(ho * wo * o).enumerate().for_each(|(i, out)| {
            // Table offset of every (padded) pixel component.
            let mut base = vec![(FUSED_SLOTS - 1) * taps * os; ph * pw * comps];
            let img = images.image(i);
            for y in 0..h {
                let src = &img[y * wd * comps..(y + 1) * wd * comps];
                let dst = &mut base[((y + padding) * pw + padding) * comps..][..wd * comps];
                for (j, (d, &p)) in dst.iter_mut().zip(src).enumerate() {
                    *d = ((j % comps) * FUSED_SLOTS + p as usize) * taps * os;
                }
            }
            fused_image(&self.lut, &base, &geom, out, allow_simd);
        });
        Ok(ConvAccumulators {
            shape: [n, o, ho, wo],
            values,
        })
    }
}

struct RowGeometry {
    kh: usize,
    kw: usize,
    stride: usize,
    /// Padded input width.
    pw: usize,
    wo: usize,
    o: usize,
    os: usize,
    group: usize,
}

fn fused_image(lut: &[i8], base: &[usize], g: &RowGeometry, out: &mut [i32], allow_simd: bool) {
    #[cfg(target_arch = "x86_64")]
    if allow_simd && std::is_x86_feature_detected!("avx512bw") {
        let max = base.iter().max().copied().unwrap_or(0);
        assert!(max + g.kh * g.kw * g.os <= lut.len());
        for (oy, row) in out.chunks_mut(g.wo * g.o).enumerate() {
            // SAFETY: the feature is present and every row read lies below
            // `max + taps * os`.
            unsafe { avx512::fused_row(lut, base, g, oy, row) };
        }
        return;
    }
    for (oy, row) in out.chunks_mut(g.wo * g.o).enumerate() {
        fused_row(lut, base, g, oy, row);
    }
}

fn fused_row(lut: &[i8], base: &[usize], g: &RowGeometry, oy: usize, out: &mut [i32]) {
    let comps = crate::image::COMPONENTS;
    for ox in 0..g.wo {
        let dst = &mut out[ox * g.o..(ox + 1) * g.o];
        for (b, chunk) in dst.chunks_mut(FUSED_BLOCK).enumerate() {
            let mut wide = [0i16; FUSED_BLOCK];
            let mut narrow = [0i8; FUSED_BLOCK];
            let mut pending = 0;
            for ky in 0..g.kh {
                let y = oy * g.stride + ky;
                for kx in 0..g.kw {
                    let at = (y * g.pw + ox * g.stride + kx) * comps;
                    let shift = (ky * g.kw + kx) * g.os + b * FUSED_BLOCK;
                    for &off in &base[at..at + comps] {
                        let src = &lut[off + shift..off + shift + FUSED_BLOCK];
                        for (a, &v) in narrow.iter_mut().zip(src) {
                            *a = a.wrapping_add(v);
                        }
                        pending += 1;
                        if pending == g.group {
                            for (w, n) in wide.iter_mut().zip(&mut narrow) {
                                *w += *n as i16;
                                *n = 0;
                            }
                            pending = 0;
                        }
                    }
                }
            }
            for ((d, &w), &n) in chunk.iter_mut().zip(&wide).zip(&narrow) {
                *d = w as i32 + n as i32;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx512 {
    use std::arch::x86_64::*;

    use super::{RowGeometry, FUSED_BLOCK};

    #[inline(always)]
    unsafe fn widen(lo: &mut __m512i, hi: &mut __m512i, narrow: __m512i) {
        *lo = _mm512_add_epi16(*lo, _mm512_cvtepi8_epi16(_mm512_castsi512_si256(narrow)));
        *hi = _mm512_add_epi16(*hi, _mm512_cvtepi8_epi16(_mm512_extracti64x4_epi64::<1>(narrow)));
    }

    #[target_feature(enable = "avx512f,avx512bw")]
    pub(super) unsafe fn fused_row(lut: &[i8], base: &[usize], g: &RowGeometry, oy: usize, out: &mut [i32]) {
        if g.kh == 3 && g.kw == 3 && g.stride == 1 {
            fused_row_k::<3, 3, 1>(lut, base, g, oy, out)
        } else {
            fused_row_k::<0, 0, 0>(lut, base, g, oy, out)
        }
    }

    /// Non-zero const parameters fix the kernel size and stride at compile time.
    #[inline(always)]
    unsafe fn fused_row_k<const KH: usize, const KW: usize, const S: usize>(
        lut: &[i8],
        base: &[usize],
        g: &RowGeometry,
        oy: usize,
        out: &mut [i32],
    ) {
        let (kh, kw, stride) = if KH > 0 { (KH, KW, S) } else { (g.kh, g.kw, g.stride) };
        let comps = crate::image::COMPONENTS;
        let ptr = lut.as_ptr();
        let base = base.as_ptr();
        for ox in 0..g.wo {
            let dst = &mut out[ox * g.o..(ox + 1) * g.o];
            for (b, chunk) in dst.chunks_mut(FUSED_BLOCK).enumerate() {
                let mut lo = _mm512_setzero_si512();
                let mut hi = _mm512_setzero_si512();
                let mut narrow = _mm512_setzero_si512();
                let mut pending = 0;
                for ky in 0..kh {
                    let y = oy * stride + ky;
                    for kx in 0..kw {
                        let at = (y * g.pw + ox * stride + kx) * comps;
                        let shift = (ky * kw + kx) * g.os + b * FUSED_BLOCK;
                        for c in 0..comps {
                            let off = *base.add(at + c);
                            let row = _mm512_loadu_si512(ptr.add(off + shift) as *const __m512i);
                            narrow = _mm512_add_epi8(narrow, row);
                            pending += 1;
                            if pending == g.group {
                                widen(&mut lo, &mut hi, narrow);
                                narrow = _mm512_setzero_si512();
                                pending = 0;
                            }
                        }
                    }
                }
                widen(&mut lo, &mut hi, narrow);
                if chunk.len() == FUSED_BLOCK {
                    let t = chunk.as_mut_ptr();
                    _mm512_storeu_si512(t as *mut __m512i, _mm512_cvtepi16_epi32(_mm512_castsi512_si256(lo)));
                    _mm512_storeu_si512(t.add(16) as *mut __m512i, _mm512_cvtepi16_epi32(_mm512_extracti64x4_epi64::<1>(lo)));
                    _mm512_storeu_si512(t.add(32) as *mut __m512i, _mm512_cvtepi16_epi32(_mm512_castsi512_si256(hi)));
                    _mm512_storeu_si512(t.add(48) as *mut __m512i, _mm512_cvtepi16_epi32(_mm512_extracti64x4_epi64::<1>(hi)));
                } else {
                    let mut wide = [0i16; FUSED_BLOCK];
                    _mm512_storeu_si512(wide.as_mut_ptr() as *mut __m512i, lo);
                    _mm512_storeu_si512(wide.as_mut_ptr().add(32) as *mut __m512i, hi);
                    for (d, &w) in chunk.iter_mut().zip(&wide) {
                        *d = w as i32;
                    }
                }
            }
        }
    }
}
