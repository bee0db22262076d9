//! Checkpoint files: a strict little-endian binary format holding either a
//! trainable model (float parameters) or a deployable one (merged table,
//! packed binary weights, float batch-norm vectors).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PXEB" | version u16 = 1 | mode u8 (0 train, 1 infer)
//! preset u8 | height u32 | width u32
//! layer count u32, then per layer: record length u32 | kind u8 | fields
//! per layer, in order: parameter section (mode dependent)
//! ```
//!
//! Floats are raw IEEE-754 bits. Unknown kinds, out-of-range values and
//! trailing bytes are errors; every parse error carries its byte offset.

use crate::embed::MergedTable;
use crate::error::{Error, ParseErrorKind, Result};
use crate::network::{
    param_layout, BnParams, LayerConfig, ModelGraph, PackedBlock, PackedConv, PackedLayer, PackedModel, Param,
    ParamKind, ParamStore, PoolKind, Preset,
};
use crate::quant::QuantConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PXEB";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train = 0,
    Infer = 1,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Infer => "infer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Train(ModelGraph),
    Infer(PackedModel),
}

impl Checkpoint {
    pub fn mode(&self) -> Mode {
        match self {
            Checkpoint::Train(_) => Mode::Train,
            Checkpoint::Infer(_) => Mode::Infer,
        }
    }

    pub fn preset(&self) -> Preset {
        match self {
            Checkpoint::Train(g) => g.preset(),
            Checkpoint::Infer(p) => p.preset(),
        }
    }

    /// Packed form, compiling a trainable model when needed.
    pub fn packed(&self) -> Result<PackedModel> {
        match self {
            Checkpoint::Train(g) => g.compile(),
            Checkpoint::Infer(p) => Ok(p.clone()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Checkpoint::Train(g) => save_train(g),
            Checkpoint::Infer(p) => save_infer(p),
        }
    }
}

/// Serializes `model` in `mode`; infer mode compiles it first.
pub fn save(model: &ModelGraph, mode: Mode) -> Result<Vec<u8>> {
    Ok(match mode {
        Mode::Train => save_train(model),
        Mode::Infer => save_infer(&model.compile()?),
    })
}

pub fn save_train(model: &ModelGraph) -> Vec<u8> {
    let mut w = Writer::header(Mode::Train, model.preset(), model.input_size(), model.layers());
    for id in 0..model.layers().len() {
        let ps = model.params().layer(id);
        w.u32(ps.len() as u32);
        for p in ps {
            w.str(p.name);
            w.u8(kind_code(p.kind));
            w.tensor(&p.value);
        }
    }
    w.0
}

pub fn save_infer(model: &PackedModel) -> Vec<u8> {
    let configs: Vec<LayerConfig> = model.layers().iter().map(PackedLayer::config).collect();
    let mut w = Writer::header(Mode::Infer, model.preset(), model.input_size(), &configs);
    for layer in model.layers() {
        match layer {
            PackedLayer::FloatConv { weights, .. } => {
                // Flags the float first layer of fp-first models.
                w.u8(1);
                w.tensor(weights);
            }
            PackedLayer::QuantConv(c) => w.packed(&c.weights),
            PackedLayer::PixelEmbed(m) => {
                let payload = m.to_payload();
                w.u32(payload.len() as u32);
                w.0.extend_from_slice(&payload);
            }
            PackedLayer::BatchNorm(bn) => w.bn(bn),
            PackedLayer::QuantFc(pw) => w.packed(pw),
            PackedLayer::FloatFc { weights, bias } => {
                w.tensor(weights);
                w.f32s(bias);
            }
            PackedLayer::Residual(b) => {
                w.packed(&b.conv1.weights);
                w.bn(&b.bn1);
                w.packed(&b.conv2.weights);
                w.bn(&b.bn2);
                match &b.projection {
                    Some((c, bn)) => {
                        w.u8(1);
                        w.packed(&c.weights);
                        w.bn(bn);
                    }
                    None => w.u8(0),
                }
            }
            PackedLayer::ActivationQuant(_) | PackedLayer::Relu | PackedLayer::Pool { .. } | PackedLayer::ArgmaxHead => {}
        }
    }
    w.0
}

pub fn load(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(parse_err(0, ParseErrorKind::BadMagic));
    }
    let at = r.pos;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(parse_err(at, ParseErrorKind::VersionMismatch(version)));
    }
    let at = r.pos;
    let mode = match r.u8("mode")? {
        0 => Mode::Train,
        1 => Mode::Infer,
        m => return Err(r.malformed(at, format!("mode byte {m}"))),
    };
    let at = r.pos;
    let code = r.u8("preset")?;
    let preset = Preset::from_code(code).ok_or_else(|| r.malformed(at, format!("preset code {code}")))?;
    let height = r.usize("height")?;
    let width = r.usize("width")?;
    let at = r.pos;
    let count = r.usize("layer count")?;
    if count > bytes.len() {
        return Err(r.malformed(at, format!("layer count {count}")));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        layers.push(r.layer_record()?);
    }
    let start = r.pos;
    let checkpoint = match mode {
        Mode::Train => {
            let mut store = Vec::with_capacity(count);
            for l in &layers {
                store.push(r.train_params(l)?);
            }
            let store = ParamStore::from_layers(store);
            Checkpoint::Train(
                ModelGraph::from_parts(preset, height, width, layers, store)
                    .map_err(|e| r.malformed(start, e.to_string()))?,
            )
        }
        Mode::Infer => {
            let mut packed = Vec::with_capacity(count);
            for l in &layers {
                packed.push(r.infer_layer(l)?);
            }
            Checkpoint::Infer(
                PackedModel::from_layers(preset, height, width, packed).map_err(|e| r.malformed(start, e.to_string()))?,
            )
        }
    };
    if r.pos != bytes.len() {
        return Err(parse_err(r.pos, ParseErrorKind::TrailingBytes(bytes.len() - r.pos)));
    }
    Ok(checkpoint)
}

fn parse_err(offset: usize, kind: ParseErrorKind) -> Error {
    Error::Parse { offset, kind }
}

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Weight => 0,
        ParamKind::Affine => 1,
        ParamKind::Table => 2,
        ParamKind::Buffer => 3,
    }
}

mod tag {
    pub const CONV: u8 = 0;
    pub const QUANT_CONV: u8 = 1;
    pub const PIXEL_EMBED: u8 = 2;
    pub const BATCH_NORM: u8 = 3;
    pub const ACTIVATION_QUANT: u8 = 4;
    pub const RELU: u8 = 5;
    pub const POOL: u8 = 6;
    pub const FC: u8 = 7;
    pub const RESIDUAL: u8 = 8;
    pub const ARGMAX: u8 = 9;
}

struct Writer(Vec<u8>);

impl Writer {
    fn header(mode: Mode, preset: Preset, (h, w): (usize, usize), layers: &[LayerConfig]) -> Self {
        let mut out = Writer(Vec::new());
        out.0.extend_from_slice(MAGIC);
        out.0.extend_from_slice(&VERSION.to_le_bytes());
        out.u8(mode as u8);
        out.u8(preset.code());
        out.u32(h as u32);
        out.u32(w as u32);
        out.u32(layers.len() as u32);
        for l in layers {
            let mut rec = Writer(Vec::new());
            rec.layer(l);
            out.u32(rec.0.len() as u32);
            out.0.extend_from_slice(&rec.0);
        }
        out
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        self.u32(vs.len() as u32);
        for &v in vs {
            self.f32(v);
        }
    }

    fn str(&mut self, s: &str) {
        self.u8(s.len() as u8);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.rank() as u8);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }

    fn quant(&mut self, q: &QuantConfig) {
        self.u8(q.bits());
        self.u8(q.weight_bits());
        self.f32(q.lo());
        self.f32(q.hi());
    }

    fn bn(&mut self, bn: &BnParams) {
        self.u32(bn.channels() as u32);
        for v in [&bn.gamma, &bn.beta, &bn.mean, &bn.var] {
            for &x in v.iter() {
                self.f32(x);
            }
        }
    }

    fn packed(&mut self, w: &crate::bitpack::PackedWeights) {
        for d in w.shape() {
            self.u32(d as u32);
        }
        for &s in w.scales() {
            self.f32(s);
        }
        for word in w.positive_words() {
            self.0.extend_from_slice(&word.to_le_bytes());
        }
    }

    fn layer(&mut self, l: &LayerConfig) {
        match *l {
            LayerConfig::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            }
            | LayerConfig::QuantConv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                self.u8(if matches!(l, LayerConfig::Conv { .. }) {
                    tag::CONV
                } else {
                    tag::QUANT_CONV
                });
                for v in [in_channels, out_channels, kernel, stride, padding] {
                    self.u32(v as u32);
                }
            }
            LayerConfig::PixelEmbed { d, quant } => {
                self.u8(tag::PIXEL_EMBED);
                self.u32(d as u32);
                self.quant(&quant);
            }
            LayerConfig::BatchNorm { channels } => {
                self.u8(tag::BATCH_NORM);
                self.u32(channels as u32);
            }
            LayerConfig::ActivationQuant { quant } => {
                self.u8(tag::ACTIVATION_QUANT);
                self.quant(&quant);
            }
            LayerConfig::Relu => self.u8(tag::RELU),
            LayerConfig::Pool { kind, kernel, stride } => {
                self.u8(tag::POOL);
                self.u8(match kind {
                    PoolKind::Mean => 0,
                    PoolKind::Max => 1,
                });
                self.u32(kernel as u32);
                self.u32(stride as u32);
            }
            LayerConfig::Fc {
                in_features,
                out_features,
                quantized,
            } => {
                self.u8(tag::FC);
                self.u32(in_features as u32);
                self.u32(out_features as u32);
                self.u8(quantized as u8);
            }
            LayerConfig::ResidualBlock {
                in_channels,
                out_channels,
                stride,
                quant,
            } => {
                self.u8(tag::RESIDUAL);
                for v in [in_channels, out_channels, stride] {
                    self.u32(v as u32);
                }
                self.quant(&quant);
            }
            LayerConfig::ArgmaxHead => self.u8(tag::ARGMAX),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn malformed(&self, offset: usize, what: String) -> Error {
        parse_err(offset, ParseErrorKind::Malformed(what))
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(parse_err(self.pos, ParseErrorKind::Truncated(what)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn usize(&mut self, what: &'static str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_bits(self.u32(what)?))
    }

    fn f32_vec(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_bits(u32::from_le_bytes(b.try_into().expect("four bytes"))))
            .collect())
    }

    fn flag(&mut self, what: &'static str) -> Result<bool> {
        let at = self.pos;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.malformed(at, format!("{what} flag {v}"))),
        }
    }

    fn tensor(&mut self, what: &'static str) -> Result<Tensor> {
        let at = self.pos;
        let rank = self.u8(what)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.usize(what)?);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| self.malformed(at, format!("{what} shape {shape:?} overflows")))?;
        let data = self.f32_vec(len, what)?;
        Tensor::new(&shape, data).map_err(|e| self.malformed(at, e.to_string()))
    }

    fn quant(&mut self) -> Result<QuantConfig> {
        let at = self.pos;
        let bits = self.u8("quantizer")?;
        let wbits = self.u8("quantizer")?;
        let lo = self.f32("quantizer")?;
        let hi = self.f32("quantizer")?;
        QuantConfig::with_weight_bits(bits, wbits, lo, hi).map_err(|e| self.malformed(at, e.to_string()))
    }

    fn layer_record(&mut self) -> Result<LayerConfig> {
        let len = self.usize("layer record")?;
        let start = self.pos;
        self.take(len, "layer record")?;
        self.pos = start;
        let t = self.u8("layer record")?;
        let dims = |r: &mut Self, n: usize| -> Result<Vec<usize>> { (0..n).map(|_| r.usize("layer record")).collect() };
        let layer = match t {
            tag::CONV | tag::QUANT_CONV => {
                let v = dims(self, 5)?;
                let (in_channels, out_channels, kernel, stride, padding) = (v[0], v[1], v[2], v[3], v[4]);
                if t == tag::CONV {
                    LayerConfig::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    }
                } else {
                    LayerConfig::QuantConv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    }
                }
            }
            tag::PIXEL_EMBED => LayerConfig::PixelEmbed {
                d: self.usize("layer record")?,
                quant: self.quant()?,
            },
            tag::BATCH_NORM => LayerConfig::BatchNorm {
                channels: self.usize("layer record")?,
            },
            tag::ACTIVATION_QUANT => LayerConfig::ActivationQuant { quant: self.quant()? },
            tag::RELU => LayerConfig::Relu,
            tag::POOL => {
                let at = self.pos;
                let kind = match self.u8("layer record")? {
                    0 => PoolKind::Mean,
                    1 => PoolKind::Max,
                    k => return Err(self.malformed(at, format!("pool kind {k}"))),
                };
                let v = dims(self, 2)?;
                LayerConfig::Pool {
                    kind,
                    kernel: v[0],
                    stride: v[1],
                }
            }
            tag::FC => {
                let v = dims(self, 2)?;
                LayerConfig::Fc {
                    in_features: v[0],
                    out_features: v[1],
                    quantized: self.flag("fc quantized")?,
                }
            }
            tag::RESIDUAL => {
                let v = dims(self, 3)?;
                LayerConfig::ResidualBlock {
                    in_channels: v[0],
                    out_channels: v[1],
                    stride: v[2],
                    quant: self.quant()?,
                }
            }
            tag::ARGMAX => LayerConfig::ArgmaxHead,
            other => return Err(self.malformed(start, format!("layer kind {other}"))),
        };
        if self.pos != start + len {
            return Err(self.malformed(start, format!("layer record length {len} does not match its fields")));
        }
        Ok(layer)
    }

    fn train_params(&mut self, layer: &LayerConfig) -> Result<Vec<Param>> {
        let at = self.pos;
        let layout = param_layout(layer);
        let count = self.usize("parameter count")?;
        if count != layout.len() {
            return Err(self.malformed(
                at,
                format!("{} parameters for a {} layer, expected {}", count, layer.kind_name(), layout.len()),
            ));
        }
        let mut out = Vec::with_capacity(count);
        for (name, kind, shape) in layout {
            let at = self.pos;
            let len = self.u8("parameter name")? as usize;
            let got = self.take(len, "parameter name")?;
            if got != name.as_bytes() {
                return Err(self.malformed(at, format!("parameter {:?}, expected {name}", String::from_utf8_lossy(got))));
            }
            let at = self.pos;
            if self.u8("parameter kind")? != kind_code(kind) {
                return Err(self.malformed(at, format!("kind of parameter {name}")));
            }
            let at = self.pos;
            let value = self.tensor("parameter data")?;
            if value.shape() != shape.as_slice() {
                return Err(self.malformed(at, format!("parameter {name} has shape {:?}, expected {shape:?}", value.shape())));
            }
            out.push(Param { name, kind, value });
        }
        Ok(out)
    }

    fn packed(&mut self) -> Result<crate::bitpack::PackedWeights> {
        let at = self.pos;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = self.usize("packed weights")?;
        }
        let [o, ci, kh, kw] = shape;
        let words = ci
            .checked_mul(kh)
            .and_then(|v| v.checked_mul(kw))
            .map(|bits| bits.div_ceil(64))
            .and_then(|w| w.checked_mul(o))
            .filter(|&w| w <= self.bytes.len())
            .ok_or_else(|| self.malformed(at, format!("packed weight shape {shape:?}")))?;
        let scales = self.f32_vec(o, "packed weights")?;
        let raw = self.take(words * 8, "packed weights")?;
        let positive = raw
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("eight bytes")))
            .collect();
        crate::bitpack::PackedWeights::from_parts(shape, positive, scales).map_err(|e| self.malformed(at, e.to_string()))
    }

    fn bn(&mut self) -> Result<BnParams> {
        let at = self.pos;
        let c = self.usize("batch-norm")?;
        if c > self.bytes.len() {
            return Err(self.malformed(at, format!("batch-norm width {c}")));
        }
        Ok(BnParams {
            gamma: self.f32_vec(c, "batch-norm")?,
            beta: self.f32_vec(c, "batch-norm")?,
            mean: self.f32_vec(c, "batch-norm")?,
            var: self.f32_vec(c, "batch-norm")?,
        })
    }

    fn infer_layer(&mut self, layer: &LayerConfig) -> Result<PackedLayer> {
        let at = self.pos;
        let check = |r: &Self, ok: bool| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(r.malformed(at, format!("{} section disagrees with its layer record", layer.kind_name())))
            }
        };
        Ok(match *layer {
            LayerConfig::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let flagged = self.flag("float layer")?;
                check(self, flagged)?;
                let weights = self.tensor("float conv")?;
                check(self, weights.shape() == [out_channels, in_channels, kernel, kernel])?;
                PackedLayer::FloatConv {
                    weights,
                    stride,
                    padding,
                }
            }
            LayerConfig::QuantConv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let weights = self.packed()?;
                check(self, weights.shape() == [out_channels, in_channels, kernel, kernel])?;
                PackedLayer::QuantConv(PackedConv {
                    weights,
                    stride,
                    padding,
                })
            }
            LayerConfig::PixelEmbed { d, quant } => {
                let len = self.usize("merged table")?;
                check(self, len == MergedTable::payload_len(d, quant.bits()))?;
                let payload = self.take(len, "merged table")?;
                PackedLayer::PixelEmbed(
                    MergedTable::from_payload(d, quant, payload).map_err(|e| self.malformed(at, e.to_string()))?,
                )
            }
            LayerConfig::BatchNorm { channels } => {
                let bn = self.bn()?;
                check(self, bn.channels() == channels)?;
                PackedLayer::BatchNorm(bn)
            }
            LayerConfig::ActivationQuant { quant } => PackedLayer::ActivationQuant(quant),
            LayerConfig::Relu => PackedLayer::Relu,
            LayerConfig::Pool { kind, kernel, stride } => PackedLayer::Pool { kind, kernel, stride },
            LayerConfig::Fc {
                in_features,
                out_features,
                quantized: true,
            } => {
                let w = self.packed()?;
                check(self, w.shape() == [out_features, in_features, 1, 1])?;
                PackedLayer::QuantFc(w)
            }
            LayerConfig::Fc {
                in_features,
                out_features,
                quantized: false,
            } => {
                let weights = self.tensor("float fc")?;
                let n = self.usize("float fc bias")?;
                let bias = self.f32_vec(n, "float fc bias")?;
                check(self, weights.shape() == [out_features, in_features] && bias.len() == out_features)?;
                PackedLayer::FloatFc { weights, bias }
            }
            LayerConfig::ResidualBlock {
                in_channels,
                out_channels,
                stride,
                quant,
            } => {
                let conv1 = self.packed()?;
                let bn1 = self.bn()?;
                let conv2 = self.packed()?;
                let bn2 = self.bn()?;
                let projection = if self.flag("projection")? {
                    Some((self.packed()?, self.bn()?))
                } else {
                    None
                };
                check(
                    self,
                    conv1.shape() == [out_channels, in_channels, 3, 3]
                        && projection.is_some() == layer.has_projection(),
                )?;
                PackedLayer::Residual(PackedBlock {
                    quant,
                    conv1: PackedConv {
                        weights: conv1,
                        stride,
                        padding: 1,
                    },
                    bn1,
                    conv2: PackedConv {
                        weights: conv2,
                        stride: 1,
                        padding: 1,
                    },
                    bn2,
                    projection: projection.map(|(weights, bn)| {
                        (
                            PackedConv {
                                weights,
                                stride,
                                padding: 0,
                            },
                            bn,
                        )
                    }),
                })
            }
            LayerConfig::ArgmaxHead => PackedLayer::ArgmaxHead,
        })
    }
}
