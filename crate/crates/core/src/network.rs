//! Layer zoo and model builder for the four first-layer variants over a
//! small residual trunk of binary convolutions with 2-bit activations.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bitpack::{pack_channels_last, packed_conv2d, ConvAccumulators, FusedEmbeddingConv, PackedWeights};
use crate::embed::{embed_train, merge_table, EmbeddingTable, MergedTable, OneHotIndex, TableInit};
use crate::error::{Error, Result};
use crate::image::{ImageBatch, COMPONENTS};
use crate::quant::{QuantConfig, WeightScaling};
use crate::tape::{BatchNormMode, BatchStats, Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;

/// First-layer variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Float conv on RGB rescaled to `[0, 1]`.
    FpFirst,
    /// Binary-weight conv on RGB rescaled to `[0, 1]`.
    WqFirst,
    /// Binary-weight conv on 2-bit quantized RGB.
    IwqFirst,
    /// Pixel embedding followed by a binary-weight conv.
    PixembFirst,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::FpFirst, Preset::WqFirst, Preset::IwqFirst, Preset::PixembFirst];

    pub fn name(self) -> &'static str {
        match self {
            Preset::FpFirst => "fp-first",
            Preset::WqFirst => "wq-first",
            Preset::IwqFirst => "iwq-first",
            Preset::PixembFirst => "pixemb-first",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerConfig {
    /// Float convolution, no bias.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Convolution with binarized weights, one scale per output channel.
    QuantConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    PixelEmbed {
        d: usize,
        quant: QuantConfig,
    },
    BatchNorm {
        channels: usize,
    },
    ActivationQuant {
        quant: QuantConfig,
    },
    Relu,
    Pool {
        kind: PoolKind,
        kernel: usize,
        stride: usize,
    },
    /// Fully connected layer. Quantized: binary weights with a single
    /// per-tensor scale and no bias, so integer logits keep the float order.
    /// Otherwise float weights plus bias.
    Fc {
        in_features: usize,
        out_features: usize,
        quantized: bool,
    },
    /// `AQ(BN(qconv3x3(AQ(BN(qconv3x3(x))))) + shortcut(x))` where the
    /// shortcut is the identity or `BN(qconv1x1(x))` when the shape changes.
    ResidualBlock {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        quant: QuantConfig,
    },
    ArgmaxHead,
}

impl LayerConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerConfig::Conv { .. } => "conv",
            LayerConfig::QuantConv { .. } => "quant-conv",
            LayerConfig::PixelEmbed { .. } => "pixel-embed",
            LayerConfig::BatchNorm { .. } => "batch-norm",
            LayerConfig::ActivationQuant { .. } => "activation-quant",
            LayerConfig::Relu => "relu",
            LayerConfig::Pool { .. } => "pool",
            LayerConfig::Fc { .. } => "fc",
            LayerConfig::ResidualBlock { .. } => "residual-block",
            LayerConfig::ArgmaxHead => "argmax-head",
        }
    }

    /// Output `(C, H, W)` for input `(C, H, W)`; FC layers use `(features, 1, 1)`.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        let conv_out = |in_ch: usize, out_ch: usize, k: usize, s: usize, p: usize| -> Result<[usize; 3]> {
            if c != in_ch || s == 0 || h + 2 * p < k || w + 2 * p < k {
                return Err(Error::shape(self.kind_name(), &input, &[in_ch, k, k]));
            }
            Ok([out_ch, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1])
        };
        match *self {
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
            } => conv_out(in_channels, out_channels, kernel, stride, padding),
            LayerConfig::PixelEmbed { d, .. } => {
                if c != COMPONENTS {
                    return Err(Error::shape("pixel-embed", &input, &[COMPONENTS]));
                }
                Ok([COMPONENTS * d, h, w])
            }
            LayerConfig::BatchNorm { channels } => {
                if c != channels {
                    return Err(Error::shape("batch-norm", &input, &[channels]));
                }
                Ok(input)
            }
            LayerConfig::ActivationQuant { .. } | LayerConfig::Relu | LayerConfig::ArgmaxHead => Ok(input),
            LayerConfig::Pool { kernel, stride, .. } => {
                if stride == 0 || kernel == 0 || h < kernel || w < kernel {
                    return Err(Error::shape("pool", &input, &[kernel, kernel]));
                }
                Ok([c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerConfig::Fc {
                in_features,
                out_features,
                ..
            } => {
                if c * h * w != in_features {
                    return Err(Error::shape("fc", &input, &[in_features]));
                }
                Ok([out_features, 1, 1])
            }
            LayerConfig::ResidualBlock {
                in_channels,
                out_channels,
                stride,
                ..
            } => conv_out(in_channels, out_channels, 3, stride, 1),
        }
    }

    /// Whether a residual block needs a projection shortcut.
    pub fn has_projection(&self) -> bool {
        matches!(*self, LayerConfig::ResidualBlock { in_channels, out_channels, stride, .. }
            if in_channels != out_channels || stride != 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv or FC weights; weight decay applies.
    Weight,
    /// Batch-norm scale and shift, FC bias.
    Affine,
    /// Pixel-embedding table.
    Table,
    /// Running statistics; not trained by gradient.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Parameters keyed by layer index, in a fixed per-kind order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    layers: Vec<Vec<Param>>,
}

impl ParamStore {
    pub fn from_layers(layers: Vec<Vec<Param>>) -> Self {
        Self { layers }
    }

    pub fn layer(&self, id: usize) -> &[Param] {
        &self.layers[id]
    }

    pub fn layer_mut(&mut self, id: usize) -> &mut [Param] {
        &mut self.layers[id]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(id, ps)| ps.iter().map(move |p| (id, p)))
    }

    pub fn total_len(&self) -> usize {
        self.iter().map(|(_, p)| p.value.len()).sum()
    }
}

/// Parameter names and shapes a layer owns, in storage order.
pub fn param_layout(layer: &LayerConfig) -> Vec<(&'static str, ParamKind, Vec<usize>)> {
    fn bn(out: &mut Vec<(&'static str, ParamKind, Vec<usize>)>, names: [&'static str; 4], c: usize) {
        out.push((names[0], ParamKind::Affine, vec![c]));
        out.push((names[1], ParamKind::Affine, vec![c]));
        out.push((names[2], ParamKind::Buffer, vec![c]));
        out.push((names[3], ParamKind::Buffer, vec![c]));
    }
    let mut out = Vec::new();
    match *layer {
        LayerConfig::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        }
        | LayerConfig::QuantConv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => out.push(("weight", ParamKind::Weight, vec![out_channels, in_channels, kernel, kernel])),
        LayerConfig::PixelEmbed { d, .. } => out.push(("table", ParamKind::Table, vec![d, 256])),
        LayerConfig::BatchNorm { channels } => bn(&mut out, ["gamma", "beta", "running_mean", "running_var"], channels),
        LayerConfig::Fc {
            in_features,
            out_features,
            quantized,
        } => {
            out.push(("weight", ParamKind::Weight, vec![out_features, in_features]));
            if !quantized {
                out.push(("bias", ParamKind::Affine, vec![1, out_features]));
            }
        }
        LayerConfig::ResidualBlock {
            in_channels,
            out_channels,
            ..
        } => {
            out.push(("conv1.weight", ParamKind::Weight, vec![out_channels, in_channels, 3, 3]));
            bn(&mut out, ["bn1.gamma", "bn1.beta", "bn1.running_mean", "bn1.running_var"], out_channels);
            out.push(("conv2.weight", ParamKind::Weight, vec![out_channels, out_channels, 3, 3]));
            bn(&mut out, ["bn2.gamma", "bn2.beta", "bn2.running_mean", "bn2.running_var"], out_channels);
            if layer.has_projection() {
                out.push(("proj.weight", ParamKind::Weight, vec![out_channels, in_channels, 1, 1]));
                bn(
                    &mut out,
                    ["proj_bn.gamma", "proj_bn.beta", "proj_bn.running_mean", "proj_bn.running_var"],
                    out_channels,
                );
            }
        }
        LayerConfig::ActivationQuant { .. } | LayerConfig::Relu | LayerConfig::Pool { .. } | LayerConfig::ArgmaxHead => {}
    }
    out
}

fn init_param(
    name: &str,
    kind: ParamKind,
    shape: &[usize],
    layer: &LayerConfig,
    table_init: TableInit,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let len: usize = shape.iter().product();
    match kind {
        ParamKind::Weight => {
            let fan_in: usize = shape[1..].iter().product();
            // Small classifier weights start every run at near-uniform logits.
            let std = if matches!(layer, LayerConfig::Fc { .. }) {
                0.01
            } else {
                (2.0 / fan_in as f32).sqrt()
            };
            let normal = Normal::new(0.0f32, std)
                .map_err(|e| Error::InvalidConfig(format!("weight init: {e}")))?;
            Tensor::new(shape, (0..len).map(|_| normal.sample(rng)).collect())
        }
        ParamKind::Table => {
            let LayerConfig::PixelEmbed { d, quant } = *layer else {
                return Err(Error::Contract("table parameter outside a pixel-embed layer".into()));
            };
            Ok(EmbeddingTable::init(d, quant, table_init, rng)?.into_weights())
        }
        ParamKind::Affine | ParamKind::Buffer => {
            let one = name.ends_with("gamma") || name.ends_with("running_var");
            Ok(Tensor::full(shape, if one { 1.0 } else { 0.0 }))
        }
    }
}

/// Architecture description from which a [`ModelGraph`] is built.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub preset: Preset,
    /// Embedding width, used by `pixemb-first` only.
    pub d: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Stage widths; the first stage keeps resolution, later ones halve it.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub activation_bits: u8,
    pub embed_bits: u8,
    pub float_head: bool,
    pub table_init: TableInit,
}

impl ModelSpec {
    pub fn new(preset: Preset, d: usize, num_classes: usize) -> Self {
        Self {
            preset,
            d,
            num_classes,
            height: 32,
            width: 32,
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            activation_bits: 2,
            embed_bits: 2,
            float_head: false,
            table_init: TableInit::default(),
        }
    }

    pub fn layers(&self) -> Result<Vec<LayerConfig>> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("at least two classes are required".into()));
        }
        if self.preset == Preset::PixembFirst && self.d == 0 {
            return Err(Error::InvalidConfig("pixel embedding needs d >= 1".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::InvalidConfig("trunk needs positive widths and at least one block".into()));
        }
        let act = QuantConfig::activations(self.activation_bits)?;
        let stem = self.widths[0];
        let conv = |in_channels: usize| LayerConfig::QuantConv {
            in_channels,
            out_channels: stem,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let mut layers = match self.preset {
            Preset::FpFirst => vec![LayerConfig::Conv {
                in_channels: COMPONENTS,
                out_channels: stem,
                kernel: 3,
                stride: 1,
                padding: 1,
            }],
            Preset::WqFirst => vec![conv(COMPONENTS)],
            Preset::IwqFirst => vec![LayerConfig::ActivationQuant { quant: act }, conv(COMPONENTS)],
            Preset::PixembFirst => vec![
                LayerConfig::PixelEmbed {
                    d: self.d,
                    quant: QuantConfig::activations(self.embed_bits)?,
                },
                conv(COMPONENTS * self.d),
            ],
        };
        layers.push(LayerConfig::BatchNorm { channels: stem });
        layers.push(LayerConfig::ActivationQuant { quant: act });
        let mut channels = stem;
        for (stage, &width) in self.widths.iter().enumerate() {
            for block in 0..self.blocks_per_stage {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                layers.push(LayerConfig::ResidualBlock {
                    in_channels: channels,
                    out_channels: width,
                    stride,
                    quant: act,
                });
                channels = width;
            }
        }
        let mut shape = [COMPONENTS, self.height, self.width];
        for l in &layers {
            shape = l.output_shape(shape)?;
        }
        if shape[1] != shape[2] {
            return Err(Error::InvalidConfig(format!("non-square feature map {shape:?} before pooling")));
        }
        layers.push(LayerConfig::Pool {
            kind: PoolKind::Mean,
            kernel: shape[1],
            stride: shape[1],
        });
        layers.push(LayerConfig::Fc {
            in_features: channels,
            out_features: self.num_classes,
            quantized: !self.float_head,
        });
        layers.push(LayerConfig::ArgmaxHead);
        Ok(layers)
    }

    pub fn build(&self, rng: &mut impl Rng) -> Result<ModelGraph> {
        ModelGraph::with_init(self.preset, self.height, self.width, self.layers()?, self.table_init, rng)
    }
}

/// Builds the default CIFAR-style model for `preset`, initialized from seed 0.
pub fn build_model(preset: Preset, d: usize, num_classes: usize) -> Result<ModelGraph> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    ModelSpec::new(preset, d, num_classes).build(&mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Recording tape, batch statistics.
    Train,
    /// Float inference with running statistics.
    InferFloat,
    /// Merged tables and popcount kernels.
    InferPacked,
}

impl FromStr for ForwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(ForwardMode::Train),
            "infer-float" | "float" => Ok(ForwardMode::InferFloat),
            "infer-packed" | "packed" => Ok(ForwardMode::InferPacked),
            _ => Err(Error::InvalidConfig(format!("unknown forward mode {s:?}"))),
        }
    }
}

/// Class scores. `integer` is set when the head ran in integer arithmetic;
/// predictions then come from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub values: Tensor,
    pub integer: Option<Vec<i64>>,
}

impl Logits {
    pub fn num_classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn predictions(&self) -> Vec<usize> {
        let k = self.num_classes();
        match &self.integer {
            Some(ints) => ints.chunks(k).map(argmax).collect(),
            None => self.values.data().chunks(k).map(argmax).collect(),
        }
    }

    /// Classes of each row sorted by decreasing score, ties by index.
    pub fn ranking(&self) -> Vec<Vec<usize>> {
        let k = self.num_classes();
        let rank = |row: &[f64]| {
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx
        };
        match &self.integer {
            Some(ints) => ints
                .chunks(k)
                .map(|r| rank(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
                .collect(),
            None => self
                .values
                .data()
                .chunks(k)
                .map(|r| rank(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
                .collect(),
        }
    }
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Tape handles of one forward pass.
pub struct TapeForward {
    pub logits: Var,
    /// Leaf for every trainable parameter, `None` for buffers.
    pub param_vars: Vec<Vec<Option<Var>>>,
    /// Batch statistics per batch-norm, keyed by `(layer, index of its gamma)`.
    pub batch_stats: Vec<(usize, usize, BatchStats)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    preset: Preset,
    height: usize,
    width: usize,
    layers: Vec<LayerConfig>,
    params: ParamStore,
}

impl ModelGraph {
    pub fn new(preset: Preset, height: usize, width: usize, layers: Vec<LayerConfig>, rng: &mut impl Rng) -> Result<Self> {
        Self::with_init(preset, height, width, layers, TableInit::default(), rng)
    }

    pub fn with_init(
        preset: Preset,
        height: usize,
        width: usize,
        layers: Vec<LayerConfig>,
        table_init: TableInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut store = ParamStore::default();
        for l in &layers {
            let ps = param_layout(l)
                .into_iter()
                .map(|(name, kind, shape)| {
                    Ok(Param {
                        name,
                        kind,
                        value: init_param(name, kind, &shape, l, table_init, rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            store.layers.push(ps);
        }
        Self::from_parts(preset, height, width, layers, store)
    }

    /// Assembles a graph from explicit parameters, checking every shape.
    pub fn from_parts(preset: Preset, height: usize, width: usize, layers: Vec<LayerConfig>, params: ParamStore) -> Result<Self> {
        let g = Self {
            preset,
            height,
            width,
            layers,
            params,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if self.params.layers.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "{} parameter groups for {} layers",
                self.params.layers.len(),
                self.layers.len()
            )));
        }
        let firsts = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerConfig::Conv { .. } | LayerConfig::QuantConv { .. }))
            .count();
        if firsts != 1 {
            return Err(Error::InvalidConfig(format!("expected exactly one first-layer conv, found {firsts}")));
        }
        let mut shape = [COMPONENTS, self.height, self.width];
        for (id, l) in self.layers.iter().enumerate() {
            let layout = param_layout(l);
            let got = &self.params.layers[id];
            if layout.len() != got.len()
                || layout
                    .iter()
                    .zip(got)
                    .any(|((name, kind, s), p)| *name != p.name || *kind != p.kind || p.value.shape() != s.as_slice())
            {
                return Err(Error::Contract(format!("parameters of layer {id} ({}) do not match its config", l.kind_name())));
            }
            shape = l.output_shape(shape)?;
        }
        match self.layers.last() {
            Some(LayerConfig::ArgmaxHead) if shape[1] == 1 && shape[2] == 1 => Ok(()),
            _ => Err(Error::InvalidConfig("model must end in an fc layer and an argmax head".into())),
        }
    }

    pub fn preset(&self) -> Preset {
        self.preset
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn layers(&self) -> &[LayerConfig] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerConfig::Fc { out_features, .. } => Some(*out_features),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// `(C, H, W)` after each layer.
    pub fn shapes(&self) -> Vec<[usize; 3]> {
        let mut shape = [COMPONENTS, self.height, self.width];
        self.layers
            .iter()
            .map(|l| {
                shape = l.output_shape(shape).expect("validated at construction");
                shape
            })
            .collect()
    }

    /// The float embedding table, when the model has one.
    pub fn embedding_table(&self) -> Option<EmbeddingTable> {
        self.layers.iter().enumerate().find_map(|(id, l)| match *l {
            LayerConfig::PixelEmbed { quant, .. } => {
                EmbeddingTable::from_weights(self.params.layers[id][0].value.clone(), quant).ok()
            }
            _ => None,
        })
    }

    fn check_input(&self, images: &ImageBatch) -> Result<()> {
        if images.height() != self.height || images.width() != self.width {
            return Err(Error::shape(
                "model-input",
                &[images.height(), images.width()],
                &[self.height, self.width],
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. With `training` batch-norm uses
    /// batch statistics, otherwise running statistics.
    pub fn forward_tape(&self, tape: &mut Tape, images: &ImageBatch, training: bool) -> Result<TapeForward> {
        self.check_input(images)?;
        let mut param_vars = Vec::with_capacity(self.layers.len());
        for ps in &self.params.layers {
            param_vars.push(
                ps.iter()
                    .map(|p| (p.kind != ParamKind::Buffer).then(|| tape.leaf(p.value.clone())))
                    .collect::<Vec<_>>(),
            );
        }
        let mut batch_stats = Vec::new();
        let mut x: Option<Var> = None;
        let n = images.len();
        for (id, layer) in self.layers.iter().enumerate() {
            let vars = &param_vars[id];
            let ps = &self.params.layers[id];
            let input = |tape: &mut Tape, x: Option<Var>| x.unwrap_or_else(|| tape.leaf(images.to_unit_tensor()));
            let mut bn = |tape: &mut Tape, h: Var, at: usize| -> Result<Var> {
                let mode = if training {
                    BatchNormMode::Batch { eps: BN_EPS }
                } else {
                    BatchNormMode::Running {
                        mean: ps[at + 2].value.data(),
                        var: ps[at + 3].value.data(),
                        eps: BN_EPS,
                    }
                };
                let (y, stats) = tape.batch_norm(h, vars[at].expect("gamma"), vars[at + 1].expect("beta"), mode)?;
                if let Some(s) = stats {
                    batch_stats.push((id, at, s));
                }
                Ok(y)
            };
            let next = match *layer {
                LayerConfig::Conv { stride, padding, .. } => {
                    let h = input(tape, x);
                    tape.conv2d(h, vars[0].expect("weight"), stride, padding)?
                }
                LayerConfig::QuantConv { stride, padding, .. } => {
                    let h = input(tape, x);
                    let w = tape.quantize_weight(vars[0].expect("weight"), WeightScaling::PerOutputChannel)?;
                    tape.conv2d(h, w, stride, padding)?
                }
                LayerConfig::PixelEmbed { quant, .. } => embed_train(tape, images, vars[0].expect("table"), &quant)?,
                LayerConfig::BatchNorm { .. } => {
                    let h = input(tape, x);
                    bn(tape, h, 0)?
                }
                LayerConfig::ActivationQuant { quant } => {
                    let h = input(tape, x);
                    tape.quantize_activation(h, &quant)
                }
                LayerConfig::Relu => {
                    let h = input(tape, x);
                    tape.relu(h)
                }
                LayerConfig::Pool { kind, kernel, stride } => {
                    let h = input(tape, x);
                    match kind {
                        PoolKind::Mean => tape.mean_pool(h, kernel, stride)?,
                        PoolKind::Max => tape.max_pool(h, kernel, stride)?,
                    }
                }
                LayerConfig::Fc {
                    in_features, quantized, ..
                } => {
                    let h = input(tape, x);
                    let flat = tape.reshape(h, &[n, in_features])?;
                    if quantized {
                        let w = tape.quantize_weight(vars[0].expect("weight"), WeightScaling::PerTensor)?;
                        tape.matmul_transposed(flat, w)?
                    } else {
                        let y = tape.matmul_transposed(flat, vars[0].expect("weight"))?;
                        let ones = tape.leaf(Tensor::full(&[n, 1], 1.0));
                        let b = tape.matmul(ones, vars[1].expect("bias"))?;
                        tape.add(y, b)?
                    }
                }
                LayerConfig::ResidualBlock { stride, quant, .. } => {
                    let h0 = input(tape, x);
                    let w1 = tape.quantize_weight(vars[0].expect("conv1"), WeightScaling::PerOutputChannel)?;
                    let h = tape.conv2d(h0, w1, stride, 1)?;
                    let h = bn(tape, h, 1)?;
                    let h = tape.quantize_activation(h, &quant);
                    let w2 = tape.quantize_weight(vars[5].expect("conv2"), WeightScaling::PerOutputChannel)?;
                    let h = tape.conv2d(h, w2, 1, 1)?;
                    let h = bn(tape, h, 6)?;
                    let s = if layer.has_projection() {
                        let ws = tape.quantize_weight(vars[10].expect("proj"), WeightScaling::PerOutputChannel)?;
                        let s = tape.conv2d(h0, ws, stride, 0)?;
                        bn(tape, s, 11)?
                    } else {
                        h0
                    };
                    let sum = tape.add(h, s)?;
                    tape.quantize_activation(sum, &quant)
                }
                LayerConfig::ArgmaxHead => input(tape, x),
            };
            x = Some(next);
        }
        Ok(TapeForward {
            logits: x.expect("non-empty model"),
            param_vars,
            batch_stats,
        })
    }

    pub fn forward(&self, images: &ImageBatch, mode: ForwardMode) -> Result<Logits> {
        match mode {
            ForwardMode::Train | ForwardMode::InferFloat => {
                let mut tape = if mode == ForwardMode::Train {
                    Tape::new()
                } else {
                    Tape::inference()
                };
                let out = self.forward_tape(&mut tape, images, mode == ForwardMode::Train)?;
                Ok(Logits {
                    values: tape.value(out.logits).clone(),
                    integer: None,
                })
            }
            ForwardMode::InferPacked => self.compile()?.forward(images),
        }
    }

    /// Lowers the graph to packed inference form.
    pub fn compile(&self) -> Result<PackedModel> {
        PackedModel::compile(self)
    }
}

/// Batch-norm with running statistics folded into `scale * x + shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BnParams {
    fn from_params(ps: &[Param]) -> Self {
        Self {
            gamma: ps[0].value.data().to_vec(),
            beta: ps[1].value.data().to_vec(),
            mean: ps[2].value.data().to_vec(),
            var: ps[3].value.data().to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)`.
    pub fn folded(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

/// Binary conv in inference form.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedConv {
    pub weights: PackedWeights,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedBlock {
    pub quant: QuantConfig,
    pub conv1: PackedConv,
    pub bn1: BnParams,
    pub conv2: PackedConv,
    pub bn2: BnParams,
    pub projection: Option<(PackedConv, BnParams)>,
}

/// One layer of a [`PackedModel`].
#[derive(Debug, Clone, PartialEq)]
pub enum PackedLayer {
    /// Float first conv (`fp-first`); not runnable on the packed path.
    FloatConv {
        weights: Tensor,
        stride: usize,
        padding: usize,
    },
    QuantConv(PackedConv),
    PixelEmbed(MergedTable),
    BatchNorm(BnParams),
    ActivationQuant(QuantConfig),
    Relu,
    Pool {
        kind: PoolKind,
        kernel: usize,
        stride: usize,
    },
    /// Binary FC with one scale for the whole matrix.
    QuantFc(PackedWeights),
    FloatFc {
        weights: Tensor,
        bias: Vec<f32>,
    },
    Residual(PackedBlock),
    ArgmaxHead,
}

impl PackedConv {
    fn config(&self, quantized: bool) -> LayerConfig {
        let [out_channels, in_channels, kernel, _] = self.weights.shape();
        let (stride, padding) = (self.stride, self.padding);
        if quantized {
            LayerConfig::QuantConv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            }
        } else {
            LayerConfig::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            }
        }
    }
}

impl PackedLayer {
    /// The layer configuration this packed layer was compiled from.
    pub fn config(&self) -> LayerConfig {
        match self {
            PackedLayer::FloatConv {
                weights,
                stride,
                padding,
            } => LayerConfig::Conv {
                in_channels: weights.shape()[1],
                out_channels: weights.shape()[0],
                kernel: weights.shape()[2],
                stride: *stride,
                padding: *padding,
            },
            PackedLayer::QuantConv(c) => c.config(true),
            PackedLayer::PixelEmbed(m) => LayerConfig::PixelEmbed {
                d: m.dim(),
                quant: *m.quant(),
            },
            PackedLayer::BatchNorm(bn) => LayerConfig::BatchNorm { channels: bn.channels() },
            PackedLayer::ActivationQuant(quant) => LayerConfig::ActivationQuant { quant: *quant },
            PackedLayer::Relu => LayerConfig::Relu,
            PackedLayer::Pool { kind, kernel, stride } => LayerConfig::Pool {
                kind: *kind,
                kernel: *kernel,
                stride: *stride,
            },
            PackedLayer::QuantFc(w) => LayerConfig::Fc {
                in_features: w.shape()[1],
                out_features: w.shape()[0],
                quantized: true,
            },
            PackedLayer::FloatFc { weights, .. } => LayerConfig::Fc {
                in_features: weights.shape()[1],
                out_features: weights.shape()[0],
                quantized: false,
            },
            PackedLayer::Residual(b) => {
                let [out_channels, in_channels, _, _] = b.conv1.weights.shape();
                LayerConfig::ResidualBlock {
                    in_channels,
                    out_channels,
                    stride: b.conv1.stride,
                    quant: b.quant,
                }
            }
            PackedLayer::ArgmaxHead => LayerConfig::ArgmaxHead,
        }
    }
}

/// Deployable model: merged tables, packed binary weights and float
/// batch-norm parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    preset: Preset,
    height: usize,
    width: usize,
    layers: Vec<PackedLayer>,
    /// Lookup kernel for a leading pixel-embed + binary conv pair.
    fused: Option<FusedEmbeddingConv>,
}

/// Activation state between packed layers; spatial data is channels-last.
enum Flow {
    Pixels,
    Codes {
        shape: [usize; 4],
        codes: Vec<u8>,
        quant: QuantConfig,
    },
    Acc {
        acc: ConvAccumulators,
        /// Real value is `mul[c] * acc + add[c]`.
        mul: Vec<f32>,
        add: Vec<f32>,
    },
    Float {
        shape: [usize; 4],
        values: Vec<f32>,
    },
    Logits(Logits),
}

/// Codes for raw pixels consumed by a quantized first conv: code `p` with
/// 8 bits over `[0, 1]` dequantizes to `p / 255`.
fn pixel_code_config() -> QuantConfig {
    QuantConfig::activations(8).expect("8-bit config is valid")
}

impl PackedModel {
    pub fn compile(graph: &ModelGraph) -> Result<Self> {
        let mut layers = Vec::with_capacity(graph.layers.len());
        for (id, l) in graph.layers.iter().enumerate() {
            let ps = graph.params.layer(id);
            let packed = match *l {
                LayerConfig::Conv { stride, padding, .. } => PackedLayer::FloatConv {
                    weights: ps[0].value.clone(),
                    stride,
                    padding,
                },
                LayerConfig::QuantConv { stride, padding, .. } => PackedLayer::QuantConv(PackedConv {
                    weights: PackedWeights::from_float(&ps[0].value)?,
                    stride,
                    padding,
                }),
                LayerConfig::PixelEmbed { quant, .. } => {
                    PackedLayer::PixelEmbed(merge_table(&EmbeddingTable::from_weights(ps[0].value.clone(), quant)?))
                }
                LayerConfig::BatchNorm { .. } => PackedLayer::BatchNorm(BnParams::from_params(ps)),
                LayerConfig::ActivationQuant { quant } => PackedLayer::ActivationQuant(quant),
                LayerConfig::Relu => PackedLayer::Relu,
                LayerConfig::Pool { kind, kernel, stride } => PackedLayer::Pool { kind, kernel, stride },
                LayerConfig::Fc { quantized: true, .. } => {
                    PackedLayer::QuantFc(PackedWeights::from_float_with(&ps[0].value, WeightScaling::PerTensor)?)
                }
                LayerConfig::Fc { quantized: false, .. } => PackedLayer::FloatFc {
                    weights: ps[0].value.clone(),
                    bias: ps[1].value.data().to_vec(),
                },
                LayerConfig::ResidualBlock { stride, quant, .. } => {
                    let conv = |w: &Tensor, stride: usize, padding: usize| -> Result<PackedConv> {
                        Ok(PackedConv {
                            weights: PackedWeights::from_float(w)?,
                            stride,
                            padding,
                        })
                    };
                    PackedLayer::Residual(PackedBlock {
                        quant,
                        conv1: conv(&ps[0].value, stride, 1)?,
                        bn1: BnParams::from_params(&ps[1..5]),
                        conv2: conv(&ps[5].value, 1, 1)?,
                        bn2: BnParams::from_params(&ps[6..10]),
                        projection: if l.has_projection() {
                            Some((conv(&ps[10].value, stride, 0)?, BnParams::from_params(&ps[11..15])))
                        } else {
                            None
                        },
                    })
                }
                LayerConfig::ArgmaxHead => PackedLayer::ArgmaxHead,
            };
            layers.push(packed);
        }
        Self::from_layers(graph.preset, graph.height, graph.width, layers)
    }

    /// Assembles a packed model, checking shapes from input to logits.
    pub fn from_layers(preset: Preset, height: usize, width: usize, layers: Vec<PackedLayer>) -> Result<Self> {
        let mut shape = [COMPONENTS, height, width];
        for l in &layers {
            let config = l.config();
            shape = config.output_shape(shape)?;
            let consistent = match l {
                PackedLayer::BatchNorm(bn) => [&bn.beta, &bn.mean, &bn.var].iter().all(|v| v.len() == bn.channels()),
                PackedLayer::FloatFc { weights, bias } => bias.len() == weights.shape()[0] && weights.rank() == 2,
                PackedLayer::FloatConv { weights, .. } => weights.rank() == 4 && weights.shape()[2] == weights.shape()[3],
                PackedLayer::QuantConv(c) => c.weights.shape()[2] == c.weights.shape()[3],
                PackedLayer::Residual(b) => {
                    let o = b.conv1.weights.shape()[0];
                    let ok = |w: &PackedWeights, i: usize, k: usize| w.shape() == [o, i, k, k];
                    ok(&b.conv1.weights, b.conv1.weights.shape()[1], 3)
                        && ok(&b.conv2.weights, o, 3)
                        && b.conv2.stride == 1
                        && [&b.bn1, &b.bn2].iter().all(|bn| bn.channels() == o)
                        && match &b.projection {
                            Some((c, bn)) => ok(&c.weights, b.conv1.weights.shape()[1], 1) && bn.channels() == o,
                            None => b.conv1.weights.shape()[1] == o && b.conv1.stride == 1,
                        }
                }
                _ => true,
            };
            if !consistent {
                return Err(Error::Contract(format!("inconsistent packed {} layer", config.kind_name())));
            }
        }
        if !matches!(layers.last(), Some(PackedLayer::ArgmaxHead)) || shape[1] != 1 || shape[2] != 1 {
            return Err(Error::InvalidConfig("packed model must end in an fc layer and an argmax head".into()));
        }
        let fused = match layers.as_slice() {
            [PackedLayer::PixelEmbed(m), PackedLayer::QuantConv(c), ..] => FusedEmbeddingConv::new(m, &c.weights).ok(),
            _ => None,
        };
        Ok(Self {
            preset,
            height,
            width,
            layers,
            fused,
        })
    }

    pub fn preset(&self) -> Preset {
        self.preset
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn layers(&self) -> &[PackedLayer] {
        &self.layers
    }

    pub fn merged_table(&self) -> Option<&MergedTable> {
        self.layers.iter().find_map(|l| match l {
            PackedLayer::PixelEmbed(m) => Some(m),
            _ => None,
        })
    }

    /// Fused lookup kernel for a pixel embedding followed directly by a
    /// binary conv, when the accumulators fit its narrow integer types.
    pub fn fused_first_layer(&self) -> Option<(&FusedEmbeddingConv, &PackedConv)> {
        match (&self.fused, self.layers.get(1)) {
            (Some(f), Some(PackedLayer::QuantConv(c))) => Some((f, c)),
            _ => None,
        }
    }

    pub fn forward(&self, images: &ImageBatch) -> Result<Logits> {
        if images.height() != self.height || images.width() != self.width {
            return Err(Error::shape(
                "model-input",
                &[images.height(), images.width()],
                &[self.height, self.width],
            ));
        }
        let mut flow = Flow::Pixels;
        let mut start = 0;
        if let Some((fused, conv)) = self.fused_first_layer() {
            let acc = fused.forward(images, conv.stride, conv.padding)?;
            let (mul, add) = dequant_affine(&conv.weights, self.merged_table().expect("embed layer").quant());
            flow = Flow::Acc { acc, mul, add };
            start = 2;
        }
        for layer in &self.layers[start..] {
            flow = step(layer, flow, images)?;
        }
        match flow {
            Flow::Logits(l) => Ok(l),
            _ => Err(Error::Contract("packed model did not produce logits".into())),
        }
    }
}

/// `(mul, add)` mapping conv accumulators to reals:
/// `alpha_c * (step * acc + lo * sign_sum_c)`.
fn dequant_affine(w: &PackedWeights, act: &QuantConfig) -> (Vec<f32>, Vec<f32>) {
    let mul = w.scales().iter().map(|a| a * act.step()).collect();
    let add = w
        .scales()
        .iter()
        .zip(w.sign_sums())
        .map(|(a, &s)| a * act.lo() * s as f32)
        .collect();
    (mul, add)
}

fn pixels_to_codes(images: &ImageBatch, quant: QuantConfig, map: impl Fn(u8) -> u8) -> Flow {
    Flow::Codes {
        shape: [images.len(), COMPONENTS, images.height(), images.width()],
        codes: images.pixels().iter().map(|&p| map(p)).collect(),
        quant,
    }
}

fn run_conv(conv: &PackedConv, shape: [usize; 4], codes: &[u8], quant: QuantConfig) -> Result<(ConvAccumulators, Vec<f32>, Vec<f32>)> {
    let packed = pack_channels_last(shape, codes, quant)?;
    let acc = packed_conv2d(&packed, &conv.weights, conv.stride, conv.padding)?;
    let (mul, add) = dequant_affine(&conv.weights, &quant);
    Ok((acc, mul, add))
}

/// Per-channel affine of channels-last values.
fn affine_into(values: &mut [f32], channels: usize, f: impl Fn(usize, f32) -> f32) {
    for row in values.chunks_mut(channels) {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f(c, *v);
        }
    }
}

fn acc_to_float(acc: &ConvAccumulators, mul: &[f32], add: &[f32], bn: Option<&BnParams>) -> Vec<f32> {
    let o = acc.shape()[1];
    let mut out: Vec<f32> = acc.values().iter().map(|&v| v as f32).collect();
    match bn {
        Some(bn) => {
            let (s, t) = bn.folded();
            affine_into(&mut out, o, |c, v| (mul[c] * v + add[c]) * s[c] + t[c]);
        }
        None => affine_into(&mut out, o, |c, v| mul[c] * v + add[c]),
    }
    out
}

fn block_forward(b: &PackedBlock, shape: [usize; 4], codes: &[u8], quant: QuantConfig) -> Result<([usize; 4], Vec<u8>)> {
    let (acc1, m1, a1) = run_conv(&b.conv1, shape, codes, quant)?;
    let [n, o, ho, wo] = acc1.shape();
    let h1: Vec<u8> = acc_to_float(&acc1, &m1, &a1, Some(&b.bn1))
        .into_iter()
        .map(|v| b.quant.code(v))
        .collect();
    let (acc2, m2, a2) = run_conv(&b.conv2, [n, o, ho, wo], &h1, b.quant)?;
    let mut v = acc_to_float(&acc2, &m2, &a2, Some(&b.bn2));
    match &b.projection {
        Some((conv, bn)) => {
            let (accs, ms, as_) = run_conv(conv, shape, codes, quant)?;
            for (x, s) in v.iter_mut().zip(acc_to_float(&accs, &ms, &as_, Some(bn))) {
                *x += s;
            }
        }
        None => {
            for (x, &c) in v.iter_mut().zip(codes) {
                *x += quant.dequantize(c);
            }
        }
    }
    Ok(([n, o, ho, wo], v.into_iter().map(|x| b.quant.code(x)).collect()))
}

fn step(layer: &PackedLayer, flow: Flow, images: &ImageBatch) -> Result<Flow> {
    let unsupported = |what: &str| Error::UnsupportedPath(format!("{what} has no packed implementation"));
    Ok(match (layer, flow) {
        (PackedLayer::FloatConv { .. }, _) => return Err(unsupported("float first-layer convolution")),
        (PackedLayer::PixelEmbed(m), Flow::Pixels) => {
            let d = m.dim();
            let [n, h, w] = [images.len(), images.height(), images.width()];
            let mut codes = Vec::with_capacity(n * h * w * COMPONENTS * d);
            for &p in images.pixels() {
                codes.extend_from_slice(m.entry(OneHotIndex::from(p)));
            }
            Flow::Codes {
                shape: [n, COMPONENTS * d, h, w],
                codes,
                quant: *m.quant(),
            }
        }
        (PackedLayer::ActivationQuant(q), Flow::Pixels) => {
            let q = *q;
            pixels_to_codes(images, q, move |p| q.code(p as f32 / 255.0))
        }
        (PackedLayer::QuantConv(conv), Flow::Pixels) => {
            let Flow::Codes { shape, codes, quant } = pixels_to_codes(images, pixel_code_config(), |p| p) else {
                unreachable!()
            };
            let (acc, mul, add) = run_conv(conv, shape, &codes, quant)?;
            Flow::Acc { acc, mul, add }
        }
        (PackedLayer::QuantConv(conv), Flow::Codes { shape, codes, quant }) => {
            let (acc, mul, add) = run_conv(conv, shape, &codes, quant)?;
            Flow::Acc { acc, mul, add }
        }
        (PackedLayer::BatchNorm(bn), Flow::Acc { acc, mul, add }) => Flow::Float {
            shape: acc.shape(),
            values: acc_to_float(&acc, &mul, &add, Some(bn)),
        },
        (PackedLayer::BatchNorm(bn), Flow::Float { shape, mut values }) => {
            let (s, t) = bn.folded();
            affine_into(&mut values, shape[1], |c, v| v * s[c] + t[c]);
            Flow::Float { shape, values }
        }
        (PackedLayer::ActivationQuant(q), Flow::Float { shape, values }) => Flow::Codes {
            shape,
            codes: values.into_iter().map(|v| q.code(v)).collect(),
            quant: *q,
        },
        (PackedLayer::ActivationQuant(q), Flow::Acc { acc, mul, add }) => Flow::Codes {
            shape: acc.shape(),
            codes: acc_to_float(&acc, &mul, &add, None).into_iter().map(|v| q.code(v)).collect(),
            quant: *q,
        },
        (PackedLayer::Relu, Flow::Float { shape, values }) => Flow::Float {
            shape,
            values: values.into_iter().map(|v| v.max(0.0)).collect(),
        },
        (PackedLayer::Residual(b), Flow::Codes { shape, codes, quant }) => {
            let (shape, codes) = block_forward(b, shape, &codes, quant)?;
            Flow::Codes {
                shape,
                codes,
                quant: b.quant,
            }
        }
        (PackedLayer::Pool { kind: PoolKind::Mean, kernel, stride }, Flow::Codes { shape, codes, quant })
            if shape[2] == *kernel && shape[3] == *kernel && *stride == *kernel =>
        {
            // Global pooling keeps exact integer sums; the head consumes them.
            let [n, c, h, w] = shape;
            let mut sums = vec![0i64; n * c];
            for (i, img) in codes.chunks(c * h * w).enumerate() {
                for row in img.chunks(c) {
                    for (s, &v) in sums[i * c..(i + 1) * c].iter_mut().zip(row) {
                        *s += v as i64;
                    }
                }
            }
            let count = (h * w) as f32;
            let values = sums
                .iter()
                .map(|&s| quant.lo() + quant.step() * s as f32 / count)
                .collect::<Vec<f32>>();
            return Ok(Flow::Logits(Logits {
                values: Tensor::new(&[n, c], values)?,
                integer: if quant.lo() == 0.0 { Some(sums) } else { None },
            }));
        }
        (PackedLayer::QuantFc(w), Flow::Logits(pooled)) => {
            let [k, c, _, _] = w.shape();
            let n = pooled.values.shape()[0];
            let weights = w.unpack();
            let signs: Vec<i64> = weights.data().iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
            let alpha = w.scales()[0];
            let mut values = vec![0.0f32; n * k];
            for (i, row) in pooled.values.data().chunks(c).enumerate() {
                for (o, out) in values[i * k..(i + 1) * k].iter_mut().enumerate() {
                    *out = alpha
                        * row
                            .iter()
                            .zip(&signs[o * c..(o + 1) * c])
                            .map(|(&x, &s)| x * s as f32)
                            .sum::<f32>();
                }
            }
            let integer = match (&pooled.integer, alpha > 0.0) {
                (Some(sums), true) => Some(
                    sums.chunks(c)
                        .flat_map(|row| {
                            (0..k).map(|o| {
                                row.iter()
                                    .zip(&signs[o * c..(o + 1) * c])
                                    .map(|(&x, &s)| x * s)
                                    .sum::<i64>()
                            })
                        })
                        .collect(),
                ),
                _ => None,
            };
            Flow::Logits(Logits {
                values: Tensor::new(&[n, k], values)?,
                integer,
            })
        }
        (PackedLayer::FloatFc { weights, bias }, Flow::Logits(pooled)) => {
            let (k, c) = (weights.shape()[0], weights.shape()[1]);
            let n = pooled.values.shape()[0];
            let mut values = Vec::with_capacity(n * k);
            for row in pooled.values.data().chunks(c) {
                for o in 0..k {
                    let w = &weights.data()[o * c..(o + 1) * c];
                    values.push(row.iter().zip(w).map(|(x, w)| x * w).sum::<f32>() + bias[o]);
                }
            }
            Flow::Logits(Logits {
                values: Tensor::new(&[n, k], values)?,
                integer: None,
            })
        }
        (PackedLayer::ArgmaxHead, Flow::Logits(l)) => Flow::Logits(l),
        (layer, _) => {
            return Err(Error::UnsupportedPath(format!(
                "packed path cannot run {layer:?} at this point of the graph"
            )))
        }
    })
}
