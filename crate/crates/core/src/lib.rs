//! Training and bit-packed inference for fully quantized convolutional
//! classifiers whose first layer is a learned pixel-embedding lookup table.
//!
//! Each 8-bit colour component indexes a shared `d × 256` table; the selected
//! column passes through a `Q`-bit uniform quantizer, so an RGB image becomes
//! `3d` feature maps of `Q`-bit codes. At inference the float table and the
//! quantizer collapse into a table of codes ([`embed::MergedTable`]) that
//! feeds popcount convolutions ([`bitpack`]) directly.

pub mod bench;
pub mod bitpack;
pub mod data;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod linalg;
pub mod network;
pub mod quant;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use bitpack::{
    pack_activations, pack_channels_last, packed_conv2d, ConvAccumulators, FusedEmbeddingConv, PackedTensor, PackedWeights,
};
pub use data::Dataset;
pub use embed::{embed_infer, embed_train, merge_table, EmbeddingTable, MergedTable, OneHotIndex, TableInit};
pub use error::{Error, ParseErrorKind, Result};
pub use image::ImageBatch;
pub use network::{build_model, ForwardMode, LayerConfig, Logits, ModelGraph, ModelSpec, PackedModel, Preset};
pub use quant::{QuantConfig, QuantizedCode};
pub use tape::{BatchNormMode, BatchStats, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
pub use trainer::{evaluate, train, Accuracy, MetricLog, TrainConfig};
