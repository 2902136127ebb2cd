//! Bag-of-vectors autoencoders with task mappings learned entirely in
//! latent space.
//!
//! A pretrained autoencoder turns a sentence into an unordered bag of
//! vectors (one per surviving token after learned pruning), a small mapping
//! network is trained to move bags around latent space under set-distance
//! losses, and decoding the mapped bag yields the output text. The
//! autoencoder is trained once and frozen; tasks only ever touch the bags.

pub mod autoencoder;
pub mod bag;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod l0drop;
pub mod layers;
pub mod mapping;
pub mod metrics;
pub mod objectives;
pub mod params;
pub mod report;
pub mod rng;
pub mod setdist;
pub mod tensor;
pub mod vocab;

pub use autoencoder::{Autoencoder, Encoding, PretrainReport};
pub use bag::{BagOfVectors, BatchedBags};
pub use checkpoint::{load_autoencoder, load_head, load_mapping, save_autoencoder, save_head, save_mapping};
pub use config::{BottleneckMode, ModelConfig};
pub use error::{Error, Result};
pub use graph::{DistanceMetric, Graph, NodeId};
pub use heads::{HeadKind, LatentHead};
pub use mapping::{
    select_bag_size, window_bounds, GenerationTrace, Mapping, MappingTrainConfig, MappingVariant,
};
pub use metrics::{
    avg_length, rouge_l, sentence_bleu, style_score, transfer_accuracy, EvalRecord,
};
pub use objectives::{CompressObjective, SimilarityKind, StyleObjective};
pub use params::{Adam, Binder, ParamId, ParamStore};
pub use report::{LossReport, ValReport};
pub use rng::Rng;
pub use setdist::{align, hausdorff, AlignKind};
pub use tensor::Tensor;
pub use vocab::{TokenSequence, Vocabulary};
