//! Hierarchical contrastive embeddings for individual identification.
//!
//! Precomputed feature vectors carry a three-level label path
//! (individual, species, taxon). A small adapter plus one projector per level
//! is trained with SupCon, HiMulCon or HiMulConE, and the shared-layer
//! embeddings are evaluated by kNN in closed-set, unseen-NN and 1-shot
//! settings.

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod network;
pub mod objective;
pub mod pipeline;
pub mod taxonomy;

pub use data::{Dataset, EmbeddingRecord, Split, SynthConfig};
pub use eval::{EvalReport, Metric};
pub use linalg::Matrix;
pub use losses::{LossConfig, LossVariant};
pub use network::{ArchConfig, EncoderParams};
pub use pipeline::{Preset, TrainConfig};
pub use taxonomy::{LabelTriple, Level, Taxonomy};
