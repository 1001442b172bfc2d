//! Knowledge tracing with relevance-masked monotonic attention over
//! concept-route hierarchies.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rasch;
pub mod relevance;
pub mod synth;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use manifest::RunManifest;
pub use metrics::{compute_auc, MetricReport};
pub use model::{ModelConfig, ModelParams, SequenceInput};
pub use relevance::{build_relevance_matrix, KCHierarchy, KCRoute, RelevanceMatrix, RouteTable};
pub use synth::SynthSpec;
pub use tensor::{masked_softmax, sigmoid, Tensor};
pub use train::TrainConfig;
