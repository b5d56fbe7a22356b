//! Experiment plumbing: configuration, synthetic data, splits, file
//! formats and the end-to-end pipeline.

pub mod config;
pub mod io;
pub mod pipeline;
pub mod split;
pub mod synth;

use thiserror::Error;

use crate::cafn::CafnError;
use crate::graphbuild::GraphError;
use crate::labor::SampleError;
use crate::magae::MagaeError;
use crate::numcore::TensorError;
use crate::txclm::TxclmError;
use crate::txcorpus::CorpusError;

pub use config::{DataSource, ExperimentConfig, PipelineAblation, SplitStrategy};
pub use pipeline::{
    build_corpus, evaluate, fusion_inputs, load_dataset, make_split, node_features, pretrain_gae, pretrain_lm, random_features, semantic_rows,
    Corpus, Dataset, Failure, Manifest, Pipeline, Report,
};
pub use split::{read_split_csv, split_components, split_random, Part, Split};
pub use synth::{synth_generate, Synthetic, SyntheticSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Txclm(#[from] TxclmError),
    #[error(transparent)]
    Magae(#[from] MagaeError),
    #[error(transparent)]
    Cafn(#[from] CafnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error("split: {0}")]
    Split(String),
    #[error("label {0} is not 0 or 1")]
    Label(u8),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Format(String),
    #[error("output directory {0} is locked by another run")]
    Locked(String),
}
