// SPDX-License-Identifier: Apache-2.0

//! Channel-wise retrieval-augmented forecasting.
//!
//! A multivariate history is cut into stride-1 windows, a channel relation
//! graph is built from the training memory, and each channel of a query
//! retrieves horizons from itself and its graph neighbors by comparing
//! truncated spectra. A shared MLP forecast is fused with a small retrieval
//! head.

pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod spectral;
pub mod synthetic;
pub mod train;

mod codec;

pub use data::{
    load_csv, save_csv, sliding_windows, ChannelStats, Interval, MemoryEntry, MultivariateSeries, SplitScheme,
    WindowPair,
};
pub use error::{CraftError, Result};
pub use experiment::{
    prepare, run_experiment, run_experiment_on, ExperimentConfig, MetricsReport, PreparedData, TimingConfig,
};
pub use graph::{Neighbor, RelationGraph};
pub use metrics::{metric_mae, metric_mse};
pub use model::{fuse, CraftModel, ForecastOutput, ModelConfig};
pub use retrieval::{OpCounter, RetrievedReference, Retriever};
pub use spectral::{KbConfig, KnowledgeBase, SpectralTransform};
pub use train::{evaluate, train, EvalResult, TrainConfig, TrainOutcome, TrainingLog};
