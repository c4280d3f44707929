//! Entity-aware loss reweighting for implicit-feedback recommenders.
//!
//! Training samples are reweighted at the end of every epoch by fusing an
//! interaction-level confidence (ECDF of the negated loss) with user and item
//! reputation factors (rank-mapped average losses). The crate contains the
//! weighting machinery, three small backbones with hand-written gradients,
//! the training loop, ranking metrics and `(alpha, beta)` landscape tools.

pub mod backbones;
pub mod error;
pub mod ingest;
pub mod landscape;
pub mod metrics;
pub mod neural;
pub mod seed;
pub mod trainer;
pub mod weighting;

pub use backbones::{BatchContext, BatchLoss, Corruption, Model, ModelKind, Sample, UserRows};
pub use error::{Error, Result};
pub use ingest::{
    binarize, parse_ratings, sample_negatives, split, synth_generate, DataSplit, Delimiter,
    Interaction, InteractionDataset, NegativeSet, RawRating, SplitRatios, SynthConfig,
};
pub use landscape::{hessian_concavity, sweep, Cell, Curvature, HessianVerdict, PerformanceSurface};
pub use metrics::{MetricsReport, RankingMetric};
pub use neural::{AdamState, Parameters};
pub use trainer::{train, EpochReport, TrainConfig, TrainOutcome};
pub use weighting::{
    Components, EntityLossStats, LossRecordSet, ReputationVector, Strategy, WeightStrategyConfig,
    WeightTable,
};
