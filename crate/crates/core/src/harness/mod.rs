//! Experiment configuration, training, evaluation and α sweeps.

mod config;
mod data;
mod eval;
mod optim;
mod sweep;
mod train;

pub use config::{
    derive_seed, BackboneSource, DatasetSource, ExperimentConfig, NamedVariant, OptimizerConfig,
    Precision, SelectRule, SweepConfig, VariantFlags, DEV, SPLITS, TEST, TRAIN,
};
pub use data::{build_protocol, prepare, prepare_split, resolve_dataset, Dataset, Prepared};
pub use eval::{evaluate, model_from_archive, EvalRequest, ScoreSource};
pub use optim::Adam;
pub use sweep::{
    cell_config, parse_alphas, parse_seeds, sweep_alpha, SweepRequest, SweepRow, SweepSummary,
    CACHE_ENV, METRICS,
};
pub use train::{
    init_model, load_backbone, run_train, score_samples, train, train_with_data, write_artifacts,
    EpochRecord, RunRecord, TrainOutcome, CHECKPOINT_FILE, REPORT_JSON,
};
