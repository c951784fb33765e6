//! Training, evaluation, ablation sweeps, benchmarking and attention
//! inspection on top of [`crate::model::HoiModel`].

pub mod ablation;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod foundation;
pub mod train;
pub mod viz;

pub use ablation::{component_rows, format_table, run_ablation, variant_rows, AblationResult, AblationRow, Stat};
pub use bench::{default_sizes, run_bench, BenchRow, BenchSize};
pub use checkpoint::{Checkpoint, NamedArray};
pub use config::{DataConfig, EvalConfig, RunConfig, TrainConfig};
pub use eval::{evaluate, predict_all, run_eval, Evaluation};
pub use foundation::{build_foundation, Foundation, FoundationConfig, TowerCheckpoint};
pub use train::{train, EpochRecord, FrozenSnapshot, TrainOptions, Trained};
pub use viz::{normalize01, query_attention, rank_correlation, QueryAttention};

use crate::error::Result;
use crate::par::Exec;
use crate::synthworld::{build_splits, Catalog, Dataset, TokenWeights};

/// Catalog, split and scenes described by `cfg.data`.
pub fn generate_dataset(cfg: &RunConfig, exec: Exec) -> Result<Dataset> {
    let d = &cfg.data;
    let catalog = Catalog::toy(d.catalog_seed);
    let split = build_splits(&catalog, d.split_mode, d.split_fraction, d.seed)?;
    let w = TokenWeights { noun: cfg.model.lsg.alpha, verb: cfg.model.lsg.beta, other: cfg.model.other_weight };
    Dataset::generate(&catalog, &split, d.n_train, d.n_test, d.seed, &w, exec)
}
