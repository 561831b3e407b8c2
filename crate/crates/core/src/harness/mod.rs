//! End-to-end training of small classifiers with instrumented counters.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod train;

pub use checkpoint::{read_blob, read_checkpoint, write_blob, write_checkpoint, Manifest};
pub use config::{AsiRefresh, Mode, PlanSource, TrainConfig};
pub use data::{load_dataset, split_dataset, DataOptions, Dataset, Split, SyntheticSpec};
pub use model::{build_model, cross_entropy, CounterSnapshot, Init, LayerMemory, Model, ModelKind, ModelSpec};
pub use train::{pretrain, resolve_plan, run, run_model, train, EpochRecord, RunRecord};
