//! End-to-end training of the detector.

pub mod check;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod serialize;
pub mod sweep;
pub mod synth;
pub mod train;

pub use check::{
    composite_grad_check, gradcheck_config, gradcheck_fixture, CompositeCheck, LossTerm,
    KINK_MARGIN,
};
pub use config::{Ablation, SplitFractions, TrainConfig};
pub use data::{read_jsonl, split_dataset, split_sizes, write_jsonl, DatasetBundle, Split};
pub use metrics::{Confusion, EpochRecord, MetricsReport};
pub use model::{BatchOutput, ForwardOptions, Model};
pub use optim::{Adam, NoHook, UpdateHook};
pub use serialize::{deserialize_model, load_model, save_model, serialize_model, FORMAT_VERSION};
pub use sweep::{parse_range, sweep_lambda, sweep_table, SweepRow};
pub use synth::{generate_synthetic, synthetic_vocab_size};
pub use train::{
    batches, ensure_split, evaluate, evaluate_indices, evaluate_with, train, train_with_hook,
    Divergence, TrainOutcome,
};
