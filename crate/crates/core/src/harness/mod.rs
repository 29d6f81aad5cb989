//! End-to-end orchestration: configuration, data, training, evaluation and
//! the paired experiments.

pub mod config;
pub mod dataset;
pub mod embeddings;
pub mod evaluate;
pub mod experiments;
pub mod train;

pub use config::{Miner, RunConfig, SplitCounts, PATH_ENV_VARS};
pub use dataset::{ingest_directory, resize_bilinear, synth_dataset, Dataset, Record, Role, Split};
pub use embeddings::{dump_embeddings, read_embeddings, EmbeddingRow};
pub use evaluate::{evaluate_pipeline, evaluate_with_classifier, write_evaluation, Evaluation, GridRow};
pub use experiments::{compare_miners, gamma_sweep, run, MinerComparison, RunResult, SummaryRow, SWEEP_GAMMAS};
pub use train::{build_pipeline, fingerprint, train, train_pipeline, EpochLog, TrainOutcome};

/// Seed-stream tags mixed into the run seed.
pub mod stream {
    pub const GENERATOR: u64 = 1;
    pub const EXTRACTOR: u64 = 2;
    pub const SVM: u64 = 3;
    pub const DATA: u64 = 0x100;
    pub const BATCH_ORDER: u64 = 0x1_0000;
    pub const RANDOM_COMBINATION: u64 = 0x2_0000;
}

/// Independent child seed for `stream` (splitmix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
