//! Criterion benchmarks for nodetf; see `benches/`.

use nodetf::{gen_dataset, ParityDataset};

/// The length-6 dataset the benchmarks train and evaluate on.
pub fn bench_dataset() -> ParityDataset {
    gen_dataset(6).expect("length 6 is supported")
}
