//! Curation, storage, benchmark ingestion and batch sampling.

mod batch;
mod clean;
mod ingest;
mod store;
pub mod synthetic;

pub use batch::{sample_batch, step_rng, PackedBatch, PAD_ID};
pub use clean::{
    check_window, check_window_shaped, clean_series, split_by_nan_inf, split_by_window_quality, CleanConfig,
    CleanSeries, Origin, RawSeries, Segment, WindowDiagnostics, DEFAULT_MIN_LEN, DEFAULT_WINDOW,
    DEFAULT_ZERO_THRESHOLD,
};
pub use ingest::{load_csv, split_preset, write_csv, write_csv_to, CsvSchema, Dataset, MultiSeries, SplitSpec, Splits, Standardizer};
pub use store::{meta_path, SequenceMeta, SequenceStore, StoreMeta, DEFAULT_SHARD_POINTS, STORE_VERSION};
