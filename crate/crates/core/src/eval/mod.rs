//! Forecast metrics, the rolling benchmark protocol and the sparse-vs-dense
//! comparison.

mod bench;
mod metrics;
mod protocol;

pub use bench::{bench_sparse_vs_dense, matched_dense, probe_loss, BenchPair, BenchReport, BenchRun};
pub use metrics::{mae, mse};
pub use protocol::{
    audit_windows, eval_model, eval_on, evaluate_forecaster, fine_tune_epoch, model_hash, rolling_windows, train_crops,
    DatasetAverage, EvalMode, EvalReport, EvalRow, EvalSpec, FineTuneConfig, LastValue, RunMeta, Window,
};
