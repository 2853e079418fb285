//! Experiment harness: run configuration, the synthetic dataset, metrics
//! CSV, detector benchmarking and full training runs.

pub mod bench;
pub mod config;
pub mod data;
pub mod metrics;
pub mod run;

pub use bench::{benchmark_saliency, BenchReport};
pub use config::{parse_config_file, parse_config_str, DatasetConfig, Mode, RunConfig};
pub use data::{class_template, generate_synthetic_dataset, nearest_template_accuracy, Dataset};
pub use metrics::{
    curriculum_trace, emit_metrics_csv, metrics_csv_string, parse_metrics_csv, CurriculumSummary,
    MetricsRow, Split, METRICS_HEADER,
};
pub use run::{run_training, RunOutput};
