//! Experiment harness: configuration, the training loop, metrics, heatmaps,
//! checkpoints and the ablation suite.

mod ablate;
mod config;
mod heatmap;
mod metrics;
mod persist;
mod train;

pub use ablate::{ablate, AblationRow, AblationTable};
pub use config::{
    AgentSection, DistanceSection, ExperimentConfig, ExploreSection, ModelSection, OutputSection,
    RunSection,
};
pub use heatmap::{emit_heatmap, grid_csv, grid_pgm, visitation, HeatmapFiles};
pub use metrics::{
    mean_ci95, metrics_csv, parse_metrics_csv, regret_proxy, task_relevant_fraction, text_table,
    MetricsRow, METRICS_COLUMNS, METRICS_VERSION,
};
pub use persist::{load_agent_into, save_agent};
pub use train::{train, train_verbose, RunSummary, SkipCounters, Trainer};
