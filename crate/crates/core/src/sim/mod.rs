//! Synthetic agents, experiment orchestration and reporting.

mod agents;
mod experiment;
mod report;

pub use agents::{generate_agents, generate_batch, sample_agents, AgentGenConfig, AgentSpec, NOISE_CLIP};
pub use experiment::{
    calibrate, episode_agents, evaluate_coverage, fit_predictor, generate_dataset, run_experiment, run_pair, summarize,
    BoxPanel, Calibration, ControllerSummary, Coverage, EpisodePair, ExperimentConfig, InfeasibilityEvent,
    MetricsReport, PredictorConfig, PredictorKind, EPISODE_STREAM_BASE,
};
pub use report::{
    episode_lines, export_report, logs_from_lines, read_episode_lines, read_report, recompute_summaries, EpisodeLine,
    BOXES_JSONL, COVERAGE_CSV, EPISODES_JSONL, RADII_CSV, REPORT_JSON,
};
