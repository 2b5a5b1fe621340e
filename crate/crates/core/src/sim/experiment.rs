//! End-to-end pipeline: data, predictor, calibration, coverage and paired episodes.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::agents::{generate_batch, AgentGenConfig};
use crate::conformal::{
    calibrate_benchmark, calibrate_joint, check_membership, compute_normalization, compute_scores, quantile_index,
    BenchmarkDeltaSplit, QuantileRank, RegionTable,
};
use crate::constraints::{BoxExport, CollisionConstraint};
use crate::dynamics::MissionSpec;
use crate::error::{Error, Result};
use crate::mpc::{run_with_predictions, Controller, ControllerKind, EpisodeLog, SolverConfig};
use crate::norm::Norm;
use crate::predictor::{build_prediction_table, fit_linear_one_step, OneStepModel, PredictionTable, DEFAULT_RIDGE};
use crate::trajectory::{split_dataset, Dataset, RngSeed, Trajectory};

/// Episode agent trajectories are drawn from generator streams starting here,
/// well clear of the dataset's streams.
pub const EPISODE_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    #[default]
    LinearAffine,
    ConstantVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            kind: PredictorKind::LinearAffine,
            ridge: DEFAULT_RIDGE,
        }
    }
}

fn default_panels() -> Vec<usize> {
    vec![0, 2, 10, 18]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for the split, the episode draws and the solver's random restarts.
    pub seed: u64,
    pub n_train: usize,
    pub n_calib: usize,
    pub n_test: usize,
    pub delta: f64,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub benchmark_delta_split: BenchmarkDeltaSplit,
    pub mission: MissionSpec,
    /// Agent generator; its horizon must equal the mission's.
    pub agents: AgentGenConfig,
    pub safety_margin: f64,
    pub episodes: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Times `t` at which the `τ = T` constraint sets of the first episode are exported.
    #[serde(default = "default_panels")]
    pub panels: Vec<usize>,
}

impl ExperimentConfig {
    pub fn case_study(seed: u64) -> Self {
        let mission = MissionSpec::case_study();
        ExperimentConfig {
            seed,
            n_train: 2000,
            n_calib: 610,
            n_test: 1000,
            delta: 0.1,
            norm: Norm::Infinity,
            predictor: PredictorConfig::default(),
            benchmark_delta_split: BenchmarkDeltaSplit::Uniform,
            agents: AgentGenConfig::case_study(mission.horizon, seed),
            mission,
            safety_margin: 0.6,
            episodes: 500,
            solver: SolverConfig::default(),
            panels: default_panels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.n_train == 0 || self.n_calib == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train, n_calib and n_test must be >= 1".into()));
        }
        if !(self.predictor.ridge >= 0.0 && self.predictor.ridge.is_finite()) {
            return Err(Error::Config("predictor.ridge must be finite and >= 0".into()));
        }
        self.mission.validate()?;
        self.agents.validate()?;
        if self.agents.horizon != self.mission.horizon {
            return Err(Error::Config(format!(
                "agent horizon {} differs from mission horizon {}",
                self.agents.horizon, self.mission.horizon
            )));
        }
        if let Some(&t) = self.panels.iter().find(|&&t| t >= self.mission.horizon) {
            return Err(Error::Config(format!("panel time {t} is not before the horizon")));
        }
        self.collision()?;
        Ok(())
    }

    pub fn collision(&self) -> Result<CollisionConstraint> {
        CollisionConstraint::min_distance(self.safety_margin, Norm::Infinity)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Draws the full dataset and splits it.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let total = cfg.n_train + cfg.n_calib + cfg.n_test;
    let trajs = generate_batch(&cfg.agents, 0, total);
    split_dataset(trajs, cfg.n_train, cfg.n_calib, cfg.n_test, RngSeed(cfg.seed))
}

pub fn fit_predictor(cfg: &PredictorConfig, dataset: &Dataset) -> Result<OneStepModel> {
    match cfg.kind {
        PredictorKind::ConstantVelocity => Ok(OneStepModel::ConstantVelocity),
        PredictorKind::LinearAffine => {
            let train: Vec<&Trajectory> = dataset.train().collect();
            fit_linear_one_step(&train, cfg.ridge)
        }
    }
}

fn tables(model: &OneStepModel, trajs: &[&Trajectory]) -> Result<Vec<PredictionTable>> {
    trajs.par_iter().map(|t| build_prediction_table(model, t)).collect()
}

/// Both calibrated region tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub rank: QuantileRank,
    pub joint: RegionTable,
    pub benchmark: RegionTable,
}

/// Normalises on the training split, scores the calibration split and builds
/// the joint and per-pair tables. An infinite joint quantile is an error.
pub fn calibrate(
    dataset: &Dataset,
    model: &OneStepModel,
    delta: f64,
    norm: Norm,
    split: BenchmarkDeltaSplit,
) -> Result<Calibration> {
    let train: Vec<&Trajectory> = dataset.train().collect();
    let calib: Vec<&Trajectory> = dataset.calib().collect();
    let train_tables = tables(model, &train)?;
    let calib_tables = tables(model, &calib)?;
    let train_obs: Vec<_> = train.iter().copied().zip(&train_tables).collect();
    let calib_obs: Vec<_> = calib.iter().copied().zip(&calib_tables).collect();
    let sigma = compute_normalization(&train_obs, norm)?;
    let scores = compute_scores(&calib_obs, &sigma, norm)?;
    let rank = quantile_index(scores.len(), delta)?;
    if !rank.is_finite() {
        return Err(Error::CalibrationInfeasible {
            rank: rank.k,
            n_calib: rank.n,
            required: QuantileRank::required_calibration_size(delta),
            delta,
        });
    }
    let joint = calibrate_joint(&scores, &sigma, delta)?;
    let benchmark = calibrate_benchmark(&calib_obs, delta, dataset.horizon(), split, norm)?;
    Ok(Calibration { rank, joint, benchmark })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub inside: usize,
    pub total: usize,
    #[serde(with = "crate::conformal::inf_f64")]
    pub fraction: f64,
}

impl Coverage {
    pub fn new(inside: usize, total: usize) -> Self {
        let fraction = if total == 0 {
            f64::NAN
        } else {
            inside as f64 / total as f64
        };
        Coverage {
            inside,
            total,
            fraction,
        }
    }

    pub fn violations(&self) -> usize {
        self.total - self.inside
    }
}

/// Fraction of `trajs` lying inside every region of `regions`.
pub fn evaluate_coverage(
    regions: &RegionTable,
    model: &OneStepModel,
    trajs: &[&Trajectory],
    norm: Norm,
) -> Result<Coverage> {
    let inside = trajs
        .par_iter()
        .map(|t| Ok(check_membership(regions, &build_prediction_table(model, t)?, t, norm).inside as usize))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(Coverage::new(inside, trajs.len()))
}

/// Closed-loop aggregates of one controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSummary {
    pub episodes: usize,
    pub feasible_at_start: usize,
    pub feasible_throughout: usize,
    /// Episodes feasible at `t = 0` in which every later step was feasible.
    pub recursively_feasible: usize,
    /// Episodes where every shifted warm start passed its certificate.
    pub warm_starts_certified: usize,
    pub realized_safe: usize,
    pub reached_target: usize,
    pub monotonicity_violations: usize,
    /// Mean realized cost over all episodes.
    #[serde(with = "crate::conformal::inf_f64")]
    pub mean_cost: f64,
}

impl ControllerSummary {
    pub fn from_logs<'a>(logs: impl IntoIterator<Item = &'a EpisodeLog>, tolerance: f64) -> Self {
        let mut s = ControllerSummary {
            episodes: 0,
            feasible_at_start: 0,
            feasible_throughout: 0,
            recursively_feasible: 0,
            warm_starts_certified: 0,
            realized_safe: 0,
            reached_target: 0,
            monotonicity_violations: 0,
            mean_cost: 0.0,
        };
        let mut cost = 0.0;
        for log in logs {
            s.episodes += 1;
            let start = log.feasible_at_start();
            let all = log.feasible_throughout();
            s.feasible_at_start += start as usize;
            s.feasible_throughout += all as usize;
            s.recursively_feasible += (start && all) as usize;
            s.warm_starts_certified += log.warm_starts_certified() as usize;
            s.realized_safe += log.realized_safe() as usize;
            s.reached_target += log.reached_target(tolerance) as usize;
            s.monotonicity_violations += log.monotonicity_violations();
            cost += log.realized_cost;
        }
        s.mean_cost = if s.episodes == 0 {
            f64::NAN
        } else {
            cost / s.episodes as f64
        };
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityEvent {
    pub controller: ControllerKind,
    pub episode: usize,
    pub seed: u64,
    pub t: usize,
}

/// Constraint boxes of one controller at one `(t, τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPanel {
    pub controller: ControllerKind,
    pub episode: usize,
    pub t: usize,
    pub tau: usize,
    pub boxes: Vec<BoxExport>,
}

/// Both controllers' logs for one agent trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePair {
    pub episode: usize,
    pub seed: u64,
    pub proposed: EpisodeLog,
    pub benchmark: EpisodeLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub rank: QuantileRank,
    #[serde(with = "crate::conformal::inf_f64")]
    pub quantile: f64,
    pub joint_coverage: Coverage,
    pub benchmark_coverage: Coverage,
    pub joint_regions: RegionTable,
    pub benchmark_regions: RegionTable,
    pub summaries: BTreeMap<String, ControllerSummary>,
    pub infeasibility_events: Vec<InfeasibilityEvent>,
    pub panels: Vec<BoxPanel>,
    /// Full logs; written to `episodes.jsonl`, not to `report.json`.
    #[serde(skip)]
    pub episodes: Vec<EpisodePair>,
}

impl MetricsReport {
    pub fn summary(&self, kind: ControllerKind) -> &ControllerSummary {
        &self.summaries[kind.name()]
    }
}

/// Runs both controllers on the same trajectory with the same predictions.
pub fn run_pair(
    cfg: &ExperimentConfig,
    model: &OneStepModel,
    calibration: &Calibration,
    truth: &Trajectory,
    episode: usize,
) -> Result<EpisodePair> {
    let predictions = build_prediction_table(model, truth)?;
    let seed = cfg.seed.wrapping_add(episode as u64);
    let make = |kind, regions: &RegionTable| Controller {
        kind,
        mission: cfg.mission.clone(),
        collision: cfg.collision().expect("validated"),
        regions: regions.clone(),
        solver: cfg.solver.clone(),
    };
    let proposed = run_with_predictions(
        &make(ControllerKind::Proposed, &calibration.joint),
        &predictions,
        truth,
        seed,
    )?;
    let benchmark = run_with_predictions(
        &make(ControllerKind::Benchmark, &calibration.benchmark),
        &predictions,
        truth,
        seed,
    )?;
    Ok(EpisodePair {
        episode,
        seed,
        proposed,
        benchmark,
    })
}

/// Agent trajectory of closed-loop episode `e`.
pub fn episode_agents(cfg: &ExperimentConfig, episode: usize) -> Trajectory {
    generate_batch(&cfg.agents, EPISODE_STREAM_BASE + episode as u64, 1).remove(0)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let dataset = generate_dataset(cfg)?;
    let model = fit_predictor(&cfg.predictor, &dataset)?;
    let calibration = calibrate(&dataset, &model, cfg.delta, cfg.norm, cfg.benchmark_delta_split)?;
    let test: Vec<&Trajectory> = dataset.test().collect();
    let joint_coverage = evaluate_coverage(&calibration.joint, &model, &test, cfg.norm)?;
    let benchmark_coverage = evaluate_coverage(&calibration.benchmark, &model, &test, cfg.norm)?;

    let mut episodes: Vec<EpisodePair> = (0..cfg.episodes)
        .into_par_iter()
        .map(|e| run_pair(cfg, &model, &calibration, &episode_agents(cfg, e), e))
        .collect::<Result<_>>()?;

    Ok(summarize(
        cfg,
        calibration,
        joint_coverage,
        benchmark_coverage,
        &mut episodes,
        true,
    ))
}

/// Aggregates the episode logs. When `drop_sets` is set the per-step
/// constraint sets are released after the panels are taken.
pub fn summarize(
    cfg: &ExperimentConfig,
    calibration: Calibration,
    joint_coverage: Coverage,
    benchmark_coverage: Coverage,
    episodes: &mut Vec<EpisodePair>,
    drop_sets: bool,
) -> MetricsReport {
    let tol = cfg.mission.terminal_tolerance + cfg.solver.feas_tol;
    let mut summaries = BTreeMap::new();
    summaries.insert(
        ControllerKind::Proposed.name().to_string(),
        ControllerSummary::from_logs(episodes.iter().map(|p| &p.proposed), tol),
    );
    summaries.insert(
        ControllerKind::Benchmark.name().to_string(),
        ControllerSummary::from_logs(episodes.iter().map(|p| &p.benchmark), tol),
    );
    let infeasibility_events = episodes
        .iter()
        .flat_map(|p| {
            [&p.proposed, &p.benchmark].into_iter().flat_map(move |log| {
                log.infeasible_steps().into_iter().map(move |t| InfeasibilityEvent {
                    controller: log.controller,
                    episode: p.episode,
                    seed: p.seed,
                    t,
                })
            })
        })
        .collect();

    let horizon = cfg.mission.horizon;
    let panels = episodes
        .first()
        .map(|p| {
            [&p.proposed, &p.benchmark]
                .into_iter()
                .flat_map(|log| {
                    cfg.panels.iter().filter_map(move |&t| {
                        let set = log.sets.get(t)?.iter().find(|s| s.tau == horizon)?;
                        Some(BoxPanel {
                            controller: log.controller,
                            episode: p.episode,
                            t,
                            tau: horizon,
                            boxes: set.export(),
                        })
                    })
                })
                .collect()
        })
        .unwrap_or_default();

    if drop_sets {
        for p in episodes.iter_mut() {
            p.proposed.sets = Vec::new();
            p.benchmark.sets = Vec::new();
        }
    }

    MetricsReport {
        config: cfg.clone(),
        rank: calibration.rank,
        quantile: calibration.joint.quantile.unwrap_or(f64::INFINITY),
        joint_coverage,
        benchmark_coverage,
        joint_regions: calibration.joint,
        benchmark_regions: calibration.benchmark,
        summaries,
        infeasibility_events,
        panels,
        episodes: std::mem::take(episodes),
    }
}
