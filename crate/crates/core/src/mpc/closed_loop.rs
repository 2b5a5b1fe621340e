//! Closed-loop episodes for the proposed and benchmark controllers.

use serde::{Deserialize, Serialize};

use super::{certify, shift_warm_start, solve_step, MpcProblem, MpcSolution, SolverConfig, Violation};
use crate::conformal::{inf_f64, RegionTable};
use crate::constraints::{CollisionConstraint, ConstraintSet};
use crate::dynamics::{bicycle_step, BicycleInput, MissionSpec};
use crate::error::{Error, Result};
use crate::predictor::{build_prediction_table, OneStepModel, PredictionTable};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    /// Keeps every region predicted so far and only needs one of them to hold.
    Proposed,
    /// Uses only the regions predicted at the current step.
    Benchmark,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Proposed => "proposed",
            ControllerKind::Benchmark => "benchmark",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(ControllerKind::Proposed),
            "benchmark" => Ok(ControllerKind::Benchmark),
            other => Err(Error::Config(format!("unknown controller {other:?}"))),
        }
    }
}

/// Everything a controller needs besides the agents it will meet.
#[derive(Debug, Clone)]
pub struct Controller {
    pub kind: ControllerKind,
    pub mission: MissionSpec,
    pub collision: CollisionConstraint,
    /// Joint radii for the proposed controller, per-pair radii for the benchmark.
    pub regions: RegionTable,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSolverInfo {
    pub starts: usize,
    pub iterations: usize,
}

/// One JSON-lines record. The last record of an episode (`t = T`) only carries
/// the final state and its realized clearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Whether the solve at `t` was certified; null on the final record.
    pub feasible: Option<bool>,
    /// Planned cost of the certified solution.
    pub cost: Option<f64>,
    /// Applied input `[φ, a]`.
    pub u: Option<[f64; 2]>,
    /// State `[p_x, p_y, θ, v]` at `t`.
    pub x: [f64; 4],
    /// Minimum signed clearance of the plan over its constraint sets.
    #[serde(with = "inf_f64::option")]
    pub min_clearance: Option<f64>,
    /// `c(p_t, Y_t)` for the true agent positions.
    #[serde(with = "inf_f64")]
    pub realized_c: f64,
    pub solver: Option<StepSolverInfo>,
    /// Whether the previous plan's shifted tail passed this step's certificate.
    pub warm_start_certified: Option<bool>,
    /// Zero input applied because the solve failed.
    pub fallback: bool,
    /// Most violated constraint of an infeasible solve.
    pub violation: Option<Violation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub controller: ControllerKind,
    pub seed: u64,
    /// Records for `t = 0..=T`.
    pub steps: Vec<StepRecord>,
    /// Constraint sets used at each solve, `sets[t][k]` for `τ = t+1+k`.
    pub sets: Vec<Vec<ConstraintSet>>,
    /// Realized `Σ_t w_p ‖p_t - p_target‖²` along the executed trajectory.
    pub realized_cost: f64,
    pub terminal_error: f64,
}

impl EpisodeLog {
    fn decisions(&self) -> impl Iterator<Item = &StepRecord> + '_ {
        self.steps.iter().filter(|s| s.feasible.is_some())
    }

    pub fn feasible_at_start(&self) -> bool {
        self.steps.first().and_then(|s| s.feasible) == Some(true)
    }

    pub fn feasible_throughout(&self) -> bool {
        self.decisions().all(|s| s.feasible == Some(true))
    }

    pub fn infeasible_steps(&self) -> Vec<usize> {
        self.decisions()
            .filter(|s| s.feasible == Some(false))
            .map(|s| s.t)
            .collect()
    }

    /// `c(x_t, Y_t) >= 0` at every realized step.
    pub fn realized_safe(&self) -> bool {
        self.steps.iter().all(|s| s.realized_c >= 0.0)
    }

    /// Every shifted warm start offered after a certified step passed its certificate.
    pub fn warm_starts_certified(&self) -> bool {
        self.steps.iter().all(|s| s.warm_start_certified != Some(false))
    }

    pub fn reached_target(&self, tolerance: f64) -> bool {
        self.terminal_error <= tolerance
    }

    /// Number of `(t, τ)` pairs where the safe set at `t+1` fails to contain the one at `t`.
    pub fn monotonicity_violations(&self) -> usize {
        self.sets
            .windows(2)
            .map(|w| {
                w[1].iter()
                    .filter(|later| {
                        w[0].iter()
                            .find(|earlier| earlier.tau == later.tau)
                            .is_some_and(|earlier| !later.relaxes(earlier))
                    })
                    .count()
            })
            .sum()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Runs one episode against `truth`, predicting with `model`. Predictions are
/// causal (each uses observations up to its own time), so they are computed once
/// up front.
pub fn run_closed_loop(
    controller: &Controller,
    model: &OneStepModel,
    truth: &Trajectory,
    seed: u64,
) -> Result<EpisodeLog> {
    let predictions = build_prediction_table(model, truth)?;
    run_with_predictions(controller, &predictions, truth, seed)
}

/// As [`run_closed_loop`], with the prediction table supplied by the caller.
pub fn run_with_predictions(
    controller: &Controller,
    predictions: &PredictionTable,
    truth: &Trajectory,
    seed: u64,
) -> Result<EpisodeLog> {
    let mission = &controller.mission;
    mission.validate()?;
    let horizon = mission.horizon;
    if truth.horizon() != horizon || predictions.horizon() != horizon || controller.regions.horizon() != horizon {
        return Err(Error::Contract(format!(
            "mission horizon {horizon}, agent trajectory {}, predictions {}, regions {} must agree",
            truth.horizon(),
            predictions.horizon(),
            controller.regions.horizon()
        )));
    }
    let agents = truth.agent_count();
    let collision = &controller.collision;
    let solver = SolverConfig {
        seed: controller.solver.seed ^ seed,
        ..controller.solver.clone()
    };

    // running[τ] is the accumulated proposed-controller set for τ.
    let mut running: Vec<ConstraintSet> = (0..=horizon)
        .map(|tau| ConstraintSet::unconstrained(0, tau, agents))
        .collect();
    let mut x = mission.initial;
    let mut prev: Option<MpcSolution> = None;
    let mut steps = Vec::with_capacity(horizon + 1);
    let mut sets_log = Vec::with_capacity(horizon);
    let mut realized_cost = 0.0;
    let stage = |p: [f64; 2]| {
        let dx = p[0] - mission.target[0];
        let dy = p[1] - mission.target[1];
        mission.weights.position * (dx * dx + dy * dy)
    };

    for t in 0..horizon {
        let row = predictions.from_time(t);
        let sets: Vec<ConstraintSet> = match controller.kind {
            ControllerKind::Proposed => {
                for (k, pred) in row.iter().enumerate() {
                    let tau = t + 1 + k;
                    running[tau].refine(collision, pred, controller.regions.radius(t, tau), t)?;
                    running[tau].t = t;
                }
                running[t + 1..].to_vec()
            }
            ControllerKind::Benchmark => row
                .iter()
                .enumerate()
                .map(|(k, pred)| {
                    let tau = t + 1 + k;
                    let mut set = ConstraintSet::unconstrained(t, tau, agents);
                    set.refine(collision, pred, controller.regions.radius(t, tau), t)?;
                    Ok(set)
                })
                .collect::<Result<_>>()?,
        };

        let warm_start = prev.as_ref().map(shift_warm_start);
        let problem = MpcProblem {
            t,
            state: x,
            mission,
            constraints: &sets,
            warm_start,
        };
        let warm_ok = problem
            .warm_start
            .as_ref()
            .map(|w| certify(&problem, &w.states, &w.inputs).passes(solver.feas_tol));

        let realized_c = collision.evaluate_c(x.position(), truth.state(t));
        realized_cost += stage(x.position());
        let record = match solve_step(&problem, &solver)? {
            Ok(sol) => {
                let u = sol.inputs[0];
                let rec = StepRecord {
                    t,
                    feasible: Some(true),
                    cost: Some(sol.cost),
                    u: Some([u.phi, u.a]),
                    x: x.to_array(),
                    min_clearance: Some(sol.min_clearance(&sets)),
                    realized_c,
                    solver: Some(StepSolverInfo {
                        starts: sol.diagnostics.starts,
                        iterations: sol.diagnostics.iterations,
                    }),
                    warm_start_certified: warm_ok,
                    fallback: false,
                    violation: None,
                };
                prev = Some(sol);
                rec
            }
            Err(report) => {
                prev = None;
                StepRecord {
                    t,
                    feasible: Some(false),
                    cost: None,
                    u: Some([0.0, 0.0]),
                    x: x.to_array(),
                    min_clearance: None,
                    realized_c,
                    solver: Some(StepSolverInfo {
                        starts: report.diagnostics.starts,
                        iterations: report.diagnostics.iterations,
                    }),
                    warm_start_certified: warm_ok,
                    fallback: true,
                    violation: report.worst,
                }
            }
        };
        let u = record
            .u
            .map(|[phi, a]| BicycleInput::new(phi, a))
            .unwrap_or(BicycleInput::ZERO);
        x = bicycle_step(&x, &u, &mission.params);
        steps.push(record);
        sets_log.push(sets);
    }

    realized_cost += stage(x.position());
    steps.push(StepRecord {
        t: horizon,
        feasible: None,
        cost: None,
        u: None,
        x: x.to_array(),
        min_clearance: None,
        realized_c: collision.evaluate_c(x.position(), truth.state(horizon)),
        solver: None,
        warm_start_certified: None,
        fallback: false,
        violation: None,
    });

    Ok(EpisodeLog {
        controller: controller.kind,
        seed,
        steps,
        sets: sets_log,
        realized_cost,
        terminal_error: mission.terminal_error(&x),
    })
}
