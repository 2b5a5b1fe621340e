//! Shrinking-horizon MPC over the bicycle model with relaxed agent constraints.
//!
//! Every solve spans from the current time `t` to the mission end `T`. The
//! returned solution carries a certificate computed by re-evaluating each
//! constraint on the rolled-out trajectory, independent of the optimiser.

mod closed_loop;
mod solver;

pub use closed_loop::{
    run_closed_loop, run_with_predictions, Controller, ControllerKind, EpisodeLog, StepRecord, StepSolverInfo,
};
pub use solver::SolverConfig;

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::dynamics::{bicycle_step, evaluate_cost, rollout, BicycleInput, BicycleState, MissionSpec};
use crate::error::{Error, Result};

/// Tolerance on every certified constraint.
pub const FEAS_TOL: f64 = 1e-6;

/// A previous solution's tail, used to start the next solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub states: Vec<BicycleState>,
    pub inputs: Vec<BicycleInput>,
}

/// Optimisation problem solved at time `t`.
#[derive(Debug, Clone)]
pub struct MpcProblem<'a> {
    pub t: usize,
    pub state: BicycleState,
    pub mission: &'a MissionSpec,
    /// Safe sets for `τ = t+1..=T`, in order.
    pub constraints: &'a [ConstraintSet],
    pub warm_start: Option<WarmStart>,
}

impl MpcProblem<'_> {
    pub fn steps(&self) -> usize {
        self.mission.horizon - self.t
    }

    fn check(&self) -> Result<()> {
        if self.t >= self.mission.horizon {
            return Err(Error::Contract(format!(
                "no decisions left at t = {} with horizon {}",
                self.t, self.mission.horizon
            )));
        }
        let expected = self.steps();
        if self.constraints.len() != expected
            || self
                .constraints
                .iter()
                .enumerate()
                .any(|(k, c)| c.tau != self.t + 1 + k)
        {
            return Err(Error::Contract(format!(
                "expected constraint sets for tau = {}..={}",
                self.t + 1,
                self.mission.horizon
            )));
        }
        if let Some(w) = &self.warm_start {
            if w.inputs.len() != expected {
                return Err(Error::Contract(format!(
                    "warm start has {} inputs, problem needs {expected}",
                    w.inputs.len()
                )));
            }
        }
        Ok(())
    }
}

/// Which constraint family a violation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Dynamics,
    Input,
    State,
    Terminal,
    Clearance,
}

/// A single most-violated constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ConstraintKind,
    pub tau: usize,
    /// Set for clearance violations.
    pub agent: Option<usize>,
    #[serde(with = "crate::conformal::inf_f64")]
    pub amount: f64,
}

/// Exact re-evaluation of every constraint of a candidate; entries are the
/// largest violation in each family (0 when satisfied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub dynamics: f64,
    pub inputs: f64,
    pub states: f64,
    pub terminal: f64,
    pub clearance: f64,
    pub worst: Option<Violation>,
}

impl Certificate {
    pub fn max_violation(&self) -> f64 {
        [self.dynamics, self.inputs, self.states, self.terminal, self.clearance]
            .into_iter()
            .fold(
                0.0,
                |m: f64, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) },
            )
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_violation() <= tol
    }
}

/// Certifies the trajectory `states` (at times `t..=T`) driven by `inputs`.
pub fn certify(problem: &MpcProblem<'_>, states: &[BicycleState], inputs: &[BicycleInput]) -> Certificate {
    let mission = problem.mission;
    let t = problem.t;
    let mut worst: Option<Violation> = None;
    let mut note = |kind, tau, agent, amount: f64| {
        if amount > 0.0 && worst.is_none_or(|w| amount > w.amount) || amount.is_nan() {
            worst = Some(Violation {
                kind,
                tau,
                agent,
                amount,
            });
        }
    };

    let mut dynamics = if states.len() == inputs.len() + 1 && inputs.len() == problem.steps() {
        0.0
    } else {
        f64::INFINITY
    };
    if dynamics == 0.0 {
        let diff = |a: &BicycleState, b: &BicycleState| {
            a.to_array()
                .iter()
                .zip(b.to_array())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        dynamics = diff(&states[0], &problem.state);
        for (k, u) in inputs.iter().enumerate() {
            let residual = diff(&states[k + 1], &bicycle_step(&states[k], u, &mission.params));
            note(ConstraintKind::Dynamics, t + k + 1, None, residual);
            dynamics = dynamics.max(residual);
        }
    } else {
        note(ConstraintKind::Dynamics, t, None, f64::INFINITY);
    }
    if dynamics.is_infinite() {
        return Certificate {
            dynamics,
            inputs: 0.0,
            states: 0.0,
            terminal: 0.0,
            clearance: 0.0,
            worst,
        };
    }

    let mut input_v = 0.0f64;
    for (k, u) in inputs.iter().enumerate() {
        let v = mission.input_bounds.violation(u);
        note(ConstraintKind::Input, t + k, None, v);
        input_v = input_v.max(v);
    }

    let mut state_v = 0.0f64;
    if let Some(bounds) = &mission.state_bounds {
        for (k, x) in states.iter().enumerate().skip(1) {
            let v = bounds.violation(x);
            note(ConstraintKind::State, t + k, None, v);
            state_v = state_v.max(v);
        }
    }

    let terminal_state = states.last().unwrap();
    let terminal = (mission.terminal_error(terminal_state) - mission.terminal_tolerance).max(0.0);
    note(ConstraintKind::Terminal, mission.horizon, None, terminal);

    let mut clearance = 0.0f64;
    for (set, x) in problem.constraints.iter().zip(&states[1..]) {
        let p = x.position();
        for (j, b) in set.boxes.iter().enumerate() {
            if b.is_empty() {
                continue;
            }
            let v = (-b.signed_distance(p)).max(0.0);
            note(ConstraintKind::Clearance, set.tau, Some(j), v);
            clearance = clearance.max(v);
        }
    }

    Certificate {
        dynamics,
        inputs: input_v,
        states: state_v,
        terminal: if terminal_state.is_finite() {
            terminal
        } else {
            f64::INFINITY
        },
        clearance,
        worst,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    /// Starting points optimised (warm start, heuristic and random restarts).
    pub starts: usize,
    /// Random restarts among `starts`.
    pub restarts: usize,
    /// Inner descent iterations summed over all starts.
    pub iterations: usize,
    /// Index of the selected candidate in evaluation order.
    pub selected: usize,
}

/// Certified solution of one MPC solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub t: usize,
    /// `x_{t|t}, ..., x_{T|t}`.
    pub states: Vec<BicycleState>,
    /// `u_{t|t}, ..., u_{T-1|t}`.
    pub inputs: Vec<BicycleInput>,
    pub cost: f64,
    pub certificate: Certificate,
    pub diagnostics: SolverDiagnostics,
}

impl MpcSolution {
    /// Minimum signed clearance of the planned positions over `τ = t+1..=T`.
    pub fn min_clearance(&self, constraints: &[ConstraintSet]) -> f64 {
        constraints
            .iter()
            .zip(&self.states[1..])
            .map(|(set, x)| set.signed_clearance(x.position()))
            .fold(f64::INFINITY, f64::min)
    }
}

/// No candidate met the certificate tolerance.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("MPC infeasible at t = {t}: best candidate violates by {violation:e} ({worst:?})")]
pub struct InfeasibleReport {
    pub t: usize,
    /// Largest violation of the least-violating candidate.
    pub violation: f64,
    pub worst: Option<Violation>,
    pub diagnostics: SolverDiagnostics,
}

/// Drops the first input and state of `prev`: the candidate for time `t+1`.
pub fn shift_warm_start(prev: &MpcSolution) -> WarmStart {
    WarmStart {
        states: prev.states[1..].to_vec(),
        inputs: prev.inputs[1..].to_vec(),
    }
}

/// Candidate trajectory, re-rolled from its inputs.
pub(crate) fn candidate(
    problem: &MpcProblem<'_>,
    inputs: Vec<BicycleInput>,
) -> (Vec<BicycleState>, Vec<BicycleInput>, f64, Certificate) {
    let states = rollout(&problem.state, &inputs, &problem.mission.params);
    let cost = evaluate_cost(&states, &inputs, problem.mission).unwrap_or(f64::INFINITY);
    let cert = certify(problem, &states, &inputs);
    (states, inputs, cost, cert)
}

/// Solves the MPC problem at `problem.t`, returning the cheapest certified
/// candidate among the warm start and the optimised starting points.
pub fn solve_step(
    problem: &MpcProblem<'_>,
    cfg: &SolverConfig,
) -> Result<std::result::Result<MpcSolution, InfeasibleReport>> {
    problem.check()?;
    problem.mission.validate()?;
    Ok(solver::solve(problem, cfg))
}
