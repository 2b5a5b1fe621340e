//! Kinematic bicycle model, input/state constraint sets and the mission cost.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic discrete-time system `x_{t+1} = f(x_t, u_t)` with a planar position.
pub trait Dynamics {
    type State: Clone;
    type Input: Clone;

    fn step(&self, x: &Self::State, u: &Self::Input) -> Self::State;

    fn position(x: &Self::State) -> [f64; 2];
}

/// Rear-axle position (m), heading (rad, unwrapped) and speed (m/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BicycleState {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
    pub v: f64,
}

impl BicycleState {
    pub fn new(px: f64, py: f64, theta: f64, v: f64) -> Self {
        BicycleState { px, py, theta, v }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.px, self.py]
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.px, self.py, self.theta, self.v]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BicycleState::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Steering angle (rad) and acceleration (m/s²).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BicycleInput {
    pub phi: f64,
    pub a: f64,
}

impl BicycleInput {
    pub const ZERO: BicycleInput = BicycleInput { phi: 0.0, a: 0.0 };

    pub fn new(phi: f64, a: f64) -> Self {
        BicycleInput { phi, a }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BicycleParams {
    /// Wheelbase (m).
    pub length: f64,
    /// Sampling time (s).
    pub dt: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        BicycleParams {
            length: 0.5,
            dt: 1.0 / 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bicycle {
    pub params: BicycleParams,
}

impl Dynamics for Bicycle {
    type State = BicycleState;
    type Input = BicycleInput;

    fn step(&self, x: &BicycleState, u: &BicycleInput) -> BicycleState {
        bicycle_step(x, u, &self.params)
    }

    fn position(x: &BicycleState) -> [f64; 2] {
        x.position()
    }
}

/// One step of the kinematic bicycle:
///
/// ```text
/// p_x' = p_x + Δ v cos θ
/// p_y' = p_y + Δ v sin θ
/// θ'   = θ + Δ (v / ℓ) tan φ
/// v'   = v + Δ a
/// ```
pub fn bicycle_step(x: &BicycleState, u: &BicycleInput, params: &BicycleParams) -> BicycleState {
    let dt = params.dt;
    BicycleState {
        px: x.px + dt * x.v * x.theta.cos(),
        py: x.py + dt * x.v * x.theta.sin(),
        theta: x.theta + dt * (x.v / params.length) * u.phi.tan(),
        v: x.v + dt * u.a,
    }
}

/// States `x0, f(x0, u_0), ...`, one more than the number of inputs.
pub fn rollout(x0: &BicycleState, inputs: &[BicycleInput], params: &BicycleParams) -> Vec<BicycleState> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*x0);
    for u in inputs {
        let next = bicycle_step(states.last().unwrap(), u, params);
        states.push(next);
    }
    states
}

/// Box constraint on the inputs, symmetric around zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBounds {
    pub steer_max: f64,
    pub accel_max: f64,
}

impl Default for InputBounds {
    fn default() -> Self {
        InputBounds {
            steer_max: PI / 6.0,
            accel_max: 5.0,
        }
    }
}

impl InputBounds {
    pub fn clamp(&self, u: BicycleInput) -> BicycleInput {
        BicycleInput {
            phi: u.phi.clamp(-self.steer_max, self.steer_max),
            a: u.a.clamp(-self.accel_max, self.accel_max),
        }
    }

    /// Largest amount by which `u` leaves the box (0 inside).
    pub fn violation(&self, u: &BicycleInput) -> f64 {
        let v = (u.phi.abs() - self.steer_max).max(u.a.abs() - self.accel_max).max(0.0);
        if u.phi.is_nan() || u.a.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Optional box on `[p_x, p_y, θ, v]` imposed on every predicted state after the current one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateBounds {
    pub lower: [f64; 4],
    pub upper: [f64; 4],
}

impl StateBounds {
    pub fn violation(&self, x: &BicycleState) -> f64 {
        x.to_array()
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (lo, hi))| {
                if v.is_nan() {
                    f64::INFINITY
                } else {
                    (lo - v).max(v - hi).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    /// Weight on `‖p_t - p_target‖²`, applied at every `t = 0..=T`.
    pub position: f64,
    /// Weight on `‖u_t‖²`.
    #[serde(default)]
    pub input: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            position: 1.0,
            input: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissionSpec {
    pub horizon: usize,
    pub initial: BicycleState,
    pub target: [f64; 2],
    /// Terminal set `‖p_T - p_target‖_∞ <= terminal_tolerance`.
    pub terminal_tolerance: f64,
    #[serde(default)]
    pub params: BicycleParams,
    #[serde(default)]
    pub input_bounds: InputBounds,
    #[serde(default)]
    pub state_bounds: Option<StateBounds>,
    #[serde(default)]
    pub weights: CostWeights,
}

impl MissionSpec {
    /// Robot navigation mission: start at (3.5, -3) heading at the target,
    /// at rest, and reach (-1.8, 1) within 0.05 m after 20 steps.
    pub fn case_study() -> Self {
        let start = [3.5f64, -3.0];
        let target = [-1.8, 1.0];
        let heading = (target[1] - start[1]).atan2(target[0] - start[0]);
        MissionSpec {
            horizon: 20,
            initial: BicycleState::new(start[0], start[1], heading, 0.0),
            target,
            terminal_tolerance: 0.05,
            params: BicycleParams::default(),
            input_bounds: InputBounds::default(),
            state_bounds: None,
            weights: CostWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let b = &self.input_bounds;
        let checks = [
            (self.horizon >= 1, "horizon must be >= 1"),
            (p.length > 0.0 && p.length.is_finite(), "length must be positive"),
            (p.dt > 0.0 && p.dt.is_finite(), "sampling time must be positive"),
            (
                b.steer_max >= 0.0 && b.steer_max < PI / 2.0,
                "steer_max must lie in [0, pi/2)",
            ),
            (b.accel_max >= 0.0 && b.accel_max.is_finite(), "accel_max must be >= 0"),
            (self.terminal_tolerance >= 0.0, "terminal_tolerance must be >= 0"),
            (self.initial.is_finite(), "initial state must be finite"),
            (self.target.iter().all(|v| v.is_finite()), "target must be finite"),
            (
                self.weights.position >= 0.0 && self.weights.input >= 0.0,
                "cost weights must be >= 0",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(format!("mission: {msg}"))),
            None => Ok(()),
        }
    }

    pub fn terminal_error(&self, x: &BicycleState) -> f64 {
        (x.px - self.target[0]).abs().max((x.py - self.target[1]).abs())
    }
}

/// `Σ_{t=0}^{T} w_p ‖p_t - p_target‖² + Σ_{t=0}^{T-1} w_u ‖u_t‖²`.
pub fn evaluate_cost(states: &[BicycleState], inputs: &[BicycleInput], mission: &MissionSpec) -> Result<f64> {
    if states.len() != inputs.len() + 1 {
        return Err(Error::Contract(format!(
            "cost needs one more state than inputs, got {} states and {} inputs",
            states.len(),
            inputs.len()
        )));
    }
    let w = &mission.weights;
    let position: f64 = states
        .iter()
        .map(|x| {
            let dx = x.px - mission.target[0];
            let dy = x.py - mission.target[1];
            dx * dx + dy * dy
        })
        .sum();
    let effort: f64 = inputs.iter().map(|u| u.phi * u.phi + u.a * u.a).sum();
    Ok(w.position * position + w.input * effort)
}
