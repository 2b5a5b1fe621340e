//! Goal-directed planar agents with Gaussian velocity noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{JointState, RngSeed, Trajectory};

/// Noise draws are clipped at this many standard deviations.
pub const NOISE_CLIP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub start_mean: [f64; 2],
    /// Per-axis standard deviation of the start position (m).
    pub start_std: f64,
    pub goal: [f64; 2],
    /// Per-axis standard deviation of the goal, drawn once per trajectory (m).
    #[serde(default)]
    pub goal_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentGenConfig {
    pub agents: Vec<AgentSpec>,
    /// Nominal distance covered per step (m).
    pub speed: f64,
    /// Per-axis standard deviation of the velocity noise (m per step).
    pub noise_std: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl AgentGenConfig {
    /// Three pedestrians around the robot's corridor: one crossing it head-on,
    /// one walking past the target and one strolling on the far side.
    pub fn case_study(horizon: usize, seed: u64) -> Self {
        AgentGenConfig {
            agents: vec![
                AgentSpec {
                    start_mean: [-0.3, -2.4],
                    start_std: 0.2,
                    goal: [2.7, 1.6],
                    goal_std: 0.25,
                },
                AgentSpec {
                    start_mean: [-4.6, 3.0],
                    start_std: 0.2,
                    goal: [1.4, 3.0],
                    goal_std: 0.25,
                },
                AgentSpec {
                    start_mean: [4.0, 1.5],
                    start_std: 0.2,
                    goal: [1.5, 3.5],
                    goal_std: 0.25,
                },
            ],
            speed: 0.15,
            noise_std: 0.005,
            horizon,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |p: &[f64; 2]| p.iter().all(|v| v.is_finite());
        if self.horizon == 0 {
            return Err(Error::Config("agents: horizon must be >= 1".into()));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) || !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(
                "agents: speed and noise_std must be finite and >= 0".into(),
            ));
        }
        for (j, a) in self.agents.iter().enumerate() {
            let std_ok = |s: f64| s >= 0.0 && s.is_finite();
            if !finite(&a.start_mean) || !finite(&a.goal) || !std_ok(a.start_std) || !std_ok(a.goal_std) {
                return Err(Error::Config(format!(
                    "agents[{j}]: positions must be finite and deviations >= 0"
                )));
            }
        }
        Ok(())
    }
}

fn clipped(rng: &mut impl Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    std * z.clamp(-NOISE_CLIP, NOISE_CLIP)
}

/// Draws one joint trajectory `Y_0..Y_T` from `rng`.
pub fn sample_agents(cfg: &AgentGenConfig, rng: &mut impl Rng) -> Trajectory {
    let mut positions: Vec<[f64; 2]> = cfg
        .agents
        .iter()
        .map(|a| {
            [
                a.start_mean[0] + clipped(rng, a.start_std),
                a.start_mean[1] + clipped(rng, a.start_std),
            ]
        })
        .collect();
    let goals: Vec<[f64; 2]> = cfg
        .agents
        .iter()
        .map(|a| {
            [
                a.goal[0] + clipped(rng, a.goal_std),
                a.goal[1] + clipped(rng, a.goal_std),
            ]
        })
        .collect();
    let mut states = Vec::with_capacity(cfg.horizon + 1);
    states.push(JointState::from_agents(&positions));
    for _ in 0..cfg.horizon {
        for (p, goal) in positions.iter_mut().zip(&goals) {
            let d = [goal[0] - p[0], goal[1] - p[1]];
            let dist = d[0].hypot(d[1]);
            let step = if dist <= cfg.speed {
                d
            } else {
                [cfg.speed * d[0] / dist, cfg.speed * d[1] / dist]
            };
            p[0] += step[0] + clipped(rng, cfg.noise_std);
            p[1] += step[1] + clipped(rng, cfg.noise_std);
        }
        states.push(JointState::from_agents(&positions));
    }
    Trajectory::new(states).expect("generated states share one shape")
}

/// One trajectory from `cfg.seed`.
pub fn generate_agents(cfg: &AgentGenConfig) -> Trajectory {
    sample_agents(cfg, &mut RngSeed(cfg.seed).rng())
}

/// Trajectories `first..first+count`, trajectory `i` drawn from stream `i` of
/// `cfg.seed`, so any index can be regenerated on its own.
pub fn generate_batch(cfg: &AgentGenConfig, first: u64, count: usize) -> Vec<Trajectory> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| sample_agents(cfg, &mut RngSeed(cfg.seed).stream(first + i)))
        .collect()
}
