//! Penalty / multi-start single-shooting solver.
//!
//! Inputs are scaled to `[-1, 1]` by the input box. Each start is refined by a
//! spectral projected-gradient method on `cost + μ Σ max(0, g)²` with μ raised
//! geometrically until the rolled-out trajectory passes the exact certificate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{candidate, Certificate, InfeasibleReport, MpcProblem, MpcSolution, SolverDiagnostics, FEAS_TOL};
use crate::dynamics::{BicycleInput, BicycleState};
use crate::trajectory::RngSeed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub feas_tol: f64,
    /// Random restarts tried when neither the warm start nor the heuristic start
    /// yields a certified candidate.
    pub random_starts: usize,
    pub max_inner_iterations: usize,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Slack the penalty asks for beyond each clearance and terminal bound.
    pub internal_margin: f64,
    pub seed: u64,
    /// Run every random restart even after a certified candidate is found.
    pub always_restart: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            feas_tol: FEAS_TOL,
            random_starts: 8,
            max_inner_iterations: 200,
            penalty_initial: 1.0,
            penalty_growth: 10.0,
            penalty_max: 1e8,
            internal_margin: 1e-3,
            seed: 0,
            always_restart: false,
        }
    }
}

/// Penalised objective over scaled inputs `z`, `u_k = (steer_max z_{2k}, accel_max z_{2k+1})`.
pub(crate) struct Objective<'p, 'a> {
    problem: &'p MpcProblem<'a>,
    mu: f64,
    terminal_margin: f64,
    clearance_margin: f64,
    scale: [f64; 2],
}

impl<'p, 'a> Objective<'p, 'a> {
    pub(crate) fn new(problem: &'p MpcProblem<'a>, mu: f64, margin: f64) -> Self {
        let b = &problem.mission.input_bounds;
        Objective {
            problem,
            mu,
            terminal_margin: margin.min(problem.mission.terminal_tolerance / 2.0),
            clearance_margin: margin,
            scale: [b.steer_max, b.accel_max],
        }
    }

    pub(crate) fn inputs(&self, z: &[f64]) -> Vec<BicycleInput> {
        z.chunks_exact(2)
            .map(|c| BicycleInput::new(self.scale[0] * c[0], self.scale[1] * c[1]))
            .collect()
    }

    fn scaled(&self, inputs: &[BicycleInput]) -> Vec<f64> {
        let unscale = |v: f64, s: f64| if s > 0.0 { (v / s).clamp(-1.0, 1.0) } else { 0.0 };
        inputs
            .iter()
            .flat_map(|u| [unscale(u.phi, self.scale[0]), unscale(u.a, self.scale[1])])
            .collect()
    }

    /// Penalised objective; fills `grad` (same length as `z`) when given.
    pub(crate) fn eval(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let mission = self.problem.mission;
        let params = &mission.params;
        let (dt, len) = (params.dt, params.length);
        let inputs = self.inputs(z);
        let n = inputs.len();

        let mut states = Vec::with_capacity(n + 1);
        states.push(self.problem.state);
        for u in &inputs {
            let next = crate::dynamics::bicycle_step(states.last().unwrap(), u, params);
            states.push(next);
        }

        let wp = mission.weights.position;
        let wu = mission.weights.input;
        let target = mission.target;
        let mut value = 0.0;
        // d value / d state, position components only; θ and v enter through dynamics.
        let mut explicit = vec![[0.0f64; 4]; n + 1];

        for (k, x) in states.iter().enumerate() {
            let dx = x.px - target[0];
            let dy = x.py - target[1];
            value += wp * (dx * dx + dy * dy);
            explicit[k][0] += 2.0 * wp * dx;
            explicit[k][1] += 2.0 * wp * dy;
        }
        for u in &inputs {
            value += wu * (u.phi * u.phi + u.a * u.a);
        }

        let mu = self.mu;
        let mut hinge = |g: f64, k: usize, coord: usize, dg: f64, value: &mut f64| {
            if g > 0.0 {
                *value += mu * g * g;
                explicit[k][coord] += 2.0 * mu * g * dg;
            }
        };

        for (idx, set) in self.problem.constraints.iter().enumerate() {
            let k = idx + 1;
            let p = states[k].position();
            for b in &set.boxes {
                if b.is_empty() || !b.is_bounded() {
                    continue;
                }
                let terms = [b.lo[0] - p[0], p[0] - b.hi[0], b.lo[1] - p[1], p[1] - b.hi[1]];
                let (active, sd) =
                    terms.iter().enumerate().fold(
                        (0, f64::NEG_INFINITY),
                        |(i, m), (j, &v)| if v > m { (j, v) } else { (i, m) },
                    );
                let g = self.clearance_margin - sd;
                // d sd / d p for the active face; g = margin - sd.
                let (coord, dsd) = match active {
                    0 => (0, -1.0),
                    1 => (0, 1.0),
                    2 => (1, -1.0),
                    _ => (1, 1.0),
                };
                hinge(g, k, coord, -dsd, &mut value);
            }
        }

        let tol = mission.terminal_tolerance - self.terminal_margin;
        let last = states[n];
        for (coord, d) in [(0, last.px - target[0]), (1, last.py - target[1])] {
            hinge(d.abs() - tol, n, coord, d.signum(), &mut value);
        }

        if let Some(bounds) = &mission.state_bounds {
            for (k, x) in states.iter().enumerate().skip(1) {
                for (c, v) in x.to_array().into_iter().enumerate() {
                    hinge(bounds.lower[c] - v, k, c, -1.0, &mut value);
                    hinge(v - bounds.upper[c], k, c, 1.0, &mut value);
                }
            }
        }

        if let Some(grad) = grad {
            // Adjoint sweep: lambda_k = dJ/dx_k including downstream effects.
            let mut lam = explicit[n];
            for k in (0..n).rev() {
                let x = &states[k];
                let u = &inputs[k];
                let (s, c) = x.theta.sin_cos();
                let cphi = u.phi.cos();
                grad[2 * k] = self.scale[0] * (dt * x.v / (len * cphi * cphi) * lam[2] + 2.0 * wu * u.phi);
                grad[2 * k + 1] = self.scale[1] * (dt * lam[3] + 2.0 * wu * u.a);
                let e = explicit[k];
                lam = [
                    e[0] + lam[0],
                    e[1] + lam[1],
                    e[2] - dt * x.v * s * lam[0] + dt * x.v * c * lam[1] + lam[2],
                    e[3] + dt * c * lam[0] + dt * s * lam[1] + dt * u.phi.tan() / len * lam[2] + lam[3],
                ];
            }
        }
        value
    }
}

fn project(z: &mut [f64]) {
    for v in z.iter_mut() {
        *v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    }
}

fn inf_norm_step(z: &[f64], g: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .map(|(x, d)| ((x - d).clamp(-1.0, 1.0) - x).abs())
        .fold(0.0, f64::max)
}

/// Nonmonotone spectral projected gradient on the unit box. Returns iterations used.
fn spg(obj: &Objective<'_, '_>, z: &mut [f64], max_iter: usize) -> usize {
    const MEMORY: usize = 10;
    const GAMMA: f64 = 1e-4;
    let m = z.len();
    project(z);
    let mut g = vec![0.0; m];
    let mut f = obj.eval(z, Some(&mut g));
    if !f.is_finite() {
        return 0;
    }
    let mut history = vec![f; 1];
    let pg = inf_norm_step(z, &g);
    let mut alpha = if pg > 0.0 { (1.0 / pg).clamp(1e-10, 1e10) } else { 1.0 };
    let mut trial = vec![0.0; m];
    let mut g_new = vec![0.0; m];
    let mut d = vec![0.0; m];

    for iter in 0..max_iter {
        if inf_norm_step(z, &g) <= 1e-10 * (1.0 + f.abs()) {
            return iter;
        }
        for i in 0..m {
            d[i] = (z[i] - alpha * g[i]).clamp(-1.0, 1.0) - z[i];
        }
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        let f_ref = history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut lambda = 1.0;
        let mut accepted = false;
        let mut f_new = f;
        for _ in 0..40 {
            for i in 0..m {
                trial[i] = z[i] + lambda * d[i];
            }
            f_new = obj.eval(&trial, Some(&mut g_new));
            if f_new.is_finite() && f_new <= f_ref + GAMMA * lambda * slope {
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return iter + 1;
        }
        let mut sts = 0.0;
        let mut sty = 0.0;
        for i in 0..m {
            let s = trial[i] - z[i];
            let y = g_new[i] - g[i];
            sts += s * s;
            sty += s * y;
        }
        z.copy_from_slice(&trial);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        alpha = if sty > 0.0 {
            (sts / sty).clamp(1e-10, 1e10)
        } else {
            1e10f64.min(1.0 / inf_norm_step(z, &g).max(1e-10))
        };
        history.push(f);
        if history.len() > MEMORY {
            history.remove(0);
        }
    }
    max_iter
}

/// Greedy start: steer at the target and track a speed that can still stop there.
fn heuristic_inputs(problem: &MpcProblem<'_>) -> Vec<BicycleInput> {
    let mission = problem.mission;
    let p = &mission.params;
    let bounds = &mission.input_bounds;
    let mut x = problem.state;
    let mut out = Vec::with_capacity(problem.steps());
    for _ in 0..problem.steps() {
        let dx = mission.target[0] - x.px;
        let dy = mission.target[1] - x.py;
        let dist = dx.hypot(dy);
        let mut err = dy.atan2(dx) - x.theta;
        err = (err + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
        let phi = if x.v.abs() > 1e-6 {
            (err * p.length / (2.0 * p.dt * x.v)).atan()
        } else {
            0.0
        };
        let v_des = (bounds.accel_max * dist).sqrt() * err.cos().max(0.0);
        let a = (v_des - x.v) / p.dt;
        let u = bounds.clamp(BicycleInput::new(phi, a));
        x = crate::dynamics::bicycle_step(&x, &u, p);
        out.push(u);
    }
    out
}

struct Outcome {
    states: Vec<BicycleState>,
    inputs: Vec<BicycleInput>,
    cost: f64,
    cert: Certificate,
}

/// Raises the penalty until the candidate passes the certificate or the schedule ends.
fn refine(problem: &MpcProblem<'_>, cfg: &SolverConfig, start: &[BicycleInput], iterations: &mut usize) -> Outcome {
    let probe = Objective::new(problem, 0.0, cfg.internal_margin);
    let mut z = probe.scaled(start);
    let mut mu = cfg.penalty_initial;
    loop {
        let obj = Objective::new(problem, mu, cfg.internal_margin);
        *iterations += spg(&obj, &mut z, cfg.max_inner_iterations);
        let (states, inputs, cost, cert) = candidate(problem, obj.inputs(&z));
        if cert.passes(cfg.feas_tol) || mu >= cfg.penalty_max || !cost.is_finite() {
            return Outcome {
                states,
                inputs,
                cost,
                cert,
            };
        }
        mu = (mu * cfg.penalty_growth).min(cfg.penalty_max);
    }
}

pub(crate) fn solve(problem: &MpcProblem<'_>, cfg: &SolverConfig) -> Result<MpcSolution, InfeasibleReport> {
    let mut diag = SolverDiagnostics::default();
    let mut best: Option<(usize, Outcome)> = None;
    let mut least_bad: Option<Outcome> = None;
    let mut index = 0usize;

    let mut consider = |o: Outcome, best: &mut Option<(usize, Outcome)>, least_bad: &mut Option<Outcome>| {
        let i = index;
        index += 1;
        if o.cert.passes(cfg.feas_tol) {
            if best.as_ref().is_none_or(|(_, b)| o.cost < b.cost) {
                *best = Some((i, o));
            }
        } else if least_bad
            .as_ref()
            .is_none_or(|b| o.cert.max_violation() < b.cert.max_violation() || b.cert.max_violation().is_nan())
        {
            *least_bad = Some(o);
        }
    };

    if let Some(warm) = &problem.warm_start {
        let (states, inputs, cost, cert) = candidate(problem, warm.inputs.clone());
        diag.starts += 1;
        consider(
            Outcome {
                states,
                inputs,
                cost,
                cert,
            },
            &mut best,
            &mut least_bad,
        );
        let clamped: Vec<_> = warm
            .inputs
            .iter()
            .map(|u| problem.mission.input_bounds.clamp(*u))
            .collect();
        diag.starts += 1;
        let o = refine(problem, cfg, &clamped, &mut diag.iterations);
        consider(o, &mut best, &mut least_bad);
    }

    // A set that was never narrowed by a finite region excludes the whole plane.
    let uncertified = problem
        .constraints
        .iter()
        .any(|set| set.boxes.iter().any(|b| !b.is_empty() && !b.is_bounded()));
    if uncertified {
        let (states, inputs, cost, cert) = candidate(problem, heuristic_inputs(problem));
        diag.starts += 1;
        consider(
            Outcome {
                states,
                inputs,
                cost,
                cert,
            },
            &mut best,
            &mut least_bad,
        );
        let o = least_bad.expect("uncertified sets cannot pass");
        return Err(InfeasibleReport {
            t: problem.t,
            violation: o.cert.max_violation(),
            worst: o.cert.worst,
            diagnostics: diag,
        });
    }

    diag.starts += 1;
    let o = refine(problem, cfg, &heuristic_inputs(problem), &mut diag.iterations);
    consider(o, &mut best, &mut least_bad);

    if best.is_none() || cfg.always_restart {
        let mut rng = RngSeed(cfg.seed).stream(problem.t as u64);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let base = Objective::new(problem, 0.0, cfg.internal_margin).scaled(&heuristic_inputs(problem));
        let obj = Objective::new(problem, 0.0, cfg.internal_margin);
        for r in 0..cfg.random_starts {
            let z: Vec<f64> = if r % 2 == 0 {
                base.iter()
                    .map(|v| (v + noise.sample(&mut rng)).clamp(-1.0, 1.0))
                    .collect()
            } else {
                base.iter().map(|_| rng.gen_range(-1.0..=1.0)).collect()
            };
            diag.starts += 1;
            diag.restarts += 1;
            let o = refine(problem, cfg, &obj.inputs(&z), &mut diag.iterations);
            consider(o, &mut best, &mut least_bad);
            if best.is_some() && !cfg.always_restart {
                break;
            }
        }
    }

    match best {
        Some((selected, o)) => {
            diag.selected = selected;
            Ok(MpcSolution {
                t: problem.t,
                states: o.states,
                inputs: o.inputs,
                cost: o.cost,
                certificate: o.cert,
                diagnostics: diag,
            })
        }
        None => {
            let o = least_bad.expect("at least one candidate is always evaluated");
            Err(InfeasibleReport {
                t: problem.t,
                violation: o.cert.max_violation(),
                worst: o.cert.worst,
                diagnostics: diag,
            })
        }
    }
}
