//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs with `cargo test -p conformal-mpc --test acceptance`.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use conformal_mpc::conformal::{order_statistic, quantile_index};
use conformal_mpc::constraints::{build_constraint_set, CollisionConstraint, ConstraintSet, UnsafeBox};
use conformal_mpc::dynamics::{
    bicycle_step, evaluate_cost, rollout, BicycleInput, BicycleParams, BicycleState, MissionSpec, StateBounds,
};
use conformal_mpc::mpc::{certify, solve_step, MpcProblem, SolverConfig, FEAS_TOL};
use conformal_mpc::sim::{
    calibrate, episode_agents, evaluate_coverage, fit_predictor, generate_dataset, run_pair, EpisodePair,
    ExperimentConfig,
};
use conformal_mpc::trajectory::{JointState, RngSeed, Trajectory};
use conformal_mpc::Norm;
use rand::Rng;
use serde::Deserialize;

const COVERAGE_SEEDS: u64 = 10;
const EPISODES: usize = 520;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

fn coverage_bound(delta: f64, n: usize) -> f64 {
    1.0 - delta - 3.0 * (delta * (1.0 - delta) / n as f64).sqrt()
}

/// Smallest `i` with `i / (n + 1) >= 1 - p / 1000`, in integers.
fn exact_rank(n: usize, p: usize) -> usize {
    let need = (n + 1) * (1000 - p);
    need.div_ceil(1000).max(1)
}

fn quantile_mechanics() -> Outcome {
    let q = quantile_index(610, 0.1).unwrap();
    if q.k != 550 {
        return Outcome::new(false, format!("k = {} for n = 610, delta = 0.1", q.k));
    }
    let mut rng = RngSeed(1).rng();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=2000usize);
        let p = rng.gen_range(1..1000usize);
        let delta = p as f64 / 1000.0;
        let k = quantile_index(n, delta).unwrap().k;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut augmented = scores.clone();
        augmented.push(f64::INFINITY);
        augmented.sort_by(f64::total_cmp);
        let i = (1..=n + 1).find(|&i| i * 1000 >= (n + 1) * (1000 - p)).unwrap();
        let oracle = augmented[i - 1];
        if k != exact_rank(n, p) || order_statistic(&scores, k) != oracle {
            mismatches += 1;
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("k = 550; {mismatches} mismatches over 1000 random (n, delta)"),
    )
}

struct CoverageRun {
    joint: f64,
    benchmark: f64,
    joint_violations: usize,
    benchmark_violations: usize,
}

fn coverage_runs() -> Vec<CoverageRun> {
    (0..COVERAGE_SEEDS)
        .map(|seed| {
            let cfg = ExperimentConfig::case_study(seed);
            let dataset = generate_dataset(&cfg).unwrap();
            let model = fit_predictor(&cfg.predictor, &dataset).unwrap();
            let cal = calibrate(&dataset, &model, cfg.delta, cfg.norm, cfg.benchmark_delta_split).unwrap();
            let test: Vec<&Trajectory> = dataset.test().collect();
            let joint = evaluate_coverage(&cal.joint, &model, &test, cfg.norm).unwrap();
            let benchmark = evaluate_coverage(&cal.benchmark, &model, &test, cfg.norm).unwrap();
            CoverageRun {
                joint: joint.fraction,
                benchmark: benchmark.fraction,
                joint_violations: joint.violations(),
                benchmark_violations: benchmark.violations(),
            }
        })
        .collect()
}

fn joint_coverage(runs: &[CoverageRun]) -> Outcome {
    let bound = coverage_bound(0.1, 1000);
    let ok = runs.iter().filter(|r| r.joint >= bound).count();
    let fractions: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.joint)).collect();
    Outcome::new(
        ok >= 9,
        format!("{ok}/10 seeds >= {bound:.4}: [{}]", fractions.join(", ")),
    )
}

fn tighter_regions(runs: &[CoverageRun]) -> Outcome {
    let bound = coverage_bound(0.1, 1000);
    let both = runs.iter().filter(|r| r.joint >= bound && r.benchmark >= bound).count();
    let tighter = runs
        .iter()
        .filter(|r| r.joint_violations >= r.benchmark_violations)
        .count();
    let counts: Vec<String> = runs
        .iter()
        .map(|r| format!("{}/{}", r.joint_violations, r.benchmark_violations))
        .collect();
    Outcome::new(
        both >= 9 && tighter >= 7,
        format!(
            "joint >= benchmark violations on {tighter}/10 seeds, both covered on {both}/10 (joint/benchmark: {})",
            counts.join(" ")
        ),
    )
}

fn closed_loop_episodes() -> Vec<EpisodePair> {
    let mut cfg = ExperimentConfig::case_study(0);
    cfg.episodes = EPISODES;
    let dataset = generate_dataset(&cfg).unwrap();
    let model = fit_predictor(&cfg.predictor, &dataset).unwrap();
    let cal = calibrate(&dataset, &model, cfg.delta, cfg.norm, cfg.benchmark_delta_split).unwrap();
    (0..cfg.episodes)
        .map(|e| run_pair(&cfg, &model, &cal, &episode_agents(&cfg, e), e).unwrap())
        .collect()
}

fn recursive_feasibility(pairs: &[EpisodePair]) -> Outcome {
    let started: Vec<_> = pairs
        .iter()
        .map(|p| &p.proposed)
        .filter(|l| l.feasible_at_start())
        .collect();
    let kept = started
        .iter()
        .filter(|l| l.feasible_throughout() && l.warm_starts_certified())
        .count();
    Outcome::new(
        started.len() >= 500 && kept == started.len(),
        format!(
            "{kept}/{} episodes feasible at t = 0 stayed certified ({} run)",
            started.len(),
            pairs.len()
        ),
    )
}

#[derive(Deserialize)]
struct Scenario {
    episode: usize,
    config: ExperimentConfig,
}

fn benchmark_regression() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/regression_scenario.json");
    let scenario: Scenario = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let cfg = scenario.config;
    cfg.validate().unwrap();
    let dataset = generate_dataset(&cfg).unwrap();
    let model = fit_predictor(&cfg.predictor, &dataset).unwrap();
    let cal = calibrate(&dataset, &model, cfg.delta, cfg.norm, cfg.benchmark_delta_split).unwrap();
    let truth = episode_agents(&cfg, scenario.episode);
    let pair = run_pair(&cfg, &model, &cal, &truth, scenario.episode).unwrap();
    let late: Vec<usize> = pair
        .benchmark
        .infeasible_steps()
        .into_iter()
        .filter(|&t| t >= 1)
        .collect();
    let proposed_ok = pair.proposed.feasible_throughout() && pair.proposed.terminal_error <= 0.05;
    Outcome::new(
        !late.is_empty() && proposed_ok,
        format!(
            "benchmark infeasible at t = {late:?}; proposed feasible throughout = {}, terminal error {:.4}",
            pair.proposed.feasible_throughout(),
            pair.proposed.terminal_error
        ),
    )
}

fn closed_loop_safety(pairs: &[EpisodePair]) -> Outcome {
    let safe = pairs.iter().filter(|p| p.proposed.realized_safe()).count();
    let fraction = safe as f64 / pairs.len() as f64;
    let bound = coverage_bound(0.1, 500);
    Outcome::new(
        pairs.len() >= 500 && fraction >= bound,
        format!("{safe}/{} episodes safe ({fraction:.4} >= {bound:.4})", pairs.len()),
    )
}

fn geometry_oracle() -> Outcome {
    let mut rng = RngSeed(7).rng();
    let mut disagreements = 0;
    for _ in 0..10_000 {
        let agents = rng.gen_range(1..=4usize);
        let t = rng.gen_range(0..6usize);
        let margin = rng.gen_range(0.0..1.0);
        let constraint = CollisionConstraint::min_distance(margin, Norm::Infinity).unwrap();
        let predictions: Vec<JointState> = (0..=t)
            .map(|_| {
                let pts: Vec<[f64; 2]> = (0..agents)
                    .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
                    .collect();
                JointState::from_agents(&pts)
            })
            .collect();
        let mut radii: Vec<f64> = (0..=t).map(|_| rng.gen_range(0.0..1.0)).collect();
        for r in radii.iter_mut() {
            if rng.gen_bool(0.1) {
                *r = f64::INFINITY;
            }
        }
        radii[rng.gen_range(0..=t)] = rng.gen_range(0.0..1.0);
        let refs: Vec<&JointState> = predictions.iter().collect();
        let set = build_constraint_set(&constraint, &refs, &radii, t, t + 1).unwrap();
        let p = [rng.gen_range(-3.5..3.5), rng.gen_range(-3.5..3.5)];
        let brute = (0..agents).all(|j| {
            (0..=t).any(|s| {
                radii[s].is_finite() && {
                    let y = predictions[s].agent(j);
                    let dist = (p[0] - y[0]).abs().max((p[1] - y[1]).abs());
                    dist - margin - radii[s] >= 0.0
                }
            })
        });
        if set.is_safe(p) != brute {
            disagreements += 1;
        }
    }
    Outcome::new(
        disagreements == 0,
        format!("{disagreements} disagreements over 10^4 instances"),
    )
}

fn interval_subset(inner: &UnsafeBox, outer: &UnsafeBox) -> bool {
    let empty = |b: &UnsafeBox| b.lo[0] > b.hi[0] || b.lo[1] > b.hi[1];
    empty(inner) || (!empty(outer) && (0..2).all(|a| outer.lo[a] <= inner.lo[a] && inner.hi[a] <= outer.hi[a]))
}

fn monotone_relaxation(pairs: &[EpisodePair]) -> Outcome {
    let mut checked = 0;
    let mut violations = 0;
    for log in pairs.iter().map(|p| &p.proposed) {
        for w in log.sets.windows(2) {
            for later in &w[1] {
                let earlier: &ConstraintSet = w[0].iter().find(|s| s.tau == later.tau).unwrap();
                for (a, b) in later.boxes.iter().zip(&earlier.boxes) {
                    checked += 1;
                    if !interval_subset(a, b) {
                        violations += 1;
                    }
                }
            }
        }
        violations += log.monotonicity_violations();
    }
    Outcome::new(
        violations == 0 && checked > 0,
        format!(
            "{violations} violations over {checked} agent boxes in {} episodes",
            pairs.len()
        ),
    )
}

fn bicycle_exactness() -> Outcome {
    let mut rng = RngSeed(9).rng();
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let params = BicycleParams {
            length: rng.gen_range(0.1..2.0),
            dt: rng.gen_range(0.01..0.5),
        };
        let x = BicycleState::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-3.0..3.0),
        );
        let u = BicycleInput::new(rng.gen_range(-1.2..1.2), rng.gen_range(-5.0..5.0));
        let next = bicycle_step(&x, &u, &params);
        let expected = [
            x.px + params.dt * x.v * x.theta.cos(),
            x.py + params.dt * x.v * x.theta.sin(),
            x.theta + params.dt * x.v / params.length * u.phi.tan(),
            x.v + params.dt * u.a,
        ];
        for (got, want) in next.to_array().iter().zip(expected) {
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    Outcome::new(
        worst <= 1e-12,
        format!("max relative error {worst:.2e} over 10^5 samples"),
    )
}

fn one_step_solver() -> Outcome {
    let mut rng = RngSeed(13).rng();
    let mut worst = 0.0f64;
    let mut certified = 0;
    for i in 0..50 {
        let mut mission = MissionSpec::case_study();
        mission.weights.input = rng.gen_range(0.0..0.01);
        let t = mission.horizon - 1;
        let heading: f64 = rng.gen_range(-3.0..3.0);
        let v = rng.gen_range(0.05..0.3);
        let dt = mission.params.dt;
        let start = [
            mission.target[0] - dt * v * heading.cos() + rng.gen_range(-0.02..0.02),
            mission.target[1] - dt * v * heading.sin() + rng.gen_range(-0.02..0.02),
        ];
        if i % 2 == 1 {
            // Speed and heading bounds that force nonzero inputs.
            let v_max = v - rng.gen_range(0.05..0.3);
            let theta_min = heading + rng.gen_range(0.0..dt * v / 0.5 * 0.5f64.tan() * 0.8);
            mission.state_bounds = Some(StateBounds {
                lower: [-100.0, -100.0, theta_min, -100.0],
                upper: [100.0, 100.0, 100.0, v_max],
            });
        }
        let state = BicycleState::new(start[0], start[1], heading, v);
        let sets: Vec<ConstraintSet> = vec![ConstraintSet::unconstrained(t, mission.horizon, 0)];
        let problem = MpcProblem {
            t,
            state,
            mission: &mission,
            constraints: &sets,
            warm_start: None,
        };
        let b = mission.input_bounds;
        let mut grid_best = f64::INFINITY;
        for i in 0..200 {
            for j in 0..200 {
                let u = BicycleInput::new(
                    -b.steer_max + 2.0 * b.steer_max * i as f64 / 199.0,
                    -b.accel_max + 2.0 * b.accel_max * j as f64 / 199.0,
                );
                let states = rollout(&state, &[u], &mission.params);
                if certify(&problem, &states, &[u]).passes(FEAS_TOL) {
                    grid_best = grid_best.min(evaluate_cost(&states, &[u], &mission).unwrap());
                }
            }
        }
        match solve_step(&problem, &SolverConfig::default()).unwrap() {
            Ok(sol) if sol.certificate.passes(FEAS_TOL) => {
                certified += 1;
                worst = worst.max((sol.cost - grid_best).abs());
            }
            _ => worst = f64::INFINITY,
        }
    }
    Outcome::new(
        certified == 50 && worst <= 1e-2,
        format!("{certified}/50 certified, max |cost - grid| = {worst:.2e}"),
    )
}

fn main() -> ExitCode {
    let mut all = true;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "[{status}] {n:>2} {name}: {} ({:.1}s)",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        all &= o.passed;
    };

    report(1, "quantile mechanics", &mut quantile_mechanics);
    let start = Instant::now();
    let runs = coverage_runs();
    println!(
        "     coverage runs over {COVERAGE_SEEDS} seeds took {:.1}s",
        start.elapsed().as_secs_f64()
    );
    report(2, "joint coverage", &mut || joint_coverage(&runs));
    report(3, "tighter joint regions", &mut || tighter_regions(&runs));
    let start = Instant::now();
    let pairs = closed_loop_episodes();
    println!(
        "     {} closed-loop episode pairs took {:.1}s",
        pairs.len(),
        start.elapsed().as_secs_f64()
    );
    report(4, "recursive feasibility", &mut || recursive_feasibility(&pairs));
    report(5, "benchmark infeasibility regression", &mut benchmark_regression);
    report(6, "closed-loop safety", &mut || closed_loop_safety(&pairs));
    report(7, "box geometry vs brute force", &mut geometry_oracle);
    report(8, "monotone relaxation", &mut || monotone_relaxation(&pairs));
    report(9, "bicycle step", &mut bicycle_exactness);
    report(10, "one-step solver vs grid", &mut one_step_solver);

    let benchmark_feasible = pairs.iter().filter(|p| p.benchmark.feasible_throughout()).count();
    println!(
        "     benchmark feasible throughout in {benchmark_feasible}/{} episodes",
        pairs.len()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
