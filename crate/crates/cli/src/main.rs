use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use conformal_mpc::conformal::RegionTable;
use conformal_mpc::mpc::{run_closed_loop, Controller, ControllerKind};
use conformal_mpc::predictor::OneStepModel;
use conformal_mpc::sim::{
    calibrate, episode_agents, evaluate_coverage, export_report, fit_predictor, generate_dataset, read_episode_lines,
    read_report, recompute_summaries, run_experiment, Coverage, ExperimentConfig, MetricsReport,
};
use conformal_mpc::trajectory::{load_dataset, save_dataset, validate_dataset, Trajectory};
use conformal_mpc::Error;

const JOINT_REGIONS: &str = "joint.json";
const BENCHMARK_REGIONS: &str = "benchmark.json";

#[derive(Parser)]
#[command(
    name = "cpmpc",
    version,
    about = "Shrinking-horizon MPC with conformal prediction regions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the synthetic agent dataset and write dataset.json + trajectories.csv.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the one-step predictor on the training split.
    FitPredictor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate joint and benchmark regions; writes joint.json and benchmark.json.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Empirical coverage of a region table on the test split.
    Coverage {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        regions: PathBuf,
    },
    /// Run one closed-loop episode and print its JSON-lines log.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Directory written by `calibrate`.
        #[arg(long)]
        regions: PathBuf,
        #[arg(long, value_parser = ["proposed", "benchmark"])]
        controller: String,
        /// Episode seed: selects the agent trajectory and the solver's restarts.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline from one config, exported to a report directory.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a report directory and check its aggregates against episodes.jsonl.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

enum Failure {
    Lib(Error),
    InfeasibleAtStart(String),
    Mismatch(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(Error::Config(_)) => 2,
            Failure::Lib(Error::CalibrationInfeasible { .. }) => 3,
            Failure::InfeasibleAtStart(_) => 4,
            _ => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Lib(e) => e.to_string(),
            Failure::InfeasibleAtStart(m) | Failure::Mismatch(m) => m.clone(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| {
        Failure::Lib(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| {
        Failure::Lib(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    Ok(ExperimentConfig::from_json(&text)?)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::Lib(Error::Dataset(format!("{}: {e}", path.display()))))
}

fn to_json<T: serde::Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn load_checked_dataset(dir: &Path) -> CliResult<conformal_mpc::trajectory::Dataset> {
    let dataset = load_dataset(dir)?;
    let report = validate_dataset(&dataset);
    if !report.passed() {
        return Err(Error::Dataset(format!("{} failed validation: {:?}", dir.display(), report.issues)).into());
    }
    Ok(dataset)
}

fn print_coverage(name: &str, c: &Coverage) {
    println!(
        "{name:<10} {:>5} / {:<5} inside  ({:.4})",
        c.inside, c.total, c.fraction
    );
}

fn print_report(report: &MetricsReport) {
    println!(
        "quantile rank k = {} of n = {}, R = {}",
        report.rank.k, report.rank.n, report.quantile
    );
    print_coverage("joint", &report.joint_coverage);
    print_coverage("benchmark", &report.benchmark_coverage);
    for (name, s) in &report.summaries {
        println!(
            "{name:<10} episodes {} | feasible at t=0 {} | feasible throughout {} | realized safe {} | reached target {} | mean cost {:.3}",
            s.episodes, s.feasible_at_start, s.feasible_throughout, s.realized_safe, s.reached_target, s.mean_cost
        );
    }
    let events = &report.infeasibility_events;
    println!("infeasibility events: {}", events.len());
    for e in events.iter().take(10) {
        println!(
            "  {} episode {} (seed {}) t = {}",
            e.controller.name(),
            e.episode,
            e.seed,
            e.t
        );
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenerateData { config, out } => {
            let cfg = load_config(&config)?;
            let dataset = generate_dataset(&cfg)?;
            save_dataset(&dataset, &out)?;
            eprintln!("wrote {} trajectories to {}", dataset.trajectories.len(), out.display());
        }
        Command::FitPredictor { config, data, out } => {
            let cfg = load_config(&config)?;
            let dataset = load_checked_dataset(&data)?;
            let model = fit_predictor(&cfg.predictor, &dataset)?;
            write_text(&out, &to_json(&model)?)?;
        }
        Command::Calibrate {
            config,
            data,
            model,
            out,
        } => {
            let cfg = load_config(&config)?;
            let dataset = load_checked_dataset(&data)?;
            let model: OneStepModel = load_json(&model)?;
            let cal = calibrate(&dataset, &model, cfg.delta, cfg.norm, cfg.benchmark_delta_split)?;
            fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            write_text(&out.join(JOINT_REGIONS), &to_json(&cal.joint)?)?;
            write_text(&out.join(BENCHMARK_REGIONS), &to_json(&cal.benchmark)?)?;
            println!(
                "k = {} of n = {}, R = {}",
                cal.rank.k,
                cal.rank.n,
                cal.joint.quantile.unwrap_or(f64::INFINITY)
            );
        }
        Command::Coverage {
            config,
            data,
            model,
            regions,
        } => {
            let cfg = load_config(&config)?;
            let dataset = load_checked_dataset(&data)?;
            let model: OneStepModel = load_json(&model)?;
            let table: RegionTable = load_json(&regions)?;
            let test: Vec<&Trajectory> = dataset.test().collect();
            let c = evaluate_coverage(&table, &model, &test, cfg.norm)?;
            println!("{}", serde_json::to_string(&c).map_err(Error::from)?);
        }
        Command::Run {
            config,
            model,
            regions,
            controller,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let kind: ControllerKind = controller.parse()?;
            let model: OneStepModel = load_json(&model)?;
            let file = match kind {
                ControllerKind::Proposed => JOINT_REGIONS,
                ControllerKind::Benchmark => BENCHMARK_REGIONS,
            };
            let table: RegionTable = load_json(&regions.join(file))?;
            let ctrl = Controller {
                kind,
                mission: cfg.mission.clone(),
                collision: cfg.collision()?,
                regions: table,
                solver: cfg.solver.clone(),
            };
            let truth = episode_agents(&cfg, seed as usize);
            let log = run_closed_loop(&ctrl, &model, &truth, cfg.seed.wrapping_add(seed))?;
            let lines = log.to_jsonl()?;
            match out {
                Some(path) => write_text(&path, &lines)?,
                None => print!("{lines}"),
            }
            if !log.feasible_at_start() {
                return Err(Failure::InfeasibleAtStart(format!(
                    "{} controller infeasible at t = 0 (seed {seed}): {:?}",
                    kind.name(),
                    log.steps[0].violation
                )));
            }
        }
        Command::Experiment { config, out } => {
            let cfg = load_config(&config)?;
            let report = run_experiment(&cfg)?;
            export_report(&report, &out)?;
            print_report(&report);
        }
        Command::Report { dir } => {
            let report = read_report(&dir)?;
            let lines = read_episode_lines(&dir)?;
            let tol = report.config.mission.terminal_tolerance + report.config.solver.feas_tol;
            let recomputed = recompute_summaries(&lines, &report.config.mission, tol)?;
            print_report(&report);
            for (name, stored) in &report.summaries {
                let again = &recomputed[name];
                let mut expected = stored.clone();
                expected.monotonicity_violations = 0;
                if &expected != again {
                    return Err(Failure::Mismatch(format!(
                        "{name}: report.json summary {stored:?} differs from episodes.jsonl {again:?}"
                    )));
                }
            }
            println!("aggregates match episodes.jsonl");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
