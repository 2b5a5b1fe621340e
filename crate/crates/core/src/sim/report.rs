//! Report files and recomputation of the closed-loop aggregates from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{ControllerSummary, EpisodePair, MetricsReport};
use crate::constraints::BoxExport;
use crate::dynamics::{BicycleState, MissionSpec};
use crate::error::{Error, Result};
use crate::mpc::{ControllerKind, EpisodeLog, StepRecord};

pub const REPORT_JSON: &str = "report.json";
pub const RADII_CSV: &str = "radii.csv";
pub const COVERAGE_CSV: &str = "coverage.csv";
pub const EPISODES_JSONL: &str = "episodes.jsonl";
pub const BOXES_JSONL: &str = "boxes.jsonl";

/// One line of `episodes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLine {
    pub episode: usize,
    pub controller: ControllerKind,
    pub seed: u64,
    #[serde(flatten)]
    pub step: StepRecord,
}

#[derive(Serialize)]
struct BoxLine<'a> {
    controller: ControllerKind,
    episode: usize,
    #[serde(flatten)]
    export: &'a BoxExport,
}

fn fmt_radius(r: f64) -> String {
    if r == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{r:?}")
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn episode_lines(pairs: &[EpisodePair]) -> Vec<EpisodeLine> {
    pairs
        .iter()
        .flat_map(|p| {
            [&p.proposed, &p.benchmark].into_iter().flat_map(move |log| {
                log.steps.iter().map(move |s| EpisodeLine {
                    episode: p.episode,
                    controller: log.controller,
                    seed: p.seed,
                    step: s.clone(),
                })
            })
        })
        .collect()
}

/// Writes `report.json`, `radii.csv`, `coverage.csv`, `episodes.jsonl` and `boxes.jsonl`.
pub fn export_report(report: &MetricsReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write(out_dir, REPORT_JSON, &json)?;

    let mut radii = String::from("method,t,tau,radius\n");
    for (name, table) in [
        ("joint", &report.joint_regions),
        ("benchmark", &report.benchmark_regions),
    ] {
        for (t, tau, r) in table.radii.iter() {
            writeln!(radii, "{name},{t},{tau},{}", fmt_radius(*r)).unwrap();
        }
    }
    write(out_dir, RADII_CSV, &radii)?;

    let mut coverage = String::from("method,inside,total,fraction\n");
    for (name, c) in [
        ("joint", &report.joint_coverage),
        ("benchmark", &report.benchmark_coverage),
    ] {
        writeln!(coverage, "{name},{},{},{:?}", c.inside, c.total, c.fraction).unwrap();
    }
    write(out_dir, COVERAGE_CSV, &coverage)?;

    let mut episodes = String::new();
    for line in episode_lines(&report.episodes) {
        episodes.push_str(&serde_json::to_string(&line)?);
        episodes.push('\n');
    }
    write(out_dir, EPISODES_JSONL, &episodes)?;

    let mut boxes = String::new();
    for panel in &report.panels {
        for export in &panel.boxes {
            let line = BoxLine {
                controller: panel.controller,
                episode: panel.episode,
                export,
            };
            boxes.push_str(&serde_json::to_string(&line)?);
            boxes.push('\n');
        }
    }
    write(out_dir, BOXES_JSONL, &boxes)
}

pub fn read_report(dir: &Path) -> Result<MetricsReport> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_episode_lines(dir: &Path) -> Result<Vec<EpisodeLine>> {
    let path = dir.join(EPISODES_JSONL);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Rebuilds episode logs (without constraint sets) from their JSON lines.
pub fn logs_from_lines(lines: &[EpisodeLine], mission: &MissionSpec) -> Result<Vec<EpisodeLog>> {
    let mut grouped: BTreeMap<(usize, &'static str), (ControllerKind, u64, Vec<StepRecord>)> = BTreeMap::new();
    for l in lines {
        grouped
            .entry((l.episode, l.controller.name()))
            .or_insert_with(|| (l.controller, l.seed, Vec::new()))
            .2
            .push(l.step.clone());
    }
    grouped
        .into_values()
        .map(|(controller, seed, steps)| {
            let last = steps
                .last()
                .ok_or_else(|| Error::Dataset("episode without records".into()))?;
            let final_state = BicycleState::from_array(last.x);
            let realized_cost = steps
                .iter()
                .map(|s| {
                    let dx = s.x[0] - mission.target[0];
                    let dy = s.x[1] - mission.target[1];
                    mission.weights.position * (dx * dx + dy * dy)
                })
                .sum();
            Ok(EpisodeLog {
                controller,
                seed,
                terminal_error: mission.terminal_error(&final_state),
                steps,
                sets: Vec::new(),
                realized_cost,
            })
        })
        .collect()
}

/// Per-controller summaries recomputed from `episodes.jsonl`. Monotonicity is
/// not recomputable from the lines and comes out as zero.
pub fn recompute_summaries(
    lines: &[EpisodeLine],
    mission: &MissionSpec,
    tolerance: f64,
) -> Result<BTreeMap<String, ControllerSummary>> {
    let logs = logs_from_lines(lines, mission)?;
    let mut out = BTreeMap::new();
    for kind in [ControllerKind::Proposed, ControllerKind::Benchmark] {
        out.insert(
            kind.name().to_string(),
            ControllerSummary::from_logs(logs.iter().filter(|l| l.controller == kind), tolerance),
        );
    }
    Ok(out)
}
