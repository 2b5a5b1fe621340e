//! Agent trajectories, datasets and their train/calibration/test split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seed for every random draw in the crate. Equal seeds give bit-identical output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent generator for sub-task `stream` (trajectory index, episode, ...).
    pub fn stream(self, stream: u64) -> ChaCha8Rng {
        let mut rng = self.rng();
        rng.set_stream(stream);
        rng
    }
}

/// Stacked agent positions at one time step: agent `j` occupies
/// `coords[j*dim .. (j+1)*dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    dim: usize,
    coords: Vec<f64>,
}

impl JointState {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(Error::Dataset(format!(
                "joint state of length {} is not a whole number of {dim}-dimensional agents",
                coords.len()
            )));
        }
        Ok(JointState { dim, coords })
    }

    pub fn from_agents(agents: &[[f64; 2]]) -> Self {
        JointState {
            dim: 2,
            coords: agents.iter().flatten().copied().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn agent_count(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn agent(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    pub fn agents(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }
}

/// Joint agent states at times `0..=horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    states: Vec<JointState>,
}

impl Trajectory {
    pub fn new(states: Vec<JointState>) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::Dataset("trajectory needs at least one state".into()))?;
        let (dim, len) = (first.dim, first.coords.len());
        if let Some(t) = states.iter().position(|s| s.dim != dim || s.coords.len() != len) {
            return Err(Error::Dataset(format!(
                "state at t = {t} has a different shape than t = 0"
            )));
        }
        Ok(Trajectory { states })
    }

    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn agent_count(&self) -> usize {
        self.states[0].agent_count()
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim
    }

    pub fn state(&self, t: usize) -> &JointState {
        &self.states[t]
    }

    pub fn states(&self) -> &[JointState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [JointState] {
        &mut self.states
    }
}

/// Indices of trajectories assigned to each role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub calib: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub split: Split,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Trajectory> + '_ {
        self.split.train.iter().map(|&i| &self.trajectories[i])
    }

    pub fn calib(&self) -> impl Iterator<Item = &Trajectory> + '_ {
        self.split.calib.iter().map(|&i| &self.trajectories[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &Trajectory> + '_ {
        self.split.test.iter().map(|&i| &self.trajectories[i])
    }

    pub fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::horizon)
    }
}

/// Randomly partitions `trajs` into train, calibration and test sets of the
/// requested sizes. The test set may be empty when it is held elsewhere.
pub fn split_dataset(
    trajs: Vec<Trajectory>,
    n_train: usize,
    n_calib: usize,
    n_test: usize,
    seed: RngSeed,
) -> Result<Dataset> {
    if n_train == 0 || n_calib == 0 {
        return Err(Error::Config(
            "train and calibration sets need at least one trajectory each".into(),
        ));
    }
    if n_train + n_calib + n_test != trajs.len() {
        return Err(Error::Config(format!(
            "split sizes {n_train} + {n_calib} + {n_test} do not add up to {} trajectories",
            trajs.len()
        )));
    }
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    order.shuffle(&mut seed.rng());
    let mut train = order[..n_train].to_vec();
    let mut calib = order[n_train..n_train + n_calib].to_vec();
    let mut test = order[n_train + n_calib..].to_vec();
    train.sort_unstable();
    calib.sort_unstable();
    test.sort_unstable();
    Ok(Dataset {
        trajectories: trajs,
        split: Split { train, calib, test },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Issue {
    HorizonMismatch {
        traj: usize,
        states: usize,
        expected: usize,
    },
    ShapeMismatch {
        traj: usize,
        agents: usize,
        dim: usize,
    },
    NonFinite {
        traj: usize,
        t: usize,
        agent: usize,
    },
    BadSplit(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Checks shape homogeneity, finiteness and that the split is an exact partition.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut issues = Vec::new();
    if let Some(first) = d.trajectories.first() {
        let (len, agents, dim) = (first.states.len(), first.agent_count(), first.dim());
        for (i, traj) in d.trajectories.iter().enumerate() {
            if traj.states.len() != len {
                issues.push(Issue::HorizonMismatch {
                    traj: i,
                    states: traj.states.len(),
                    expected: len,
                });
            }
            if traj.agent_count() != agents || traj.dim() != dim {
                issues.push(Issue::ShapeMismatch {
                    traj: i,
                    agents: traj.agent_count(),
                    dim: traj.dim(),
                });
                continue;
            }
            for (t, state) in traj.states.iter().enumerate() {
                for (j, a) in state.agents().enumerate() {
                    if a.iter().any(|c| !c.is_finite()) {
                        issues.push(Issue::NonFinite { traj: i, t, agent: j });
                    }
                }
            }
        }
    }

    let mut seen = vec![0usize; d.trajectories.len()];
    for &i in d.split.train.iter().chain(&d.split.calib).chain(&d.split.test) {
        match seen.get_mut(i) {
            Some(n) => *n += 1,
            None => issues.push(Issue::BadSplit(format!("index {i} out of range"))),
        }
    }
    for (i, n) in seen.into_iter().enumerate() {
        if n != 1 {
            issues.push(Issue::BadSplit(format!("trajectory {i} appears in {n} splits")));
        }
    }
    ValidationReport { issues }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    horizon: usize,
    agents: usize,
    dim: usize,
    count: usize,
    split: Split,
    trajectories: String,
}

pub const DATASET_JSON: &str = "dataset.json";
pub const TRAJECTORIES_CSV: &str = "trajectories.csv";

/// Writes `dataset.json` and `trajectories.csv` into `dir`.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = d
        .trajectories
        .first()
        .ok_or_else(|| Error::Dataset("cannot save an empty dataset".into()))?;
    let header = DatasetHeader {
        horizon: first.horizon(),
        agents: first.agent_count(),
        dim: first.dim(),
        count: d.trajectories.len(),
        split: d.split.clone(),
        trajectories: TRAJECTORIES_CSV.into(),
    };
    let path = dir.join(DATASET_JSON);
    fs::write(&path, serde_json::to_string_pretty(&header)? + "\n").map_err(|e| Error::io(&path, e))?;

    let mut csv = String::from("traj_id,t,agent_id");
    for k in 1..=header.dim {
        let _ = write!(csv, ",y_{k}");
    }
    csv.push('\n');
    for (i, traj) in d.trajectories.iter().enumerate() {
        for (t, state) in traj.states.iter().enumerate() {
            for (j, a) in state.agents().enumerate() {
                let _ = write!(csv, "{i},{t},{j}");
                for c in a {
                    // `{:?}` is the shortest representation that round-trips
                    let _ = write!(csv, ",{c:?}");
                }
                csv.push('\n');
            }
        }
    }
    let path = dir.join(TRAJECTORIES_CSV);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: DatasetHeader = serde_json::from_str(&text)?;
    let (len, agents, dim) = (header.horizon + 1, header.agents, header.dim);
    if dim == 0 {
        return Err(Error::Dataset("dim must be positive".into()));
    }

    let path = dir.join(&header.trajectories);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut coords = vec![vec![vec![f64::NAN; agents * dim]; len]; header.count];
    let mut filled = vec![vec![vec![false; agents]; len]; header.count];
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Dataset(format!("{}:{}: {what}", path.display(), line_no + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 + dim {
            return Err(bad("wrong number of columns"));
        }
        let idx = |k: usize| fields[k].parse::<usize>().map_err(|_| bad("bad index"));
        let (i, t, j) = (idx(0)?, idx(1)?, idx(2)?);
        if i >= header.count || t >= len || j >= agents {
            return Err(bad("index out of range"));
        }
        if std::mem::replace(&mut filled[i][t][j], true) {
            return Err(bad("duplicate row"));
        }
        for k in 0..dim {
            coords[i][t][j * dim + k] = fields[3 + k].parse::<f64>().map_err(|_| bad("bad coordinate"))?;
        }
    }
    if let Some(i) = filled.iter().position(|f| f.iter().flatten().any(|x| !x)) {
        return Err(Error::Dataset(format!("trajectory {i} has missing rows")));
    }

    let trajectories = coords
        .into_iter()
        .map(|states| Trajectory::new(states.into_iter().map(|c| JointState { dim, coords: c }).collect()))
        .collect::<Result<Vec<_>>>()?;
    let d = Dataset {
        trajectories,
        split: header.split,
    };
    let report = validate_dataset(&d);
    if !report.passed() {
        return Err(Error::Dataset(format!("invalid dataset: {:?}", report.issues)));
    }
    Ok(d)
}
