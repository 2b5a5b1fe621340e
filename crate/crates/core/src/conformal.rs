//! Split conformal calibration of prediction regions `‖Y_τ - Ŷ_{τ|t}‖ <= C_{τ|t}`.
//!
//! Two calibrations are provided:
//!
//! * [`calibrate_joint`]: one normalised score per calibration trajectory
//!   (the maximum over all pairs of the prediction error divided by the
//!   training-set maximum error for that pair). A single order statistic `R`
//!   then scales every normaliser, so the regions hold *jointly* over all
//!   `(t, τ)` with probability at least `1 - δ`.
//! * [`calibrate_benchmark`]: an independent order statistic per pair with the
//!   failure budget split across the real time steps, as used by the
//!   comparison controller.
//!
//! Radii are `f64` and may be `+∞` when the calibration set is too small for
//! the requested `δ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::Norm;
use crate::pairs::{pair_count, PairMap};
use crate::predictor::PredictionTable;
use crate::trajectory::Trajectory;

/// Lower bound on every normalisation factor (a perfect training fit would
/// otherwise give σ = 0).
pub const SIGMA_FLOOR: f64 = 1e-9;

/// A trajectory paired with the predictions made along it.
pub type Observed<'a> = (&'a Trajectory, &'a PredictionTable);

/// Per-pair normalisation factors `σ_{τ|t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationTable {
    sigma: PairMap<f64>,
}

impl NormalizationTable {
    pub fn new(sigma: PairMap<f64>) -> Result<Self> {
        if let Some((t, tau, s)) = sigma.iter().find(|(_, _, s)| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "normalisation factor at (t = {t}, tau = {tau}) must be positive and finite, got {s}"
            )));
        }
        Ok(NormalizationTable { sigma })
    }

    pub fn get(&self, t: usize, tau: usize) -> f64 {
        *self.sigma.get(t, tau)
    }

    pub fn horizon(&self) -> usize {
        self.sigma.horizon()
    }

    pub fn table(&self) -> &PairMap<f64> {
        &self.sigma
    }
}

fn error_at(norm: Norm, traj: &Trajectory, table: &PredictionTable, t: usize, tau: usize) -> f64 {
    norm.distance(traj.state(tau).coords(), table.get(t, tau).coords())
}

fn check_complete(items: &[Observed<'_>], horizon: usize) -> Result<()> {
    for (i, (traj, table)) in items.iter().enumerate() {
        if traj.horizon() != horizon || table.horizon() != horizon || table.len() != pair_count(horizon) {
            return Err(Error::Dataset(format!(
                "trajectory {i}: horizon {} / prediction table horizon {} differ from {horizon}",
                traj.horizon(),
                table.horizon()
            )));
        }
    }
    Ok(())
}

/// `σ_{τ|t} = max_j ‖Y_τ^(j) - Ŷ_{τ|t}^(j)‖` over the training trajectories,
/// floored at [`SIGMA_FLOOR`].
pub fn compute_normalization(train: &[Observed<'_>], norm: Norm) -> Result<NormalizationTable> {
    let horizon = train
        .first()
        .ok_or_else(|| Error::Config("normalisation needs at least one training trajectory".into()))?
        .0
        .horizon();
    check_complete(train, horizon)?;
    let sigma = PairMap::try_from_fn(horizon, |t, tau| {
        let mut worst = 0.0f64;
        for (traj, table) in train {
            let e = error_at(norm, traj, table, t, tau);
            if !e.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training error at (t = {t}, tau = {tau})"
                )));
            }
            worst = worst.max(e);
        }
        Ok(worst.max(SIGMA_FLOOR))
    })?;
    Ok(NormalizationTable { sigma })
}

/// Conformity scores `R^(i)`, one per calibration trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformityScores(pub Vec<f64>);

impl ConformityScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Largest normalised error of one trajectory over every pair.
pub fn trajectory_score(traj: &Trajectory, table: &PredictionTable, sigma: &NormalizationTable, norm: Norm) -> f64 {
    table
        .entries()
        .iter()
        .map(|(t, tau, pred)| norm.distance(traj.state(tau).coords(), pred.coords()) / sigma.get(t, tau))
        .fold(
            0.0,
            |m: f64, s| if s.is_nan() || m.is_nan() { f64::NAN } else { m.max(s) },
        )
}

/// `R^(i) = max_{t<τ} ‖Y_τ^(i) - Ŷ_{τ|t}^(i)‖ / σ_{τ|t}` for every calibration trajectory.
pub fn compute_scores(calib: &[Observed<'_>], sigma: &NormalizationTable, norm: Norm) -> Result<ConformityScores> {
    check_complete(calib, sigma.horizon())?;
    let scores: Vec<f64> = calib
        .par_iter()
        .map(|(traj, table)| trajectory_score(traj, table, sigma, norm))
        .collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite conformity score for calibration trajectory {i}"
        )));
    }
    Ok(ConformityScores(scores))
}

/// Rank `k = ⌈(n+1)(1-δ)⌉` of the conformal order statistic among `n`
/// calibration scores augmented with `+∞`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantileRank {
    pub k: usize,
    pub n: usize,
}

impl QuantileRank {
    /// False when `k > n`, i.e. the order statistic is the appended `+∞`.
    pub fn is_finite(self) -> bool {
        self.k <= self.n
    }

    /// Smallest `n` that makes the rank finite for this `δ`.
    pub fn required_calibration_size(delta: f64) -> usize {
        (1..)
            .find(|&n| quantile_index(n, delta).is_ok_and(|q| q.is_finite()))
            .unwrap()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")))
    }
}

/// `⌈(n+1)(1-δ)⌉`, computed so that products which are integers in exact
/// arithmetic (e.g. 20 · 0.9) are not pushed up by floating-point round-off.
pub fn quantile_index(n_calib: usize, delta: f64) -> Result<QuantileRank> {
    check_delta(delta)?;
    if n_calib == 0 {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let x = (n_calib as f64 + 1.0) * (1.0 - delta);
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    Ok(QuantileRank {
        k: (k as usize).max(1),
        n: n_calib,
    })
}

/// The `k`-th smallest (1-based) of `scores ∪ {+∞}`, duplicates counted.
pub fn order_statistic(scores: &[f64], k: usize) -> f64 {
    assert!(k >= 1, "ranks are 1-based");
    if k > scores.len() {
        return f64::INFINITY;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[k - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionMethod {
    Joint,
    Benchmark,
}

/// How the comparison calibration spreads `δ` over the pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkDeltaSplit {
    /// `δ / T` per pair: union bound over the `T` real time steps.
    #[default]
    Uniform,
    /// `δ` per pair, no union bound.
    None,
}

impl BenchmarkDeltaSplit {
    pub fn per_pair_delta(self, delta: f64, horizon: usize) -> f64 {
        match self {
            BenchmarkDeltaSplit::Uniform => delta / horizon as f64,
            BenchmarkDeltaSplit::None => delta,
        }
    }
}

/// Calibrated region radii `C_{τ|t}` for every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTable {
    pub method: RegionMethod,
    pub delta: f64,
    /// Joint quantile `R`; absent for the per-pair calibration.
    pub quantile: Option<f64>,
    pub sigma: Option<NormalizationTable>,
    pub radii: PairMap<f64>,
}

impl RegionTable {
    pub fn radius(&self, t: usize, tau: usize) -> f64 {
        *self.radii.get(t, tau)
    }

    pub fn horizon(&self) -> usize {
        self.radii.horizon()
    }

    pub fn is_finite(&self) -> bool {
        self.radii.values().iter().all(|r| r.is_finite())
    }
}

/// Joint calibration: `R` is the `⌈(n+1)(1-δ)⌉`-th smallest score (or `+∞`)
/// and `C_{τ|t} = R σ_{τ|t}`.
pub fn calibrate_joint(scores: &ConformityScores, sigma: &NormalizationTable, delta: f64) -> Result<RegionTable> {
    let rank = quantile_index(scores.len(), delta)?;
    let r = order_statistic(&scores.0, rank.k);
    Ok(RegionTable {
        method: RegionMethod::Joint,
        delta,
        quantile: Some(r),
        radii: sigma.sigma.map(|_, _, s| r * s),
        sigma: Some(sigma.clone()),
    })
}

/// Per-pair calibration with the failure budget split by `split`: each
/// `C̃_{τ|t}` is the conformal order statistic of the raw errors at that pair.
pub fn calibrate_benchmark(
    calib: &[Observed<'_>],
    delta: f64,
    horizon: usize,
    split: BenchmarkDeltaSplit,
    norm: Norm,
) -> Result<RegionTable> {
    check_delta(delta)?;
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    check_complete(calib, horizon)?;
    let rank = quantile_index(calib.len(), split.per_pair_delta(delta, horizon))?;
    let radii = PairMap::from_fn(horizon, |t, tau| {
        let errors: Vec<f64> = calib
            .iter()
            .map(|(traj, table)| error_at(norm, traj, table, t, tau))
            .collect();
        order_statistic(&errors, rank.k)
    });
    Ok(RegionTable {
        method: RegionMethod::Benchmark,
        delta,
        quantile: None,
        sigma: None,
        radii,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairViolation {
    pub t: usize,
    pub tau: usize,
    pub error: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipReport {
    pub inside: bool,
    /// `min (radius - error)` over all pairs; `+∞` when every radius is infinite.
    pub min_slack: f64,
    pub violations: Vec<PairViolation>,
}

/// Whether `truth` lies inside every region around the predictions in `table`.
pub fn check_membership(
    region: &RegionTable,
    table: &PredictionTable,
    truth: &Trajectory,
    norm: Norm,
) -> MembershipReport {
    let mut violations = Vec::new();
    let mut min_slack = f64::INFINITY;
    for (t, tau, pred) in table.entries().iter() {
        let error = norm.distance(truth.state(tau).coords(), pred.coords());
        let radius = region.radius(t, tau);
        let slack = radius - error;
        if !(slack >= 0.0) {
            violations.push(PairViolation { t, tau, error, radius });
        }
        if radius.is_finite() {
            min_slack = min_slack.min(slack);
        } else if error.is_nan() {
            min_slack = f64::NAN;
        }
    }
    MembershipReport {
        inside: violations.is_empty(),
        min_slack,
        violations,
    }
}

/// Serde helpers writing non-finite values as the strings `"inf"`, `"-inf"`
/// and `"nan"`, which plain JSON numbers cannot hold.
pub mod inf_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    impl Repr {
        fn value<E: serde::de::Error>(self) -> Result<f64, E> {
            match self {
                Repr::Num(v) => Ok(v),
                Repr::Text(t) => match t.as_str() {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    "nan" => Ok(f64::NAN),
                    _ => Err(E::custom(format!(
                        "expected a number, \"inf\", \"-inf\" or \"nan\", got {t:?}"
                    ))),
                },
            }
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_str("nan")
        } else if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Repr::deserialize(d)?.value()
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => super::serialize(v, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(Repr::value).transpose()
        }
    }

    pub mod array4 {
        use super::*;

        #[derive(Serialize)]
        struct Item(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &[f64; 4], s: S) -> Result<S::Ok, S::Error> {
            v.map(Item).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 4], D::Error> {
            let [a, b, c, e] = <[Repr; 4]>::deserialize(d)?;
            Ok([a.value()?, b.value()?, c.value()?, e.value()?])
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionEntry {
    t: usize,
    tau: usize,
    sigma: Option<f64>,
    #[serde(with = "inf_f64")]
    radius: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionFile {
    method: RegionMethod,
    delta: f64,
    #[serde(rename = "R", with = "inf_f64::option")]
    quantile: Option<f64>,
    entries: Vec<RegionEntry>,
}

impl Serialize for RegionTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RegionFile {
            method: self.method,
            delta: self.delta,
            quantile: self.quantile,
            entries: self
                .radii
                .iter()
                .map(|(t, tau, r)| RegionEntry {
                    t,
                    tau,
                    sigma: self.sigma.as_ref().map(|s| s.get(t, tau)),
                    radius: *r,
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RegionTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = RegionFile::deserialize(d)?;
        let count = file.entries.len();
        let horizon = (0..=count)
            .find(|&h| pair_count(h) == count)
            .ok_or_else(|| D::Error::custom(format!("{count} entries is not a triangular pair count")))?;
        let mut entries = file.entries.iter();
        let mut bad = None;
        let radii = PairMap::from_fn(horizon, |t, tau| {
            let e = entries.next().unwrap();
            if (e.t, e.tau) != (t, tau) {
                bad.get_or_insert((t, tau));
            }
            e.radius
        });
        if let Some((t, tau)) = bad {
            return Err(D::Error::custom(format!(
                "entries out of order near (t = {t}, tau = {tau})"
            )));
        }
        let sigma = if file.entries.iter().all(|e| e.sigma.is_some()) && count > 0 {
            let mut it = file.entries.iter();
            let table = PairMap::from_fn(horizon, |_, _| it.next().unwrap().sigma.unwrap());
            Some(NormalizationTable::new(table).map_err(D::Error::custom)?)
        } else {
            None
        };
        Ok(RegionTable {
            method: file.method,
            delta: file.delta,
            quantile: file.quantile,
            sigma,
            radii,
        })
    }
}
