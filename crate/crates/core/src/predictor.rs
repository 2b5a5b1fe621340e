//! One-step trajectory predictors and their recursive multi-step rollout.
//!
//! A predictor observes the joint agent state `Y_t` and produces estimates of
//! every later state up to the mission horizon by feeding each one-step
//! prediction back into the model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pairs::PairMap;
use crate::trajectory::{JointState, Trajectory};

pub const DEFAULT_RIDGE: f64 = 1e-6;

/// One-step model `g` mapping a joint state to the next one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OneStepModel {
    /// `Y_{t+1} = 2 Y_t - Y_{t-1}`; with no predecessor the agents are held still.
    ConstantVelocity,
    /// `Y_{t+1} = A Y_t + b`, with `A` stored row-major.
    LinearAffine { dim: usize, a: Vec<f64>, b: Vec<f64> },
}

impl OneStepModel {
    pub fn identity(dim: usize) -> Self {
        Self::affine_shift(dim, 0.0)
    }

    /// `A = I`, `b = shift * 1`.
    pub fn affine_shift(dim: usize, shift: f64) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = 1.0;
        }
        OneStepModel::LinearAffine {
            dim,
            a,
            b: vec![shift; dim],
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            OneStepModel::ConstantVelocity => "constant-velocity",
            OneStepModel::LinearAffine { .. } => "linear-affine",
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if let OneStepModel::LinearAffine { dim: d, a, b } = self {
            if *d != dim || a.len() != d * d || b.len() != *d {
                return Err(Error::Config(format!(
                    "affine model of dimension {d} (|A| = {}, |b| = {}) applied to joint state of dimension {dim}",
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(())
    }

    /// Applies `g` once. `prev` is the state one step before `current`.
    fn apply(&self, current: &[f64], prev: Option<&[f64]>) -> Vec<f64> {
        match self {
            OneStepModel::ConstantVelocity => match prev {
                Some(p) => current.iter().zip(p).map(|(c, p)| 2.0 * c - p).collect(),
                None => current.to_vec(),
            },
            OneStepModel::LinearAffine { dim, a, b } => (0..*dim)
                .map(|i| {
                    let row = &a[i * dim..(i + 1) * dim];
                    b[i] + row.iter().zip(current).map(|(a, y)| a * y).sum::<f64>()
                })
                .collect(),
        }
    }
}

fn ridge_objective_terms<'a>(train: &'a [&'a Trajectory]) -> impl Iterator<Item = (&'a [f64], &'a [f64])> + 'a {
    train
        .iter()
        .flat_map(|traj| traj.states().windows(2).map(|w| (w[0].coords(), w[1].coords())))
}

/// Fits `Y_{t+1} ≈ A Y_t + b` over all consecutive pairs of the training
/// trajectories, penalising `ridge * ‖A‖_F²` (the offset is not penalised).
pub fn fit_linear_one_step(train: &[&Trajectory], ridge: f64) -> Result<OneStepModel> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Config(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let first = train
        .first()
        .ok_or_else(|| Error::Config("fitting needs at least one training trajectory".into()))?;
    let dim = first.state(0).coords().len();
    if train.iter().any(|t| t.state(0).coords().len() != dim) {
        return Err(Error::Dataset("training trajectories differ in joint dimension".into()));
    }

    // Normal equations for Θ = [A b]: (Σ z zᵀ + ridge·diag(1..1, 0)) Θᵀ = Σ z yᵀ, z = [Y_t; 1]
    let n = dim + 1;
    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut cross = DMatrix::<f64>::zeros(n, dim);
    let mut z = DVector::<f64>::zeros(n);
    let mut pairs = 0usize;
    for (x, y) in ridge_objective_terms(train) {
        z.rows_mut(0, dim).copy_from_slice(x);
        z[dim] = 1.0;
        gram.ger(1.0, &z, &z, 1.0);
        for (k, yk) in y.iter().enumerate() {
            cross.column_mut(k).axpy(*yk, &z, 1.0);
        }
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::Config("training trajectories contain no transitions".into()));
    }
    for i in 0..dim {
        gram[(i, i)] += ridge;
    }

    let singular = || {
        Error::Numerical(format!(
            "normal equations are singular with ridge = {ridge}; use a positive ridge (e.g. {DEFAULT_RIDGE})"
        ))
    };
    let chol = gram.clone().cholesky().ok_or_else(singular)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| {
        (lo.min(d.abs()), hi.max(d.abs()))
    });
    if !(lo * lo > 1e-13 * hi * hi) {
        return Err(singular());
    }
    let theta_t = chol.solve(&cross);
    if theta_t.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }

    let mut a = vec![0.0; dim * dim];
    let mut b = vec![0.0; dim];
    for i in 0..dim {
        for j in 0..dim {
            a[i * dim + j] = theta_t[(j, i)];
        }
        b[i] = theta_t[(dim, i)];
    }
    Ok(OneStepModel::LinearAffine { dim, a, b })
}

/// Ridge objective `Σ ‖Y_{t+1} - A Y_t - b‖² + ridge ‖A‖_F²` of an affine model.
pub fn ridge_objective(model: &OneStepModel, train: &[&Trajectory], ridge: f64) -> f64 {
    let OneStepModel::LinearAffine { a, .. } = model else {
        return f64::NAN;
    };
    let fit: f64 = ridge_objective_terms(train)
        .map(|(x, y)| {
            model
                .apply(x, None)
                .iter()
                .zip(y)
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>()
        })
        .sum();
    fit + ridge * a.iter().map(|v| v * v).sum::<f64>()
}

/// Estimates `Ŷ_{τ|t}` for `τ = t+1..=horizon` from the observation at `t`.
///
/// `previous` is `Y_{t-1}` and is only read by the constant-velocity model.
pub fn predict_from(
    model: &OneStepModel,
    observed: &JointState,
    previous: Option<&JointState>,
    t: usize,
    horizon: usize,
) -> Result<Vec<JointState>> {
    if t >= horizon {
        return Err(Error::Contract(format!(
            "cannot predict from t = {t} with horizon {horizon}"
        )));
    }
    model.check(observed.coords().len())?;
    let dim = observed.dim();
    let mut out: Vec<JointState> = Vec::with_capacity(horizon - t);
    let mut prev = previous.map(|p| p.coords().to_vec());
    let mut current = observed.coords().to_vec();
    for tau in t + 1..=horizon {
        let next = model.apply(&current, prev.as_deref());
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Prediction { t, tau });
        }
        prev = Some(std::mem::replace(&mut current, next.clone()));
        out.push(JointState::new(dim, next)?);
    }
    Ok(out)
}

/// Predictions `Ŷ_{τ|t}` of one trajectory for every pair `0 <= t < τ <= T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    entries: PairMap<JointState>,
}

impl PredictionTable {
    pub fn new(entries: PairMap<JointState>) -> Self {
        PredictionTable { entries }
    }

    pub fn horizon(&self) -> usize {
        self.entries.horizon()
    }

    pub fn get(&self, t: usize, tau: usize) -> &JointState {
        self.entries.get(t, tau)
    }

    /// Predictions made at time `t`, for `τ = t+1..=T`.
    pub fn from_time(&self, t: usize) -> &[JointState] {
        self.entries.row(t)
    }

    pub fn entries(&self) -> &PairMap<JointState> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Runs the predictor from every time step of `traj`, each time using only
/// what has been observed by then.
pub fn build_prediction_table(model: &OneStepModel, traj: &Trajectory) -> Result<PredictionTable> {
    let horizon = traj.horizon();
    let mut rows = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let prev = t.checked_sub(1).map(|p| traj.state(p));
        rows.push(predict_from(model, traj.state(t), prev, t, horizon)?.into_iter());
    }
    let entries = PairMap::from_fn(horizon, |t, _| rows[t].next().expect("row length"));
    Ok(PredictionTable { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::trajectory::RngSeed;

    fn traj_from(states: Vec<Vec<f64>>) -> Trajectory {
        Trajectory::new(states.into_iter().map(|c| JointState::new(2, c).unwrap()).collect()).unwrap()
    }

    fn shifted_data(k: usize, len: usize, dim: usize, seed: u64) -> Vec<Trajectory> {
        let mut rng = RngSeed(seed).rng();
        (0..k)
            .map(|_| {
                let y0: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
                traj_from(
                    (0..len)
                        .map(|t| y0.iter().map(|v| v + 0.1 * t as f64).collect())
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn recovers_exact_affine_shift() {
        let data = shifted_data(20, 6, 4, 11);
        let refs: Vec<&Trajectory> = data.iter().collect();
        let model = fit_linear_one_step(&refs, 0.0).unwrap();
        let OneStepModel::LinearAffine { dim, a, b } = &model else {
            panic!()
        };
        for i in 0..*dim {
            for j in 0..*dim {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (a[i * dim + j] - expect).abs() < 1e-9,
                    "A[{i},{j}] = {}",
                    a[i * dim + j]
                );
            }
            assert!((b[i] - 0.1).abs() < 1e-9);
        }
        for traj in &data {
            for w in traj.states().windows(2) {
                let p = model.apply(w[0].coords(), None);
                for (p, y) in p.iter().zip(w[1].coords()) {
                    assert!((p - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn constant_trajectory_is_a_fixed_point() {
        let y = vec![1.5, -2.0, 0.25, 4.0];
        let data = [traj_from(vec![y.clone(); 8])];
        let model = fit_linear_one_step(&[&data[0]], 1e-6).unwrap();
        for (p, y) in model.apply(&y, None).iter().zip(&y) {
            assert!((p - y).abs() < 1e-6, "{p} vs {y}");
        }
    }

    #[test]
    fn constant_trajectory_without_ridge_is_singular() {
        let data = [traj_from(vec![vec![1.0, 2.0]; 5])];
        assert!(matches!(
            fit_linear_one_step(&[&data[0]], 0.0),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn heavier_ridge_shrinks_a() {
        let mut rng = RngSeed(5).rng();
        let data: Vec<Trajectory> = (0..10)
            .map(|_| {
                traj_from(
                    (0..6)
                        .map(|_| (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                        .collect(),
                )
            })
            .collect();
        let refs: Vec<&Trajectory> = data.iter().collect();
        let frob = |m: &OneStepModel| match m {
            OneStepModel::LinearAffine { a, .. } => a.iter().map(|v| v * v).sum::<f64>().sqrt(),
            _ => unreachable!(),
        };
        let light = fit_linear_one_step(&refs, 1e-6).unwrap();
        let heavy = fit_linear_one_step(&refs, 1e3).unwrap();
        assert!(frob(&heavy) < frob(&light));
    }

    #[test]
    fn fit_is_locally_optimal() {
        let mut rng = RngSeed(9).rng();
        let data: Vec<Trajectory> = (0..15)
            .map(|_| {
                let mut y = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                traj_from(
                    (0..8)
                        .map(|_| {
                            let cur = y.clone();
                            y = vec![
                                0.9 * y[0] + 0.1 * y[1] + 0.05 + 0.1 * rng.sample::<f64, _>(StandardNormal),
                                -0.2 * y[0] + y[1] + 0.1 * rng.sample::<f64, _>(StandardNormal),
                            ];
                            cur
                        })
                        .collect(),
                )
            })
            .collect();
        let refs: Vec<&Trajectory> = data.iter().collect();
        let ridge = 0.5;
        let model = fit_linear_one_step(&refs, ridge).unwrap();
        let base = ridge_objective(&model, &refs, ridge);
        let OneStepModel::LinearAffine { dim, a, b } = &model else {
            panic!()
        };
        for _ in 0..200 {
            let eps = 1e-4;
            let perturbed = OneStepModel::LinearAffine {
                dim: *dim,
                a: a.iter()
                    .map(|v| v + eps * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                b: b.iter()
                    .map(|v| v + eps * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            };
            assert!(ridge_objective(&perturbed, &refs, ridge) >= base - 1e-12);
        }
    }

    #[test]
    fn identity_rollout_repeats_observation() {
        let y = JointState::new(2, vec![0.3, -1.2, 2.0, 5.0]).unwrap();
        let preds = predict_from(&OneStepModel::identity(4), &y, None, 3, 8).unwrap();
        assert_eq!(preds.len(), 5);
        assert!(preds.iter().all(|p| p == &y));
    }

    #[test]
    fn affine_rollout_composes() {
        let y = JointState::new(2, vec![0.0; 4]).unwrap();
        let preds = predict_from(&OneStepModel::affine_shift(4, 0.1), &y, None, 0, 3).unwrap();
        for v in preds[2].coords() {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_velocity_extrapolates() {
        let prev = JointState::from_agents(&[[0.0, 0.0], [2.0, 2.0]]);
        let cur = JointState::from_agents(&[[1.0, 0.0], [3.0, 2.0]]);
        let preds = predict_from(&OneStepModel::ConstantVelocity, &cur, Some(&prev), 2, 6).unwrap();
        for (k, p) in preds.iter().enumerate() {
            let steps = (k + 1) as f64;
            assert_eq!(p.agent(0), &[1.0 + steps, 0.0]);
            assert_eq!(p.agent(1), &[3.0 + steps, 2.0]);
        }
        let still = predict_from(&OneStepModel::ConstantVelocity, &cur, None, 0, 3).unwrap();
        assert!(still.iter().all(|p| p == &cur));
    }

    #[test]
    fn non_finite_prediction_names_tau() {
        let model = OneStepModel::LinearAffine {
            dim: 2,
            a: vec![1e200, 0.0, 0.0, 1e200],
            b: vec![0.0; 2],
        };
        let y = JointState::new(2, vec![1.0, 1.0]).unwrap();
        match predict_from(&model, &y, None, 1, 6) {
            Err(Error::Prediction { t: 1, tau: 3 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let y = JointState::new(2, vec![1.0, 1.0]).unwrap();
        assert!(predict_from(&OneStepModel::identity(4), &y, None, 0, 2).is_err());
    }

    #[test]
    fn table_has_all_pairs_and_is_causal() {
        let states: Vec<Vec<f64>> = (0..3).map(|t| vec![t as f64, 1.0]).collect();
        let traj = traj_from(states);
        let table = build_prediction_table(&OneStepModel::ConstantVelocity, &traj).unwrap();
        assert_eq!(table.len(), 3);
        let pairs: Vec<_> = table.entries().iter().map(|(t, tau, _)| (t, tau)).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);

        let mut rng = RngSeed(2).rng();
        let base: Vec<Vec<f64>> = (0..7).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let a = traj_from(base.clone());
        for cut in 1..6 {
            let mut later = base.clone();
            for s in later.iter_mut().skip(cut + 1) {
                s[0] += 100.0;
            }
            let b = traj_from(later);
            for model in [OneStepModel::ConstantVelocity, OneStepModel::affine_shift(2, 0.2)] {
                let ta = build_prediction_table(&model, &a).unwrap();
                let tb = build_prediction_table(&model, &b).unwrap();
                for t in 0..=cut {
                    assert_eq!(ta.from_time(t), tb.from_time(t));
                }
            }
        }
    }

    #[test]
    fn rollout_is_consistent_with_reapplication() {
        let model = OneStepModel::LinearAffine {
            dim: 2,
            a: vec![0.9, 0.1, -0.3, 1.0],
            b: vec![0.2, -0.1],
        };
        let traj = traj_from((0..6).map(|t| vec![t as f64 * 0.5, 1.0 - t as f64]).collect());
        let table = build_prediction_table(&model, &traj).unwrap();
        for t in 0..5 {
            for tau in t + 1..5 {
                assert_eq!(
                    model.apply(table.get(t, tau).coords(), None),
                    table.get(t, tau + 1).coords()
                );
            }
        }
    }

    #[test]
    fn identity_on_constant_trajectory_is_exact() {
        let traj = traj_from(vec![vec![2.0, 3.0, -1.0, 0.5]; 5]);
        let table = build_prediction_table(&OneStepModel::identity(4), &traj).unwrap();
        for (_, tau, p) in table.entries().iter() {
            assert_eq!(p, traj.state(tau));
        }
    }

    #[test]
    fn model_json_shape() {
        let m = OneStepModel::identity(2);
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["kind"], "linear-affine");
        assert_eq!(v["a"], serde_json::json!([1.0, 0.0, 0.0, 1.0]));
        let back: OneStepModel = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
        let cv: OneStepModel = serde_json::from_str(r#"{"kind":"constant-velocity"}"#).unwrap();
        assert_eq!(cv, OneStepModel::ConstantVelocity);
    }
}
