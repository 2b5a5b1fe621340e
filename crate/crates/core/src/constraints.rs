//! Collision constraints against predicted agents.
//!
//! The agent constraint is `c(p, Y) = min_j ‖p - Y_j‖ - margin`, which is
//! 1-Lipschitz in `Y`. A prediction `Ŷ_{τ|s}` with region radius `C_{τ|s}`
//! certifies `c(p, Y_τ) >= 0` whenever `c(p, Ŷ_{τ|s}) >= L C_{τ|s}`. For the
//! ∞-norm the set of positions failing that test for agent `j` is an open
//! axis-aligned square of half-width `margin + L C_{τ|s}` around
//! `Ŷ_{τ|s,j}`, so combining the tests from every `s <= t` leaves agent `j`
//! unsafe only inside the intersection of those squares, which is again a box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::Norm;
use crate::trajectory::JointState;

/// `c(p, Y) = min_j ‖p - Y_j‖ - safety_margin`; positive means safe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionConstraint {
    /// Clearance kept from each agent (m), e.g. pedestrian distance plus vehicle length.
    pub safety_margin: f64,
    pub lipschitz: f64,
    pub norm: Norm,
}

impl CollisionConstraint {
    /// Minimum-distance constraint; 1-Lipschitz in the joint agent state for either norm.
    pub fn min_distance(safety_margin: f64, norm: Norm) -> Result<Self> {
        if !(safety_margin >= 0.0 && safety_margin.is_finite()) {
            return Err(Error::Config(format!(
                "safety margin must be >= 0, got {safety_margin}"
            )));
        }
        Ok(CollisionConstraint {
            safety_margin,
            lipschitz: 1.0,
            norm,
        })
    }

    /// 0.1 m pedestrian distance plus 0.5 m vehicle length, ∞-norm.
    pub fn case_study() -> Self {
        CollisionConstraint {
            safety_margin: 0.1 + 0.5,
            lipschitz: 1.0,
            norm: Norm::Infinity,
        }
    }

    /// `c(p, Y)`. With no agents the constraint is vacuous (`+∞`).
    pub fn evaluate_c(&self, p: [f64; 2], y: &JointState) -> f64 {
        debug_assert_eq!(y.dim(), 2, "agent states must be planar positions");
        y.agents()
            .map(|a| self.norm.distance(&p, a))
            .fold(f64::INFINITY, f64::min)
            - self.safety_margin
    }

    /// `c(p, Ŷ) - L C`; nonnegative certifies safety against every agent
    /// state within `C` of `Ŷ`.
    pub fn tightened_constraint(&self, p: [f64; 2], y_hat: &JointState, radius: f64) -> Result<f64> {
        if !radius.is_finite() {
            return Err(Error::InfiniteRadius);
        }
        Ok(self.evaluate_c(p, y_hat) - self.lipschitz * radius)
    }

    fn check_box_geometry(&self) -> Result<()> {
        if self.norm != Norm::Infinity {
            return Err(Error::Unsupported(
                "exact unsafe-set geometry is only available for the infinity norm".into(),
            ));
        }
        Ok(())
    }
}

/// Open axis-aligned box of predicted-unsafe positions. Empty when `lo > hi`
/// on some axis; unbounded (the whole plane) before any finite region is folded in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnsafeBox {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl UnsafeBox {
    pub const EVERYWHERE: UnsafeBox = UnsafeBox {
        lo: [f64::NEG_INFINITY; 2],
        hi: [f64::INFINITY; 2],
    };

    pub fn square(center: &[f64], half_width: f64) -> Self {
        UnsafeBox {
            lo: [center[0] - half_width, center[1] - half_width],
            hi: [center[0] + half_width, center[1] + half_width],
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.lo[0] <= self.hi[0] && self.lo[1] <= self.hi[1])
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|v| v.is_finite())
    }

    pub fn intersect(&self, other: &UnsafeBox) -> UnsafeBox {
        UnsafeBox {
            lo: [self.lo[0].max(other.lo[0]), self.lo[1].max(other.lo[1])],
            hi: [self.hi[0].min(other.hi[0]), self.hi[1].min(other.hi[1])],
        }
    }

    /// ∞-norm signed distance from `p` to the box boundary: positive outside,
    /// negative inside. Only meaningful for nonempty boxes.
    pub fn signed_distance(&self, p: [f64; 2]) -> f64 {
        (self.lo[0] - p[0])
            .max(p[0] - self.hi[0])
            .max(self.lo[1] - p[1])
            .max(p[1] - self.hi[1])
    }

    /// Whether every point of `self` lies in `other`.
    pub fn is_subset_of(&self, other: &UnsafeBox) -> bool {
        self.is_empty()
            || (!other.is_empty()
                && other.lo[0] <= self.lo[0]
                && other.lo[1] <= self.lo[1]
                && self.hi[0] <= other.hi[0]
                && self.hi[1] <= other.hi[1])
    }
}

/// Relaxed safe set for the robot position at time `τ`, built from the
/// predictions made at times `s = 0..=t`: the robot must be outside every
/// agent's unsafe box.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub t: usize,
    pub tau: usize,
    /// One box per agent.
    pub boxes: Vec<UnsafeBox>,
    /// Prediction times whose (finite) regions have been intersected.
    pub sources: Vec<usize>,
}

impl ConstraintSet {
    /// Set with no information yet: every agent's box is the whole plane.
    pub fn unconstrained(t: usize, tau: usize, agents: usize) -> Self {
        ConstraintSet {
            t,
            tau,
            boxes: vec![UnsafeBox::EVERYWHERE; agents],
            sources: Vec::new(),
        }
    }

    /// Folds in the region predicted at time `s`. Infinite radii certify
    /// nothing and leave the boxes unchanged.
    pub fn refine(
        &mut self,
        constraint: &CollisionConstraint,
        prediction: &JointState,
        radius: f64,
        s: usize,
    ) -> Result<()> {
        constraint.check_box_geometry()?;
        if prediction.agent_count() != self.boxes.len() || prediction.dim() != 2 {
            return Err(Error::Contract(format!(
                "prediction has {} agents of dimension {}, constraint set expects {} planar agents",
                prediction.agent_count(),
                prediction.dim(),
                self.boxes.len()
            )));
        }
        if radius.is_nan() || radius < 0.0 {
            return Err(Error::Contract(format!("region radius must be >= 0, got {radius}")));
        }
        if radius.is_infinite() {
            return Ok(());
        }
        let half_width = constraint.safety_margin + constraint.lipschitz * radius;
        for (b, center) in self.boxes.iter_mut().zip(prediction.agents()) {
            *b = b.intersect(&UnsafeBox::square(center, half_width));
        }
        self.sources.push(s);
        Ok(())
    }

    pub fn is_certified(&self) -> bool {
        !self.sources.is_empty()
    }

    /// Minimum ∞-norm signed distance from `p` to the nonempty agent boxes;
    /// `>= 0` exactly when `p` is in the safe set, `+∞` if no box is nonempty.
    pub fn signed_clearance(&self, p: [f64; 2]) -> f64 {
        self.boxes
            .iter()
            .filter(|b| !b.is_empty())
            .map(|b| b.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_safe(&self, p: [f64; 2]) -> bool {
        self.signed_clearance(p) >= 0.0
    }

    /// Whether this set's safe region contains `earlier`'s, i.e. each agent box
    /// here is a subset of the corresponding box there.
    pub fn relaxes(&self, earlier: &ConstraintSet) -> bool {
        self.boxes.len() == earlier.boxes.len() && self.boxes.iter().zip(&earlier.boxes).all(|(a, b)| a.is_subset_of(b))
    }
}

/// Safe set for `(t, τ)` from `predictions[s] = Ŷ_{τ|s}` and `radii[s] = C_{τ|s}`, `s = 0..=t`.
pub fn build_constraint_set(
    constraint: &CollisionConstraint,
    predictions: &[&JointState],
    radii: &[f64],
    t: usize,
    tau: usize,
) -> Result<ConstraintSet> {
    if predictions.len() != t + 1 || radii.len() != t + 1 || tau <= t {
        return Err(Error::Contract(format!(
            "constraint set (t = {t}, tau = {tau}) needs {} predictions and radii, got {} and {}",
            t + 1,
            predictions.len(),
            radii.len()
        )));
    }
    let mut set = ConstraintSet::unconstrained(t, tau, predictions[0].agent_count());
    for (s, (pred, &r)) in predictions.iter().zip(radii).enumerate() {
        set.refine(constraint, pred, r, s)?;
    }
    if !set.is_certified() {
        return Err(Error::NotCertifiable { t, tau });
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoxRecord {
    Bounds(#[serde(with = "crate::conformal::inf_f64::array4")] [f64; 4]),
    Empty(EmptyTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptyTag {
    Empty,
}

/// One agent box of a constraint set, as exported for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxExport {
    pub t: usize,
    pub tau: usize,
    pub agent: usize,
    #[serde(rename = "box")]
    pub bounds: BoxRecord,
}

impl ConstraintSet {
    /// Rows `{t, tau, agent, box: [xlo, xhi, ylo, yhi] | "empty"}`.
    pub fn export(&self) -> Vec<BoxExport> {
        self.boxes
            .iter()
            .enumerate()
            .map(|(agent, b)| BoxExport {
                t: self.t,
                tau: self.tau,
                agent,
                bounds: if b.is_empty() {
                    BoxRecord::Empty(EmptyTag::Empty)
                } else {
                    BoxRecord::Bounds([b.lo[0], b.hi[0], b.lo[1], b.hi[1]])
                },
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use crate::trajectory::RngSeed;

    fn c06() -> CollisionConstraint {
        CollisionConstraint::min_distance(0.6, Norm::Infinity).unwrap()
    }

    #[test]
    fn evaluate_c_examples() {
        let c = c06();
        let one = JointState::from_agents(&[[1.0, 0.0]]);
        assert!((c.evaluate_c([0.0, 0.0], &one) - 0.4).abs() < 1e-15);
        assert!((c.evaluate_c([1.0, 0.0], &one) + 0.6).abs() < 1e-15);
        let three = JointState::from_agents(&[[2.0, 0.0], [0.0, -1.5], [0.8, 0.3]]);
        assert!((c.evaluate_c([0.0, 0.0], &three) - 0.2).abs() < 1e-15);
        assert_eq!(
            c.evaluate_c([0.0, 0.0], &JointState::new(2, vec![]).unwrap()),
            f64::INFINITY
        );
    }

    #[test]
    fn tightened_examples() {
        let c = c06();
        // c(x, Ŷ) = 0.5
        let y = JointState::from_agents(&[[1.1, 0.0]]);
        assert!((c.tightened_constraint([0.0, 0.0], &y, 0.3).unwrap() - 0.2).abs() < 1e-12);
        assert!(c.tightened_constraint([0.0, 0.0], &y, 0.5).unwrap().abs() < 1e-12);
        assert!(matches!(
            c.tightened_constraint([0.0, 0.0], &y, f64::INFINITY),
            Err(Error::InfiniteRadius)
        ));
    }

    fn random_joint(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> JointState {
        JointState::from_agents(
            &(0..n)
                .map(|_| [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)])
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn tightening_implies_safety_for_every_truth_in_the_region() {
        let mut rng = RngSeed(100).rng();
        for norm in [Norm::Infinity, Norm::Euclidean] {
            let c = CollisionConstraint::min_distance(0.6, norm).unwrap();
            let mut certified = 0;
            while certified < 10_000 {
                let p = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
                let n = rng.gen_range(1..4);
                let y_hat = random_joint(&mut rng, n, 4.0);
                let radius = rng.gen_range(0.0..1.0);
                if c.tightened_constraint(p, &y_hat, radius).unwrap() < 0.0 {
                    continue;
                }
                certified += 1;
                // random truth with ‖Y - Ŷ‖ <= radius
                let mut dir: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let scale = radius * rng.gen_range(0.0..=1.0) / norm.of(dir.iter().copied()).max(1e-300);
                dir.iter_mut().for_each(|d| *d *= scale);
                let truth: Vec<f64> = y_hat.coords().iter().zip(&dir).map(|(a, d)| a + d).collect();
                let truth = JointState::new(2, truth).unwrap();
                assert!(norm.distance(truth.coords(), y_hat.coords()) <= radius * (1.0 + 1e-12));
                assert!(c.evaluate_c(p, &truth) >= -1e-12);
            }
        }
    }

    #[test]
    fn c_is_one_lipschitz() {
        let mut rng = RngSeed(101).rng();
        let c = c06();
        for _ in 0..100_000 {
            let n = rng.gen_range(1..4);
            let p = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let a = random_joint(&mut rng, n, 5.0);
            let b = random_joint(&mut rng, n, 5.0);
            let lhs = (c.evaluate_c(p, &a) - c.evaluate_c(p, &b)).abs();
            assert!(lhs <= Norm::Infinity.distance(a.coords(), b.coords()) + 1e-12);
        }
    }

    #[test]
    fn interval_intersection() {
        let c = CollisionConstraint::min_distance(2.0, Norm::Infinity).unwrap();
        let a = JointState::from_agents(&[[0.0, 0.0]]);
        let b = JointState::from_agents(&[[1.0, 0.0]]);
        let set = build_constraint_set(&c, &[&a, &b], &[0.0, 0.0], 1, 3).unwrap();
        assert_eq!(
            set.boxes[0],
            UnsafeBox {
                lo: [-1.0, -2.0],
                hi: [2.0, 2.0]
            }
        );
        assert_eq!(set.sources, vec![0, 1]);
    }

    #[test]
    fn disjoint_squares_drop_the_agent() {
        let c = CollisionConstraint::min_distance(2.0, Norm::Infinity).unwrap();
        let a = JointState::from_agents(&[[0.0, 0.0]]);
        let b = JointState::from_agents(&[[10.0, 0.0]]);
        let set = build_constraint_set(&c, &[&a, &b], &[0.0, 0.0], 1, 2).unwrap();
        assert!(set.boxes[0].is_empty());
        assert_eq!(set.signed_clearance([0.0, 0.0]), f64::INFINITY);
        assert!(set.is_safe([5.0, 0.0]));
        assert_eq!(set.export()[0].bounds, BoxRecord::Empty(EmptyTag::Empty));
    }

    #[test]
    fn infinite_radii() {
        let c = c06();
        let a = JointState::from_agents(&[[0.0, 0.0]]);
        assert!(matches!(
            build_constraint_set(&c, &[&a, &a], &[f64::INFINITY, f64::INFINITY], 1, 4),
            Err(Error::NotCertifiable { t: 1, tau: 4 })
        ));
        let set = build_constraint_set(&c, &[&a, &a], &[f64::INFINITY, 0.4], 1, 4).unwrap();
        assert_eq!(set.sources, vec![1]);
        assert_eq!(set.boxes[0], UnsafeBox::square(&[0.0, 0.0], 1.0));
    }

    #[test]
    fn euclidean_geometry_is_unsupported() {
        let c = CollisionConstraint::min_distance(0.6, Norm::Euclidean).unwrap();
        let a = JointState::from_agents(&[[0.0, 0.0]]);
        assert!(matches!(
            build_constraint_set(&c, &[&a], &[0.1], 0, 1),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn signed_clearance_examples() {
        let set = ConstraintSet {
            t: 0,
            tau: 1,
            boxes: vec![UnsafeBox {
                lo: [-1.0, -1.0],
                hi: [1.0, 1.0],
            }],
            sources: vec![0],
        };
        assert_eq!(set.signed_clearance([2.0, 0.0]), 1.0);
        assert_eq!(set.signed_clearance([0.0, 0.0]), -1.0);
        assert_eq!(set.signed_clearance([1.0, 0.3]), 0.0);
        assert!(set.is_safe([1.0, 0.3]));
        assert_eq!(set.signed_clearance([3.0, 4.0]), 3.0);
    }

    /// Per-agent relaxed constraint evaluated directly: for every agent,
    /// some `s` has `‖p - Ŷ_{τ|s,j}‖_∞ - margin - L C_{τ|s} >= 0`.
    fn per_agent_oracle(c: &CollisionConstraint, p: [f64; 2], preds: &[JointState], radii: &[f64]) -> bool {
        (0..preds[0].agent_count()).all(|j| {
            preds
                .iter()
                .zip(radii)
                .filter(|(_, r)| r.is_finite())
                .map(|(y, r)| {
                    let a = y.agent(j);
                    (p[0] - a[0]).abs().max((p[1] - a[1]).abs()) - c.safety_margin - c.lipschitz * r
                })
                .fold(f64::NEG_INFINITY, f64::max)
                >= 0.0
        })
    }

    #[test]
    fn box_membership_matches_direct_evaluation() {
        let mut rng = RngSeed(102).rng();
        let c = c06();
        let mut disagreements = 0;
        for _ in 0..10_000 {
            let t = rng.gen_range(0..5);
            let n = rng.gen_range(1..4);
            let base = random_joint(&mut rng, n, 2.0);
            let preds: Vec<JointState> = (0..=t)
                .map(|_| {
                    let drift = random_joint(&mut rng, n, 0.8);
                    JointState::new(
                        2,
                        base.coords().iter().zip(drift.coords()).map(|(a, b)| a + b).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let radii: Vec<f64> = (0..=t).map(|_| rng.gen_range(0.0..0.8)).collect();
            let refs: Vec<&JointState> = preds.iter().collect();
            let set = build_constraint_set(&c, &refs, &radii, t, t + 1).unwrap();
            for _ in 0..4 {
                let p = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
                if set.is_safe(p) != per_agent_oracle(&c, p, &preds, &radii) {
                    disagreements += 1;
                }
            }
        }
        assert_eq!(disagreements, 0);
    }

    #[test]
    fn later_sets_relax_earlier_ones() {
        let mut rng = RngSeed(103).rng();
        let c = c06();
        for _ in 0..1000 {
            let n = rng.gen_range(1..4);
            let mut set = ConstraintSet::unconstrained(0, 6, n);
            let mut prev: Option<ConstraintSet> = None;
            for s in 0..6 {
                set.t = s;
                set.refine(&c, &random_joint(&mut rng, n, 1.0), rng.gen_range(0.0..1.0), s)
                    .unwrap();
                if let Some(p) = &prev {
                    assert!(set.relaxes(p));
                    for _ in 0..10 {
                        let q = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
                        assert!(set.signed_clearance(q) >= p.signed_clearance(q));
                    }
                }
                prev = Some(set.clone());
            }
        }
    }

    #[test]
    fn subset_relation() {
        let big = UnsafeBox::square(&[0.0, 0.0], 2.0);
        let small = UnsafeBox::square(&[0.5, 0.0], 1.0);
        let empty = UnsafeBox {
            lo: [1.0, 0.0],
            hi: [0.0, 1.0],
        };
        assert!(small.is_subset_of(&big));
        assert!(!big.is_subset_of(&small));
        assert!(empty.is_subset_of(&small));
        assert!(!small.is_subset_of(&empty));
        assert!(big.is_subset_of(&UnsafeBox::EVERYWHERE));
    }

    #[test]
    fn export_shape() {
        let set = ConstraintSet {
            t: 2,
            tau: 20,
            boxes: vec![
                UnsafeBox {
                    lo: [-1.0, -2.0],
                    hi: [1.0, 2.0],
                },
                UnsafeBox {
                    lo: [1.0, 0.0],
                    hi: [0.0, 1.0],
                },
            ],
            sources: vec![0, 1, 2],
        };
        let v = serde_json::to_value(set.export()).unwrap();
        assert_eq!(
            v[0],
            serde_json::json!({"t": 2, "tau": 20, "agent": 0, "box": [-1.0, 1.0, -2.0, 2.0]})
        );
        assert_eq!(v[1]["box"], "empty");
        let back: Vec<BoxExport> = serde_json::from_value(v).unwrap();
        assert_eq!(back, set.export());
    }
}
