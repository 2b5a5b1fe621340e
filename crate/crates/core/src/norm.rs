use serde::{Deserialize, Serialize};

/// Vector norm shared by calibration, constraint tightening and the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Infinity,
    Euclidean,
}

impl Norm {
    pub fn of(self, v: impl IntoIterator<Item = f64>) -> f64 {
        match self {
            Norm::Infinity => v.into_iter().fold(0.0, |m: f64, x| {
                if m.is_nan() || x.is_nan() {
                    f64::NAN
                } else {
                    m.max(x.abs())
                }
            }),
            Norm::Euclidean => v.into_iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }

    /// `‖a - b‖`. Slices must have equal length.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        self.of(a.iter().zip(b).map(|(x, y)| x - y))
    }
}
