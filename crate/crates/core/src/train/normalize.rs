use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::demo::EpisodeRecord;

/// Spans narrower than this are treated as constant.
const MIN_SPAN: f64 = 1e-9;

/// Min/max statistics of one dimension, mapped onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
    /// Constant dimension, passed through unchanged.
    pub degenerate: bool,
}

impl Range {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let mut it = values.into_iter().peekable();
        it.peek()?;
        let (min, max) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(Self {
            min,
            max,
            degenerate: max - min < MIN_SPAN,
        })
    }

    pub fn norm(&self, x: f64) -> f64 {
        if self.degenerate {
            x
        } else {
            2.0 * (x - self.min) / (self.max - self.min) - 1.0
        }
    }

    pub fn denorm(&self, y: f64) -> f64 {
        if self.degenerate {
            y
        } else {
            (y + 1.0) / 2.0 * (self.max - self.min) + self.min
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub action: [Range; 4],
    pub lowdim: [Range; 4],
}

impl Normalizer {
    /// Statistics over every action and every frame's low-dim state.
    pub fn fit(records: &[EpisodeRecord]) -> Result<Self, TrainError> {
        let dim = |f: &dyn Fn(&EpisodeRecord) -> Vec<f64>| {
            Range::fit(records.iter().flat_map(f)).ok_or_else(|| TrainError::Data("no frames to normalize".into()))
        };
        let mut action = Vec::with_capacity(4);
        let mut lowdim = Vec::with_capacity(4);
        for k in 0..4 {
            action.push(dim(&|r| r.actions.iter().map(|a| a.to_array()[k]).collect())?);
            lowdim.push(dim(&|r| r.frames.iter().map(|f| f.lowdim()[k]).collect())?);
        }
        Ok(Self {
            action: action.try_into().expect("four dims"),
            lowdim: lowdim.try_into().expect("four dims"),
        })
    }

    pub fn norm_action(&self, a: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|k| self.action[k].norm(a[k]))
    }

    pub fn denorm_action(&self, a: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|k| self.action[k].denorm(a[k]))
    }

    pub fn norm_lowdim(&self, x: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|k| self.lowdim[k].norm(x[k]))
    }

    pub fn denorm_lowdim(&self, x: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|k| self.lowdim[k].denorm(x[k]))
    }

    /// Names of constant dimensions, e.g. `action[2]`.
    pub fn degenerate_dims(&self) -> Vec<String> {
        let tag = |name: &str, rs: &[Range; 4]| -> Vec<String> {
            (0..4).filter(|&k| rs[k].degenerate).map(|k| format!("{name}[{k}]")).collect()
        };
        let mut out = tag("action", &self.action);
        out.extend(tag("lowdim", &self.lowdim));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degenerate_dimension_is_identity() {
        let r = Range::fit([0.1, 0.1, 0.1]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.norm(0.1), 0.1);
        assert_eq!(r.denorm(0.37), 0.37);
        assert!(Range::fit(std::iter::empty()).is_none());
    }

    #[test]
    fn extremes_map_to_unit_interval() {
        let r = Range::fit([-0.2, 0.05, 0.3]).unwrap();
        assert!(!r.degenerate);
        assert_eq!(r.norm(-0.2), -1.0);
        assert_eq!(r.norm(0.3), 1.0);
        assert!((r.norm(0.05)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn round_trip_within_tolerance(
            values in proptest::collection::vec(-0.5f64..0.5, 2..20),
            probe in 0usize..20,
        ) {
            let r = Range::fit(values.iter().copied()).unwrap();
            let x = values[probe % values.len()];
            prop_assert!((r.denorm(r.norm(x)) - x).abs() <= 1e-6);
            let y = r.norm(x);
            prop_assert!(r.degenerate || (-1.0 - 1e-12..=1.0 + 1e-12).contains(&y));
        }
    }
}
