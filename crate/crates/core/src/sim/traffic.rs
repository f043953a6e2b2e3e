use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Relative traffic volume per hour of day; mean weight is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficModel {
    pub hourly_weight: [f64; 24],
}

const TIDAL_SHAPE: [f64; 24] = [
    0.9, 0.6, 0.35, 0.2, 0.15, 0.15, 0.2, 0.45, 0.8, 1.0, 1.05, 1.2, //
    1.9, 1.95, 1.8, 1.1, 1.0, 1.1, 1.4, 1.9, 2.1, 2.2, 1.9, 1.2,
];

impl Default for TrafficModel {
    /// Lunch (12–14h) and evening (19–22h) peaks, deep trough 3–6h.
    fn default() -> Self {
        Self::from_raw(TIDAL_SHAPE).expect("valid built-in shape")
    }
}

impl TrafficModel {
    /// Rescales positive raw weights so they sum to 24.
    pub fn from_raw(raw: [f64; 24]) -> Result<Self> {
        if raw.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::config("hourly weights must be positive"));
        }
        let s: f64 = raw.iter().sum();
        let mut hourly_weight = raw;
        hourly_weight.iter_mut().for_each(|w| *w *= 24.0 / s);
        Ok(Self { hourly_weight })
    }

    pub fn uniform() -> Self {
        Self { hourly_weight: [1.0; 24] }
    }

    pub fn sample_hour(&self, rng: &mut impl Rng) -> u8 {
        let dist = WeightedIndex::new(self.hourly_weight).expect("positive weights");
        dist.sample(rng) as u8
    }
}
