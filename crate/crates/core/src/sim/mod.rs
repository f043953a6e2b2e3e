//! Synthetic multi-page user world with known ground truth.
//!
//! Each user has static page affinities `θ`, a baseline engagement `b`, and a
//! hidden intra-day interest that follows a sticky Markov chain whose
//! stationary distribution is `θ / Σθ`. At every app entry a landing policy
//! picks a page; the session outcome depends on how well the page matches the
//! user's static affinity and current attention target (hidden interest, or
//! the trigger page when a context trigger fires).
//!
//! Randomness is split so that policy choices never shift the draws of other
//! events: per user and day, the entry plan (activity, entry count, hours,
//! interest path, triggers) comes from one forked stream and every session
//! response from its own stream. Two policies run on the same seed therefore
//! see identical users, entry times and noise.

mod day;
mod ite;
mod population;
mod response;
mod traffic;

pub use day::{plan_day, simulate_day, DayPlan, EntryContext, LandingPolicy, WorldState};
pub use ite::{expected_daily_usage, expected_entries_per_day, true_ite, ControlPolicy};
pub use population::build_population;
pub use response::{expected_usage, mean_usage, p_drop, session_response, stay_split, ResponseOutcome};
pub use traffic::TrafficModel;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sessions shorter than this many seconds count as short dwell.
pub const DROP_THRESHOLD_SECS: f64 = 10.0;
/// Hard cap on entries per user per day.
pub const MAX_ENTRIES_PER_DAY: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Number of landing pages `K`.
    pub pages: usize,
    /// Population size `N`.
    pub population: usize,
    pub seed: u64,
    /// Share of users with one dominant page.
    pub single_page_fraction: f64,
    /// Probability that an active user enters at least twice in a day.
    pub multi_entry_prob: f64,
    /// Probability of yet another entry after the second and later ones.
    pub continue_prob: f64,
    /// Gaussian usage noise, seconds.
    pub noise_std: f64,
    pub w_static: f64,
    pub w_dyn: f64,
    /// Base probability that hidden interest re-draws between entries.
    pub drift_prob: f64,
    /// Per-user volatility multiplier is drawn from `[0.5, 1.5] · volatility_scale`.
    /// Zero gives a hidden interest that is fixed for the whole day.
    pub volatility_scale: f64,
    /// Per-entry probability of a context trigger (e.g. a live notification).
    pub trigger_prob: f64,
    /// Mean page switches in a fully mismatched session.
    pub switch_rate: f64,
    /// Median baseline engagement per engaged session, seconds.
    pub base_engagement: f64,
    /// Log-normal spread of baseline engagement.
    pub engagement_spread: f64,
    /// Lower bound of the per-user daily activity probability (upper is 1).
    pub min_active_prob: f64,
    /// Probability that the observable segment attribute names the dominant page.
    pub segment_accuracy: f64,
    /// Default horizon of a standalone `simulate` run.
    pub days: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            pages: 3,
            population: 5000,
            seed: 1,
            single_page_fraction: 0.58,
            multi_entry_prob: 0.70,
            continue_prob: 0.5,
            noise_std: 30.0,
            w_static: 0.6,
            w_dyn: 0.4,
            drift_prob: 0.35,
            volatility_scale: 1.0,
            trigger_prob: 0.15,
            switch_rate: 3.0,
            base_engagement: 480.0,
            engagement_spread: 0.35,
            min_active_prob: 0.7,
            segment_accuracy: 0.8,
            days: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must be in [0,1], got {v}")));
            }
            Ok(())
        };
        if self.pages < 2 {
            return Err(Error::config("pages must be at least 2"));
        }
        if self.population == 0 {
            return Err(Error::config("population must be positive"));
        }
        frac("single_page_fraction", self.single_page_fraction)?;
        frac("multi_entry_prob", self.multi_entry_prob)?;
        frac("continue_prob", self.continue_prob)?;
        frac("w_static", self.w_static)?;
        frac("w_dyn", self.w_dyn)?;
        frac("drift_prob", self.drift_prob)?;
        frac("trigger_prob", self.trigger_prob)?;
        frac("min_active_prob", self.min_active_prob)?;
        frac("segment_accuracy", self.segment_accuracy)?;
        if (self.w_static + self.w_dyn - 1.0).abs() > 1e-9 {
            return Err(Error::config("w_static + w_dyn must equal 1"));
        }
        if self.noise_std < 0.0 || self.switch_rate < 0.0 || self.volatility_scale < 0.0 {
            return Err(Error::config("noise_std, switch_rate and volatility_scale must be non-negative"));
        }
        if self.base_engagement <= 0.0 {
            return Err(Error::config("base_engagement must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u64,
    /// Mean seconds of an engaged, fully matched session.
    pub base_engagement: f64,
    /// Static page affinity `θ`, entries in `[0,1]`.
    pub affinity: Vec<f64>,
    pub volatility: f64,
    /// Page a context trigger pulls the user toward.
    pub trigger_page: usize,
    /// Probability the user shows up on a given day.
    pub active_prob: f64,
    /// Observable noisy attribute: dominant page, or `pages` for mixed users.
    pub segment: usize,
    /// Observable noisy activity level (log-scale engagement).
    pub activity_signal: f64,
    /// Ground truth: `Some(k)` for single-page users.
    pub dominant_page: Option<usize>,
}

impl UserProfile {
    pub fn pages(&self) -> usize {
        self.affinity.len()
    }

    /// Stationary (and initial) distribution of the hidden interest chain.
    pub fn interest_distribution(&self) -> Vec<f64> {
        let s: f64 = self.affinity.iter().sum();
        if s <= 0.0 {
            return vec![1.0 / self.pages() as f64; self.pages()];
        }
        self.affinity.iter().map(|a| a / s).collect()
    }

    /// Probability the hidden interest stays put between two entries.
    pub fn stay_prob(&self, cfg: &SimConfig) -> f64 {
        1.0 - (cfg.drift_prob * self.volatility).clamp(0.0, 1.0)
    }

    /// The page the user habitually resumes on before any history exists.
    pub fn habitual_page(&self) -> usize {
        crate::nn::ops::argmax(&self.affinity)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub user_id: u64,
    pub day: usize,
    pub hour: u8,
    pub entry_index: usize,
    pub landing_page: usize,
    pub usage_seconds: f64,
    pub page_switches: u32,
    /// Sampled immediate drop-off; what PDR counts.
    pub dropped_off: bool,
    /// `usage_seconds < DROP_THRESHOLD_SECS`.
    pub short_dwell: bool,
    /// Page the session ended on.
    pub exit_page: usize,
    pub live_trigger_active: bool,
    /// Oracle-only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_interest_at_entry: Option<usize>,
}

impl SessionLog {
    pub fn sort_key(&self) -> (usize, u8, u64, usize) {
        (self.day, self.hour, self.user_id, self.entry_index)
    }
}

/// Sorts logs into the canonical `(day, hour, user, entry)` order.
pub fn sort_logs(logs: &mut [SessionLog]) {
    logs.sort_by_key(SessionLog::sort_key);
}
