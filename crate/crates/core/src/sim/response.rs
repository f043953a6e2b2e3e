use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{SimConfig, UserProfile};

pub const MIN_DROP: f64 = 0.02;
pub const MAX_DROP: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResponseOutcome {
    pub usage_seconds: f64,
    pub page_switches: u32,
    pub dropped_off: bool,
    pub exit_page: usize,
}

fn satisfaction(cfg: &SimConfig, user: &UserProfile, page: usize, target: usize) -> f64 {
    let matched = if page == target { 1.0 } else { 0.0 };
    cfg.w_static * user.affinity[page] + cfg.w_dyn * matched
}

/// Pre-noise mean usage `b·(w_static·θ[k] + w_dyn·match)`.
pub fn mean_usage(cfg: &SimConfig, user: &UserProfile, page: usize, target: usize) -> f64 {
    user.base_engagement * satisfaction(cfg, user, page, target)
}

pub fn p_drop(cfg: &SimConfig, user: &UserProfile, page: usize, target: usize) -> f64 {
    (1.0 - satisfaction(cfg, user, page, target)).clamp(MIN_DROP, MAX_DROP)
}

/// Engaged (non-dropped) sessions are centred so that the overall pre-noise
/// mean is exactly [`mean_usage`]: dropped sessions contribute zero seconds.
fn engaged_mean(cfg: &SimConfig, user: &UserProfile, page: usize, target: usize) -> f64 {
    mean_usage(cfg, user, page, target) / (1.0 - p_drop(cfg, user, page, target))
}

/// Exact expected usage including the zero floor on the Gaussian noise.
pub fn expected_usage(cfg: &SimConfig, user: &UserProfile, page: usize, target: usize) -> f64 {
    let mu = engaged_mean(cfg, user, page, target);
    let floored = if cfg.noise_std > 0.0 {
        let n = Normal::new(0.0, 1.0).unwrap();
        let z = mu / cfg.noise_std;
        mu * n.cdf(z) + cfg.noise_std * n.pdf(z)
    } else {
        mu.max(0.0)
    };
    (1.0 - p_drop(cfg, user, page, target)) * floored
}

/// Attention target at an entry: the trigger page while a trigger is live,
/// otherwise the hidden interest.
pub fn attention_target(user: &UserProfile, hidden_interest: usize, trigger: bool) -> usize {
    if trigger {
        user.trigger_page
    } else {
        hidden_interest
    }
}

/// Samples one session. Always consumes the same draws from `rng`.
pub fn session_response(
    cfg: &SimConfig,
    user: &UserProfile,
    page: usize,
    hidden_interest: usize,
    trigger: bool,
    rng: &mut impl Rng,
) -> ResponseOutcome {
    assert!(page < user.pages(), "page {page} out of range");
    let target = attention_target(user, hidden_interest, trigger);
    let u_drop: f64 = rng.random();
    let z: f64 = StandardNormal.sample(rng);
    let u_switch: f64 = rng.random();
    if u_drop < p_drop(cfg, user, page, target) {
        return ResponseOutcome { usage_seconds: 0.0, page_switches: 0, dropped_off: true, exit_page: page };
    }
    let usage_seconds = (engaged_mean(cfg, user, page, target) + cfg.noise_std * z).max(0.0);
    let lambda = if page == target { 0.0 } else { cfg.switch_rate };
    let page_switches = poisson_inverse_cdf(lambda, u_switch);
    let exit_page = if page_switches > 0 { target } else { page };
    ResponseOutcome { usage_seconds, page_switches, dropped_off: false, exit_page }
}

fn poisson_inverse_cdf(lambda: f64, u: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    let mut k = 0u32;
    let mut pmf = (-lambda).exp();
    let mut cdf = pmf;
    while u > cdf && k < 1000 {
        k += 1;
        pmf *= lambda / k as f64;
        cdf += pmf;
    }
    k
}

/// Probability that a session landing on `page` ends on `target`.
pub(crate) fn exit_to_target_prob(cfg: &SimConfig, user: &UserProfile, page: usize, target: usize) -> f64 {
    if page == target {
        return 1.0;
    }
    (1.0 - p_drop(cfg, user, page, target)) * (1.0 - (-cfg.switch_rate).exp())
}

/// Seconds a session contributes to each page: everything to the landing
/// page, unless the user switched away, in which case 10% stays on the
/// landing page and the rest goes to the exit page.
pub fn stay_split(landing: usize, exit: usize, usage: f64, out: &mut [f64]) {
    if exit == landing {
        out[landing] += usage;
    } else {
        out[landing] += 0.1 * usage;
        out[exit] += 0.9 * usage;
    }
}
