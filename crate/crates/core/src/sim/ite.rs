//! Closed-form expected usage and individual treatment effects.

use serde::{Deserialize, Serialize};

use super::response::{exit_to_target_prob, expected_usage};
use super::{SimConfig, UserProfile, MAX_ENTRIES_PER_DAY};

/// Reference policy the treatment effect is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlPolicy {
    /// Resume the page the user last exited from.
    LastExit,
    /// Uniformly random page at every entry.
    Uniform,
    Fixed(usize),
}

/// `E[entries | active day]`, respecting the per-day cap.
pub fn expected_entries_per_day(cfg: &SimConfig) -> f64 {
    (1..=MAX_ENTRIES_PER_DAY).map(|j| reach_prob(cfg, j)).sum()
}

/// Probability an active day has at least `j` entries.
fn reach_prob(cfg: &SimConfig, j: usize) -> f64 {
    match j {
        0 | 1 => 1.0,
        _ => cfg.multi_entry_prob * cfg.continue_prob.powi(j as i32 - 2),
    }
}

/// Distribution of the attention target at any entry: hidden interest is
/// stationary at `π`, triggers fire independently.
fn target_distribution(cfg: &SimConfig, user: &UserProfile) -> Vec<f64> {
    let mut d: Vec<f64> = user.interest_distribution().iter().map(|p| (1.0 - cfg.trigger_prob) * p).collect();
    d[user.trigger_page] += cfg.trigger_prob;
    d
}

fn per_entry_fixed(cfg: &SimConfig, user: &UserProfile, page: usize) -> f64 {
    target_distribution(cfg, user).iter().enumerate().map(|(t, p)| p * expected_usage(cfg, user, page, t)).sum()
}

/// Long-run expected usage per entry when resuming the last exit page.
fn per_entry_last_exit(cfg: &SimConfig, user: &UserProfile) -> f64 {
    let k = user.pages();
    let m = MAX_ENTRIES_PER_DAY;
    let pi = user.interest_distribution();
    let stay = user.stay_prob(cfg);
    let q = cfg.trigger_prob;
    let idx = |l: usize, h: usize, j: usize| (j * k + h) * k + l;
    let n = k * k * m;
    let mut trans = vec![0.0; n * n];
    let mut reward = vec![0.0; n];
    for j in 0..m {
        let cont = if j + 1 >= m { 0.0 } else { reach_prob(cfg, j + 2) / reach_prob(cfg, j + 1) };
        for h in 0..k {
            for l in 0..k {
                let s = idx(l, h, j);
                let mut exit = vec![0.0; k];
                for (target, pt) in [(user.trigger_page, q), (h, 1.0 - q)] {
                    reward[s] += pt * expected_usage(cfg, user, l, target);
                    let e = exit_to_target_prob(cfg, user, l, target);
                    exit[target] += pt * e;
                    exit[l] += pt * (1.0 - e);
                }
                for (next_l, pe) in exit.iter().enumerate() {
                    if *pe == 0.0 {
                        continue;
                    }
                    for next_h in 0..k {
                        let same_day = if next_h == h { stay } else { 0.0 } + (1.0 - stay) * pi[next_h];
                        if j + 1 < m {
                            trans[s * n + idx(next_l, next_h, j + 1)] += pe * cont * same_day;
                        }
                        trans[s * n + idx(next_l, next_h, 0)] += pe * (1.0 - cont) * pi[next_h];
                    }
                }
            }
        }
    }
    let mu = stationary_distribution(&trans, n);
    mu.iter().zip(&reward).map(|(a, b)| a * b).sum()
}

/// Solves `μ P = μ`, `Σ μ = 1` by Gaussian elimination with partial pivoting.
fn stationary_distribution(p: &[f64], n: usize) -> Vec<f64> {
    // Rows of A = Pᵀ − I, last row replaced by the normalisation constraint.
    let mut a = vec![0.0; n * (n + 1)];
    let w = n + 1;
    for i in 0..n {
        for j in 0..n {
            a[i * w + j] = p[j * n + i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1) * w + j] = 1.0;
    }
    a[(n - 1) * w + n] = 1.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x * w + col].abs().total_cmp(&a[y * w + col].abs())).unwrap();
        if piv != col {
            for j in 0..w {
                a.swap(col * w + j, piv * w + j);
            }
        }
        let d = a[col * w + col];
        if d.abs() < 1e-300 {
            continue;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * w + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..w {
                a[r * w + j] -= f * a[col * w + j];
            }
        }
    }
    (0..n)
        .map(|i| {
            let d = a[i * w + i];
            if d.abs() < 1e-300 {
                0.0
            } else {
                (a[i * w + n] / d).max(0.0)
            }
        })
        .collect()
}

/// Expected usage per calendar day (inactive days count as zero) when every
/// entry follows `policy`.
pub fn expected_daily_usage(cfg: &SimConfig, user: &UserProfile, policy: ControlPolicy) -> f64 {
    let per_entry = match policy {
        ControlPolicy::Fixed(k) => per_entry_fixed(cfg, user, k),
        ControlPolicy::Uniform => {
            (0..user.pages()).map(|k| per_entry_fixed(cfg, user, k)).sum::<f64>() / user.pages() as f64
        }
        ControlPolicy::LastExit => per_entry_last_exit(cfg, user),
    };
    user.active_prob * expected_entries_per_day(cfg) * per_entry
}

/// Ground-truth effect, in seconds per day, of always landing on `page`
/// instead of following `control`.
pub fn true_ite(cfg: &SimConfig, user: &UserProfile, page: usize, control: ControlPolicy) -> f64 {
    assert!(page < user.pages(), "page {page} out of range");
    expected_daily_usage(cfg, user, ControlPolicy::Fixed(page)) - expected_daily_usage(cfg, user, control)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_population, simulate_day, EntryContext, TrafficModel, WorldState};

    fn profile(theta: Vec<f64>) -> UserProfile {
        UserProfile {
            user_id: 0,
            base_engagement: 600.0,
            affinity: theta,
            volatility: 1.0,
            trigger_page: 1,
            active_prob: 0.9,
            segment: 0,
            activity_signal: 0.0,
            dominant_page: None,
        }
    }

    #[test]
    fn treatment_equal_to_control_is_zero() {
        let cfg = SimConfig::default();
        let u = profile(vec![0.5, 0.5, 0.5]);
        for k in 0..3 {
            assert_eq!(true_ite(&cfg, &u, k, ControlPolicy::Fixed(k)), 0.0);
        }
    }

    #[test]
    fn dominant_page_has_positive_effect_vs_uniform() {
        let cfg = SimConfig::default();
        let u = profile(vec![0.95, 0.1, 0.05]);
        assert!(true_ite(&cfg, &u, 0, ControlPolicy::Uniform) > 0.0);
    }

    /// Brute force over the day: enumerate entry counts, the (fixed) hidden
    /// interest and every trigger pattern.
    fn enumerate_daily(cfg: &SimConfig, u: &UserProfile, choose: &dyn Fn(usize) -> Vec<f64>) -> f64 {
        assert_eq!(cfg.drift_prob, 0.0);
        let pi = u.interest_distribution();
        let mut total = 0.0;
        for n in 1..=MAX_ENTRIES_PER_DAY {
            let p_n = reach_prob(cfg, n) - reach_prob(cfg, n + 1) * if n < MAX_ENTRIES_PER_DAY { 1.0 } else { 0.0 };
            for (h, ph) in pi.iter().enumerate() {
                for mask in 0u32..(1 << n) {
                    let mut prob = p_n * ph;
                    let mut usage = 0.0;
                    for j in 0..n {
                        let trig = mask & (1 << j) != 0;
                        prob *= if trig { cfg.trigger_prob } else { 1.0 - cfg.trigger_prob };
                        let target = if trig { u.trigger_page } else { h };
                        let landing = choose(j);
                        usage += landing
                            .iter()
                            .enumerate()
                            .map(|(k, pk)| pk * expected_usage(cfg, u, k, target))
                            .sum::<f64>();
                    }
                    total += prob * usage;
                }
            }
        }
        u.active_prob * total
    }

    #[test]
    fn closed_form_matches_enumeration_oracle() {
        let cfg = SimConfig { drift_prob: 0.0, w_static: 0.6, w_dyn: 0.4, ..Default::default() };
        let u = profile(vec![0.9, 0.1, 0.1]);
        for k in 0..3 {
            let fixed = enumerate_daily(&cfg, &u, &|_| {
                let mut v = vec![0.0; 3];
                v[k] = 1.0;
                v
            });
            let uniform = enumerate_daily(&cfg, &u, &|_| vec![1.0 / 3.0; 3]);
            let oracle = fixed - uniform;
            let closed = true_ite(&cfg, &u, k, ControlPolicy::Uniform);
            assert!((oracle - closed).abs() < 1e-6 * oracle.abs().max(1.0), "k={k}: {oracle} vs {closed}");
        }
        assert!(true_ite(&cfg, &u, 0, ControlPolicy::Uniform) > 0.0);
        assert!(true_ite(&cfg, &u, 1, ControlPolicy::Uniform) < 0.0);
    }

    #[test]
    fn last_exit_closed_form_matches_long_simulation() {
        let cfg = SimConfig { population: 1, ..Default::default() };
        let mut u = profile(vec![0.4, 0.8, 0.3]);
        u.active_prob = 1.0;
        let pop = vec![u.clone()];
        let mut st = WorldState::new(&pop);
        let traffic = TrafficModel::default();
        let days = 20_000;
        let mut total = 0.0;
        let mut daily = Vec::with_capacity(days);
        for d in 0..days {
            let logs = simulate_day(&cfg, &pop, &mut st, &mut |c: &EntryContext| c.last_exit, d, &traffic);
            let s: f64 = logs.iter().map(|l| l.usage_seconds).sum();
            total += s;
            daily.push(s);
        }
        let mean = total / days as f64;
        let var = daily.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / days as f64;
        // consecutive days are correlated through the exit page; allow 4 se
        let se = (var / days as f64).sqrt();
        let closed = expected_daily_usage(&cfg, &u, ControlPolicy::LastExit);
        assert!((mean - closed).abs() < 4.0 * se, "{mean} vs {closed} (se {se})");
    }

    #[test]
    fn fixed_page_closed_form_matches_population_simulation() {
        let cfg = SimConfig { population: 10_000, ..Default::default() };
        let pop = build_population(&cfg).unwrap();
        let mut st = WorldState::new(&pop);
        let logs = simulate_day(&cfg, &pop, &mut st, &mut |_: &EntryContext| 1usize, 0, &TrafficModel::default());
        let mut per_user = vec![0.0; pop.len()];
        logs.iter().for_each(|l| per_user[l.user_id as usize] += l.usage_seconds);
        let n = pop.len() as f64;
        let mean = per_user.iter().sum::<f64>() / n;
        let var = per_user.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = pop.iter().map(|u| expected_daily_usage(&cfg, u, ControlPolicy::Fixed(1))).sum::<f64>() / n;
        assert!((mean - expected).abs() < 3.0 * (var / n).sqrt(), "{mean} vs {expected}");
    }

    #[test]
    fn dominant_page_maximizes_ite_at_zero_volatility() {
        let cfg = SimConfig { population: 500, volatility_scale: 0.0, ..Default::default() };
        for u in build_population(&cfg).unwrap() {
            if let Some(d) = u.dominant_page {
                let ite: Vec<f64> = (0..3).map(|k| true_ite(&cfg, &u, k, ControlPolicy::LastExit)).collect();
                assert_eq!(crate::nn::ops::argmax(&ite), d, "{ite:?} {:?}", u.affinity);
            }
        }
    }
}
