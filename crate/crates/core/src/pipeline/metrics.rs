use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::dataset::RctInstance;
use crate::isp::IspModel;
use crate::sim::{stay_split, true_ite, ControlPolicy, SessionLog, SimConfig, UserProfile, DROP_THRESHOLD_SECS};
use crate::{Error, Result};

/// Lifetime over the trailing week of `[t0, t]` (0-based, inclusive):
/// summed daily actives over `max(t−6, t0)..=t`, divided by the users active
/// at least once in `[t0, t]`. `activity[u][d]` marks user `u` active on day `d`.
pub fn compute_lt(activity: &[Vec<bool>], t0: usize, t: usize) -> Result<f64> {
    if t < t0 {
        return Err(Error::Eval(format!("LT window end {t} precedes start {t0}")));
    }
    if let Some(row) = activity.iter().find(|r| r.len() <= t) {
        return Err(Error::Bounds { index: t, len: row.len() });
    }
    let active = activity.iter().filter(|r| r[t0..=t].iter().any(|a| *a)).count();
    if active == 0 {
        return Err(Error::Eval("LT undefined: no active users in window".into()));
    }
    let from = t.saturating_sub(6).max(t0);
    let dau: usize = (from..=t).map(|d| activity.iter().filter(|r| r[d]).count()).sum();
    Ok(dau as f64 / active as f64)
}

/// Share of sessions that dropped off immediately.
pub fn compute_pdr(logs: &[SessionLog]) -> Result<f64> {
    if logs.is_empty() {
        return Err(Error::Eval("PDR of an empty log".into()));
    }
    Ok(logs.iter().filter(|l| l.dropped_off).count() as f64 / logs.len() as f64)
}

/// A user is active on a day with at least one non-dropped session.
/// Rows follow `users`, columns are days `0..days`.
pub fn activity_matrix(logs: &[SessionLog], users: &[u64], days: usize) -> Vec<Vec<bool>> {
    let index: BTreeMap<u64, usize> = users.iter().enumerate().map(|(i, u)| (*u, i)).collect();
    let mut m = vec![vec![false; days]; users.len()];
    for l in logs.iter().filter(|l| !l.dropped_off && l.day < days) {
        if let Some(&i) = index.get(&l.user_id) {
            m[i][l.day] = true;
        }
    }
    m
}

/// Metrics of one policy arm on one evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub sessions: usize,
    pub pdr: f64,
    /// Mean usage seconds per session.
    pub mean_usage: f64,
    /// Daily active users per evaluation day.
    pub dau: Vec<f64>,
    pub mean_dau: f64,
    pub lt: f64,
    /// Share of users with usage on two or more pages over the window.
    pub multi_page_fraction: f64,
    /// Landings with usage of at least the drop threshold, per user per day, by page.
    pub effective_entries: Vec<f64>,
    /// Entries served by a fallback path.
    pub fallbacks: usize,
}

impl ArmMetrics {
    /// `logs` must cover days `first_day..first_day + days` only.
    pub fn compute(logs: &[SessionLog], users: &[u64], pages: usize, first_day: usize, days: usize) -> Result<Self> {
        let shifted: Vec<SessionLog> =
            logs.iter().map(|l| SessionLog { day: l.day - first_day, ..l.clone() }).collect();
        let activity = activity_matrix(&shifted, users, days);
        let dau: Vec<f64> = (0..days).map(|d| activity.iter().filter(|r| r[d]).count() as f64).collect();
        let mut pages_used: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        let mut effective = vec![0.0; pages];
        for l in logs {
            stay_split(
                l.landing_page,
                l.exit_page,
                l.usage_seconds,
                pages_used.entry(l.user_id).or_insert_with(|| vec![0.0; pages]),
            );
            if l.usage_seconds >= DROP_THRESHOLD_SECS {
                effective[l.landing_page] += 1.0;
            }
        }
        let with_usage = pages_used.values().filter(|v| v.iter().any(|s| *s > 0.0)).count();
        let multi = pages_used.values().filter(|v| v.iter().filter(|s| **s > 0.0).count() >= 2).count();
        let user_days = (users.len() * days) as f64;
        Ok(Self {
            sessions: logs.len(),
            pdr: compute_pdr(logs)?,
            mean_usage: logs.iter().map(|l| l.usage_seconds).sum::<f64>() / logs.len() as f64,
            mean_dau: dau.iter().sum::<f64>() / days as f64,
            dau,
            lt: compute_lt(&activity, 0, days - 1)?,
            multi_page_fraction: if with_usage == 0 { 0.0 } else { multi as f64 / with_usage as f64 },
            effective_entries: effective.iter().map(|e| e / user_days).collect(),
            fallbacks: 0,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.pdr, self.mean_usage, self.mean_dau, self.lt, self.multi_page_fraction]
            .iter()
            .chain(&self.dau)
            .chain(&self.effective_entries)
            .all(|x| x.is_finite())
    }
}

/// Exact two-sided sign test on paired differences; zero differences are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test(diffs: &[f64]) -> SignTest {
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    let losses = diffs.iter().filter(|d| **d < 0.0).count();
    let ties = diffs.len() - wins - losses;
    let n = (wins + losses) as u64;
    let p_value = if n == 0 {
        1.0
    } else {
        let b = Binomial::new(0.5, n).expect("valid binomial");
        (2.0 * b.cdf(wins.min(losses) as u64)).min(1.0)
    };
    SignTest { wins, losses, ties, p_value }
}

/// Uplift ranking quality for one treatment against control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QiniStats {
    /// Treatment id in `1..=K`.
    pub treatment: usize,
    pub n_treated: usize,
    pub n_control: usize,
    /// Area between the Qini curve and the random-ranking line.
    pub qini: f64,
    /// Area under the Qini curve.
    pub auuc: f64,
    /// Curve sampled at 101 evenly spaced population fractions.
    pub curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QiniReport {
    pub per_treatment: Vec<QiniStats>,
    /// Means over treatments.
    pub qini: f64,
    pub auuc: f64,
}

/// Qini curve over a pooled treated/control sample ranked by descending
/// score (ties by input order). Point `i` is the difference of cumulative
/// per-arm outcome shares, `(Y_t(i)/N_t − Y_c(i)/N_c) / ȳ`.
pub fn qini_curve(scores: &[f64], treated: &[bool], y: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != treated.len() || scores.len() != y.len() {
        return Err(Error::shape("scores, arms and outcomes differ in length"));
    }
    let nt = treated.iter().filter(|t| **t).count();
    let nc = treated.len() - nt;
    if nt == 0 || nc == 0 {
        return Err(Error::Eval("Qini needs both treated and control samples".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let scale = if mean.abs() > 1e-12 { mean.abs() } else { 1.0 };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut yt, mut yc) = (0.0, 0.0);
    Ok(order
        .into_iter()
        .map(|i| {
            if treated[i] {
                yt += y[i];
            } else {
                yc += y[i];
            }
            (yt / nt as f64 - yc / nc as f64) / scale
        })
        .collect())
}

fn curve_stats(curve: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = curve.len();
    let end = curve[n - 1];
    let qini = curve.iter().enumerate().map(|(i, g)| g - (i + 1) as f64 / n as f64 * end).sum::<f64>() / n as f64;
    let auuc = curve.iter().sum::<f64>() / n as f64;
    let sampled = (0..=100).map(|j| if j == 0 { 0.0 } else { curve[(j * n).div_ceil(100) - 1] }).collect();
    (qini, auuc, sampled)
}

/// Qini per treatment with `score(inst, k)` as the predicted uplift of page
/// treatment `k` for the instance's user.
pub fn qini_report(
    instances: &[RctInstance],
    pages: usize,
    mut score: impl FnMut(&RctInstance, usize) -> Result<f64>,
) -> Result<QiniReport> {
    let mut per_treatment = Vec::with_capacity(pages);
    for k in 1..=pages {
        let pool: Vec<&RctInstance> = instances.iter().filter(|i| i.t == k || i.t == 0).collect();
        let treated: Vec<bool> = pool.iter().map(|i| i.t == k).collect();
        let n_treated = treated.iter().filter(|t| **t).count();
        if n_treated == 0 || n_treated == pool.len() {
            return Err(Error::Eval(format!("treatment {k} or control arm missing from evaluation set")));
        }
        let scores = pool.iter().map(|i| score(i, k)).collect::<Result<Vec<_>>>()?;
        let y: Vec<f64> = pool.iter().map(|i| i.y).collect();
        let (qini, auuc, curve) = curve_stats(&qini_curve(&scores, &treated, &y)?);
        per_treatment.push(QiniStats { treatment: k, n_treated, n_control: pool.len() - n_treated, qini, auuc, curve });
    }
    let n = per_treatment.len() as f64;
    Ok(QiniReport {
        qini: per_treatment.iter().map(|s| s.qini).sum::<f64>() / n,
        auuc: per_treatment.iter().map(|s| s.auuc).sum::<f64>() / n,
        per_treatment,
    })
}

/// Ranks by the model's uplift `ŷ^k − ŷ^{0,*}`.
pub fn qini_auuc(model: &IspModel, instances: &[RctInstance]) -> Result<QiniReport> {
    let mut cache: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    qini_report(instances, model.pages(), |i, k| {
        if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(i.user_id) {
            e.insert(model.predict(&i.x)?.uplift());
        }
        Ok(cache[&i.user_id][k - 1])
    })
}

/// Ranks by the simulator's exact effect against the trial's control arm.
pub fn oracle_qini(cfg: &SimConfig, population: &[UserProfile], instances: &[RctInstance]) -> Result<QiniReport> {
    qini_report(instances, cfg.pages, |i, k| {
        let user = population
            .get(i.user_id as usize)
            .filter(|u| u.user_id == i.user_id)
            .ok_or_else(|| Error::Data(format!("user {} not in population", i.user_id)))?;
        Ok(true_ite(cfg, user, k - 1, ControlPolicy::LastExit))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::nn::RngStream;

    fn log(user: u64, day: usize, page: usize, usage: f64, dropped: bool) -> SessionLog {
        SessionLog {
            user_id: user,
            day,
            hour: 9,
            entry_index: 0,
            landing_page: page,
            usage_seconds: usage,
            page_switches: 0,
            dropped_off: dropped,
            short_dwell: usage < DROP_THRESHOLD_SECS,
            exit_page: page,
            live_trigger_active: false,
            hidden_interest_at_entry: None,
        }
    }

    #[test]
    fn lt_fixtures() {
        let full = vec![vec![true; 7]; 10];
        assert_eq!(compute_lt(&full, 0, 6).unwrap(), 7.0);
        let mut once = vec![vec![false; 7]];
        once[0][6] = true;
        assert_eq!(compute_lt(&once, 0, 6).unwrap(), 1.0);
        let two = vec![vec![true; 7], vec![true, true, false, false, false, false, false]];
        assert_eq!(compute_lt(&two, 0, 6).unwrap(), 4.5);
    }

    #[test]
    fn lt_errors_and_short_windows() {
        assert!(matches!(compute_lt(&[vec![false; 3]], 0, 2), Err(Error::Eval(_))));
        assert!(matches!(compute_lt(&[vec![true; 3]], 2, 1), Err(Error::Eval(_))));
        assert!(matches!(compute_lt(&[vec![true; 3]], 0, 3), Err(Error::Bounds { .. })));
        assert_eq!(compute_lt(&[vec![true; 10]], 5, 7).unwrap(), 3.0);
        // Only the trailing week counts.
        assert_eq!(compute_lt(&[vec![true; 10]], 0, 9).unwrap(), 7.0);
    }

    #[test]
    fn pdr_counts() {
        let none: Vec<_> = (0..4).map(|u| log(u, 0, 0, 50.0, false)).collect();
        assert_eq!(compute_pdr(&none).unwrap(), 0.0);
        let all: Vec<_> = (0..4).map(|u| log(u, 0, 0, 0.0, true)).collect();
        assert_eq!(compute_pdr(&all).unwrap(), 1.0);
        let some: Vec<_> = (0..12).map(|u| log(u, 0, 0, 0.0, u < 3)).collect();
        assert_eq!(compute_pdr(&some).unwrap(), 0.25);
        assert!(compute_pdr(&[]).is_err());
    }

    #[test]
    fn arm_metrics_on_toy_logs() {
        let mut logs = vec![log(0, 10, 0, 100.0, false), log(0, 11, 1, 5.0, false), log(1, 10, 2, 0.0, true)];
        logs[1].exit_page = 1;
        let m = ArmMetrics::compute(&logs, &[0, 1, 2], 3, 10, 2).unwrap();
        assert_eq!(m.sessions, 3);
        assert_eq!(m.dau, vec![1.0, 1.0]);
        assert_eq!(m.lt, 2.0);
        assert_eq!(m.multi_page_fraction, 1.0);
        assert_eq!(m.effective_entries, vec![1.0 / 6.0, 0.0, 0.0]);
        assert!((m.pdr - 1.0 / 3.0).abs() < 1e-15);
        assert!(m.is_finite());
    }

    #[test]
    fn sign_test_values() {
        let all_up = sign_test(&[1.0; 10]);
        assert_eq!((all_up.wins, all_up.losses), (10, 0));
        assert!((all_up.p_value - 2.0 / 1024.0).abs() < 1e-12);
        let nine = sign_test(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        assert!((nine.p_value - 22.0 / 1024.0).abs() < 1e-12);
        assert_eq!(sign_test(&[0.0; 4]).p_value, 1.0);
        assert_eq!(sign_test(&[1.0, -1.0]).p_value, 1.0);
    }

    fn rct_sample(n: usize, seed: u64) -> (Vec<RctInstance>, Vec<f64>) {
        let mut rng = RngStream::new(seed, 1).rng();
        let mut tau = Vec::new();
        let inst = (0..n)
            .map(|i| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let t = rng.random_range(0..=1usize);
                let effect = 40.0 * x;
                tau.push(effect);
                let y = 100.0 + if t == 1 { effect } else { 0.0 } + rng.random_range(-30.0..30.0);
                RctInstance { user_id: i as u64, x: vec![x], t, y }
            })
            .collect();
        (inst, tau)
    }

    #[test]
    fn random_scores_give_near_zero_qini() {
        let (inst, _) = rct_sample(5000, 3);
        let mut rng = RngStream::new(4, 4).rng();
        let scores: Vec<f64> = inst.iter().map(|_| rng.random()).collect();
        let r = qini_report(&inst, 1, |i, _| Ok(scores[i.user_id as usize])).unwrap();
        assert!(r.qini.abs() < 0.02, "{}", r.qini);
    }

    #[test]
    fn true_effect_ranking_beats_random_and_reversal() {
        let (inst, tau) = rct_sample(4000, 5);
        let best = qini_report(&inst, 1, |i, _| Ok(tau[i.user_id as usize])).unwrap();
        let worst = qini_report(&inst, 1, |i, _| Ok(-tau[i.user_id as usize])).unwrap();
        assert!(best.qini > 0.05, "{}", best.qini);
        assert!(worst.qini < -0.05);
        assert_eq!(best.per_treatment[0].curve.len(), 101);
        assert_eq!(best.per_treatment[0].curve[0], 0.0);
        let end = *best.per_treatment[0].curve.last().unwrap();
        assert!((end - *worst.per_treatment[0].curve.last().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn qini_curve_by_hand() {
        // Ranked: treated 10, control 2, treated 4, control 6. N_t = N_c = 2, ȳ = 5.5.
        let c = qini_curve(&[4.0, 3.0, 2.0, 1.0], &[true, false, true, false], &[10.0, 2.0, 4.0, 6.0]).unwrap();
        let expect = [5.0 / 5.5, 4.0 / 5.5, 6.0 / 5.5, 3.0 / 5.5];
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_arm_is_an_error() {
        let inst: Vec<_> = (0..4).map(|i| RctInstance { user_id: i, x: vec![0.0], t: 1, y: 1.0 }).collect();
        assert!(matches!(qini_report(&inst, 1, |_, _| Ok(0.0)), Err(Error::Eval(_))));
    }
}
