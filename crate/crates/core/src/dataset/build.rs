use std::collections::BTreeMap;

use rand::Rng;

use super::features::{context_features, long_term_features, FeatureSchema, HistoryTable};
use super::{RctInstance, StreamInstance, Transition};
use crate::nn::RngStream;
use crate::sim::{SessionLog, UserProfile};
use crate::{Error, Result};

const ARM_TAG: u64 = 0x4152_4d00_0000_0000;

/// Uniform assignment over `{0 (control), 1..=K}`, drawn per user from its
/// own stream so the result does not depend on population order.
pub fn assign_rct_arms(users: &[u64], pages: usize, seed: u64) -> BTreeMap<u64, usize> {
    users
        .iter()
        .map(|&u| {
            let mut rng = RngStream::new(seed, u).fork(ARM_TAG).rng();
            (u, rng.random_range(0..=pages))
        })
        .collect()
}

/// Users assigned to an arm whose window contained no session.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SkipReport {
    pub skipped_users: Vec<u64>,
}

/// One instance per assigned user with at least one session in the window;
/// `y` is the mean daily usage over `window_days` (inactive days count 0).
pub fn build_daily_rct(
    window_logs: &[SessionLog],
    arms: &BTreeMap<u64, usize>,
    features: &BTreeMap<u64, Vec<f64>>,
    window_days: usize,
) -> Result<(Vec<RctInstance>, SkipReport)> {
    if window_days == 0 {
        return Err(Error::Data("RCT window must span at least one day".into()));
    }
    let mut usage: BTreeMap<u64, (usize, f64)> = BTreeMap::new();
    for l in window_logs {
        let e = usage.entry(l.user_id).or_default();
        e.0 += 1;
        e.1 += l.usage_seconds;
    }
    let mut out = Vec::with_capacity(arms.len());
    let mut skip = SkipReport::default();
    for (&user, &t) in arms {
        let Some(&(_, total)) = usage.get(&user).filter(|(n, _)| *n > 0) else {
            skip.skipped_users.push(user);
            continue;
        };
        let x = features.get(&user).ok_or_else(|| Error::Data(format!("no features for user {user}")))?.clone();
        out.push(RctInstance { user_id: user, x, t, y: total / window_days as f64 });
    }
    Ok((out, skip))
}

fn lookup(population: &[UserProfile], id: u64) -> Result<&UserProfile> {
    population
        .get(id as usize)
        .filter(|u| u.user_id == id)
        .ok_or_else(|| Error::Data(format!("user {id} not in population")))
}

/// Groups sessions by user-day, each group in entry order.
fn user_days(logs: &[SessionLog]) -> BTreeMap<(u64, usize), Vec<&SessionLog>> {
    let mut groups: BTreeMap<(u64, usize), Vec<&SessionLog>> = BTreeMap::new();
    for l in logs {
        groups.entry((l.user_id, l.day)).or_default().push(l);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|l| l.entry_index);
    }
    groups
}

/// Raw `c ⊕ v` state for every entry of one user-day.
fn day_states(user: &UserProfile, history: &HistoryTable, day: usize, sessions: &[&SessionLog]) -> Vec<Vec<f64>> {
    let k = user.pages();
    let v = long_term_features(user, history, day);
    let mut last_exit = history.last_exit_before(user.user_id, day).unwrap_or_else(|| user.habitual_page());
    let today: Vec<SessionLog> = sessions.iter().map(|&l| l.clone()).collect();
    let mut out = Vec::with_capacity(sessions.len());
    for (j, l) in sessions.iter().enumerate() {
        let mut s = context_features(k, l.hour, l.live_trigger_active, last_exit, &today[..j]);
        s.extend_from_slice(&v);
        out.push(s);
        last_exit = l.exit_page;
    }
    out
}

/// Chains each user-day into `(s, a, r, s')` transitions; the day's last
/// entry is terminal with a zero `s'`. `history` must cover the days before
/// those in `logs`.
pub fn build_hourly_transitions(
    logs: &[SessionLog],
    population: &[UserProfile],
    history: &HistoryTable,
) -> Result<Vec<Transition>> {
    let mut out = Vec::with_capacity(logs.len());
    for ((uid, day), sessions) in user_days(logs) {
        let user = lookup(population, uid)?;
        let states = day_states(user, history, day, &sessions);
        let dims = FeatureSchema::state(user.pages()).len();
        for (j, l) in sessions.iter().enumerate() {
            let terminal = j + 1 == sessions.len();
            out.push(Transition {
                user_id: uid,
                day,
                hour: l.hour,
                s: states[j].clone(),
                a: l.landing_page,
                r: l.usage_seconds,
                s_next: if terminal { vec![0.0; dims] } else { states[j + 1].clone() },
                terminal,
            });
        }
    }
    Ok(out)
}

/// `1` when the session kept a low switch rate; zero-usage sessions are `0`.
pub fn stream_label(switches: u32, usage_seconds: f64, threshold: f64) -> bool {
    usage_seconds > 0.0 && f64::from(switches) / usage_seconds < threshold
}

/// Median switch-per-second ratio over sessions with positive usage. When
/// more than half the sessions have no switches the median is 0, which would
/// make every label 0, so the smallest positive ratio is used instead.
pub fn default_threshold<'a>(logs: impl IntoIterator<Item = &'a SessionLog>) -> f64 {
    let mut ratios: Vec<f64> = logs
        .into_iter()
        .filter(|l| l.usage_seconds > 0.0)
        .map(|l| f64::from(l.page_switches) / l.usage_seconds)
        .collect();
    if ratios.is_empty() {
        return 1.0;
    }
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len();
    let median = if n % 2 == 1 { ratios[n / 2] } else { 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]) };
    if median > 0.0 {
        return median;
    }
    ratios.into_iter().find(|r| *r > 0.0).unwrap_or(1.0)
}

/// One instance per session, features split into context `c` and long-term
/// `v` exactly as in the RL state.
pub fn build_stream_instances(
    logs: &[SessionLog],
    population: &[UserProfile],
    history: &HistoryTable,
    threshold: f64,
) -> Result<Vec<StreamInstance>> {
    if !(threshold > 0.0) {
        return Err(Error::config(format!("label threshold must be positive, got {threshold}")));
    }
    let mut out = Vec::with_capacity(logs.len());
    for ((uid, day), sessions) in user_days(logs) {
        let user = lookup(population, uid)?;
        let c_len = FeatureSchema::context(user.pages()).len();
        for (mut s, l) in day_states(user, history, day, &sessions).into_iter().zip(&sessions) {
            let v = s.split_off(c_len);
            out.push(StreamInstance {
                user_id: uid,
                day,
                hour: l.hour,
                c: s,
                v,
                k: l.landing_page,
                label: u8::from(stream_label(l.page_switches, l.usage_seconds, threshold)),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_population, simulate_day, EntryContext, SimConfig, TrafficModel, WorldState};
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn world(n: usize, days: usize) -> (SimConfig, Vec<UserProfile>, Vec<SessionLog>) {
        let cfg = SimConfig { population: n, ..Default::default() };
        let pop = build_population(&cfg).unwrap();
        let mut st = WorldState::new(&pop);
        let mut logs = Vec::new();
        for d in 0..days {
            logs.extend(simulate_day(
                &cfg,
                &pop,
                &mut st,
                &mut |c: &EntryContext| c.last_exit,
                d,
                &TrafficModel::default(),
            ));
        }
        (cfg, pop, logs)
    }

    fn session(user: u64, day: usize, usage: f64) -> SessionLog {
        SessionLog {
            user_id: user,
            day,
            hour: 9,
            entry_index: 0,
            landing_page: 0,
            usage_seconds: usage,
            page_switches: 0,
            dropped_off: false,
            short_dwell: false,
            exit_page: 0,
            live_trigger_active: false,
            hidden_interest_at_entry: None,
        }
    }

    #[test]
    fn rct_response_is_mean_over_window() {
        let logs = vec![session(1, 0, 600.0), session(1, 2, 600.0)];
        let arms = BTreeMap::from([(1, 2), (2, 0)]);
        let feats = BTreeMap::from([(1, vec![0.5]), (2, vec![1.0])]);
        let (inst, skip) = build_daily_rct(&logs, &arms, &feats, 3).unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].y, 400.0);
        assert_eq!(inst[0].t, 2);
        assert_eq!(skip.skipped_users, vec![2]);
    }

    #[test]
    fn fixed_arm_run_gives_one_treatment() {
        let logs: Vec<_> = (0..5).map(|u| session(u, 0, 60.0)).collect();
        let arms: BTreeMap<u64, usize> = (0..5).map(|u| (u, 2)).collect();
        let feats: BTreeMap<u64, Vec<f64>> = (0..5).map(|u| (u, vec![0.0])).collect();
        let (inst, _) = build_daily_rct(&logs, &arms, &feats, 1).unwrap();
        assert!(inst.iter().all(|i| i.t == 2));
    }

    #[test]
    fn arm_assignment_is_balanced() {
        let users: Vec<u64> = (0..5000).collect();
        let arms = assign_rct_arms(&users, 3, 11);
        let mut counts = [0f64; 4];
        arms.values().for_each(|&t| counts[t] += 1.0);
        let e = 5000.0 / 4.0;
        let sd = (5000.0 * 0.25 * 0.75f64).sqrt();
        assert!(counts.iter().all(|c| (c - e).abs() < 3.0 * sd), "{counts:?}");
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    #[test]
    fn transitions_chain_within_day() {
        let (_, pop, logs) = world(300, 3);
        let hist = HistoryTable::from_logs(3, &logs);
        let trans = build_hourly_transitions(&logs, &pop, &hist).unwrap();
        assert_eq!(trans.len(), logs.len());
        let mut per_day: BTreeMap<(u64, usize), Vec<&Transition>> = BTreeMap::new();
        trans.iter().for_each(|t| per_day.entry((t.user_id, t.day)).or_default().push(t));
        let entries_idx = FeatureSchema::context(3).names().position(|n| n == "prior_entries_today").unwrap();
        for group in per_day.values() {
            assert_eq!(group.iter().filter(|t| t.terminal).count(), 1);
            assert!(group.last().unwrap().terminal);
            for (j, t) in group.iter().enumerate() {
                assert_eq!(t.s[entries_idx], j as f64);
                if !t.terminal {
                    assert_eq!(t.s_next, group[j + 1].s);
                } else {
                    assert!(t.s_next.iter().all(|v| *v == 0.0));
                }
            }
        }
        let single = per_day.values().find(|g| g.len() == 1).unwrap();
        assert!(single[0].terminal);
        let triple = per_day.values().find(|g| g.len() == 3).unwrap();
        assert_eq!(triple.iter().filter(|t| t.terminal).count(), 1);
    }

    #[test]
    fn stream_label_examples() {
        assert!(stream_label(2, 200.0, 0.05));
        assert!(stream_label(0, 3.0, 1e-9));
        assert!(!stream_label(0, 0.0, 10.0));
        let (_, pop, logs) = world(50, 2);
        let hist = HistoryTable::from_logs(3, &logs);
        assert!(matches!(build_stream_instances(&logs, &pop, &hist, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn stream_instances_mirror_state_schema() {
        let (_, pop, logs) = world(200, 2);
        let hist = HistoryTable::from_logs(3, &logs);
        let t = default_threshold(&logs);
        assert!(t > 0.0);
        let inst = build_stream_instances(&logs, &pop, &hist, t).unwrap();
        let trans = build_hourly_transitions(&logs, &pop, &hist).unwrap();
        assert_eq!(inst.len(), trans.len());
        for (i, tr) in inst.iter().zip(&trans) {
            assert_eq!([i.c.clone(), i.v.clone()].concat(), tr.s);
            assert_eq!(i.k, tr.a);
        }
        let ones = inst.iter().filter(|i| i.label == 1).count() as f64 / inst.len() as f64;
        assert!(ones > 0.2 && ones < 0.8, "positive share {ones}");
    }

    #[test]
    fn zero_median_falls_back_to_smallest_positive_ratio() {
        let mut logs: Vec<_> = (0..5).map(|u| session(u, 0, 100.0)).collect();
        logs[0].page_switches = 3;
        logs[1].page_switches = 1;
        assert_eq!(default_threshold(&logs), 0.01);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_clears_a_label(s in 0u32..20, u in 0.0f64..2000.0, t in 1e-6f64..1.0, bump in 0.0f64..1.0) {
            if stream_label(s, u, t) {
                prop_assert!(stream_label(s, u, t + bump));
            }
        }
    }
}
