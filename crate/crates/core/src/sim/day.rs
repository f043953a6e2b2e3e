use rand::Rng;

use super::response::session_response;
use super::{sort_logs, SessionLog, SimConfig, TrafficModel, UserProfile, DROP_THRESHOLD_SECS, MAX_ENTRIES_PER_DAY};
use crate::nn::RngStream;

const PLAN_TAG: u64 = 0x504c_414e_0000_0000;
const RESPONSE_TAG: u64 = 0x5245_5350_0000_0000;

/// What a landing policy may observe at an app entry.
#[derive(Clone, Copy, Debug)]
pub struct EntryContext<'a> {
    pub user: &'a UserProfile,
    pub day: usize,
    pub hour: u8,
    pub entry_index: usize,
    pub trigger_active: bool,
    /// Page the user's previous session (any day) ended on.
    pub last_exit: usize,
    /// This user's earlier sessions today, in entry order.
    pub today: &'a [SessionLog],
}

/// Maps an entry context to a landing page in `[0, K)`.
pub trait LandingPolicy {
    fn choose(&mut self, ctx: &EntryContext<'_>) -> usize;
}

impl<F: FnMut(&EntryContext<'_>) -> usize> LandingPolicy for F {
    fn choose(&mut self, ctx: &EntryContext<'_>) -> usize {
        self(ctx)
    }
}

/// Mutable per-user state carried across days.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub last_exit: Vec<usize>,
}

impl WorldState {
    pub fn new(population: &[UserProfile]) -> Self {
        Self { last_exit: population.iter().map(UserProfile::habitual_page).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedEntry {
    pub hour: u8,
    pub hidden_interest: usize,
    pub trigger: bool,
}

/// Policy-independent randomness for one user-day.
#[derive(Clone, Debug, PartialEq)]
pub struct DayPlan {
    pub active: bool,
    pub entries: Vec<PlannedEntry>,
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn plan_day(cfg: &SimConfig, user: &UserProfile, day: usize, traffic: &TrafficModel) -> DayPlan {
    let mut rng = RngStream::new(cfg.seed, user.user_id).fork(PLAN_TAG | day as u64).rng();
    let active = rng.random::<f64>() < user.active_prob;
    // Draw everything unconditionally so the stream layout does not depend on
    // earlier outcomes.
    let mut n = 1;
    if rng.random::<f64>() < cfg.multi_entry_prob {
        n = 2;
        while n < MAX_ENTRIES_PER_DAY && rng.random::<f64>() < cfg.continue_prob {
            n += 1;
        }
    }
    let mut hours: Vec<u8> = (0..n).map(|_| traffic.sample_hour(&mut rng)).collect();
    hours.sort_unstable();
    let pi = user.interest_distribution();
    let stay = user.stay_prob(cfg);
    let mut interest = sample_categorical(&pi, &mut rng);
    let mut entries = Vec::with_capacity(n);
    for (j, hour) in hours.into_iter().enumerate() {
        if j > 0 && rng.random::<f64>() >= stay {
            interest = sample_categorical(&pi, &mut rng);
        }
        let trigger = rng.random::<f64>() < cfg.trigger_prob;
        entries.push(PlannedEntry { hour, hidden_interest: interest, trigger });
    }
    if !active {
        entries.clear();
    }
    DayPlan { active, entries }
}

/// Runs one day for every user under `policy` and returns the sessions in
/// canonical order.
pub fn simulate_day(
    cfg: &SimConfig,
    population: &[UserProfile],
    state: &mut WorldState,
    policy: &mut dyn LandingPolicy,
    day: usize,
    traffic: &TrafficModel,
) -> Vec<SessionLog> {
    let mut logs = Vec::new();
    for user in population {
        let plan = plan_day(cfg, user, day, traffic);
        let uid = user.user_id as usize;
        let start = logs.len();
        for (j, entry) in plan.entries.iter().enumerate() {
            let page = {
                let ctx = EntryContext {
                    user,
                    day,
                    hour: entry.hour,
                    entry_index: j,
                    trigger_active: entry.trigger,
                    last_exit: state.last_exit[uid],
                    today: &logs[start..],
                };
                policy.choose(&ctx)
            };
            assert!(page < cfg.pages, "policy returned page {page} for K = {}", cfg.pages);
            let stream = RngStream::new(cfg.seed, user.user_id).fork(RESPONSE_TAG | ((day as u64) << 8) | j as u64);
            let out = session_response(cfg, user, page, entry.hidden_interest, entry.trigger, &mut stream.rng());
            state.last_exit[uid] = out.exit_page;
            logs.push(SessionLog {
                user_id: user.user_id,
                day,
                hour: entry.hour,
                entry_index: j,
                landing_page: page,
                usage_seconds: out.usage_seconds,
                page_switches: out.page_switches,
                dropped_off: out.dropped_off,
                short_dwell: out.usage_seconds < DROP_THRESHOLD_SECS,
                exit_page: out.exit_page,
                live_trigger_active: entry.trigger,
                hidden_interest_at_entry: Some(entry.hidden_interest),
            });
        }
    }
    sort_logs(&mut logs);
    logs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::build_population;

    fn small(n: usize) -> (SimConfig, Vec<UserProfile>) {
        let cfg = SimConfig { population: n, ..Default::default() };
        let pop = build_population(&cfg).unwrap();
        (cfg, pop)
    }

    #[test]
    fn single_entry_when_multi_prob_zero() {
        let (mut cfg, pop) = small(300);
        cfg.multi_entry_prob = 0.0;
        let mut st = WorldState::new(&pop);
        let logs = simulate_day(&cfg, &pop, &mut st, &mut |_: &EntryContext| 0usize, 0, &TrafficModel::default());
        let mut counts = std::collections::HashMap::new();
        for l in &logs {
            *counts.entry(l.user_id).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&c| c == 1));
        assert!(!counts.is_empty());
    }

    #[test]
    fn uniform_traffic_flat_hours() {
        let (cfg, pop) = small(4000);
        let mut st = WorldState::new(&pop);
        let logs = simulate_day(&cfg, &pop, &mut st, &mut |_: &EntryContext| 0usize, 0, &TrafficModel::uniform());
        let mut hist = [0f64; 24];
        logs.iter().for_each(|l| hist[l.hour as usize] += 1.0);
        let n = logs.len() as f64;
        let expected = n / 24.0;
        // chi-square with 23 dof; 99.9% quantile is about 49.7
        let chi2: f64 = hist.iter().map(|h| (h - expected).powi(2) / expected).sum();
        assert!(chi2 < 49.7, "chi2 {chi2}");
    }

    #[test]
    fn tidal_traffic_peaks_at_noon() {
        for seed in 0..5 {
            let cfg = SimConfig { population: 1000, seed, ..Default::default() };
            let pop = build_population(&cfg).unwrap();
            let mut st = WorldState::new(&pop);
            let logs = simulate_day(&cfg, &pop, &mut st, &mut |_: &EntryContext| 0usize, 0, &TrafficModel::default());
            let at = |h: u8| logs.iter().filter(|l| l.hour == h).count();
            assert!(at(12) > at(4), "seed {seed}");
        }
    }

    #[test]
    fn multi_entry_share_matches_config() {
        let (cfg, pop) = small(5000);
        let plans: Vec<_> = pop.iter().map(|u| plan_day(&cfg, u, 3, &TrafficModel::default())).collect();
        let active: Vec<_> = plans.iter().filter(|p| p.active).collect();
        let multi = active.iter().filter(|p| p.entries.len() >= 2).count() as f64 / active.len() as f64;
        let se = (0.7 * 0.3 / active.len() as f64).sqrt();
        assert!((multi - 0.7).abs() < 3.0 * se, "{multi}");
    }

    #[test]
    fn policy_does_not_change_plan_or_entry_times() {
        let (cfg, pop) = small(200);
        let t = TrafficModel::default();
        let mut s1 = WorldState::new(&pop);
        let mut s2 = WorldState::new(&pop);
        let a = simulate_day(&cfg, &pop, &mut s1, &mut |_: &EntryContext| 0usize, 1, &t);
        let b = simulate_day(&cfg, &pop, &mut s2, &mut |c: &EntryContext| (c.entry_index + 1) % 3, 1, &t);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sort_key(), y.sort_key());
            assert_eq!(x.hidden_interest_at_entry, y.hidden_interest_at_entry);
            assert_eq!(x.live_trigger_active, y.live_trigger_active);
        }
    }

    #[test]
    fn logs_are_sorted_and_deterministic() {
        let (cfg, pop) = small(100);
        let run = || {
            let mut st = WorldState::new(&pop);
            simulate_day(&cfg, &pop, &mut st, &mut |c: &EntryContext| c.last_exit, 2, &TrafficModel::default())
        };
        let logs = run();
        assert_eq!(logs, run());
        assert!(logs.windows(2).all(|w| w[0].sort_key() <= w[1].sort_key()));
        assert!(logs.iter().all(|l| l.hour < 24 && l.usage_seconds >= 0.0));
    }

    #[test]
    fn zero_volatility_keeps_interest_fixed() {
        let cfg = SimConfig { population: 200, volatility_scale: 0.0, ..Default::default() };
        let pop = build_population(&cfg).unwrap();
        for u in &pop {
            let plan = plan_day(&cfg, u, 0, &TrafficModel::default());
            if let Some(first) = plan.entries.first() {
                assert!(plan.entries.iter().all(|e| e.hidden_interest == first.hidden_interest));
            }
        }
    }
}
