use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::sim::{stay_split, SessionLog, UserProfile};

pub const HOURS: usize = 24;

/// One named slot of a fixed-order feature vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    /// Numeric fields are z-scored; indicator fields are left raw.
    pub numeric: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub fields: Vec<Field>,
}

impl FeatureSchema {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }

    fn num(&mut self, name: impl Into<String>) {
        self.fields.push(Field { name: name.into(), numeric: true });
    }

    fn flag(&mut self, name: impl Into<String>) {
        self.fields.push(Field { name: name.into(), numeric: false });
    }

    fn extend(&mut self, other: FeatureSchema) {
        self.fields.extend(other.fields);
    }

    /// Inter-day uplift features: profile attributes plus 7/30-day usage and
    /// 7/14-day per-page stay aggregates.
    pub fn rct(pages: usize) -> Self {
        let mut s = Self::default();
        s.num("activity_signal");
        for g in 0..=pages {
            s.flag(format!("segment_{g}"));
        }
        for k in 0..pages {
            s.flag(format!("trigger_page_{k}"));
        }
        s.num("usage_7d");
        s.num("usage_30d");
        s.num("entries_7d");
        s.num("entries_30d");
        for k in 0..pages {
            s.num(format!("stay_7d_{k}"));
        }
        for k in 0..pages {
            s.num(format!("stay_14d_{k}"));
        }
        s
    }

    /// Intra-day context `c`: what has happened so far today.
    pub fn context(pages: usize) -> Self {
        let mut s = Self::default();
        for k in 0..pages {
            s.num(format!("today_usage_{k}"));
        }
        s.num("prior_entries_today");
        s.flag("trigger_active");
        for h in 0..HOURS {
            s.flag(format!("hour_{h}"));
        }
        for k in 0..pages {
            s.flag(format!("last_exit_{k}"));
        }
        s.num("last_usage_today");
        s.num("last_switches_today");
        s
    }

    /// Long-term behaviour `v`.
    pub fn long_term(pages: usize) -> Self {
        let mut s = Self::default();
        for k in 0..pages {
            s.num(format!("stay_7d_{k}"));
        }
        s.num("usage_7d");
        s.num("entries_7d");
        s.num("activity_signal");
        for g in 0..=pages {
            s.flag(format!("segment_{g}"));
        }
        for k in 0..pages {
            s.flag(format!("trigger_page_{k}"));
        }
        s
    }

    /// RL state and AM input: `c` followed by `v`.
    pub fn state(pages: usize) -> Self {
        let mut s = Self::context(pages);
        s.extend(Self::long_term(pages));
        s
    }
}

/// Per-feature affine normalisation fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dims: usize) -> Self {
        Self { mean: vec![0.0; dims], std: vec![1.0; dims] }
    }

    pub fn fit<'a>(schema: &FeatureSchema, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let d = schema.len();
        let mut n = 0usize;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for row in rows {
            n += 1;
            for (j, v) in row.iter().enumerate().take(d) {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        let mut out = Self::identity(d);
        if n == 0 {
            return out;
        }
        for (j, f) in schema.fields.iter().enumerate() {
            if !f.numeric {
                continue;
            }
            let mean = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(0.0);
            out.mean[j] = mean;
            out.std[j] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }

    pub fn apply_inplace(&self, x: &mut [f64]) {
        for (v, (m, s)) in x.iter_mut().zip(self.mean.iter().zip(&self.std)) {
            *v = (*v - m) / s;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DayStats {
    pub usage: f64,
    pub entries: usize,
    pub switches: u64,
    /// Seconds attributed to each page.
    pub stay: Vec<f64>,
    /// Exit page of the day's last session.
    pub last_exit: Option<usize>,
}

/// Per (user, day) aggregates used for rolling-window features.
#[derive(Clone, Debug, Default)]
pub struct HistoryTable {
    pages: usize,
    days: BTreeMap<(u64, usize), DayStats>,
}

impl HistoryTable {
    pub fn new(pages: usize) -> Self {
        Self { pages, days: BTreeMap::new() }
    }

    pub fn from_logs(pages: usize, logs: &[SessionLog]) -> Self {
        let mut t = Self::new(pages);
        t.add_logs(logs);
        t
    }

    /// Folds sessions in. Logs for one user-day must arrive in entry order
    /// for `last_exit` to be meaningful.
    pub fn add_logs(&mut self, logs: &[SessionLog]) {
        for l in logs {
            let e = self
                .days
                .entry((l.user_id, l.day))
                .or_insert_with(|| DayStats { stay: vec![0.0; self.pages], ..Default::default() });
            e.usage += l.usage_seconds;
            e.entries += 1;
            e.switches += u64::from(l.page_switches);
            stay_split(l.landing_page, l.exit_page, l.usage_seconds, &mut e.stay);
            e.last_exit = Some(l.exit_page);
        }
    }

    pub fn day(&self, user: u64, day: usize) -> Option<&DayStats> {
        self.days.get(&(user, day))
    }

    /// Sum over days `[end - len, end)`.
    pub fn window(&self, user: u64, end: usize, len: usize) -> DayStats {
        let mut out = DayStats { stay: vec![0.0; self.pages], ..Default::default() };
        let start = end.saturating_sub(len);
        for (_, d) in self.days.range((user, start)..(user, end)) {
            out.usage += d.usage;
            out.entries += d.entries;
            out.switches += d.switches;
            for (a, b) in out.stay.iter_mut().zip(&d.stay) {
                *a += b;
            }
            out.last_exit = d.last_exit.or(out.last_exit);
        }
        out
    }

    /// Exit page of the user's most recent session before `day`.
    pub fn last_exit_before(&self, user: u64, day: usize) -> Option<usize> {
        self.days.range((user, 0)..(user, day)).next_back().and_then(|(_, d)| d.last_exit)
    }
}

fn one_hot(out: &mut Vec<f64>, n: usize, idx: usize) {
    out.extend((0..n).map(|i| if i == idx { 1.0 } else { 0.0 }));
}

/// Raw inter-day features of `user` as of the start of `day`. Window
/// aggregates are mean per calendar day.
pub fn rct_features(user: &UserProfile, history: &HistoryTable, day: usize) -> Vec<f64> {
    let k = user.pages();
    let mut x = Vec::with_capacity(4 + 3 * k + k + 1);
    x.push(user.activity_signal);
    one_hot(&mut x, k + 1, user.segment);
    one_hot(&mut x, k, user.trigger_page);
    let w7 = history.window(user.user_id, day, 7);
    let w14 = history.window(user.user_id, day, 14);
    let w30 = history.window(user.user_id, day, 30);
    x.push(w7.usage / 7.0);
    x.push(w30.usage / 30.0);
    x.push(w7.entries as f64 / 7.0);
    x.push(w30.entries as f64 / 30.0);
    x.extend(w7.stay.iter().map(|s| s / 7.0));
    x.extend(w14.stay.iter().map(|s| s / 14.0));
    x
}

/// Raw long-term vector `v` of `user` as of the start of `day`.
pub fn long_term_features(user: &UserProfile, history: &HistoryTable, day: usize) -> Vec<f64> {
    let k = user.pages();
    let w7 = history.window(user.user_id, day, 7);
    let mut v = Vec::with_capacity(3 * k + 4);
    v.extend(w7.stay.iter().map(|s| s / 7.0));
    v.push(w7.usage / 7.0);
    v.push(w7.entries as f64 / 7.0);
    v.push(user.activity_signal);
    one_hot(&mut v, k + 1, user.segment);
    one_hot(&mut v, k, user.trigger_page);
    v
}

/// Raw context vector `c` at an entry, given the user's earlier sessions
/// today in entry order.
pub fn context_features(pages: usize, hour: u8, trigger: bool, last_exit: usize, today: &[SessionLog]) -> Vec<f64> {
    let mut c = Vec::with_capacity(2 * pages + HOURS + 4);
    let mut per_page = vec![0.0; pages];
    for l in today {
        stay_split(l.landing_page, l.exit_page, l.usage_seconds, &mut per_page);
    }
    c.extend(per_page);
    c.push(today.len() as f64);
    c.push(if trigger { 1.0 } else { 0.0 });
    one_hot(&mut c, HOURS, hour as usize);
    one_hot(&mut c, pages, last_exit);
    let last = today.last();
    c.push(last.map_or(0.0, |l| l.usage_seconds));
    c.push(last.map_or(0.0, |l| f64::from(l.page_switches)));
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(user: u64, day: usize, idx: usize, landing: usize, exit: usize, usage: f64) -> SessionLog {
        SessionLog {
            user_id: user,
            day,
            hour: 10,
            entry_index: idx,
            landing_page: landing,
            usage_seconds: usage,
            page_switches: u32::from(landing != exit),
            dropped_off: false,
            short_dwell: usage < 10.0,
            exit_page: exit,
            live_trigger_active: false,
            hidden_interest_at_entry: None,
        }
    }

    fn user() -> UserProfile {
        UserProfile {
            user_id: 7,
            base_engagement: 500.0,
            affinity: vec![0.9, 0.1, 0.1],
            volatility: 1.0,
            trigger_page: 2,
            active_prob: 1.0,
            segment: 0,
            activity_signal: 6.2,
            dominant_page: Some(0),
        }
    }

    #[test]
    fn schema_lengths_match_encoders() {
        let u = user();
        let h = HistoryTable::new(3);
        assert_eq!(rct_features(&u, &h, 0).len(), FeatureSchema::rct(3).len());
        assert_eq!(FeatureSchema::rct(3).len(), 18);
        assert_eq!(long_term_features(&u, &h, 0).len(), FeatureSchema::long_term(3).len());
        assert_eq!(context_features(3, 0, false, 0, &[]).len(), FeatureSchema::context(3).len());
        assert_eq!(FeatureSchema::state(3).len(), 47);
    }

    #[test]
    fn windows_exclude_current_and_old_days() {
        let logs = vec![
            log(7, 0, 0, 0, 0, 100.0),
            log(7, 5, 0, 0, 1, 200.0),
            log(7, 8, 0, 1, 1, 1000.0),
            log(8, 6, 0, 0, 0, 50.0),
        ];
        let h = HistoryTable::from_logs(3, &logs);
        let w = h.window(7, 8, 7);
        assert_eq!(w.usage, 200.0);
        assert_eq!(w.entries, 1);
        assert_eq!(w.stay, vec![20.0, 180.0, 0.0]);
        assert_eq!(h.last_exit_before(7, 8), Some(1));
        assert_eq!(h.last_exit_before(7, 0), None);
        let x = rct_features(&user(), &h, 8);
        // usage_7d, usage_30d
        assert_eq!(x[8], 200.0 / 7.0);
        assert_eq!(x[9], 300.0 / 30.0);
    }

    #[test]
    fn context_counts_prior_entries() {
        let today = vec![log(7, 0, 0, 0, 2, 300.0), log(7, 0, 1, 2, 2, 40.0)];
        let c = context_features(3, 13, true, 2, &today);
        assert_eq!(&c[..3], &[30.0, 0.0, 270.0 + 40.0]);
        assert_eq!(c[3], 2.0);
        assert_eq!(c[4], 1.0);
        assert_eq!(c[5 + 13], 1.0);
        assert_eq!(&c[29..32], &[0.0, 0.0, 1.0]);
        assert_eq!(c[32], 40.0);
        assert_eq!(c[33], 0.0);
    }

    #[test]
    fn normalizer_skips_indicators_and_constant_columns() {
        let schema = FeatureSchema {
            fields: vec![
                Field { name: "a".into(), numeric: true },
                Field { name: "b".into(), numeric: false },
                Field { name: "c".into(), numeric: true },
            ],
        };
        let rows = [vec![1.0, 1.0, 5.0], vec![3.0, 0.0, 5.0]];
        let n = Normalizer::fit(&schema, rows.iter().map(Vec::as_slice));
        assert_eq!(n.mean, vec![2.0, 0.0, 5.0]);
        assert_eq!(n.std, vec![1.0, 1.0, 1.0]);
        assert_eq!(n.apply(&[3.0, 1.0, 5.0]), vec![1.0, 1.0, 0.0]);
    }
}
