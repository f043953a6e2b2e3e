use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::am::{fuse_scores, select_page, AmModel};
use crate::dataset::{context_features, long_term_features, rct_features, HistoryTable};
use crate::iit::QNets;
use crate::isp::IspModel;
use crate::nn::ops::argmax;
use crate::nn::RngStream;
use crate::sim::{EntryContext, LandingPolicy, UserProfile};
use crate::{Error, Result};

const RANDOM_TAG: u64 = 0x524e_4400_0000_0000;

/// Landing policy kinds. Pages are 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySpec {
    Klan,
    IspOnly,
    IitOnly,
    Random,
    Fixed(usize),
    LastExit,
    MostFrequent,
}

impl PolicySpec {
    pub fn needs_isp(self) -> bool {
        matches!(self, Self::Klan | Self::IspOnly)
    }

    pub fn needs_iit(self) -> bool {
        matches!(self, Self::Klan | Self::IitOnly)
    }

    pub fn needs_am(self) -> bool {
        matches!(self, Self::Klan)
    }

    pub fn validate(self, pages: usize) -> Result<()> {
        match self {
            Self::Fixed(k) if k >= pages => Err(Error::config(format!("fixed page {k} outside 0..{pages}"))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Klan => f.write_str("klan"),
            Self::IspOnly => f.write_str("isp_only"),
            Self::IitOnly => f.write_str("iit_only"),
            Self::Random => f.write_str("random"),
            Self::Fixed(k) => write!(f, "fixed:{k}"),
            Self::LastExit => f.write_str("last_exit"),
            Self::MostFrequent => f.write_str("most_frequent"),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "klan" => Self::Klan,
            "isp_only" => Self::IspOnly,
            "iit_only" => Self::IitOnly,
            "random" => Self::Random,
            "last_exit" => Self::LastExit,
            "most_frequent" => Self::MostFrequent,
            _ => {
                let k = s
                    .strip_prefix("fixed:")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::config(format!("unknown policy `{s}`")))?;
                Self::Fixed(k)
            }
        })
    }
}

/// Trained components; each policy needs only some of them.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub isp: Option<IspModel>,
    pub iit: Option<QNets>,
    pub am: Option<AmModel>,
}

impl Models {
    pub fn check(&self, spec: PolicySpec) -> Result<()> {
        let missing = [
            (spec.needs_isp() && self.isp.is_none(), "isp"),
            (spec.needs_iit() && self.iit.is_none(), "iit"),
            (spec.needs_am() && self.am.is_none(), "am"),
        ];
        match missing.iter().find(|(m, _)| *m) {
            Some((_, name)) => Err(Error::Data(format!("policy {spec} needs a trained {name} checkpoint"))),
            None => Ok(()),
        }
    }
}

/// Static preference scores per user, computed once per day.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreStore {
    pub day: usize,
    scores: BTreeMap<u64, Vec<f64>>,
}

impl ScoreStore {
    pub fn new(day: usize) -> Self {
        Self { day, scores: BTreeMap::new() }
    }

    pub fn refresh(isp: &IspModel, population: &[UserProfile], history: &HistoryTable, day: usize) -> Result<Self> {
        let mut store = Self::new(day);
        for u in population {
            store.insert(u.user_id, isp.predict_static_preferences(&rct_features(u, history, day))?);
        }
        Ok(store)
    }

    pub fn insert(&mut self, user: u64, delta: Vec<f64>) {
        self.scores.insert(user, delta);
    }

    pub fn get(&self, user: u64) -> Option<&[f64]> {
        self.scores.get(&user).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `day<TAB>d` header, then `user<TAB>δ_1<TAB>...` lines.
    pub fn to_text(&self) -> String {
        let mut out = format!("day\t{}\n", self.day);
        for (u, d) in &self.scores {
            out.push_str(&u.to_string());
            for x in d {
                out.push('\t');
                out.push_str(&format!("{x:?}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let day = lines
            .next()
            .and_then(|l| l.strip_prefix("day\t"))
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| Error::Parse("score store needs a `day` header".into()))?;
        let mut store = Self::new(day);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split('\t');
            let user = parts
                .next()
                .and_then(|u| u.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad score line `{line}`")))?;
            let delta = parts
                .map(|x| x.parse::<f64>().map_err(|e| Error::Parse(format!("score `{x}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            store.insert(user, delta);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?)
    }
}

/// Outcome of one fused decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Served {
    pub page: usize,
    /// Fused scores, or the interest scores on fallback.
    pub sigma: Vec<f64>,
    pub fallback: bool,
}

/// Looks up `δ`, scores `p` and `γ` on the entry state `(c, v)`, fuses and
/// selects. A user missing from the store gets the interest-only decision.
pub fn serve_entry(store: &ScoreStore, iit: &QNets, am: &AmModel, user: u64, c: &[f64], v: &[f64]) -> Result<Served> {
    let s = [c, v].concat();
    let p = iit.interest_scores(&s)?;
    let Some(delta) = store.get(user) else {
        return Ok(Served { page: select_page(&p)?, sigma: p, fallback: true });
    };
    let gamma = am.am_weights(c, v)?;
    let sigma = fuse_scores(delta, &p, &gamma)?;
    Ok(Served { page: select_page(&sigma)?, sigma, fallback: false })
}

/// A [`PolicySpec`] bound to models and per-day caches, usable as the
/// simulator's landing policy.
pub struct PolicyRunner<'a> {
    pub spec: PolicySpec,
    models: &'a Models,
    pages: usize,
    seed: u64,
    salt: u64,
    store: ScoreStore,
    long_term: BTreeMap<u64, Vec<f64>>,
    most_frequent: BTreeMap<u64, usize>,
    pub fallbacks: usize,
    error: Option<Error>,
}

impl<'a> PolicyRunner<'a> {
    /// `salt` separates the random draws of otherwise identical arms.
    pub fn new(spec: PolicySpec, models: &'a Models, pages: usize, seed: u64, salt: u64) -> Result<Self> {
        spec.validate(pages)?;
        models.check(spec)?;
        Ok(Self {
            spec,
            models,
            pages,
            seed,
            salt,
            store: ScoreStore::default(),
            long_term: BTreeMap::new(),
            most_frequent: BTreeMap::new(),
            fallbacks: 0,
            error: None,
        })
    }

    /// Refreshes the day-level caches from history strictly before `day`.
    pub fn begin_day(&mut self, population: &[UserProfile], history: &HistoryTable, day: usize) -> Result<()> {
        if let Some(isp) = &self.models.isp {
            if self.spec.needs_isp() {
                self.store = ScoreStore::refresh(isp, population, history, day)?;
            }
        }
        if self.spec.needs_iit() {
            self.long_term = population.iter().map(|u| (u.user_id, long_term_features(u, history, day))).collect();
        }
        if self.spec == PolicySpec::MostFrequent {
            self.most_frequent = population
                .iter()
                .filter_map(|u| {
                    let w = history.window(u.user_id, day, 30);
                    (w.stay.iter().sum::<f64>() > 0.0).then(|| (u.user_id, argmax(&w.stay)))
                })
                .collect();
        }
        Ok(())
    }

    pub fn store(&self) -> &ScoreStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ScoreStore {
        &mut self.store
    }

    /// First error raised while choosing, if any.
    pub fn take_error(&mut self) -> Option<Error> {
        self.error.take()
    }

    fn state(&self, ctx: &EntryContext<'_>) -> Result<(Vec<f64>, &[f64])> {
        let c = context_features(self.pages, ctx.hour, ctx.trigger_active, ctx.last_exit, ctx.today);
        let v = self
            .long_term
            .get(&ctx.user.user_id)
            .ok_or_else(|| Error::Data(format!("no long-term features for user {}", ctx.user.user_id)))?;
        Ok((c, v))
    }

    fn decide(&mut self, ctx: &EntryContext<'_>) -> Result<usize> {
        let uid = ctx.user.user_id;
        match self.spec {
            PolicySpec::Fixed(k) => Ok(k),
            PolicySpec::LastExit => Ok(ctx.last_exit),
            PolicySpec::MostFrequent => Ok(self.most_frequent.get(&uid).copied().unwrap_or(ctx.last_exit)),
            PolicySpec::Random => {
                let tag = RANDOM_TAG ^ (self.salt << 40) ^ ((ctx.day as u64) << 8) ^ ctx.entry_index as u64;
                Ok(RngStream::new(self.seed, uid).fork(tag).rng().random_range(0..self.pages))
            }
            PolicySpec::IspOnly => match self.store.get(uid) {
                Some(d) => select_page(d),
                None => {
                    self.fallbacks += 1;
                    Ok(ctx.last_exit)
                }
            },
            PolicySpec::IitOnly => {
                let iit = self.models.iit.as_ref().expect("checked at construction");
                let (c, v) = self.state(ctx)?;
                select_page(&iit.interest_scores(&[c.as_slice(), v].concat())?)
            }
            PolicySpec::Klan => {
                let iit = self.models.iit.as_ref().expect("checked at construction");
                let am = self.models.am.as_ref().expect("checked at construction");
                let (c, v) = self.state(ctx)?;
                let served = serve_entry(&self.store, iit, am, uid, &c, v)?;
                if served.fallback {
                    self.fallbacks += 1;
                }
                Ok(served.page)
            }
        }
    }
}

impl LandingPolicy for PolicyRunner<'_> {
    fn choose(&mut self, ctx: &EntryContext<'_>) -> usize {
        match self.decide(ctx) {
            Ok(k) => k,
            Err(e) => {
                self.error.get_or_insert(e);
                ctx.last_exit
            }
        }
    }
}
