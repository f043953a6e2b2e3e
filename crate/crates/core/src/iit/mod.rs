//! Intra-day interest model: conservative Q-learning over hourly session
//! transitions, with a penalty weight that follows the daily traffic tide.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureSchema, Field, Normalizer, Transition, HOURS};
use crate::nn::ops::{logsumexp, softmax_vec};
use crate::nn::{load_checkpoint, save_checkpoint, Adam, Init, Mlp, ParamBuilder, ParameterSet, RngStream};
use crate::sim::SessionLog;
use crate::{Error, Result};

const INIT_STREAM: u64 = 0x4949_5449_4e49_5400;
const BATCH_STREAM: u64 = 0x4949_5442_4154_4300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CqlConfig {
    pub gamma: f64,
    /// Base conservative weight `α`.
    pub alpha: f64,
    /// Tidal sharpness `β`.
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Hard target sync period `C`.
    pub target_sync: usize,
    pub hidden: usize,
    pub seed: u64,
    pub dynamic_alpha: bool,
    /// Rewards are divided by this; `None` uses the mean training reward.
    pub reward_scale: Option<f64>,
}

impl Default for CqlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            alpha: 1.0,
            beta: 1.0,
            lr: 1e-3,
            batch_size: 64,
            steps: 10_000,
            target_sync: 100,
            hidden: 64,
            seed: 1,
            dynamic_alpha: true,
            reward_scale: None,
        }
    }
}

impl CqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must be in [0,1], got {}", self.gamma)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || !(self.lr > 0.0) {
            return Err(Error::config("alpha and beta must be non-negative, lr positive"));
        }
        if self.batch_size == 0 || self.target_sync == 0 || self.hidden == 0 {
            return Err(Error::config("batch_size, target_sync and hidden must be positive"));
        }
        if matches!(self.reward_scale, Some(s) if !(s > 0.0)) {
            return Err(Error::config("reward_scale must be positive"));
        }
        Ok(())
    }
}

/// Relative traffic per hour: `V_t = 24 · usage(t) / usage(day)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub v: Vec<f64>,
}

impl TrafficStats {
    pub fn neutral() -> Self {
        Self { v: vec![1.0; HOURS] }
    }

    pub fn from_usage(items: impl IntoIterator<Item = (u8, f64)>) -> Self {
        let mut per = [0.0; HOURS];
        for (h, u) in items {
            per[h as usize] += u;
        }
        let total: f64 = per.iter().sum();
        if !(total > 0.0) {
            return Self::neutral();
        }
        Self { v: per.iter().map(|u| HOURS as f64 * u / total).collect() }
    }

    pub fn from_logs(logs: &[SessionLog]) -> Self {
        Self::from_usage(logs.iter().map(|l| (l.hour, l.usage_seconds)))
    }

    pub fn from_transitions(t: &[Transition]) -> Self {
        Self::from_usage(t.iter().map(|t| (t.hour, t.r)))
    }

    /// `hour<TAB>V` lines.
    pub fn to_text(&self) -> String {
        self.v.iter().enumerate().map(|(h, v)| format!("{h}\t{v:?}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut v = vec![f64::NAN; HOURS];
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (h, x) = line.split_once('\t').ok_or_else(|| Error::Parse(format!("bad traffic line `{line}`")))?;
            let h: usize = h.trim().parse().map_err(|e| Error::Parse(format!("hour: {e}")))?;
            if h >= HOURS {
                return Err(Error::Parse(format!("hour {h} out of range")));
            }
            v[h] = x.trim().parse().map_err(|e| Error::Parse(format!("value: {e}")))?;
        }
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Parse("traffic stats need 24 non-negative values".into()));
        }
        Ok(Self { v })
    }
}

/// Hour-dependent conservative weight `clamp(α·e^{−β(V_t−1)}, 0.1α, 5α)`.
pub fn dynamic_alpha(cfg: &CqlConfig, stats: &TrafficStats, hour: u8) -> f64 {
    dynamic_alpha_with(cfg, stats, hour, &[])
}

/// [`dynamic_alpha`] with extra multiplicative factors applied before the
/// clamp.
pub fn dynamic_alpha_with(cfg: &CqlConfig, stats: &TrafficStats, hour: u8, factors: &[f64]) -> f64 {
    assert!((hour as usize) < HOURS, "hour {hour} out of range");
    let m = (-cfg.beta * (stats.v[hour as usize] - 1.0)).exp() * factors.iter().product::<f64>();
    (cfg.alpha * m).clamp(0.1 * cfg.alpha, 5.0 * cfg.alpha)
}

fn alpha_for(cfg: &CqlConfig, stats: &TrafficStats, hour: u8) -> f64 {
    if cfg.dynamic_alpha {
        dynamic_alpha(cfg, stats, hour)
    } else {
        cfg.alpha
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    cfg: CqlConfig,
    pages: usize,
    normalizer: Normalizer,
    reward_scale: f64,
}

/// Main and target Q-networks sharing one architecture.
#[derive(Clone, Debug)]
pub struct QNets {
    pub cfg: CqlConfig,
    pub main: ParameterSet,
    pub target: ParameterSet,
    pub normalizer: Normalizer,
    pub reward_scale: f64,
    net: Mlp,
}

/// A transition in model units.
#[derive(Clone, Debug)]
struct Row {
    s: Vec<f64>,
    a: usize,
    r: f64,
    s_next: Vec<f64>,
    terminal: bool,
    alpha: f64,
}

impl QNets {
    pub fn new(cfg: &CqlConfig, pages: usize, normalizer: Normalizer, reward_scale: f64) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new();
        let mut rng = RngStream::new(cfg.seed, INIT_STREAM).rng();
        Mlp::init(&mut b, "q", &[normalizer.dims(), cfg.hidden, cfg.hidden, pages], Init::Xavier, &mut rng);
        let main = b.build();
        Self::from_params(cfg.clone(), main, normalizer, reward_scale)
    }

    fn from_params(cfg: CqlConfig, main: ParameterSet, normalizer: Normalizer, reward_scale: f64) -> Result<Self> {
        let net = Mlp::bind(&main, "q", 3, false)?;
        if net.d_in() != normalizer.dims() {
            return Err(Error::shape(format!("net takes {} inputs, normalizer has {}", net.d_in(), normalizer.dims())));
        }
        Ok(Self { cfg, target: main.clone(), main, normalizer, reward_scale, net })
    }

    pub fn pages(&self) -> usize {
        self.net.d_out()
    }

    pub fn state_dims(&self) -> usize {
        self.net.d_in()
    }

    fn norm(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.state_dims() {
            return Err(Error::shape(format!("state has {} values, expected {}", s.len(), self.state_dims())));
        }
        Ok(self.normalizer.apply(s))
    }

    /// `Q^π(s, ·)` for a raw state, in reward-scale units.
    pub fn q_values(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.forward(&self.main, &self.norm(s)?).output().to_vec())
    }

    pub fn target_q_values(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.forward(&self.target, &self.norm(s)?).output().to_vec())
    }

    /// Intra-day interest scores `p = softmax(Q)`.
    pub fn interest_scores(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax_vec(&self.q_values(s)?))
    }

    pub fn sync_target(&mut self) {
        self.target = self.main.clone();
    }

    fn rows(&self, batch: &[Transition], stats: &TrafficStats) -> Result<Vec<Row>> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        batch
            .iter()
            .map(|t| {
                if t.a >= self.pages() {
                    return Err(Error::domain(format!("action {} outside 0..{}", t.a, self.pages())));
                }
                Ok(Row {
                    s: self.norm(&t.s)?,
                    a: t.a,
                    r: t.r / self.reward_scale,
                    s_next: self.norm(&t.s_next)?,
                    terminal: t.terminal,
                    alpha: alpha_for(&self.cfg, stats, t.hour),
                })
            })
            .collect()
    }

    fn td_target(&self, row: &Row) -> f64 {
        if row.terminal {
            return row.r;
        }
        let q = self.net.forward(&self.target, &row.s_next);
        row.r + self.cfg.gamma * q.output().iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(td, weighted regulariser)` batch means at `main`.
    fn parts_at(&self, main: &ParameterSet, rows: &[Row]) -> (f64, f64, f64) {
        let (mut td, mut reg, mut wreg) = (0.0, 0.0, 0.0);
        for row in rows {
            let q = self.net.forward(main, &row.s);
            let q = q.output();
            td += (q[row.a] - self.td_target(row)).powi(2);
            let r = logsumexp(q) - q[row.a];
            reg += r;
            wreg += row.alpha * r;
        }
        let n = rows.len() as f64;
        (td / n, reg / n, wreg / n)
    }

    fn grad_rows(&self, rows: &[Row]) -> (f64, f64, f64, ParameterSet) {
        let mut g = self.main.zeros_like();
        let n = rows.len() as f64;
        let (mut td, mut reg, mut mean_q) = (0.0, 0.0, 0.0);
        for row in rows {
            let cache = self.net.forward(&self.main, &row.s);
            let q = cache.output();
            let y = self.td_target(row);
            let err = q[row.a] - y;
            td += err * err;
            reg += row.alpha * (logsumexp(q) - q[row.a]);
            mean_q += q[row.a];
            let p = softmax_vec(q);
            let mut dq: Vec<f64> = p.iter().map(|pi| row.alpha * pi / n).collect();
            dq[row.a] += (2.0 * err - row.alpha) / n;
            self.net.backward(&self.main, &mut g, &row.s, &cache, &dq);
        }
        ((td + reg) / n, td / n, mean_q / n, g)
    }

    pub fn td_loss(&self, batch: &[Transition]) -> Result<f64> {
        Ok(self.parts_at(&self.main, &self.rows(batch, &TrafficStats::neutral())?).0)
    }

    pub fn cql_regularizer(&self, batch: &[Transition]) -> Result<f64> {
        Ok(self.parts_at(&self.main, &self.rows(batch, &TrafficStats::neutral())?).1)
    }

    /// `L_TD + mean_i(α_i · L_Reg,i)`.
    pub fn cql_total_loss(&self, batch: &[Transition], stats: &TrafficStats) -> Result<f64> {
        self.total_loss_at(&self.main, batch, stats)
    }

    pub fn total_loss_at(&self, main: &ParameterSet, batch: &[Transition], stats: &TrafficStats) -> Result<f64> {
        let (td, _, wreg) = self.parts_at(main, &self.rows(batch, stats)?);
        Ok(td + wreg)
    }

    /// Gradient of [`cql_total_loss`](Self::cql_total_loss) with respect to
    /// the main network. The target network enters only through the TD
    /// target and is held fixed.
    pub fn loss_and_grad(&self, batch: &[Transition], stats: &TrafficStats) -> Result<(f64, ParameterSet)> {
        let (loss, _, _, g) = self.grad_rows(&self.rows(batch, stats)?);
        Ok((loss, g))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            kind: "iit".into(),
            cfg: self.cfg.clone(),
            pages: self.pages(),
            normalizer: self.normalizer.clone(),
            reward_scale: self.reward_scale,
        };
        save_checkpoint(path, &serde_json::to_value(meta)?, &self.main)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = load_checkpoint(path)?;
        let meta: Meta = serde_json::from_value(meta)?;
        if meta.kind != "iit" {
            return Err(Error::Data(format!("{} is a `{}` checkpoint", path.display(), meta.kind)));
        }
        let q = Self::from_params(meta.cfg, params, meta.normalizer, meta.reward_scale)?;
        if q.pages() != meta.pages {
            return Err(Error::shape("checkpoint page count disagrees with network"));
        }
        Ok(q)
    }
}

#[derive(Clone, Debug, Default)]
pub struct IitDiagnostics {
    pub loss: Vec<f64>,
    pub td: Vec<f64>,
    /// Mean `Q(s, a_logged)` over each batch.
    pub mean_q: Vec<f64>,
}

/// Trains from scratch; rewards are scaled by the configured scale or the
/// mean training reward.
pub fn train_iit(
    cfg: &CqlConfig,
    pages: usize,
    transitions: &[Transition],
    stats: &TrafficStats,
) -> Result<(QNets, IitDiagnostics)> {
    cfg.validate()?;
    let first = transitions.first().ok_or_else(|| Error::Data("empty transition set".into()))?;
    let dims = first.s.len();
    let schema = if dims == FeatureSchema::state(pages).len() {
        FeatureSchema::state(pages)
    } else {
        FeatureSchema { fields: (0..dims).map(|j| Field { name: format!("s{j}"), numeric: true }).collect() }
    };
    let normalizer = Normalizer::fit(&schema, transitions.iter().map(|t| t.s.as_slice()));
    let scale = match cfg.reward_scale {
        Some(s) => s,
        None => {
            let m = transitions.iter().map(|t| t.r).sum::<f64>() / transitions.len() as f64;
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let mut nets = QNets::new(cfg, pages, normalizer, scale)?;
    let diag = fit(&mut nets, transitions, stats)?;
    Ok((nets, diag))
}

/// Runs `cfg.steps` Adam steps on uniformly sampled mini-batches with a
/// hard target sync every `target_sync` steps.
pub fn fit(nets: &mut QNets, transitions: &[Transition], stats: &TrafficStats) -> Result<IitDiagnostics> {
    let rows = nets.rows(transitions, stats)?;
    let mut adam = Adam::new(&nets.main, nets.cfg.lr);
    let mut rng = RngStream::new(nets.cfg.seed, BATCH_STREAM).rng();
    let mut diag = IitDiagnostics::default();
    let bs = nets.cfg.batch_size.min(rows.len());
    nets.sync_target();
    for step in 0..nets.cfg.steps {
        if step > 0 && step % nets.cfg.target_sync == 0 {
            nets.sync_target();
        }
        let batch: Vec<Row> = (0..bs).map(|_| rows[rng.random_range(0..rows.len())].clone()).collect();
        let (loss, td, mean_q, g) = nets.grad_rows(&batch);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, detail: format!("CQL loss {loss}") });
        }
        adam.step(&mut nets.main, &g).map_err(|e| Error::Divergence { step, detail: e.to_string() })?;
        diag.loss.push(loss);
        diag.td.push(td);
        diag.mean_q.push(mean_q);
    }
    Ok(diag)
}
