//! Context-aware blend weights, score fusion and page selection.
//!
//! Shared experts feed one gate and one sigmoid tower per page. Tower `k`
//! estimates how stable the user's interest is when landing on page `k`,
//! and that estimate blends the static and dynamic scores for `k`.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureSchema, Field, Normalizer, StreamInstance};
use crate::nn::ops::{bce, sigmoid, softmax_backward_into, softmax_vec};
use crate::nn::{
    load_checkpoint, save_checkpoint, Adam, Dense, Init, Mlp, MlpCache, ParamBuilder, ParameterSet, RngStream,
};
use crate::{Error, Result};

const INIT_STREAM: u64 = 0x414d_494e_4954_0000;
const SHUFFLE_STREAM: u64 = 0x414d_5348_5546_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmConfig {
    pub pages: usize,
    /// Shared experts `E`.
    pub experts: usize,
    pub expert_hidden: usize,
    pub expert_out: usize,
    pub tower_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AmConfig {
    fn default() -> Self {
        Self {
            pages: 3,
            experts: 4,
            expert_hidden: 32,
            expert_out: 16,
            tower_hidden: 16,
            lr: 1e-3,
            epochs: 8,
            batch_size: 128,
            seed: 1,
        }
    }
}

impl AmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts < 1 || self.pages < 2 {
            return Err(Error::config("am needs experts >= 1 and pages >= 2"));
        }
        if self.expert_hidden == 0 || self.expert_out == 0 || self.tower_hidden == 0 || self.batch_size == 0 {
            return Err(Error::config("am widths and batch size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("am lr must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    cfg: AmConfig,
    context_dims: usize,
    normalizer: Normalizer,
}

#[derive(Clone, Debug)]
pub struct AmModel {
    pub cfg: AmConfig,
    pub params: ParameterSet,
    pub normalizer: Normalizer,
    /// Length of `c`; the rest of the input is `v`.
    pub context_dims: usize,
    experts: Vec<Mlp>,
    gates: Vec<Dense>,
    towers: Vec<Mlp>,
}

struct Forward {
    experts: Vec<MlpCache>,
    gate: Vec<f64>,
    mixed: Vec<f64>,
    tower: MlpCache,
    gamma: f64,
}

impl AmModel {
    pub fn new(cfg: &AmConfig, context_dims: usize, normalizer: Normalizer) -> Result<Self> {
        cfg.validate()?;
        let d = normalizer.dims();
        let mut rng = RngStream::new(cfg.seed, INIT_STREAM).rng();
        let mut b = ParamBuilder::new();
        for e in 0..cfg.experts {
            Mlp::init(&mut b, &format!("expert{e}"), &[d, cfg.expert_hidden, cfg.expert_out], Init::He, &mut rng);
        }
        for k in 0..cfg.pages {
            Dense::init(&mut b, &format!("gate{k}"), d, cfg.experts, Init::Xavier, &mut rng);
            Mlp::init(&mut b, &format!("tower{k}"), &[cfg.expert_out, cfg.tower_hidden, 1], Init::Zero, &mut rng);
        }
        Self::from_params(cfg.clone(), b.build(), context_dims, normalizer)
    }

    fn from_params(cfg: AmConfig, params: ParameterSet, context_dims: usize, normalizer: Normalizer) -> Result<Self> {
        let experts =
            (0..cfg.experts).map(|e| Mlp::bind(&params, &format!("expert{e}"), 2, true)).collect::<Result<Vec<_>>>()?;
        let gates = (0..cfg.pages).map(|k| Dense::bind(&params, &format!("gate{k}"))).collect::<Result<_>>()?;
        let towers =
            (0..cfg.pages).map(|k| Mlp::bind(&params, &format!("tower{k}"), 2, false)).collect::<Result<_>>()?;
        if experts[0].d_in() != normalizer.dims() || context_dims > normalizer.dims() {
            return Err(Error::shape("am input width disagrees with normalizer"));
        }
        Ok(Self { cfg, params, normalizer, context_dims, experts, gates, towers })
    }

    pub fn pages(&self) -> usize {
        self.cfg.pages
    }

    fn input(&self, c: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let vd = self.normalizer.dims() - self.context_dims;
        if c.len() != self.context_dims || v.len() != vd {
            return Err(Error::shape(format!(
                "expected c/v of {}/{vd} values, got {}/{}",
                self.context_dims,
                c.len(),
                v.len()
            )));
        }
        let mut x = [c, v].concat();
        self.normalizer.apply_inplace(&mut x);
        Ok(x)
    }

    fn forward(&self, p: &ParameterSet, x: &[f64], k: usize, experts: Option<&[MlpCache]>) -> Forward {
        let experts: Vec<MlpCache> = match experts {
            Some(e) => e.to_vec(),
            None => self.experts.iter().map(|e| e.forward(p, x)).collect(),
        };
        let gate = softmax_vec(&self.gates[k].forward(p, x));
        let mut mixed = vec![0.0; self.cfg.expert_out];
        for (g, e) in gate.iter().zip(&experts) {
            mixed.iter_mut().zip(e.output()).for_each(|(m, h)| *m += g * h);
        }
        let tower = self.towers[k].forward(p, &mixed);
        let gamma = sigmoid(tower.output()[0]);
        Forward { experts, gate, mixed, tower, gamma }
    }

    /// Per-page blend weights `γ ∈ (0,1)^K`.
    pub fn am_weights(&self, c: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let x = self.input(c, v)?;
        let shared: Vec<MlpCache> = self.experts.iter().map(|e| e.forward(&self.params, &x)).collect();
        Ok((0..self.pages()).map(|k| self.forward(&self.params, &x, k, Some(&shared)).gamma).collect())
    }

    /// Gate weights of tower `k`, for inspection.
    pub fn gate_weights(&self, c: &[f64], v: &[f64], k: usize) -> Result<Vec<f64>> {
        let x = self.input(c, v)?;
        Ok(softmax_vec(&self.gates[k].forward(&self.params, &x)))
    }

    fn rows(&self, batch: &[StreamInstance]) -> Result<Vec<(Vec<f64>, usize, f64)>> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        batch
            .iter()
            .map(|i| {
                if i.k >= self.pages() {
                    return Err(Error::domain(format!("page {} outside 0..{}", i.k, self.pages())));
                }
                if i.label > 1 {
                    return Err(Error::domain(format!("label {} is not binary", i.label)));
                }
                Ok((self.input(&i.c, &i.v)?, i.k, f64::from(i.label)))
            })
            .collect()
    }

    pub fn loss_at(&self, p: &ParameterSet, batch: &[StreamInstance]) -> Result<f64> {
        let rows = self.rows(batch)?;
        let mut total = 0.0;
        for (x, k, y) in &rows {
            total += bce(self.forward(p, x, *k, None).gamma, *y)?;
        }
        Ok(total / rows.len() as f64)
    }

    pub fn loss_and_grad(&self, batch: &[StreamInstance]) -> Result<(f64, ParameterSet)> {
        let rows = self.rows(batch)?;
        self.grad_rows(&rows)
    }

    /// Only the assigned tower, its gate and the experts receive gradient.
    fn grad_rows(&self, rows: &[(Vec<f64>, usize, f64)]) -> Result<(f64, ParameterSet)> {
        let p = &self.params;
        let mut g = p.zeros_like();
        let n = rows.len() as f64;
        let mut total = 0.0;
        for (x, k, y) in rows {
            let f = self.forward(p, x, *k, None);
            total += bce(f.gamma, *y)?;
            let dlogit = (f.gamma - y) / n;
            let dmixed = self.towers[*k].backward(p, &mut g, &f.mixed, &f.tower, &[dlogit]);
            let mut dgate = vec![0.0; f.gate.len()];
            let mut dx = vec![0.0; x.len()];
            for (e, (expert, cache)) in self.experts.iter().zip(&f.experts).enumerate() {
                dgate[e] = cache.output().iter().zip(&dmixed).map(|(h, d)| h * d).sum();
                let dh: Vec<f64> = dmixed.iter().map(|d| f.gate[e] * d).collect();
                expert.backward(p, &mut g, x, cache, &dh);
            }
            let mut dlogits = vec![0.0; dgate.len()];
            softmax_backward_into(&f.gate, &dgate, &mut dlogits);
            self.gates[*k].backward(p, &mut g, x, &dlogits, &mut dx);
        }
        Ok((total / n, g))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            kind: "am".into(),
            cfg: self.cfg.clone(),
            context_dims: self.context_dims,
            normalizer: self.normalizer.clone(),
        };
        save_checkpoint(path, &serde_json::to_value(meta)?, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = load_checkpoint(path)?;
        let meta: Meta = serde_json::from_value(meta)?;
        if meta.kind != "am" {
            return Err(Error::Data(format!("{} is a `{}` checkpoint", path.display(), meta.kind)));
        }
        Self::from_params(meta.cfg, params, meta.context_dims, meta.normalizer)
    }
}

/// Mean BCE of the assigned tower against the label.
pub fn am_loss(model: &AmModel, batch: &[StreamInstance]) -> Result<f64> {
    model.loss_at(&model.params, batch)
}

#[derive(Clone, Debug)]
pub struct AmTrainReport {
    pub initial_loss: f64,
    pub epoch_loss: Vec<f64>,
}

pub fn train_am(cfg: &AmConfig, train: &[StreamInstance]) -> Result<(AmModel, AmTrainReport)> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| Error::Data("empty stream training set".into()))?;
    let (cd, vd) = (first.c.len(), first.v.len());
    let schema = if cd == FeatureSchema::context(cfg.pages).len() && vd == FeatureSchema::long_term(cfg.pages).len() {
        FeatureSchema::state(cfg.pages)
    } else {
        FeatureSchema { fields: (0..cd + vd).map(|j| Field { name: format!("f{j}"), numeric: true }).collect() }
    };
    let inputs: Vec<Vec<f64>> = train.iter().map(|i| [i.c.as_slice(), i.v.as_slice()].concat()).collect();
    let normalizer = Normalizer::fit(&schema, inputs.iter().map(Vec::as_slice));
    let mut model = AmModel::new(cfg, cd, normalizer)?;
    let rows = model.rows(train)?;
    let initial_loss = model.loss_at(&model.params, train)?;
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut rng = RngStream::new(cfg.seed, SHUFFLE_STREAM).rng();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| rows[i].clone()).collect();
            let (loss, g) = model.grad_rows(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, detail: format!("AM loss {loss}") });
            }
            adam.step(&mut model.params, &g).map_err(|e| Error::Divergence { step, detail: e.to_string() })?;
            sum += loss;
            batches += 1;
            step += 1;
        }
        epoch_loss.push(sum / batches as f64);
    }
    Ok((model, AmTrainReport { initial_loss, epoch_loss }))
}

/// Area under the ROC curve, ties counted half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut rank_sum, mut pos) = (0.0, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            if labels[t] == 1 {
                rank_sum += avg_rank;
                pos += 1;
            }
        }
        i = j + 1;
    }
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Eval("AUC needs both classes".into()));
    }
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

fn check_simplex(v: &[f64], name: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("{name} is not on the simplex: {v:?}")));
    }
    Ok(())
}

/// `σ_k = γ_k δ_k + (1 − γ_k) p_k`.
pub fn fuse_scores(delta: &[f64], p: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
    if delta.len() != p.len() || delta.len() != gamma.len() {
        return Err(Error::domain("δ, p and γ must have equal length"));
    }
    check_simplex(delta, "δ")?;
    check_simplex(p, "p")?;
    if gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(Error::domain(format!("γ outside [0,1]: {gamma:?}")));
    }
    Ok(delta.iter().zip(p).zip(gamma).map(|((d, p), g)| g * d + (1.0 - g) * p).collect())
}

/// Highest fused score; ties go to the lowest page index.
pub fn select_page(sigma: &[f64]) -> Result<usize> {
    if sigma.is_empty() {
        return Err(Error::domain("cannot select from an empty score vector"));
    }
    if sigma.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain(format!("non-finite score in {sigma:?}")));
    }
    Ok(crate::nn::ops::argmax(sigma))
}
