//! Inter-day static preference model.
//!
//! One branch per page treatment. A branch selects over per-field feature
//! embeddings with a softmax driven by the treatment embedding, mixes a
//! small set of experts through a gate, and maps the mixed latent to a
//! scalar response with its own tower. Each branch is run twice per user:
//! with its own treatment embedding and with the control embedding. The
//! branches share only the embedding tables, so a treated sample's loss
//! reaches no other branch.

mod contrast;
mod model;

pub use contrast::SharedTrunkModel;
pub use model::feature_select;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use self::model::{branch_prefix, init_params, pass, sample_grad, sample_loss, Layout};
use crate::dataset::{FeatureSchema, Normalizer, RctInstance};
use crate::nn::ops::softmax_vec;
use crate::nn::{load_checkpoint, save_checkpoint, Adam, ParameterSet, RngStream};
use crate::{Error, Result};

/// Floor for the control-response estimate in the score ratio.
pub const Y0_FLOOR: f64 = 1e-6;

const INIT_STREAM: u64 = 0x4953_5049_4e49_5400;
const SHUFFLE_STREAM: u64 = 0x4953_5053_4855_4600;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IspConfig {
    /// Page treatments `K`; treatment ids run `0..=K`.
    pub pages: usize,
    /// Experts per branch `M`.
    pub experts: usize,
    /// Embedding width `d`.
    pub embed_dim: usize,
    pub expert_hidden: usize,
    /// Width of the gate-mixed latent `z`.
    pub latent_dim: usize,
    pub tower_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for IspConfig {
    fn default() -> Self {
        Self {
            pages: 3,
            experts: 3,
            embed_dim: 8,
            expert_hidden: 32,
            latent_dim: 16,
            tower_hidden: 16,
            lr: 2e-3,
            epochs: 160,
            batch_size: 64,
            kl_weight: 1.0,
            seed: 1,
        }
    }
}

impl IspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pages < 2 || self.experts < 1 || self.embed_dim < 1 {
            return Err(Error::config("isp needs pages >= 2, experts >= 1, embed_dim >= 1"));
        }
        if self.expert_hidden == 0 || self.latent_dim == 0 || self.tower_hidden == 0 || self.batch_size == 0 {
            return Err(Error::config("isp widths and batch size must be positive"));
        }
        if !(self.lr > 0.0) || self.kl_weight < 0.0 {
            return Err(Error::config("isp lr must be positive and kl_weight non-negative"));
        }
        Ok(())
    }
}

/// Outputs of one branch for one user, in training units.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    pub y_hat_k: f64,
    pub y_hat_0k: f64,
    pub z_k: Vec<f64>,
    pub z_0k: Vec<f64>,
}

/// All-branch prediction for one user, in seconds of daily usage.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `ŷ^k`, index `k - 1`.
    pub y_hat: Vec<f64>,
    /// `ŷ^{0,k}`, index `k - 1`.
    pub y_hat0: Vec<f64>,
    /// Mean of `y_hat0`.
    pub y0_star: f64,
}

impl Prediction {
    /// Estimated uplift `ŷ^k − ŷ^{0,*}` per page.
    pub fn uplift(&self) -> Vec<f64> {
        self.y_hat.iter().map(|y| y - self.y0_star).collect()
    }

    pub fn static_scores(&self) -> Vec<f64> {
        static_scores(&self.y_hat, self.y0_star)
    }
}

/// `softmax(ŷ^k / max(ŷ^{0,*}, ε))`.
pub fn static_scores(y_hat: &[f64], y0_star: f64) -> Vec<f64> {
    let denom = y0_star.max(Y0_FLOOR);
    softmax_vec(&y_hat.iter().map(|y| y / denom).collect::<Vec<_>>())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    kind: String,
    cfg: IspConfig,
    normalizer: Normalizer,
    y_mean: f64,
    y_std: f64,
}

#[derive(Clone, Debug)]
pub struct IspModel {
    pub cfg: IspConfig,
    pub params: ParameterSet,
    /// Feature normalisation fitted on the training split.
    pub normalizer: Normalizer,
    /// Responses are modelled as `(y − y_mean) / y_std`.
    pub y_mean: f64,
    pub y_std: f64,
    layout: Layout,
}

impl IspModel {
    /// Fresh model for `fields` input features.
    pub fn new(cfg: &IspConfig, normalizer: Normalizer, y_mean: f64, y_std: f64) -> Result<Self> {
        cfg.validate()?;
        let fields = normalizer.dims();
        let params = init_params(cfg, fields, &mut RngStream::new(cfg.seed, INIT_STREAM).rng());
        Self::from_params(cfg.clone(), params, normalizer, y_mean, y_std)
    }

    pub fn from_params(
        cfg: IspConfig,
        params: ParameterSet,
        normalizer: Normalizer,
        y_mean: f64,
        y_std: f64,
    ) -> Result<Self> {
        let layout = Layout::bind(&params, cfg.pages, cfg.experts)?;
        if layout.fields != normalizer.dims() {
            return Err(Error::shape(format!(
                "model expects {} features, normalizer has {}",
                layout.fields,
                normalizer.dims()
            )));
        }
        if !(y_std > 0.0) {
            return Err(Error::config("response scale must be positive"));
        }
        Ok(Self { cfg, params, normalizer, y_mean, y_std, layout })
    }

    pub fn pages(&self) -> usize {
        self.cfg.pages
    }

    pub fn fields(&self) -> usize {
        self.layout.fields
    }

    fn check_x(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.fields() {
            return Err(Error::shape(format!("expected {} features, got {}", self.fields(), x.len())));
        }
        Ok(self.normalizer.apply(x))
    }

    /// Both passes of branch `k` on raw features `x`, in training units.
    pub fn branch_forward(&self, x: &[f64], k: usize) -> Result<BranchOutput> {
        if k == 0 || k > self.pages() {
            return Err(Error::domain(format!("branch {k} outside 1..={}", self.pages())));
        }
        let xn = self.check_x(x)?;
        let a = pass(&self.layout, &self.params, &xn, k, k);
        let b = pass(&self.layout, &self.params, &xn, k, 0);
        Ok(BranchOutput { y_hat_k: a.y, y_hat_0k: b.y, z_k: a.z, z_0k: b.z })
    }

    /// Runs every branch and de-normalises to seconds.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let xn = self.check_x(x)?;
        let k = self.pages();
        let mut y_hat = Vec::with_capacity(k);
        let mut y_hat0 = Vec::with_capacity(k);
        for b in 1..=k {
            y_hat.push(pass(&self.layout, &self.params, &xn, b, b).y * self.y_std + self.y_mean);
            y_hat0.push(pass(&self.layout, &self.params, &xn, b, 0).y * self.y_std + self.y_mean);
        }
        let y0_star = y_hat0.iter().sum::<f64>() / k as f64;
        Ok(Prediction { y_hat, y_hat0, y0_star })
    }

    /// Static preference scores `δ` on the simplex.
    pub fn predict_static_preferences(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict(x)?.static_scores())
    }

    fn prepared(&self, batch: &[RctInstance]) -> Result<Vec<(Vec<f64>, usize, f64)>> {
        batch
            .iter()
            .map(|i| {
                if i.t > self.pages() {
                    return Err(Error::domain(format!("treatment {} outside 0..={}", i.t, self.pages())));
                }
                Ok((self.check_x(&i.x)?, i.t, (i.y - self.y_mean) / self.y_std))
            })
            .collect()
    }

    /// Batch-mean training loss at `params` (same layout as the model).
    pub fn loss_at(&self, params: &ParameterSet, batch: &[RctInstance]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let rows = self.prepared(batch)?;
        let total: f64 =
            rows.iter().map(|(x, t, y)| sample_loss(&self.layout, params, x, *t, *y, self.cfg.kl_weight)).sum();
        Ok(total / rows.len() as f64)
    }

    pub fn loss_and_grad(&self, batch: &[RctInstance]) -> Result<(f64, ParameterSet)> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let rows = self.prepared(batch)?;
        Ok(self.grad_rows(&self.params, &rows))
    }

    fn grad_rows(&self, params: &ParameterSet, rows: &[(Vec<f64>, usize, f64)]) -> (f64, ParameterSet) {
        let mut g = params.zeros_like();
        let scale = 1.0 / rows.len() as f64;
        let mut total = 0.0;
        for (x, t, y) in rows {
            total += sample_grad(&self.layout, params, &mut g, x, *t, *y, self.cfg.kl_weight, scale, false).0;
        }
        (total * scale, g)
    }

    /// Per-sample gradient with every branch evaluated and masked heads fed
    /// a zero upstream gradient.
    pub fn full_sample_grad(&self, inst: &RctInstance) -> Result<(f64, ParameterSet, Vec<f64>)> {
        let rows = self.prepared(std::slice::from_ref(inst))?;
        let (x, t, y) = &rows[0];
        let mut g = self.params.zeros_like();
        let (loss, df) = sample_grad(&self.layout, &self.params, &mut g, x, *t, *y, self.cfg.kl_weight, 1.0, true);
        Ok((loss, g, df))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            kind: "isp".into(),
            cfg: self.cfg.clone(),
            normalizer: self.normalizer.clone(),
            y_mean: self.y_mean,
            y_std: self.y_std,
        };
        save_checkpoint(path, &serde_json::to_value(meta)?, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = load_checkpoint(path)?;
        let meta: Meta = serde_json::from_value(meta)?;
        if meta.kind != "isp" {
            return Err(Error::Data(format!("{} is a `{}` checkpoint", path.display(), meta.kind)));
        }
        Self::from_params(meta.cfg, params, meta.normalizer, meta.y_mean, meta.y_std)
    }
}

/// Batch-mean training loss of the current model.
pub fn isp_batch_loss(model: &IspModel, batch: &[RctInstance]) -> Result<f64> {
    model.loss_at(&model.params, batch)
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Full-training-set loss before the first step.
    pub initial_loss: f64,
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_loss.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Fits normalisers on `train`, then runs Adam over shuffled mini-batches.
pub fn train_isp(cfg: &IspConfig, train: &[RctInstance]) -> Result<(IspModel, TrainReport)> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| Error::Data("empty ISP training set".into()))?;
    let fields = first.x.len();
    let schema = if fields == FeatureSchema::rct(cfg.pages).len() {
        FeatureSchema::rct(cfg.pages)
    } else {
        FeatureSchema {
            fields: (0..fields).map(|j| crate::dataset::Field { name: format!("x{j}"), numeric: true }).collect(),
        }
    };
    let normalizer = Normalizer::fit(&schema, train.iter().map(|i| i.x.as_slice()));
    let n = train.len() as f64;
    let y_mean = train.iter().map(|i| i.y).sum::<f64>() / n;
    let y_var = train.iter().map(|i| (i.y - y_mean).powi(2)).sum::<f64>() / n;
    let y_std = if y_var.sqrt() > 1e-9 { y_var.sqrt() } else { 1.0 };
    let mut model = IspModel::new(cfg, normalizer, y_mean, y_std)?;
    let report = fit(&mut model, train)?;
    Ok((model, report))
}

/// Trains `model` in place with its own configuration.
pub fn fit(model: &mut IspModel, train: &[RctInstance]) -> Result<TrainReport> {
    let rows = model.prepared(train)?;
    let initial_loss = model.grad_rows(&model.params, &rows).0;
    let mut adam = Adam::new(&model.params, model.cfg.lr);
    let mut rng = RngStream::new(model.cfg.seed, SHUFFLE_STREAM).rng();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut epoch_loss = Vec::with_capacity(model.cfg.epochs);
    let mut step = 0;
    for _ in 0..model.cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(model.cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| rows[i].clone()).collect();
            let (loss, g) = model.grad_rows(&model.params, &batch);
            if !loss.is_finite() {
                return Err(Error::Divergence { step, detail: format!("ISP loss {loss}") });
            }
            adam.step(&mut model.params, &g).map_err(|e| Error::Divergence { step, detail: e.to_string() })?;
            sum += loss;
            batches += 1;
            step += 1;
        }
        epoch_loss.push(sum / batches as f64);
    }
    Ok(TrainReport { initial_loss, epoch_loss, steps: step })
}

/// Outcome of the per-branch gradient audit for one sample.
#[derive(Clone, Debug)]
pub struct DecouplingReport {
    pub treatment: usize,
    /// `‖∂L/∂θ_branch_k‖` for `k = 1..=K`.
    pub param_norms: Vec<f64>,
    /// `‖∂L/∂f^k‖`, both passes.
    pub input_norms: Vec<f64>,
    /// Parameter paths that violate the expectation.
    pub violations: Vec<String>,
}

impl DecouplingReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Treated samples must move only their own branch; control samples must
/// move every branch.
pub fn check_gradient_decoupling(model: &IspModel, inst: &RctInstance) -> Result<DecouplingReport> {
    let (_, g, df) = model.full_sample_grad(inst)?;
    let k = model.pages();
    let mut param_norms = Vec::with_capacity(k);
    let mut violations = Vec::new();
    for b in 1..=k {
        let prefix = branch_prefix(b);
        param_norms.push(g.sq_norm_prefix(&prefix).sqrt());
        let expect_nonzero = inst.t == 0 || inst.t == b;
        if expect_nonzero {
            if param_norms[b - 1] == 0.0 {
                violations.push(format!("{prefix}* (zero gradient)"));
            }
        } else {
            violations.extend(
                g.iter()
                    .filter(|(n, t)| n.starts_with(&prefix) && t.data().iter().any(|v| *v != 0.0))
                    .map(|(n, _)| n.to_string()),
            );
            if df[b - 1] != 0.0 {
                violations.push(format!("{prefix}f (input gradient)"));
            }
        }
    }
    Ok(DecouplingReport {
        treatment: inst.t,
        param_norms,
        input_norms: df.iter().map(|v| v.sqrt()).collect(),
        violations,
    })
}

#[cfg(test)]
mod tests;
