use rand::Rng;

use super::IspConfig;
use crate::nn::ops::{kl_softmax_logits, softmax_backward_into, softmax_vec};
use crate::nn::{Dense, Init, Mlp, MlpCache, ParamBuilder, ParamId, ParameterSet, Tensor};
use crate::{Error, Result};

pub(crate) const EMBED_X: &str = "embed/x";
pub(crate) const EMBED_T: &str = "embed/t";

pub(crate) fn branch_prefix(k: usize) -> String {
    format!("branch{k}/")
}

#[derive(Clone, Debug)]
pub(crate) struct Branch {
    pub select: Dense,
    pub experts: Vec<Mlp>,
    pub gate: Dense,
    pub tower: Mlp,
}

/// Parameter handles, valid for any set with the layout produced by
/// [`init_params`].
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub ex: ParamId,
    pub et: ParamId,
    pub fields: usize,
    pub d: usize,
    /// `branches[k - 1]` serves treatment `k`.
    pub branches: Vec<Branch>,
}

pub(crate) fn init_params(cfg: &IspConfig, fields: usize, rng: &mut impl Rng) -> ParameterSet {
    let d = cfg.embed_dim;
    let mut b = ParamBuilder::new();
    let unit =
        |rng: &mut dyn rand::RngCore, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.5..0.5)).collect() };
    b.insert(EMBED_X, Tensor::matrix(fields, d, unit(rng, fields * d)).expect("finite"));
    b.insert(EMBED_T, Tensor::matrix(cfg.pages + 1, d, unit(rng, (cfg.pages + 1) * d)).expect("finite"));
    for k in 1..=cfg.pages {
        let p = format!("branch{k}");
        Dense::init(&mut b, &format!("{p}/select"), d, fields, Init::Xavier, rng);
        for m in 0..cfg.experts {
            Mlp::init(
                &mut b,
                &format!("{p}/expert{m}"),
                &[2 * d, cfg.expert_hidden, cfg.latent_dim],
                Init::Xavier,
                rng,
            );
        }
        Dense::init(&mut b, &format!("{p}/gate"), 2 * d, cfg.experts, Init::Xavier, rng);
        Mlp::init(&mut b, &format!("{p}/tower"), &[cfg.latent_dim, cfg.tower_hidden, 1], Init::Xavier, rng);
    }
    b.build()
}

impl Layout {
    pub fn bind(p: &ParameterSet, pages: usize, experts: usize) -> Result<Self> {
        let ex = p.id(EMBED_X)?;
        let et = p.id(EMBED_T)?;
        let shape = p.get(ex).shape();
        let (fields, d) = (shape[0], shape[1]);
        if p.get(et).shape() != [pages + 1, d] {
            return Err(Error::shape(format!("treatment table must be {}x{d}", pages + 1)));
        }
        let branches = (1..=pages)
            .map(|k| {
                let pre = format!("branch{k}");
                let select = Dense::bind(p, &format!("{pre}/select"))?;
                if select.d_out != fields {
                    return Err(Error::shape(format!(
                        "branch {k}: selector has {} rows for {fields} feature fields",
                        select.d_out
                    )));
                }
                Ok(Branch {
                    select,
                    experts: (0..experts)
                        .map(|m| Mlp::bind(p, &format!("{pre}/expert{m}"), 2, false))
                        .collect::<Result<_>>()?,
                    gate: Dense::bind(p, &format!("{pre}/gate"))?,
                    tower: Mlp::bind(p, &format!("{pre}/tower"), 2, false)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { ex, et, fields, d, branches })
    }

    pub fn pages(&self) -> usize {
        self.branches.len()
    }
}

/// Softmax selection over field embeddings: returns `(w, Σ_j w_j e_j)`.
pub fn feature_select(e_x: &[Vec<f64>], e_t: &[f64], w_sel: &Tensor, b_sel: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = e_x.len();
    if w_sel.shape() != [f, e_t.len()] || b_sel.len() != f {
        return Err(Error::shape(format!(
            "selector {:?}/{:?} does not fit {f} fields of width {}",
            w_sel.shape(),
            b_sel.shape(),
            e_t.len()
        )));
    }
    let mut logits = vec![0.0; f];
    crate::nn::ops::affine_into(e_t, w_sel.data(), b_sel.data(), e_t.len(), &mut logits);
    let w = softmax_vec(&logits);
    let mut sel = vec![0.0; e_t.len()];
    for (wj, ej) in w.iter().zip(e_x) {
        for (s, e) in sel.iter_mut().zip(ej) {
            *s += wj * e;
        }
    }
    Ok((w, sel))
}

/// Everything one pass through a branch needs for its backward.
#[derive(Clone, Debug)]
pub(crate) struct PassCache {
    pub te: usize,
    pub w: Vec<f64>,
    pub f: Vec<f64>,
    pub experts: Vec<MlpCache>,
    pub g: Vec<f64>,
    pub z: Vec<f64>,
    pub tower: MlpCache,
    pub y: f64,
}

/// Branch `k` (1-based) with treatment embedding row `te`.
pub(crate) fn pass(l: &Layout, p: &ParameterSet, x: &[f64], k: usize, te: usize) -> PassCache {
    let br = &l.branches[k - 1];
    let d = l.d;
    let ex = p.get(l.ex).data();
    let et = &p.get(l.et).data()[te * d..(te + 1) * d];
    let logits = br.select.forward(p, et);
    let w = softmax_vec(&logits);
    let mut f = vec![0.0; 2 * d];
    for j in 0..l.fields {
        let c = w[j] * x[j];
        if c == 0.0 {
            continue;
        }
        for (fi, e) in f[..d].iter_mut().zip(&ex[j * d..(j + 1) * d]) {
            *fi += c * e;
        }
    }
    f[d..].copy_from_slice(et);
    let experts: Vec<MlpCache> = br.experts.iter().map(|e| e.forward(p, &f)).collect();
    let g = softmax_vec(&br.gate.forward(p, &f));
    let mut z = vec![0.0; experts[0].output().len()];
    for (gm, c) in g.iter().zip(&experts) {
        for (zi, h) in z.iter_mut().zip(c.output()) {
            *zi += gm * h;
        }
    }
    let tower = br.tower.forward(p, &z);
    let y = tower.output()[0];
    PassCache { te, w, f, experts, g, z, tower, y }
}

/// Accumulates parameter gradients for upstream `dy` on the scalar output
/// and `dz` on the latent. Returns `∂L/∂f`.
pub(crate) fn pass_backward(
    l: &Layout,
    p: &ParameterSet,
    grads: &mut ParameterSet,
    x: &[f64],
    k: usize,
    c: &PassCache,
    dy: f64,
    dz_extra: Option<&[f64]>,
) -> Vec<f64> {
    let br = &l.branches[k - 1];
    let d = l.d;
    let mut dz = br.tower.backward(p, grads, &c.z, &c.tower, &[dy]);
    if let Some(extra) = dz_extra {
        dz.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
    }
    let mut df = vec![0.0; 2 * d];
    let mut dg = vec![0.0; c.g.len()];
    for (m, (expert, cache)) in br.experts.iter().zip(&c.experts).enumerate() {
        dg[m] = cache.output().iter().zip(&dz).map(|(h, g)| h * g).sum();
        let dh: Vec<f64> = dz.iter().map(|v| c.g[m] * v).collect();
        let dfm = expert.backward(p, grads, &c.f, cache, &dh);
        df.iter_mut().zip(&dfm).for_each(|(a, b)| *a += b);
    }
    let mut dgl = vec![0.0; dg.len()];
    softmax_backward_into(&c.g, &dg, &mut dgl);
    br.gate.backward(p, grads, &c.f, &dgl, &mut df);

    // Selection: f[..d] = Σ_j w_j x_j E_x[j].
    let ex = p.get(l.ex).data();
    let dsel = &df[..d];
    let mut dw = vec![0.0; l.fields];
    {
        let gex = grads.get_mut(l.ex).data_mut();
        for j in 0..l.fields {
            if x[j] == 0.0 {
                continue;
            }
            let row = &ex[j * d..(j + 1) * d];
            dw[j] = x[j] * row.iter().zip(dsel).map(|(a, b)| a * b).sum::<f64>();
            let s = c.w[j] * x[j];
            for (gi, di) in gex[j * d..(j + 1) * d].iter_mut().zip(dsel) {
                *gi += s * di;
            }
        }
    }
    let mut dlogits = vec![0.0; l.fields];
    softmax_backward_into(&c.w, &dw, &mut dlogits);
    let et: Vec<f64> = p.get(l.et).data()[c.te * d..(c.te + 1) * d].to_vec();
    let mut det = df[d..].to_vec();
    br.select.backward(p, grads, &et, &dlogits, &mut det);
    let get = grads.get_mut(l.et).data_mut();
    for (gi, di) in get[c.te * d..(c.te + 1) * d].iter_mut().zip(&det) {
        *gi += di;
    }
    df
}

/// Per-sample loss and its gradient, scaled by `scale`.
///
/// `full` evaluates every branch in both passes and sends the masked heads a
/// zero upstream gradient; otherwise only the heads that enter the loss run.
/// Both modes produce identical gradients. The returned vector holds, per
/// branch, the squared norm of `∂L/∂f` summed over its passes.
pub(crate) fn sample_grad(
    l: &Layout,
    p: &ParameterSet,
    grads: &mut ParameterSet,
    x: &[f64],
    t: usize,
    y: f64,
    kl_weight: f64,
    scale: f64,
    full: bool,
) -> (f64, Vec<f64>) {
    let kk = l.pages();
    let mut df_norm = vec![0.0; kk];
    let mut acc = |k: usize, df: Vec<f64>| df_norm[k - 1] += df.iter().map(|v| v * v).sum::<f64>();
    if t > 0 {
        let c = pass(l, p, x, t, t);
        let loss = (y - c.y).powi(2);
        let df = pass_backward(l, p, grads, x, t, &c, scale * 2.0 * (c.y - y), None);
        acc(t, df);
        if full {
            for k in 1..=kk {
                if k != t {
                    let c = pass(l, p, x, k, k);
                    acc(k, pass_backward(l, p, grads, x, k, &c, 0.0, None));
                }
                let c0 = pass(l, p, x, k, 0);
                acc(k, pass_backward(l, p, grads, x, k, &c0, 0.0, None));
            }
        }
        return (loss, df_norm);
    }
    let caches: Vec<PassCache> = (1..=kk).map(|k| pass(l, p, x, k, 0)).collect();
    let zdim = caches[0].z.len();
    let mut zbar = vec![0.0; zdim];
    for c in &caches {
        zbar.iter_mut().zip(&c.z).for_each(|(a, b)| *a += b / kk as f64);
    }
    let mut loss = 0.0;
    let mut dz = Vec::with_capacity(kk);
    let mut dzbar = vec![0.0; zdim];
    for c in &caches {
        let (kl, du, dv) = kl_softmax_logits(&c.z, &zbar);
        loss += (y - c.y).powi(2) + kl_weight * kl;
        dz.push(du.iter().map(|v| scale * kl_weight * v).collect::<Vec<f64>>());
        dzbar.iter_mut().zip(&dv).for_each(|(a, b)| *a += scale * kl_weight * b);
    }
    for (k, (c, mut dzk)) in caches.iter().zip(dz).enumerate() {
        dzk.iter_mut().zip(&dzbar).for_each(|(a, b)| *a += b / kk as f64);
        let df = pass_backward(l, p, grads, x, k + 1, c, scale * 2.0 * (c.y - y), Some(&dzk));
        acc(k + 1, df);
        if full {
            let ct = pass(l, p, x, k + 1, k + 1);
            acc(k + 1, pass_backward(l, p, grads, x, k + 1, &ct, 0.0, None));
        }
    }
    (loss, df_norm)
}

/// Per-sample loss only, with no gradient bookkeeping.
pub(crate) fn sample_loss(l: &Layout, p: &ParameterSet, x: &[f64], t: usize, y: f64, kl_weight: f64) -> f64 {
    let kk = l.pages();
    if t > 0 {
        return (y - pass(l, p, x, t, t).y).powi(2);
    }
    let caches: Vec<PassCache> = (1..=kk).map(|k| pass(l, p, x, k, 0)).collect();
    let mut zbar = vec![0.0; caches[0].z.len()];
    for c in &caches {
        zbar.iter_mut().zip(&c.z).for_each(|(a, b)| *a += b / kk as f64);
    }
    caches.iter().map(|c| (y - c.y).powi(2) + kl_weight * kl_softmax_logits(&c.z, &zbar).0).sum()
}
