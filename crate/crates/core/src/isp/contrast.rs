use super::DecouplingReport;
use crate::nn::{Init, Mlp, ParamBuilder, ParameterSet, RngStream};
use crate::{Error, Result};

/// Conventional multi-task uplift model: one shared trunk feeding `K`
/// towers. Branch `k` here means the trunk together with tower `k`.
#[derive(Clone, Debug)]
pub struct SharedTrunkModel {
    pub params: ParameterSet,
    trunk: Mlp,
    towers: Vec<Mlp>,
}

impl SharedTrunkModel {
    pub fn new(fields: usize, pages: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, 0x5452_554e_4b00_0000).rng();
        let mut b = ParamBuilder::new();
        Mlp::init(&mut b, "trunk", &[fields, hidden, hidden], Init::He, &mut rng);
        for k in 1..=pages {
            Mlp::init(&mut b, &format!("tower{k}"), &[hidden, hidden, 1], Init::Xavier, &mut rng);
        }
        let params = b.build();
        let trunk = Mlp::bind(&params, "trunk", 2, true)?;
        let towers = (1..=pages).map(|k| Mlp::bind(&params, &format!("tower{k}"), 2, false)).collect::<Result<_>>()?;
        Ok(Self { params, trunk, towers })
    }

    pub fn pages(&self) -> usize {
        self.towers.len()
    }

    /// Gradient of `(y − ŷ^t)²` for a treated sample.
    pub fn treated_grad(&self, x: &[f64], t: usize, y: f64) -> Result<ParameterSet> {
        if t == 0 || t > self.pages() {
            return Err(Error::domain(format!("treatment {t} outside 1..={}", self.pages())));
        }
        if x.len() != self.trunk.d_in() {
            return Err(Error::shape(format!("expected {} features, got {}", self.trunk.d_in(), x.len())));
        }
        let p = &self.params;
        let mut g = p.zeros_like();
        let h = self.trunk.forward(p, x);
        let tower = &self.towers[t - 1];
        let out = tower.forward(p, h.output());
        let dy = 2.0 * (out.output()[0] - y);
        let dh = tower.backward(p, &mut g, h.output(), &out, &[dy]);
        self.trunk.backward(p, &mut g, x, &h, &dh);
        Ok(g)
    }

    /// Same audit as the branch model: any nonzero gradient on a
    /// non-matching branch (trunk included) is a violation.
    pub fn check_gradient_decoupling(&self, x: &[f64], t: usize, y: f64) -> Result<DecouplingReport> {
        let g = self.treated_grad(x, t, y)?;
        let trunk_sq = g.sq_norm_prefix("trunk/");
        let mut param_norms = Vec::with_capacity(self.pages());
        let mut violations = Vec::new();
        for k in 1..=self.pages() {
            let tower = format!("tower{k}/");
            let norm = (trunk_sq + g.sq_norm_prefix(&tower)).sqrt();
            param_norms.push(norm);
            if k != t && norm != 0.0 {
                violations.extend(
                    g.iter()
                        .filter(|(n, v)| {
                            (n.starts_with("trunk/") || n.starts_with(&tower)) && v.data().iter().any(|x| *x != 0.0)
                        })
                        .map(|(n, _)| format!("branch{k}: {n}")),
                );
            }
        }
        Ok(DecouplingReport { treatment: t, param_norms, input_norms: Vec::new(), violations })
    }
}
