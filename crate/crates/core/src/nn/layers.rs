use rand::Rng;

use super::ops::{affine_backward_into, affine_into, relu_backward_inplace, relu_inplace};
use super::params::{ParamBuilder, ParamId, ParameterSet};
use super::tensor::Tensor;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / d_in)`, for layers followed by ReLU.
    He,
    /// Uniform in `±sqrt(6 / (d_in + d_out))`.
    Xavier,
    Zero,
}

pub fn init_matrix(rng: &mut impl Rng, rows: usize, cols: usize, init: Init) -> Tensor {
    let limit = match init {
        Init::He => (6.0 / cols as f64).sqrt(),
        Init::Xavier => (6.0 / (rows + cols) as f64).sqrt(),
        Init::Zero => 0.0,
    };
    let data = (0..rows * cols).map(|_| if limit > 0.0 { rng.random_range(-limit..limit) } else { 0.0 }).collect();
    Tensor::matrix(rows, cols, data).expect("finite init")
}

/// Affine layer `y = W x + b` stored as `<prefix>/w` (`d_out × d_in`) and
/// `<prefix>/b`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn init(b: &mut ParamBuilder, prefix: &str, d_in: usize, d_out: usize, init: Init, rng: &mut impl Rng) {
        b.insert(format!("{prefix}/w"), init_matrix(rng, d_out, d_in, init));
        b.insert(format!("{prefix}/b"), Tensor::zeros(&[d_out]));
    }

    pub fn bind(p: &ParameterSet, prefix: &str) -> Result<Self> {
        let w = p.id(&format!("{prefix}/w"))?;
        let b = p.id(&format!("{prefix}/b"))?;
        let shape = p.get(w).shape();
        Ok(Self { w, b, d_in: shape[1], d_out: shape[0] })
    }

    #[inline]
    pub fn forward(&self, p: &ParameterSet, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.d_out];
        affine_into(x, p.get(self.w).data(), p.get(self.b).data(), self.d_in, &mut y);
        y
    }

    /// Accumulates parameter gradients into `g` and adds the input gradient
    /// into `dx`.
    #[inline]
    pub fn backward(&self, p: &ParameterSet, g: &mut ParameterSet, x: &[f64], dy: &[f64], dx: &mut [f64]) {
        let mut db = vec![0.0; self.d_out];
        affine_backward_into(x, p.get(self.w).data(), dy, dx, g.get_mut(self.w).data_mut(), &mut db);
        for (a, b) in g.get_mut(self.b).data_mut().iter_mut().zip(&db) {
            *a += b;
        }
    }
}

/// Stack of dense layers with ReLU between them. The last layer is linear
/// unless `relu_out` is set.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub relu_out: bool,
}

/// Per-layer outputs (post-activation) from an [`Mlp`] forward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty mlp")
    }
}

impl Mlp {
    /// `dims = [d_in, h1, ..., d_out]`; layers are `<prefix>/l0`, `<prefix>/l1`, ...
    pub fn init(b: &mut ParamBuilder, prefix: &str, dims: &[usize], last_init: Init, rng: &mut impl Rng) {
        let n = dims.len() - 1;
        for i in 0..n {
            let init = if i + 1 == n { last_init } else { Init::He };
            Dense::init(b, &format!("{prefix}/l{i}"), dims[i], dims[i + 1], init, rng);
        }
    }

    pub fn bind(p: &ParameterSet, prefix: &str, n_layers: usize, relu_out: bool) -> Result<Self> {
        let layers = (0..n_layers).map(|i| Dense::bind(p, &format!("{prefix}/l{i}"))).collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, relu_out })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out
    }

    pub fn forward(&self, p: &ParameterSet, x: &[f64]) -> MlpCache {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let input: &[f64] = if i == 0 { x } else { &acts[i - 1] };
            let mut y = layer.forward(p, input);
            if i + 1 < n || self.relu_out {
                relu_inplace(&mut y);
            }
            acts.push(y);
        }
        MlpCache { acts }
    }

    /// Returns the gradient w.r.t. `x`.
    pub fn backward(
        &self,
        p: &ParameterSet,
        g: &mut ParameterSet,
        x: &[f64],
        cache: &MlpCache,
        dout: &[f64],
    ) -> Vec<f64> {
        let n = self.layers.len();
        let mut grad = dout.to_vec();
        for i in (0..n).rev() {
            if i + 1 < n || self.relu_out {
                relu_backward_inplace(&cache.acts[i], &mut grad);
            }
            let input: &[f64] = if i == 0 { x } else { &cache.acts[i - 1] };
            let mut dx = vec![0.0; self.layers[i].d_in];
            self.layers[i].backward(p, g, input, &grad, &mut dx);
            grad = dx;
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::finite_diff_grad_check;
    use crate::nn::rng::RngStream;

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = RngStream::new(5, 0).rng();
        let mut b = ParamBuilder::new();
        Mlp::init(&mut b, "net", &[3, 5, 4, 2], Init::Xavier, &mut rng);
        let p = b.build();
        let mlp = Mlp::bind(&p, "net", 3, false).unwrap();
        let x = [0.5, -1.0, 2.0];
        let c = [1.0, -0.5];
        let loss = |p: &ParameterSet| -> f64 {
            let m = Mlp::bind(p, "net", 3, false).unwrap();
            m.forward(p, &x).output().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let mut g = p.zeros_like();
        let cache = mlp.forward(&p, &x);
        mlp.backward(&p, &mut g, &x, &cache, &c);
        let report = finite_diff_grad_check(loss, &p, &g, 1e-6);
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
