use super::params::ParameterSet;
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction, applied in parameter-path order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: ParameterSet,
    v: ParameterSet,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        Self { lr, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Fails without touching `params` if any gradient
    /// is non-finite, naming the offending parameter path.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        if !params.same_layout(grads) {
            return Err(Error::shape("gradient layout differs from parameters"));
        }
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for id in grads.ids() {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            }
            let v = self.v.get_mut(id).data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            }
            let (m, v) = (self.m.get(id).data(), self.v.get(id).data());
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

/// One Adam update from fresh optimizer state.
pub fn optimizer_step(params: &ParameterSet, grads: &ParameterSet, lr: f64) -> Result<ParameterSet> {
    let mut out = params.clone();
    Adam::new(params, lr).step(&mut out, grads)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamBuilder;
    use crate::nn::tensor::Tensor;

    fn scalar_set(v: f64) -> ParameterSet {
        let mut b = ParamBuilder::new();
        b.insert("p", Tensor::vector(vec![v]).unwrap());
        b.build()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = scalar_set(1.25);
        let out = optimizer_step(&p, &p.zeros_like(), 0.1).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let p = scalar_set(1.0);
        let g = scalar_set(0.37);
        let out = optimizer_step(&p, &g, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 0.37 / (0.37 + EPSILON);
        assert!((out.by_path("p").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((out.by_path("p").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_names_path() {
        let mut p = scalar_set(1.0);
        let mut g = p.zeros_like();
        g.get_mut(g.id("p").unwrap()).data_mut()[0] = f64::NAN;
        let err = Adam::new(&p, 0.1).step(&mut p, &g).unwrap_err();
        assert!(err.to_string().contains("`p`"));
    }

    #[test]
    fn repeated_steps_are_bit_identical() {
        let run = || {
            let mut p = scalar_set(0.5);
            let mut adam = Adam::new(&p, 0.05);
            for k in 0..10 {
                let g = scalar_set(0.1 * k as f64 - 0.3);
                adam.step(&mut p, &g).unwrap();
            }
            p.by_path("p").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
