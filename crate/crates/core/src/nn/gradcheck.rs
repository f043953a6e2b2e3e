//! Central finite-difference oracle for analytic gradients.

use super::params::ParameterSet;

/// Relative-error denominator floor. Keeps parameters whose true gradient is
/// zero (masked towers, dead units) from dividing finite-difference noise by
/// a vanishing norm.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(path, relative error)` per parameter tensor.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    /// Largest elementwise absolute difference seen anywhere.
    pub max_abs_err: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// The relative error of a parameter tensor is
/// `‖a − n‖ / max(‖a‖, ‖n‖, REL_ERR_FLOOR)`.
pub fn finite_diff_grad_check(
    loss: impl Fn(&ParameterSet) -> f64,
    params: &ParameterSet,
    analytic: &ParameterSet,
    eps: f64,
) -> GradCheckReport {
    assert!(params.same_layout(analytic), "gradient layout differs from parameters");
    let mut probe = params.clone();
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_abs_err = 0.0f64;
    for id in params.ids() {
        let n = params.get(id).len();
        let mut diff_sq = 0.0;
        let mut num_sq = 0.0;
        let a = analytic.get(id).data();
        for i in 0..n {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            diff_sq += (a[i] - num).powi(2);
            num_sq += num * num;
            max_abs_err = max_abs_err.max((a[i] - num).abs());
        }
        let a_norm = analytic.get(id).sq_norm().sqrt();
        let rel = diff_sq.sqrt() / a_norm.max(num_sq.sqrt()).max(REL_ERR_FLOOR);
        per_param.push((params.name(id).to_string(), rel));
    }
    let max_rel_err = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    GradCheckReport { per_param, max_rel_err, max_abs_err }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamBuilder;
    use crate::nn::tensor::Tensor;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut b = ParamBuilder::new();
        b.insert("a", Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap());
        b.insert("b", Tensor::from_rows(&[vec![0.3, 0.7], vec![-1.1, 2.0]]).unwrap());
        let p = b.build();
        // L = Σ c_i x_i² over all scalars.
        let loss = |p: &ParameterSet| -> f64 {
            p.iter().flat_map(|(_, t)| t.data().iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x * x)).sum()
        };
        let mut g = p.zeros_like();
        for id in p.ids() {
            let src = p.get(id).data().to_vec();
            for (i, gi) in g.get_mut(id).data_mut().iter_mut().enumerate() {
                *gi = 2.0 * (i as f64 + 1.0) * src[i];
            }
        }
        let report = finite_diff_grad_check(loss, &p, &g, 1e-5);
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut b = ParamBuilder::new();
        b.insert("a", Tensor::vector(vec![1.0]).unwrap());
        let p = b.build();
        let g = p.clone(); // true gradient of x² is 2x = 2
        let report = finite_diff_grad_check(|p| p.get(p.id("a").unwrap()).data()[0].powi(2), &p, &g, 1e-5);
        assert!(report.max_rel_err > 0.4);
        assert_eq!(report.worst().unwrap().0, "a");
    }
}
