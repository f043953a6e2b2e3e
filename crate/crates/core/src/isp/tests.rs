use proptest::prelude::*;
use rand::Rng;

use super::model::pass;
use super::*;
use crate::nn::{finite_diff_grad_check, Tensor};

fn cfg(pages: usize, experts: usize) -> IspConfig {
    IspConfig { pages, experts, embed_dim: 3, expert_hidden: 5, latent_dim: 4, tower_hidden: 4, ..Default::default() }
}

fn model(pages: usize, experts: usize, fields: usize) -> IspModel {
    IspModel::new(&cfg(pages, experts), Normalizer::identity(fields), 0.0, 1.0).unwrap()
}

fn random_batch(n: usize, fields: usize, pages: usize, seed: u64) -> Vec<RctInstance> {
    let mut rng = RngStream::new(seed, 3).rng();
    (0..n)
        .map(|i| RctInstance {
            user_id: i as u64,
            x: (0..fields).map(|_| rng.random_range(-1.5..1.5)).collect(),
            t: i % (pages + 1),
            y: rng.random_range(-1.0..1.0),
        })
        .collect()
}

fn set(m: &mut IspModel, path: &str, values: Vec<f64>) {
    let id = m.params.id(path).unwrap();
    let shape = m.params.get(id).shape().to_vec();
    *m.params.get_mut(id) = Tensor::new(shape, values).unwrap();
}

/// Makes the tower output constant `c` on every input.
fn constant_tower(m: &mut IspModel, k: usize, c: f64) {
    let w = m.params.by_path(&format!("branch{k}/tower/l1/w")).unwrap().len();
    set(m, &format!("branch{k}/tower/l1/w"), vec![0.0; w]);
    set(m, &format!("branch{k}/tower/l1/b"), vec![c]);
}

#[test]
fn zero_selector_averages_fields() {
    let ex = vec![vec![1.0, 2.0], vec![3.0, -2.0]];
    let (w, sel) = feature_select(&ex, &[0.3, 0.7], &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).unwrap();
    assert_eq!(w, vec![0.5, 0.5]);
    assert_eq!(sel, vec![2.0, 0.0]);
}

#[test]
fn saturated_selector_picks_one_field() {
    let ex = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![0.0, 9.0]];
    let b = Tensor::vector(vec![0.0, 50.0, 0.0]).unwrap();
    let (_, sel) = feature_select(&ex, &[1.0, 1.0], &Tensor::zeros(&[3, 2]), &b).unwrap();
    assert!((sel[0] - 3.0).abs() < 1e-9 && (sel[1] + 2.0).abs() < 1e-9);
}

#[test]
fn selector_closed_form_weights() {
    let ex = vec![vec![1.0], vec![0.0]];
    // logits = W e_t with e_t = [ln 3], W = [[1],[0]].
    let w_sel = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
    let (w, _) = feature_select(&ex, &[3f64.ln()], &w_sel, &Tensor::zeros(&[2])).unwrap();
    assert!((w[0] - 0.75).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
    assert!(matches!(feature_select(&ex, &[1.0], &Tensor::zeros(&[3, 1]), &Tensor::zeros(&[3])), Err(Error::Shape(_))));
}

#[test]
fn single_expert_gate_is_identity() {
    let m = model(2, 1, 4);
    let x = [0.2, -0.4, 1.0, 0.5];
    let c = pass(&m.layout, &m.params, &x, 1, 1);
    assert_eq!(c.g, vec![1.0]);
    assert_eq!(c.z, c.experts[0].output());
}

#[test]
fn shared_treatment_embedding_gives_equal_heads() {
    let mut m = model(3, 2, 4);
    let d = m.cfg.embed_dim;
    let mut et = m.params.by_path("embed/t").unwrap().data().to_vec();
    let row0 = et[..d].to_vec();
    et[2 * d..3 * d].copy_from_slice(&row0);
    set(&mut m, "embed/t", et);
    let out = m.branch_forward(&[0.1, 0.2, -0.3, 0.9], 2).unwrap();
    assert_eq!(out.y_hat_k, out.y_hat_0k);
    assert_eq!(out.z_k, out.z_0k);
    assert!(matches!(m.branch_forward(&[0.0; 4], 0), Err(Error::Domain(_))));
    assert!(matches!(m.branch_forward(&[0.0; 4], 4), Err(Error::Domain(_))));
}

/// Independent evaluation of a branch from raw parameter arrays.
fn straight_line(p: &ParameterSet, k: usize, te: usize, x: &[f64], d: usize, experts: usize) -> f64 {
    let get = |n: &str| p.by_path(n).unwrap().data().to_vec();
    let ex = get("embed/x");
    let et: Vec<f64> = get("embed/t")[te * d..(te + 1) * d].to_vec();
    let dense = |w: &[f64], b: &[f64], v: &[f64]| -> Vec<f64> {
        (0..b.len()).map(|o| b[o] + (0..v.len()).map(|i| w[o * v.len() + i] * v[i]).sum::<f64>()).collect()
    };
    let softmax = |v: &[f64]| -> Vec<f64> {
        let e: Vec<f64> = v.iter().map(|a| a.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|a| a / s).collect()
    };
    let relu = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|a| a.max(0.0)).collect() };
    let pre = format!("branch{k}");
    let w = softmax(&dense(&get(&format!("{pre}/select/w")), &get(&format!("{pre}/select/b")), &et));
    let mut f = vec![0.0; 2 * d];
    for j in 0..x.len() {
        for i in 0..d {
            f[i] += w[j] * x[j] * ex[j * d + i];
        }
    }
    f[d..].copy_from_slice(&et);
    let g = softmax(&dense(&get(&format!("{pre}/gate/w")), &get(&format!("{pre}/gate/b")), &f));
    let mut z: Vec<f64> = Vec::new();
    for m in 0..experts {
        let h = relu(dense(&get(&format!("{pre}/expert{m}/l0/w")), &get(&format!("{pre}/expert{m}/l0/b")), &f));
        let o = dense(&get(&format!("{pre}/expert{m}/l1/w")), &get(&format!("{pre}/expert{m}/l1/b")), &h);
        if z.is_empty() {
            z = vec![0.0; o.len()];
        }
        for (zi, oi) in z.iter_mut().zip(o) {
            *zi += g[m] * oi;
        }
    }
    let h = relu(dense(&get(&format!("{pre}/tower/l0/w")), &get(&format!("{pre}/tower/l0/b")), &z));
    dense(&get(&format!("{pre}/tower/l1/w")), &get(&format!("{pre}/tower/l1/b")), &h)[0]
}

#[test]
fn tiny_fixture_matches_straight_line_evaluation() {
    let c = IspConfig {
        pages: 2,
        experts: 2,
        embed_dim: 2,
        expert_hidden: 3,
        latent_dim: 2,
        tower_hidden: 2,
        ..Default::default()
    };
    let mut m = IspModel::new(&c, Normalizer::identity(3), 0.0, 1.0).unwrap();
    // Pin every parameter to a fixed deterministic pattern.
    for (i, (_, t)) in m.params.iter_mut().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * 7 + j * 3) % 11) as f64 / 10.0 - 0.45;
        }
    }
    let x = [0.3, -1.2, 0.8];
    for k in 1..=2 {
        let out = m.branch_forward(&x, k).unwrap();
        assert!((out.y_hat_k - straight_line(&m.params, k, k, &x, 2, 2)).abs() < 1e-12);
        assert!((out.y_hat_0k - straight_line(&m.params, k, 0, &x, 2, 2)).abs() < 1e-12);
    }
}

#[test]
fn control_sample_hand_computed_loss() {
    let mut m = model(2, 2, 3);
    // Branch 2 becomes a copy of branch 1 so the control latents coincide.
    let copies: Vec<(String, Tensor)> = m
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("branch1/"))
        .map(|(n, t)| (n.replacen("branch1/", "branch2/", 1), t.clone()))
        .collect();
    for (n, t) in copies {
        set(&mut m, &n, t.into_data());
    }
    constant_tower(&mut m, 1, 2.0);
    constant_tower(&mut m, 2, 4.0);
    let inst = RctInstance { user_id: 0, x: vec![0.4, -0.2, 1.0], t: 0, y: 3.0 };
    assert!((isp_batch_loss(&m, std::slice::from_ref(&inst)).unwrap() - 2.0).abs() < 1e-12);
    let treated = RctInstance { t: 1, y: 2.0, ..inst };
    assert_eq!(isp_batch_loss(&m, &[treated]).unwrap(), 0.0);
    let bad = RctInstance { user_id: 0, x: vec![0.0; 3], t: 3, y: 0.0 };
    assert!(matches!(isp_batch_loss(&m, &[bad]), Err(Error::Domain(_))));
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let m = model(3, 2, 5);
    let batch = random_batch(4, 5, 3, 8);
    assert_eq!(batch.iter().filter(|b| b.t == 0).count(), 1);
    let (_, g) = m.loss_and_grad(&batch).unwrap();
    let report = finite_diff_grad_check(|p| m.loss_at(p, &batch).unwrap(), &m.params, &g, 1e-6);
    assert!(report.max_rel_err < 1e-4, "{:?}", report.worst());
}

#[test]
fn full_and_masked_gradients_agree() {
    let m = model(3, 2, 5);
    for inst in random_batch(8, 5, 3, 2) {
        let (_, full, _) = m.full_sample_grad(&inst).unwrap();
        let (_, masked) = m.loss_and_grad(std::slice::from_ref(&inst)).unwrap();
        assert_eq!(full, masked);
    }
}

#[test]
fn treated_sample_touches_only_its_branch() {
    let m = model(3, 2, 5);
    let inst = RctInstance { user_id: 0, x: vec![0.3, -0.7, 1.1, 0.2, -1.0], t: 2, y: 0.8 };
    let r = check_gradient_decoupling(&m, &inst).unwrap();
    assert!(r.passed(), "{:?}", r.violations);
    assert_eq!(r.param_norms[0], 0.0);
    assert_eq!(r.param_norms[2], 0.0);
    assert!(r.param_norms[1] > 0.0);
    assert_eq!(r.input_norms[0], 0.0);
    assert!(r.input_norms[1] > 0.0);
    let control = RctInstance { t: 0, ..inst.clone() };
    let r0 = check_gradient_decoupling(&m, &control).unwrap();
    assert!(r0.passed());
    assert!(r0.param_norms.iter().all(|n| *n > 0.0));
    let trunk = SharedTrunkModel::new(5, 3, 8, 1).unwrap();
    assert!(!trunk.check_gradient_decoupling(&inst.x, 2, inst.y).unwrap().passed());
}

#[test]
fn static_score_examples() {
    assert_eq!(static_scores(&[3.0, 3.0, 3.0], 2.0), vec![1.0 / 3.0; 3]);
    let d = static_scores(&[2.0, 4.0], 2.0);
    assert!((d[0] - 0.268_941_421_369_995).abs() < 1e-12 && (d[1] - 0.731_058_578_630_005).abs() < 1e-12);
    let clamped = static_scores(&[1e-7, 2e-7], -5.0);
    assert!((clamped.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let m = model(3, 2, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("isp.ckpt");
    m.save(&path).unwrap();
    let back = IspModel::load(&path).unwrap();
    let x = [0.1, 0.2, 0.3, 0.4, 0.5];
    assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let c = IspConfig { epochs: 15, batch_size: 16, ..cfg(3, 2) };
    let data = random_batch(96, 5, 3, 1)
        .into_iter()
        .map(|mut i| {
            i.y = i.x[0] + if i.t == 1 { 1.0 } else { 0.0 };
            i
        })
        .collect::<Vec<_>>();
    let (a, ra) = train_isp(&c, &data).unwrap();
    let (b, _) = train_isp(&c, &data).unwrap();
    assert!(ra.final_loss() < ra.initial_loss);
    assert_eq!(a.params.to_text(), b.params.to_text());
}

proptest! {
    #[test]
    fn static_scores_on_simplex(y in proptest::collection::vec(-1e3f64..1e3, 2..6), y0 in -1e3f64..1e3) {
        let d = static_scores(&y, y0);
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(d.iter().all(|v| *v >= 0.0));
    }
}
