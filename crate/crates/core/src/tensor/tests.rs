use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn matmul_identity_left() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = g.constant(t64(&[2, 2], &[0.3, -1.2, 4.0, 2.5]));
    let out = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(out), g.value(a));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn add_rejects_leading_broadcast() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2]));
    assert!(g.add(a, b).is_err());
    let c = g.constant(Tensor::zeros([3]));
    assert!(g.add(a, c).is_ok());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([3]));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[5], &[0.1, -2.0, 3.0, 0.0, 7.5]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 5]);
    assert_eq!(g.grad(s).unwrap().data(), &[1.0]);
}

#[test]
fn backward_of_square_sum() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    // a second call accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[2], &[1.0, 2.0]));
    assert!(g.backward(x).is_err());
}

#[test]
fn fd_gradient_examples() {
    let x = t64(&[4], &[0.5, -1.0, 2.0, 3.0]);
    let ones = fd_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-3).unwrap();
    for &v in ones.data() {
        assert!((v - 1.0).abs() < 1e-9);
    }
    let x = t64(&[1], &[3.0]);
    let d = fd_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
    assert!((d.data()[0] - 6.0).abs() < 1e-6);
}

#[test]
fn layer_norm_backward_matches_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 4], &mut rng);
    let gamma = random(&[4], &mut rng);
    let beta = random(&[4], &mut rng);
    let w = random(&[3, 4], &mut rng);
    let f = |x: &Tensor<f64>| -> Result<(f64, Option<Tensor<f64>>)> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let gv = g.constant(gamma.clone());
        let bv = g.constant(beta.clone());
        let wv = g.constant(w.clone());
        let y = g.layer_norm(xv, gv, bv, 1e-5)?;
        let p = g.mul(y, wv)?;
        let s = g.sum(p);
        g.backward(s)?;
        Ok((g.value(s).item(), g.grad(xv)))
    };
    let analytic = f(&x).unwrap().1.unwrap();
    let numeric = fd_gradient(|t| Ok(f(t)?.0), &x, 1e-3).unwrap();
    assert!(max_relative_error(&analytic, &numeric) < 1e-3);
}

#[test]
fn permute_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[2, 3, 4, 5], &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let p = g.permute(v, &[2, 0, 3, 1]).unwrap();
    assert_eq!(g.shape(p), &[4, 2, 5, 3]);
    // element (a,b,c,d) lands at (c,a,d,b)
    let src = x.data()[((1 * 3 + 2) * 4 + 3) * 5 + 4];
    let dst = g.value(p).data()[((3 * 2 + 1) * 5 + 4) * 3 + 2];
    assert_eq!(src, dst);
    let back = g.permute(p, &[1, 3, 0, 2]).unwrap();
    assert_eq!(g.value(back), &x);
}

#[test]
fn pool3_excludes_padding() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.pool3(x).unwrap();
    // every 3x3 window of a 2x2 map covers all four pixels
    for &v in g.value(y).data() {
        assert!((v - 2.5).abs() < 1e-12);
    }
}

fn one_scalar_param(w: f32, grad: f32) -> (Parameters, ParamId) {
    let mut p = Parameters::new();
    let id = p.insert("w", Tensor::from_vec(vec![w])).unwrap();
    p.set_grad(id, vec![grad]).unwrap();
    (p, id)
}

#[test]
fn adamw_default_lr() {
    assert_eq!(AdamW::default().lr, 8e-5);
    assert_eq!(AdamW::default().betas, (0.9, 0.999));
    assert_eq!(AdamW::default().weight_decay, 0.01);
}

#[test]
fn adamw_single_step_hand_computed() {
    let (mut p, id) = one_scalar_param(1.0, 1.0);
    let opt = AdamW {
        lr: 0.1,
        betas: (0.9, 0.999),
        eps: 1e-8,
        weight_decay: 0.0,
    };
    p.adamw_step(&opt).unwrap();
    // m_hat = v_hat = 1, so the step is lr in the gradient direction
    assert!((p.value(id).data()[0] - 0.9).abs() < 1e-6);
    assert_eq!(p.step_count(), 1);
}

#[test]
fn adamw_zero_grad_no_decay_is_identity() {
    let (mut p, id) = one_scalar_param(0.37, 0.0);
    let opt = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    p.adamw_step(&opt).unwrap();
    assert_eq!(p.value(id).data()[0], 0.37);
}

#[test]
fn adamw_missing_grad_names_leaf() {
    let mut p = Parameters::new();
    p.insert("decoder.head.w", Tensor::zeros([2])).unwrap();
    let err = p.adamw_step(&AdamW::default()).unwrap_err();
    assert!(err.to_string().contains("decoder.head.w"));
}

#[test]
fn clip_examples() {
    let mut p = Parameters::new();
    let id = p.insert("g", Tensor::zeros([2])).unwrap();
    p.set_grad(id, vec![0.3, 0.4]).unwrap();
    assert!((p.clip_gradients(1.0) - 0.5).abs() < 1e-7);
    assert_eq!(p.grad(id).unwrap(), &[0.3, 0.4]);

    p.set_grad(id, vec![3.0, 4.0]).unwrap();
    assert_eq!(p.clip_gradients(1.0), 5.0);
    let g = p.grad(id).unwrap();
    assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
}

#[test]
fn session_binds_lazily_and_collects_grads() {
    let mut p = Parameters::new();
    let a = p.insert("a", Tensor::from_vec(vec![2.0])).unwrap();
    let b = p.insert("b", Tensor::from_vec(vec![5.0])).unwrap();
    let mut s = p.session();
    let va = s.param(a);
    let sq = s.graph.mul(va, va).unwrap();
    let loss = s.graph.sum(sq);
    s.backward(loss).unwrap();
    assert!(s.touched(a) && !s.touched(b));
    let grads = s.param_grads();
    drop(s);
    p.accumulate(grads);
    assert_eq!(p.grad(a).unwrap(), &[4.0]);
    assert_eq!(p.grad(b).unwrap(), &[0.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-20.0f64..20.0, 12), axis in 0usize..2) {
        let mut g = Graph::new();
        let x = g.constant(t64(&[3, 4], &data));
        let y = g.softmax(x, axis).unwrap();
        let s = g.sum_axis(y, axis).unwrap();
        for &v in g.value(s).data() {
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_is_idempotent(data in prop::collection::vec(-10.0f32..10.0, 1..20), max in 0.1f32..5.0) {
        let mut p = Parameters::new();
        let id = p.insert("g", Tensor::zeros([data.len()])).unwrap();
        p.set_grad(id, data).unwrap();
        p.clip_gradients(max);
        let once = p.grad(id).unwrap().to_vec();
        prop_assert!(p.grad_norm() <= max + 1e-6);
        p.clip_gradients(max);
        prop_assert_eq!(p.grad(id).unwrap(), &once[..]);
    }

    #[test]
    fn zero_lr_zero_decay_leaves_values(w in prop::collection::vec(-3.0f32..3.0, 1..8), gr in -5.0f32..5.0) {
        let mut p = Parameters::new();
        let id = p.insert("w", Tensor::from_vec(w.clone())).unwrap();
        p.set_grad(id, vec![gr; w.len()]).unwrap();
        let opt = AdamW { lr: 0.0, weight_decay: 0.0, ..AdamW::default() };
        p.adamw_step(&opt).unwrap();
        prop_assert_eq!(p.value(id).data(), &w[..]);
    }
}
