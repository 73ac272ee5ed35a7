use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rows(g: &mut Graph<f64>, data: &[&[f64]]) -> Var {
    let n = data[0].len();
    let flat: Vec<f64> = data.concat();
    g.leaf(Tensor::from_f64([data.len(), n], &flat).unwrap())
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item()
}

#[test]
fn cosine_examples() {
    let mut g = Graph::<f64>::new();
    let u = rows(&mut g, &[&[1.0, 0.0], &[1.0, 0.0], &[0.3, -2.0]]);
    let v = rows(&mut g, &[&[1.0, 1.0], &[0.0, 5.0], &[0.3, -2.0]]);
    let s = cosine_similarity(&mut g, u, v).unwrap();
    let d = g.value(s).data();
    assert!((d[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    assert!(d[1].abs() < 1e-12);
    assert!((d[2] - 1.0).abs() < 1e-12);
    assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - 0.70710677).abs() < 1e-6);
}

#[test]
fn zero_vector_similarity_is_zero() {
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    assert!(is_zero_vector(&[0.0, 0.0]));
    let mut g = Graph::<f64>::new();
    let u = rows(&mut g, &[&[0.0, 0.0]]);
    let v = rows(&mut g, &[&[1.0, 2.0]]);
    let s = cosine_similarity(&mut g, u, v).unwrap();
    assert_eq!(g.value(s).data(), &[0.0]);
}

#[test]
fn info_nce_hand_computed() {
    let mut g = Graph::<f64>::new();
    let a = rows(&mut g, &[&[1.0, 0.0]]);
    let p = rows(&mut g, &[&[2.0, 0.0]]);
    let n = rows(&mut g, &[&[-1.0, 0.0]]);
    let l = info_nce(&mut g, a, p, n, 1.0).unwrap().unwrap();
    // -ln(e / (e + e^-1))
    assert!((scalar(&g, l) - 0.126_928_011_042_972_5).abs() < 1e-9);
}

#[test]
fn info_nce_identical_positive_and_negative_is_ln2() {
    let mut g = Graph::<f64>::new();
    let a = rows(&mut g, &[&[0.2, 0.7, -0.1]]);
    let p = rows(&mut g, &[&[1.0, -1.0, 0.5]]);
    let n = rows(&mut g, &[&[1.0, -1.0, 0.5]]);
    let l = info_nce(&mut g, a, p, n, 0.07).unwrap().unwrap();
    assert!((scalar(&g, l) - std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn info_nce_skips_without_negatives() {
    let mut g = Graph::<f64>::new();
    let a = rows(&mut g, &[&[1.0, 0.0]]);
    let n = g.constant(Tensor::zeros([0, 2]));
    assert!(info_nce(&mut g, a, a, n, 1.0).unwrap().is_none());
}

#[test]
fn info_nce_decreases_as_positive_aligns() {
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let angle = std::f64::consts::PI * (1.0 - step as f64 / 10.0);
        let mut g = Graph::<f64>::new();
        let a = rows(&mut g, &[&[1.0, 0.0]]);
        let p = rows(&mut g, &[&[angle.cos(), angle.sin()]]);
        let n = rows(&mut g, &[&[0.0, 1.0], &[-0.6, -0.8]]);
        let l = info_nce(&mut g, a, p, n, 0.5).unwrap().unwrap();
        let l = scalar(&g, l);
        assert!(l < last);
        last = l;
    }
}

fn cl_single(sim_vec: &[f64], target: bool, smoothing: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let u = rows(&mut g, &[&[1.0, 0.0]]);
    let v = rows(&mut g, &[sim_vec]);
    let l = cl_loss(&mut g, u, v, &[target], smoothing)
        .unwrap()
        .unwrap();
    scalar(&g, l)
}

#[test]
fn cl_loss_examples() {
    assert!(cl_single(&[1.0, 0.0], true, 0.0) < 1e-5);
    for t in [true, false] {
        assert!((cl_single(&[0.0, 1.0], t, 0.0) - std::f64::consts::LN_2).abs() < 1e-9);
    }
    // t' = 0.95 against the clamped 1 - 1e-6
    assert!((cl_single(&[1.0, 0.0], true, 0.1) - 0.690_776_477_898_688_8).abs() < 1e-9);
}

#[test]
fn cl_loss_rejects_bad_smoothing_and_skips_empty() {
    let mut g = Graph::<f64>::new();
    let u = rows(&mut g, &[&[1.0, 0.0]]);
    assert!(cl_loss(&mut g, u, u, &[true], 1.0).is_err());
    let e = g.constant(Tensor::zeros([0, 2]));
    assert!(cl_loss(&mut g, e, e, &[], 0.1).unwrap().is_none());
}

#[test]
fn cl_loss_infimum_at_correct_sign() {
    let at = |theta: f64, t: bool| cl_single(&[theta.cos(), theta.sin()], t, 0.0);
    let same = at(0.0, true);
    let diff = at(std::f64::consts::PI, false);
    for k in 1..20 {
        let theta = std::f64::consts::PI * k as f64 / 20.0;
        assert!(at(theta, true) > same);
        assert!(at(std::f64::consts::PI - theta, false) > diff);
    }
}

#[test]
fn soft_cross_entropy_uniform_logits() {
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(Tensor::zeros([2, 3, 5]));
    let l = soft_cross_entropy(&mut g, logits, &[0, 1, 2, 3, 4, 0], 0.0)
        .unwrap()
        .unwrap();
    assert!((scalar(&g, l) - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn soft_cross_entropy_margin_limit() {
    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 10.0, 20.0, 40.0] {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::from_f64([2, 2], &[margin, 0.0, 0.0, margin]).unwrap());
        let l = soft_cross_entropy(&mut g, logits, &[0, 1], 0.0)
            .unwrap()
            .unwrap();
        let l = scalar(&g, l);
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-12);
}

#[test]
fn soft_cross_entropy_smoothed_single_pixel() {
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(Tensor::from_f64([1, 2], &[2.0, 0.0]).unwrap());
    let l = soft_cross_entropy(&mut g, logits, &[0], 0.1)
        .unwrap()
        .unwrap();
    // targets (0.95, 0.05); sigma = e^2 / (e^2 + 1)
    let sigma = 2f64.exp() / (2f64.exp() + 1.0);
    let expected = -(0.95 * sigma.ln() + 0.05 * (1.0 - sigma).ln());
    assert!((expected - 0.226_928_011_042_972_5).abs() < 1e-12);
    assert!((scalar(&g, l) - expected).abs() < 1e-12);
}

#[test]
fn soft_cross_entropy_ignores_and_skips() {
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(Tensor::from_f64([2, 2], &[2.0, 0.0, 9.0, -9.0]).unwrap());
    let l = soft_cross_entropy(&mut g, logits, &[0, IGNORE_LABEL], 0.0)
        .unwrap()
        .unwrap();
    let sigma = 2f64.exp() / (2f64.exp() + 1.0);
    assert!((scalar(&g, l) + sigma.ln()).abs() < 1e-12);
    let none = soft_cross_entropy(&mut g, logits, &[IGNORE_LABEL; 2], 0.0).unwrap();
    assert!(none.is_none());
    assert!(soft_cross_entropy(&mut g, logits, &[0, 7], 0.0).is_err());
}

#[test]
fn dice_perfect_prediction() {
    let side = 10;
    let labels: Vec<u8> = (0..side * side).map(|i| (i % 3) as u8).collect();
    let mut onehot = vec![0.0; labels.len() * 3];
    for (i, &c) in labels.iter().enumerate() {
        onehot[i * 3 + c as usize] = 1.0;
    }
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::from_f64([labels.len(), 3], &onehot).unwrap());
    let l = dice_loss(&mut g, p, &labels).unwrap();
    assert!(scalar(&g, l).abs() < 1e-2);
}

#[test]
fn dice_uniform_probs_single_class() {
    let (n, k) = (37usize, 4usize);
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::full([n, k], 1.0 / k as f64));
    let l = dice_loss(&mut g, p, &vec![2u8; n]).unwrap();
    let (nf, kf) = (n as f64, k as f64);
    let per_class = (2.0 * nf / kf + 1.0) / (nf / kf + nf + 1.0);
    assert!((scalar(&g, l) - (1.0 - per_class)).abs() < 1e-12);
}

#[test]
fn joint_loss_clips_and_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let ce = g.leaf(Tensor::scalar(0.5));
    let dice = g.leaf(Tensor::scalar(0.25));
    let big = g.leaf(Tensor::scalar(2.7));
    let key = TermKey { stage: 1, class: 0 };
    let j = joint_loss(&mut g, Some(ce), dice, &[(key, big)], 1.0).unwrap();
    assert_eq!(j.breakdown.contrastive_raw, 2.7);
    assert_eq!(j.breakdown.contrastive_clipped, 1.0);
    assert!((j.breakdown.total - 1.75).abs() < 1e-12);
    g.backward(j.total).unwrap();
    assert_eq!(g.grad(big).unwrap().item(), 0.0);
    assert_eq!(g.grad(ce).unwrap().item(), 1.0);
}

#[test]
fn joint_loss_passes_small_terms() {
    let mut g = Graph::<f64>::new();
    let dice = g.leaf(Tensor::scalar(0.1));
    let a = g.leaf(Tensor::scalar(0.4));
    let b = g.leaf(Tensor::scalar(0.4));
    let terms = [
        (TermKey { stage: 1, class: 0 }, a),
        (TermKey { stage: 2, class: 3 }, b),
    ];
    let j = joint_loss(&mut g, None, dice, &terms, 1.0).unwrap();
    assert!((j.breakdown.contrastive_clipped - 0.4).abs() < 1e-12);
    assert_eq!(j.breakdown.terms.len(), 2);
    g.backward(j.total).unwrap();
    assert!((g.grad(a).unwrap().item() - 0.5).abs() < 1e-12);
}

#[test]
fn joint_loss_without_terms_is_segmentation_only() {
    let mut g = Graph::<f64>::new();
    let ce = g.leaf(Tensor::scalar(0.3));
    let dice = g.leaf(Tensor::scalar(0.2));
    let j = joint_loss(&mut g, Some(ce), dice, &[], 1.0).unwrap();
    assert_eq!(j.breakdown.contrastive_raw, 0.0);
    assert_eq!(j.breakdown.total, 0.3 + 0.2);
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// One gradient step of size `lr` on a single pair; returns (before, after) cosine.
fn pair_step(u0: &[f64], v0: &[f64], target: bool, lr: f64) -> (f64, f64) {
    let d = u0.len();
    let mut g = Graph::<f64>::new();
    let u = g.leaf(Tensor::from_f64([1, d], u0).unwrap());
    let v = g.leaf(Tensor::from_f64([1, d], v0).unwrap());
    let l = cl_loss(&mut g, u, v, &[target], 0.1).unwrap().unwrap();
    g.backward(l).unwrap();
    let step = |x: &[f64], gr: Tensor<f64>| -> Vec<f32> {
        x.iter()
            .zip(gr.data())
            .map(|(a, b)| (a - lr * b) as f32)
            .collect()
    };
    let u1 = step(u0, g.grad(u).unwrap());
    let v1 = step(v0, g.grad(v).unwrap());
    let f = |x: &[f64]| x.iter().map(|&a| a as f32).collect::<Vec<_>>();
    (
        f64::from(cosine(&f(u0), &f(v0))),
        f64::from(cosine(&u1, &v1)),
    )
}

#[test]
fn cl_step_pulls_positives_and_pushes_negatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let u = random_rows(&mut rng, 1, 8);
        let v = random_rows(&mut rng, 1, 8);
        let (before, after) = pair_step(&u, &v, true, 1e-2);
        assert!(after > before, "pull failed: {before} -> {after}");
        let (before, after) = pair_step(&u, &v, false, 1e-2);
        assert!(after < before, "push failed: {before} -> {after}");
    }
}

proptest! {
    #[test]
    fn info_nce_negative_order_is_irrelevant(seed in 0u64..1000, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_rows(&mut rng, 2, 4);
        let p = random_rows(&mut rng, 2, 4);
        let negs = random_rows(&mut rng, m, 4);
        let mut order: Vec<usize> = (0..m).collect();
        order.reverse();
        order.rotate_left(seed as usize % m);
        let shuffled: Vec<f64> = order.iter().flat_map(|&i| negs[i * 4..(i + 1) * 4].to_vec()).collect();
        let eval = |n: &[f64]| {
            let mut g = Graph::<f64>::new();
            let av = g.leaf(Tensor::from_f64([2, 4], &a).unwrap());
            let pv = g.leaf(Tensor::from_f64([2, 4], &p).unwrap());
            let nv = g.leaf(Tensor::from_f64([m, 4], n).unwrap());
            let l = info_nce(&mut g, av, pv, nv, 0.07).unwrap().unwrap();
            g.value(l).item()
        };
        prop_assert!((eval(&negs) - eval(&shuffled)).abs() < 1e-9);
    }

    #[test]
    fn dice_is_bounded(seed in 0u64..1000, k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let logits = random_rows(&mut rng, n, k).iter().map(|x| x * 5.0).collect::<Vec<_>>();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k as u8)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64([n, k], &logits).unwrap());
        let p = g.softmax(x, 1).unwrap();
        let l = dice_loss(&mut g, p, &labels).unwrap();
        let v = g.value(l).item();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn breakdown_json_round_trip() {
    let mut b = LossBreakdown {
        seg_ce: 1.5,
        ..LossBreakdown::default()
    };
    b.terms.insert(TermKey { stage: 2, class: 3 }, 0.25);
    let text = serde_json::to_string(&b).unwrap();
    assert!(text.contains("\"stage\":2"));
    assert_eq!(serde_json::from_str::<LossBreakdown>(&text).unwrap(), b);
}
