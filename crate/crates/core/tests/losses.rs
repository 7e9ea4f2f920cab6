use e2v_core::losses::{
    mask_union, occlusion_weight, relational_distillation_loss, semantic_perceptual_loss, temporal_consistency_loss, total_loss,
    LossParts, LossWeights, PerceptualExtractor,
};
use e2v_tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn distill(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let (x, y) = (g.input(a.clone()), g.input(b.clone()));
    let l = relational_distillation_loss(&mut g, x, y).unwrap();
    g.value(l).item()
}

fn semantic(phi: &PerceptualExtractor<f64>, a: &Tensor<f64>, b: &Tensor<f64>, m: Option<&Tensor<f64>>) -> f64 {
    let mut g = Graph::new();
    let (x, y) = (g.input(a.clone()), g.input(b.clone()));
    let l = semantic_perceptual_loss(&mut g, phi, x, y, m).unwrap();
    g.value(l).item()
}

fn temporal(rk: &Tensor<f64>, rkm1: &Tensor<f64>, gk: &Tensor<f64>, gkm1: &Tensor<f64>, flow: &Tensor<f64>, alpha: f64) -> f64 {
    let mut g = Graph::new();
    let (x, y) = (g.input(rk.clone()), g.input(rkm1.clone()));
    let l = temporal_consistency_loss(&mut g, x, y, gk, gkm1, flow, alpha).unwrap();
    g.value(l).item()
}

/// Cosine-similarity matrices by explicit loops, then mean |difference|.
fn gram_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (n, c, h, w) = a.dims4();
    let hw = h * w;
    let unit = |t: &Tensor<f64>, s: usize, p: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..c).map(|ch| t.at4(s, ch, p / w, p % w)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / norm).collect()
    };
    let mut total = 0.0;
    for s in 0..n {
        for i in 0..hw {
            for j in 0..hw {
                let dot = |t: &Tensor<f64>| unit(t, s, i).iter().zip(unit(t, s, j)).map(|(x, y)| x * y).sum::<f64>();
                total += (dot(a) - dot(b)).abs();
            }
        }
    }
    total / (n * hw * hw) as f64
}

#[test]
fn identities_are_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let phi = PerceptualExtractor::<f64>::standard();
    let img = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let mask = Tensor::ones(&[1, 1, 4, 4]);
    assert_eq!(semantic(&phi, &img, &img, Some(&mask)), 0.0);
    assert_eq!(semantic(&phi, &img, &img, None), 0.0);
    let f = rand_t(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
    assert!(distill(&f, &f).abs() <= 1e-12);
    let zero_flow = Tensor::zeros(&[1, 2, 8, 8]);
    assert_eq!(temporal(&img, &img, &img, &img, &zero_flow, 50.0), 0.0);
}

#[test]
fn gram_loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let c = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let a = rand_t(&mut rng, &[1, c, h, w], -1.0, 1.0);
        let b = rand_t(&mut rng, &[1, c, h, w], -1.0, 1.0);
        assert!((distill(&a, &b) - gram_oracle(&a, &b)).abs() <= 1e-9);
    }
}

#[test]
fn gram_loss_hand_computed_toy() {
    // positions: (1,0) (0,1) (1,1) (-1,0) normalised; teacher all equal
    let s = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, 0.0, 2.0, -3.0, 0.0, 5.0, 2.0, 0.0]);
    let t = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0; 8]);
    let r = 0.5f64.sqrt();
    let dirs = [(1.0, 0.0), (0.0, 1.0), (r, r), (-1.0, 0.0)];
    let mut sum = 0.0;
    for a in dirs {
        for b in dirs {
            sum += (a.0 * b.0 + a.1 * b.1 - 1.0f64).abs();
        }
    }
    assert!((distill(&s, &t) - sum / 16.0).abs() < 1e-12);
}

#[test]
fn gram_loss_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_t(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
    let b = rand_t(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
    let base = distill(&a, &b);
    // positive per-position scaling of one input; exact up to the normalisation epsilon
    let scales: Vec<f64> = (0..9).map(|_| rng.random_range(0.1..5.0)).collect();
    let scaled = Tensor::from_fn(&[1, 3, 3, 3], |i| a.data()[i] * scales[i % 9]);
    assert!((distill(&scaled, &b) - base).abs() < 1e-9);
    assert!(distill(&scaled, &a).abs() < 1e-9);
    // the same spatial permutation on both inputs
    let perm = [4usize, 2, 7, 0, 8, 1, 3, 6, 5];
    let permute = |t: &Tensor<f64>| Tensor::from_fn(&[1, 3, 3, 3], |i| t.data()[(i / 9) * 9 + perm[i % 9]]);
    assert!((distill(&permute(&a), &permute(&b)) - base).abs() < 1e-12);
    assert!(distill(&permute(&a), &a) > 1e-3);
}

#[test]
fn zero_vectors_are_stable() {
    let z = Tensor::zeros(&[1, 2, 2, 2]);
    let v = distill(&z, &Tensor::ones(&[1, 2, 2, 2]));
    assert!(v.is_finite());
    assert!((v - 1.0).abs() < 1e-12);
}

/// Naive convolution + ReLU stages built from the extractor's own weights.
fn features_oracle(p: &ParamStore<f64>, img: &[f64], h: usize, w: usize) -> Vec<(usize, usize, usize, Vec<f64>)> {
    let mut x: Vec<f64> = img.iter().map(|v| 2.0 * v - 1.0).collect();
    let (mut c, mut hh, mut ww) = (1, h, w);
    let mut out = Vec::new();
    for s in 0..3 {
        let wt = p.get(p.find(&format!("phi{s}.weight")).unwrap());
        let bias = p.get(p.find(&format!("phi{s}.bias")).unwrap());
        let co = wt.shape()[0];
        let (oh, ow) = (hh.div_ceil(2), ww.div_ceil(2));
        let mut y = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[o];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < hh && (ix as usize) < ww {
                                    acc += wt.at4(o, ci, ky, kx) * x[(ci * hh + iy as usize) * ww + ix as usize];
                                }
                            }
                        }
                    }
                    y[(o * oh + oy) * ow + ox] = acc.max(0.0);
                }
            }
        }
        out.push((co, oh, ow, y.clone()));
        x = y;
        c = co;
        hh = oh;
        ww = ow;
    }
    out
}

#[test]
fn semantic_loss_matches_naive_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let phi = PerceptualExtractor::<f64>::standard();
    let a = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let b = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let m = Tensor::from_fn(&[1, 1, 4, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let fa = features_oracle(&phi.params, a.data(), 8, 8);
    let fb = features_oracle(&phi.params, b.data(), 8, 8);
    let mut expect = 0.0;
    for (s, ((c, h, w, x), (_, _, _, y))) in fa.iter().zip(&fb).enumerate() {
        let mut sum = 0.0;
        for i in 0..c * h * w {
            let keep = if s == 0 { m.data()[i % (h * w)] } else { 1.0 };
            sum += (keep * (x[i] - y[i])).powi(2);
        }
        expect += sum / (c * h * w) as f64;
    }
    assert!((semantic(&phi, &a, &b, Some(&m)) - expect).abs() < 1e-12);
}

#[test]
fn empty_mask_leaves_later_stages_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let phi = PerceptualExtractor::<f64>::standard();
    let a = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let b = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let fa = features_oracle(&phi.params, a.data(), 8, 8);
    let fb = features_oracle(&phi.params, b.data(), 8, 8);
    let later: f64 = fa[1..]
        .iter()
        .zip(&fb[1..])
        .map(|((c, h, w, x), (_, _, _, y))| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / (c * h * w) as f64)
        .sum();
    let zero = Tensor::zeros(&[1, 1, 4, 4]);
    assert!((semantic(&phi, &a, &b, Some(&zero)) - later).abs() < 1e-12);
}

#[test]
fn mask_size_mismatch_is_rejected() {
    let phi = PerceptualExtractor::<f64>::standard();
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[1, 1, 8, 8]));
    let b = g.input(Tensor::zeros(&[1, 1, 8, 8]));
    let m = Tensor::ones(&[1, 1, 3, 3]);
    assert!(semantic_perceptual_loss(&mut g, &phi, a, b, Some(&m)).is_err());
}

#[test]
fn union_of_masks() {
    let m = Tensor::from_vec(&[1, 3, 1, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(mask_union(&m).data(), &[1.0, 0.0, 1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sub_mask_never_increases_loss(seed in 0u64..1000, keep in proptest::collection::vec(any::<bool>(), 16)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = PerceptualExtractor::<f64>::standard();
        let a = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
        let b = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
        let sub = Tensor::from_fn(&[1, 1, 4, 4], |i| if keep[i] { 1.0 } else { 0.0 });
        let full = Tensor::ones(&[1, 1, 4, 4]);
        prop_assert!(semantic(&phi, &a, &b, Some(&full)) >= semantic(&phi, &a, &b, Some(&sub)));
    }

    #[test]
    fn losses_are_non_negative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = PerceptualExtractor::<f64>::standard();
        let t = |r: &mut ChaCha8Rng| rand_t(r, &[1, 1, 8, 8], 0.0, 1.0);
        let (a, b, c, d) = (t(&mut rng), t(&mut rng), t(&mut rng), t(&mut rng));
        let flow = rand_t(&mut rng, &[1, 2, 8, 8], -2.0, 2.0);
        prop_assert!(semantic(&phi, &a, &b, None) >= 0.0);
        prop_assert!(temporal(&a, &b, &c, &d, &flow, 50.0) >= 0.0);
        let f1 = rand_t(&mut rng, &[1, 3, 2, 2], -1.0, 1.0);
        let f2 = rand_t(&mut rng, &[1, 3, 2, 2], -1.0, 1.0);
        prop_assert!(distill(&f1, &f2) >= 0.0);
    }
}

#[test]
fn occlusion_weight_spot_value() {
    let gk = Tensor::full(&[1, 1, 2, 2], 0.7);
    let gkm1 = Tensor::full(&[1, 1, 2, 2], 0.5);
    let w = occlusion_weight(&gk, &gkm1, &Tensor::zeros(&[1, 2, 2, 2]), 50.0);
    for &v in w.data() {
        assert!((v - (-2.0f64).exp()).abs() <= 1e-9);
    }
    let same = occlusion_weight(&gk, &gk, &Tensor::zeros(&[1, 2, 2, 2]), 50.0);
    assert!(same.data().iter().all(|&v| v == 1.0));
}

#[test]
fn temporal_loss_zero_when_reconstruction_follows_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let prev = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let flow = rand_t(&mut rng, &[1, 2, 8, 8], -1.5, 1.5);
    let cur = e2v_tensor::sample::warp_forward(&prev, &flow);
    let gk = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let gkm1 = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    assert_eq!(temporal(&cur, &prev, &gk, &gkm1, &flow, 50.0), 0.0);
}

#[test]
fn temporal_loss_saturates_for_sharp_occlusion() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let b = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let gk = Tensor::full(&[1, 1, 8, 8], 0.6);
    let gkm1 = Tensor::full(&[1, 1, 8, 8], 0.4);
    let flow = Tensor::zeros(&[1, 2, 8, 8]);
    assert!(temporal(&a, &b, &gk, &gkm1, &flow, 1e4) < 1e-12);
    assert!(temporal(&a, &b, &gk, &gkm1, &flow, 1.0) > 1e-3);
}

#[test]
fn total_loss_weighting() {
    let mut g = Graph::<f64>::new();
    let s = g.input(Tensor::scalar(0.25));
    let t = g.input(Tensor::scalar(0.5));
    let d = g.input(Tensor::scalar(2.0));
    let parts = LossParts { semantic: s, temporal: Some(t), distill: Some(d) };
    let default = total_loss(&mut g, parts, &LossWeights::default());
    assert!((g.value(default).item() - (0.75 + 1.8 * 2.0)).abs() < 1e-12);
    let no_distill = total_loss(&mut g, parts, &LossWeights { lambda: 0.0, alpha: 50.0 });
    assert_eq!(g.value(no_distill).item(), 0.75);
    let first = total_loss(&mut g, LossParts { temporal: None, ..parts }, &LossWeights::default());
    assert!((g.value(first).item() - (0.25 + 3.6)).abs() < 1e-12);
    let z = g.input(Tensor::scalar(0.0));
    let zero = total_loss(&mut g, LossParts { semantic: z, temporal: Some(z), distill: Some(z) }, &LossWeights::default());
    assert_eq!(g.value(zero).item(), 0.0);
}

#[test]
fn extractor_is_frozen_and_sized_for_masks() {
    let phi = PerceptualExtractor::<f64>::standard();
    assert!(phi.params.ids().all(|id| !phi.params.is_trainable(id)));
    assert_eq!(PerceptualExtractor::<f64>::stage0_size(64, 64), (32, 32));
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 1, 64, 64]));
    let f = phi.features(&mut g, x);
    assert_eq!(&g.shape(f[0])[2..], &[32, 32]);
}
