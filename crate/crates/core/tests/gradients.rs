//! Finite-difference checks of the losses and the recurrent network in f64.

use e2v_core::losses::{
    relational_distillation_loss, semantic_perceptual_loss, temporal_consistency_loss, total_loss, LossParts, LossWeights,
    PerceptualExtractor,
};
use e2v_core::net::{Ablation, Model, ModelConfig};
use e2v_tensor::gradcheck::{check_inputs, check_params, GradReport};
use e2v_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn assert_report(name: &str, r: &GradReport) {
    println!("{name}: {} probes, {:.3} within 1e-3, worst {:.2e}", r.checked(), r.fraction_within(1e-3), r.worst());
    assert!(r.fraction_within(1e-3) >= 0.95, "{name}");
    assert!(r.worst() <= 1e-2, "{name}");
}

#[test]
fn semantic_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let phi = PerceptualExtractor::<f64>::standard();
    let gt = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| f64::from(u8::from(i % 2 == 0)));
    let rec = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let r = check_inputs(&[rec], 64, |g, v| {
        let t = g.input(gt.clone());
        semantic_perceptual_loss(g, &phi, v[0], t, Some(&mask)).unwrap()
    });
    assert_report("semantic", &r);
}

#[test]
fn distillation_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let teacher = rand_t(&mut rng, &[1, 4, 3, 3], -1.0, 1.0);
    let student = rand_t(&mut rng, &[1, 4, 3, 3], -1.0, 1.0);
    let r = check_inputs(&[student], 64, |g, v| {
        let t = g.input(teacher.clone());
        relational_distillation_loss(g, v[0], t).unwrap()
    });
    assert_report("distill", &r);
}

#[test]
fn temporal_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let gk = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let gkm1 = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let flow = rand_t(&mut rng, &[1, 2, 8, 8], -1.7, 1.7);
    let rk = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let rkm1 = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let r = check_inputs(&[rk, rkm1], 64, |g, v| temporal_consistency_loss(g, v[0], v[1], &gk, &gkm1, &flow, 50.0).unwrap());
    assert_report("temporal", &r);
}

#[test]
fn total_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let phi = PerceptualExtractor::<f64>::standard();
    let gk = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let gkm1 = rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0);
    let flow = rand_t(&mut rng, &[1, 2, 8, 8], -1.0, 1.0);
    let teacher = rand_t(&mut rng, &[1, 3, 2, 2], -1.0, 1.0);
    let inputs = [
        rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0),
        rand_t(&mut rng, &[1, 1, 8, 8], 0.0, 1.0),
        rand_t(&mut rng, &[1, 3, 2, 2], -1.0, 1.0),
    ];
    let r = check_inputs(&inputs, 64, |g, v| {
        let t = g.input(gk.clone());
        let semantic = semantic_perceptual_loss(g, &phi, v[0], t, None).unwrap();
        let temporal = temporal_consistency_loss(g, v[0], v[1], &gk, &gkm1, &flow, 50.0).unwrap();
        let tf = g.input(teacher.clone());
        let distill = relational_distillation_loss(g, v[2], tf).unwrap();
        let parts = LossParts { semantic, temporal: Some(temporal), distill: Some(distill) };
        total_loss(g, parts, &LossWeights::default())
    });
    assert_report("total", &r);
}

fn tiny_config(variant: Ablation) -> ModelConfig {
    ModelConfig {
        base_channels: 3,
        num_encoders: 2,
        num_residual_blocks: 1,
        bins: 2,
        use_cfhm: true,
        bottleneck_channels: 4,
        variant,
    }
}

/// Two recurrent steps through the whole network, projected to a scalar;
/// the second step sees carried state and the first reconstruction. The
/// fed-back frame stays attached so finite differences see the same graph.
fn network_report(variant: Ablation, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::new(tiny_config(variant), seed).unwrap();
    let voxels = [rand_t(&mut rng, &[1, 2, 8, 8], -1.0, 1.0), rand_t(&mut rng, &[1, 2, 8, 8], -1.0, 1.0)];
    let proj = rand_t(&mut rng, &[1, 1, 8, 8], -1.0, 1.0);
    check_params(&mut model, |m| &mut m.params, 12, |g, model| {
        let mut state = model.fresh_state(1, 8, 8).bind(g);
        let mut prev = g.input(Tensor::zeros(&[1, 1, 8, 8]));
        let mut frame = prev;
        for v in &voxels {
            let x = g.input(v.clone());
            let out = model.step(g, x, prev, &mut state, true).unwrap();
            frame = out.frame;
            prev = frame;
        }
        let pr = g.input(proj.clone());
        let y = g.mul(frame, pr);
        g.sum(y)
    })
}

#[test]
fn encoder_decoder_gradient() {
    for (i, variant) in Ablation::ALL.into_iter().enumerate() {
        let r = network_report(variant, 20 + i as u64);
        assert_report(variant.name(), &r);
    }
}
