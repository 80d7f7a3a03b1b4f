use ndarray::{array, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{trunc_normal, Params};
use super::*;
use crate::scenario::DrivingIntent;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_text: 12,
        image_size: 32,
        patch_size: 16,
        vit_dim: 16,
        vit_layers: 1,
        vit_heads: 2,
        state_layers: 1,
        state_heads: 2,
        fusion_heads: 2,
        decoder_layers: 1,
        decoder_heads: 2,
        mlp_ratio: 2,
        t_future: 4,
        num_cameras: 2,
        ..Default::default()
    }
}

fn random_input(cfg: &ModelConfig, seed: u64) -> ModelInput<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = (0..cfg.num_cameras)
        .map(|_| trunc_normal(&mut rng, cfg.patches_per_camera(), cfg.patch_dim(), 1.0))
        .collect();
    let vec = |rng: &mut ChaCha8Rng| {
        let v = trunc_normal::<f64>(rng, 1, cfg.d_text, 1.0);
        let n = v.mapv(|x| x * x).sum().sqrt();
        (v / n).index_axis_move(Axis(0), 0)
    };
    ModelInput {
        patches,
        history: trunc_normal(&mut rng, 16, 6, 3.0),
        intent: DrivingIntent::TurnLeft,
        instructions: Some(InstructionVectors {
            scene_emb: vec(&mut rng),
            risk_plan_emb: vec(&mut rng),
        }),
    }
}

fn l2(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (a - b).mapv(|v| v * v).sum().sqrt()
}

#[test]
fn vision_token_count_and_mean() {
    let cfg = ModelConfig {
        d_model: 16,
        vit_dim: 16,
        vit_layers: 1,
        ..Default::default()
    };
    assert_eq!(cfg.num_visual_tokens(), 1568);
    let net = TriModalNet::<f64>::new(&cfg, 0).unwrap();
    let input = random_input(&cfg, 1);
    let vf = net.encode_vision(&input.patches).unwrap();
    assert_eq!(vf.v_tokens.dim(), (1568, 16));
    let mean = vf.v_tokens.mean_axis(Axis(0)).unwrap();
    assert!(l2(&mean, &vf.v_global) < 1e-5);
}

#[test]
fn camera_embeddings_distinguish_identical_views() {
    let cfg = tiny();
    let net = TriModalNet::<f64>::new(&cfg, 3).unwrap();
    let mut input = random_input(&cfg, 4);
    input.patches[1] = input.patches[0].clone();
    let vf = net.encode_vision(&input.patches).unwrap();
    let p = cfg.patches_per_camera();
    let a = vf.v_tokens.slice(s![..p, ..]);
    let b = vf.v_tokens.slice(s![p.., ..]);
    let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(diff > 0.0);
}

#[test]
fn vision_rejects_wrong_camera_count() {
    let cfg = tiny();
    let net = TriModalNet::<f64>::new(&cfg, 3).unwrap();
    let input = random_input(&cfg, 4);
    assert!(matches!(net.encode_vision(&input.patches[..1]), Err(ModelError::Shape(_))));
}

#[test]
fn state_encoder_shapes_and_symmetry() {
    let cfg = tiny();
    let mut net = TriModalNet::<f64>::new(&cfg, 5).unwrap();
    let input = random_input(&cfg, 6);
    assert_eq!(net.encode_state(&input.history.view()).unwrap().len(), 16);
    assert!(matches!(
        net.encode_state(&input.history.slice(s![..15, ..])),
        Err(ModelError::Shape(_))
    ));

    let moving = net.encode_state(&input.history.view()).unwrap();
    let still = net.encode_state(&Array2::zeros((16, 6)).view()).unwrap();
    assert!(l2(&moving, &still) > 0.0);

    net.state.pos.fill(0.0);
    let frame = input.history.slice(s![3..4, ..]).to_owned();
    let repeated = Array2::from_shape_fn((16, 6), |(_, j)| frame[[0, j]]);
    let pooled = net.encode_state(&repeated.view()).unwrap();
    let (single, _) = net.state.forward_frames(&frame.view());
    assert!(l2(&pooled, &single) < 1e-12);
}

#[test]
fn scene_fusion_singleton_permutation_and_residual() {
    let cfg = tiny();
    let mut net = TriModalNet::<f64>::new(&cfg, 7).unwrap();
    let input = random_input(&cfg, 8);
    let ins = input.instructions.clone().unwrap();
    let vf = net.encode_vision(&input.patches).unwrap();

    let one = VisualFeatures {
        v_tokens: vf.v_tokens.slice(s![0..1, ..]).to_owned(),
        v_global: vf.v_tokens.row(0).to_owned(),
    };
    let a = net.fuse_scene(&one, &ins.scene_emb.view()).unwrap();
    let b = net.fuse_scene(&one, &ins.risk_plan_emb.view()).unwrap();
    assert_ne!(a.scene_vec, b.scene_vec);
    assert_eq!(a.c_scene, b.c_scene);

    let base = net.fuse_scene(&vf, &ins.scene_emb.view()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut order: Vec<usize> = (0..vf.v_tokens.nrows()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let permuted = VisualFeatures {
        v_tokens: vf.v_tokens.select(Axis(0), &order),
        v_global: vf.v_tokens.select(Axis(0), &order).mean_axis(Axis(0)).unwrap(),
    };
    let p = net.fuse_scene(&permuted, &ins.scene_emb.view()).unwrap();
    assert!(l2(&p.c_scene, &base.c_scene) <= 1e-5);
    assert!(l2(&p.scene_context, &base.scene_context) <= 1e-5);

    net.scene.mlp.fc2.w.fill(0.0);
    net.scene.mlp.fc2.b.fill(0.0);
    let z = net.fuse_scene(&vf, &ins.scene_emb.view()).unwrap();
    assert_eq!(z.scene_context, vf.v_global);

    let short = Array1::zeros(cfg.d_text - 1);
    assert!(matches!(net.fuse_scene(&vf, &short.view()), Err(ModelError::Shape(_))));
}

#[test]
fn planning_fusion() {
    let cfg = tiny();
    let mut net = TriModalNet::<f64>::new(&cfg, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = trunc_normal::<f64>(&mut rng, 1, 16, 1.0).row(0).to_owned();
    let b = trunc_normal::<f64>(&mut rng, 1, 16, 1.0).row(0).to_owned();
    let b2 = trunc_normal::<f64>(&mut rng, 1, 16, 1.0).row(0).to_owned();
    let p1 = net.fuse_planning(&a.view(), &b.view()).unwrap();
    let p2 = net.fuse_planning(&a.view(), &b2.view()).unwrap();
    assert_eq!(p1.len(), 16);
    assert!(l2(&p1, &p2) > 0.0);

    net.plan.mlp.fc2.w.fill(0.0);
    let bias = net.plan.mlp.fc2.b.row(0).to_owned();
    assert_eq!(net.fuse_planning(&a.view(), &b.view()).unwrap(), bias);
    assert_eq!(net.fuse_planning(&b2.view(), &a.view()).unwrap(), bias);
    assert!(net.fuse_planning(&a.slice(s![..3]), &b.view()).is_err());
}

#[test]
fn intent_modulation_cases() {
    let cfg = ModelConfig {
        d_model: 2,
        state_heads: 1,
        fusion_heads: 1,
        decoder_heads: 1,
        ..tiny()
    };
    let mut net = TriModalNet::<f64>::new(&cfg, 12).unwrap();
    let pc = array![2.0, -4.0];
    for (_, p) in net.intent.mlp.named_mut() {
        p.fill(0.0);
    }
    let (out, m) = net.modulate_intent(&pc.view(), DrivingIntent::GoStraight).unwrap();
    assert_eq!(m.scale, array![0.0, 0.0]);
    assert_eq!(m.shift, array![0.0, 0.0]);
    assert_eq!(out, array![1.0, -2.0]);

    assert!(matches!(intent_from_index(4), Err(ModelError::InvalidIntent(4))));
    assert_eq!(intent_from_index(2).unwrap(), DrivingIntent::TurnLeft);

    let net = TriModalNet::<f64>::new(&tiny(), 13).unwrap();
    let pc = Array1::from_iter((0..16).map(|i| 0.5 + i as f64));
    let (a, ma) = net.modulate_intent(&pc.view(), DrivingIntent::TurnLeft).unwrap();
    let (b, _) = net.modulate_intent(&pc.view(), DrivingIntent::TurnRight).unwrap();
    assert!(l2(&a, &b) > 0.0);
    for i in 0..16 {
        assert!(a[i] > ma.shift[i] && a[i] < pc[i] + ma.shift[i]);
    }
}

#[test]
fn risk_attention_alpha_gate_and_norm_statistics() {
    let cfg = tiny();
    let net = TriModalNet::<f64>::new(&cfg, 14).unwrap();
    let input = random_input(&cfg, 15);
    let ins = input.instructions.unwrap();
    let pci = Array1::from_iter((0..16).map(|i| (i as f64 * 0.7).sin() * 3.0));
    let a = net.risk_cross_attention(&pci.view(), &ins.risk_plan_emb.view(), 0.0).unwrap();
    let b = net.risk_cross_attention(&pci.view(), &ins.scene_emb.view(), 0.0).unwrap();
    assert_eq!(a.plan_context_ctrl, b.plan_context_ctrl);

    let c = net.risk_cross_attention(&pci.view(), &ins.risk_plan_emb.view(), 0.3).unwrap();
    let mean = c.plan_context_ctrl.mean().unwrap();
    let var = c.plan_context_ctrl.mapv(|v| (v - mean).powi(2)).mean().unwrap();
    assert!(mean.abs() <= 1e-4);
    assert!((var - 1.0).abs() <= 1e-4);
    assert!(net.risk_cross_attention(&pci.view(), &ins.risk_plan_emb.view(), -1.0).is_err());
}

#[test]
fn decoder_cumulative_sum_cases() {
    let zeros = Array2::<f64>::zeros((20, 2));
    assert_eq!(cumulative_waypoints(&zeros.view(), 1.0), zeros);
    let ones = Array2::from_shape_fn((20, 2), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
    let w = cumulative_waypoints(&ones.view(), 1.0);
    for k in 0..20 {
        assert_eq!(w.row(k).to_vec(), vec![(k + 1) as f64, 0.0]);
    }
    let d = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
    assert_eq!(cumulative_waypoints(&d.view(), 1.0), array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);

    let cfg = ModelConfig { t_future: 3, ..tiny() };
    let mut net = TriModalNet::<f64>::new(&cfg, 16).unwrap();
    net.decoder.head.fc2.w.fill(0.0);
    net.decoder.head.fc2.b.fill(0.0);
    let ctrl = Array1::from_elem(16, 0.3);
    assert_eq!(net.decode_trajectory(&ctrl.view(), None).unwrap(), Array2::<f64>::zeros((3, 2)));
    net.decoder.head.fc2.b = array![[1.0, 0.0]];
    assert_eq!(
        net.decode_trajectory(&ctrl.view(), None).unwrap(),
        array![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]
    );
}

#[test]
fn full_forward_shapes_and_ablations() {
    let cfg = ModelConfig {
        t_future: 20,
        ..tiny()
    };
    let mut net = TriModalNet::<f64>::new(&cfg, 17).unwrap();
    let input = random_input(&cfg, 18);
    let w = net.forward(&input, AblationFlags::BASE).unwrap();
    assert_eq!(w.dim(), (20, 2));
    assert_eq!(net.predict(&input, AblationFlags::BASE).unwrap().waypoints().len(), 20);
    let batch = net.forward_batch(&[input.clone(), input.clone()], AblationFlags::BASE).unwrap();
    assert_eq!(batch.dim(), (2, 20, 2));
    assert_eq!(net.forward(&input, AblationFlags::BASE).unwrap(), w);

    let (_, ctx) = net.forward_with_contexts(&input, AblationFlags::BASE).unwrap();
    let m = ctx.plan_context_ctrl.mean().unwrap();
    let v = ctx.plan_context_ctrl.mapv(|x| (x - m).powi(2)).mean().unwrap();
    // Normalized variance is s2 / (s2 + eps) for a pre-norm variance s2.
    let risk = ctx.risk.as_ref().unwrap();
    let pre = &ctx.plan_context_intent + &risk.c_attn.mapv(|c| c * cfg.alpha);
    let s2 = pre.var(0.0);
    assert!(m.abs() <= 1e-4);
    assert!((v - s2 / (s2 + cfg.ln_eps)).abs() <= 1e-9);

    let no_ins = AblationFlags {
        no_instruction: true,
        ..Default::default()
    };
    let mut other = input.clone();
    other.instructions = Some(random_input(&cfg, 99).instructions.unwrap());
    let mut none = input.clone();
    none.instructions = None;
    let a = net.forward(&input, no_ins).unwrap();
    assert_eq!(a, net.forward(&other, no_ins).unwrap());
    assert_eq!(a, net.forward(&none, no_ins).unwrap());
    assert!(matches!(net.forward(&none, AblationFlags::BASE), Err(ModelError::Input(_))));

    net.config.alpha = 0.0;
    let only_alpha = net.forward(&input, AblationFlags::BASE).unwrap();
    let both = net
        .forward(
            &input,
            AblationFlags {
                no_intent: true,
                ..Default::default()
            },
        )
        .unwrap();
    assert!((&only_alpha - &both).mapv(f64::abs).sum() > 0.0);

    let no_state = AblationFlags {
        no_state: true,
        ..Default::default()
    };
    let mut moved = input.clone();
    moved.history.mapv_inplace(|v| v + 1.0);
    assert_eq!(net.forward(&input, no_state).unwrap(), net.forward(&moved, no_state).unwrap());
}

#[test]
fn memory_hook_appends_visual_tokens() {
    let cfg = ModelConfig {
        memory_includes_visual_tokens: true,
        ..tiny()
    };
    let net = TriModalNet::<f64>::new(&cfg, 19).unwrap();
    let input = random_input(&cfg, 20);
    assert_eq!(net.forward(&input, AblationFlags::BASE).unwrap().dim(), (4, 2));
    let ctrl = Array1::zeros(16);
    assert!(matches!(net.decode_trajectory(&ctrl.view(), None), Err(ModelError::Input(_))));
}

/// Spot-check of the analytic gradient on a handful of entries per tensor;
/// the acceptance suite runs the exhaustive version.
#[test]
fn backward_matches_finite_differences_on_samples() {
    for (flags, hook) in [
        (AblationFlags::BASE, false),
        (AblationFlags::BASE, true),
        (
            AblationFlags {
                no_instruction: true,
                no_intent: true,
                no_state: false,
            },
            false,
        ),
        (
            AblationFlags {
                no_state: true,
                ..Default::default()
            },
            false,
        ),
    ] {
        let cfg = ModelConfig {
            memory_includes_visual_tokens: hook,
            ..tiny()
        };
        let net = TriModalNet::<f64>::new(&cfg, 21).unwrap();
        let input = random_input(&cfg, 22);
        let target = Array2::from_shape_fn((4, 2), |(t, j)| (t as f64 + 1.0) * if j == 0 { 1.0 } else { 0.2 });
        let loss = |n: &TriModalNet<f64>| {
            let w = n.forward(&input, flags).unwrap();
            (&w - &target).mapv(|v| v * v).mean().unwrap()
        };
        let (w, cache) = net.forward_train(&input, flags).unwrap();
        let dw = (&w - &target) * (2.0 / w.len() as f64);
        let mut grads = net.zeroed();
        net.backward(&cache, &dw.view(), &mut grads);

        let analytic: Vec<(String, Array2<f64>)> = grads.named().into_iter().map(|(n, g)| (n, g.clone())).collect();
        let mut probe = net.clone();
        let h = 1e-5;
        for (ti, (name, g)) in analytic.iter().enumerate() {
            let len = g.len();
            for idx in [0, len / 2, len - 1] {
                let orig = probe.named()[ti].1.as_slice().unwrap()[idx];
                probe.named_mut()[ti].1.as_slice_mut().unwrap()[idx] = orig + h;
                let lp = loss(&probe);
                probe.named_mut()[ti].1.as_slice_mut().unwrap()[idx] = orig - h;
                let lm = loss(&probe);
                probe.named_mut()[ti].1.as_slice_mut().unwrap()[idx] = orig;
                let num = (lp - lm) / (2.0 * h);
                let a = g.as_slice().unwrap()[idx];
                assert!(
                    (num - a).abs() <= 1e-6 + 1e-4 * a.abs().max(num.abs()),
                    "{flags:?} hook={hook} {name}[{idx}]: analytic {a} numeric {num}"
                );
            }
        }
    }
}
