use gradgraph::fd::{central_diff, relative_error};
use gradgraph::layers::instance_norm;
use gradgraph::{grad, Tensor};
use metadance::model::{composite, init_params, ModelConfig, Pyramid, SynthOptions, Tdgn, GROUPS};
use metadance::params::ParamSet;
use metadance::types::Resolution;
use metadance::Error;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn toy_config() -> ModelConfig {
    ModelConfig {
        resolution: Resolution::new(16, 8),
        levels: 2,
        base_channels: 8,
        pose_channels: 11,
        occlusion_width: 4,
        seed: 7,
    }
}

fn random_tensor(shape: &[usize], rng: &mut StdRng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Initial parameters plus noise, so zero-initialized heads are active.
fn perturbed(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = StdRng::seed_from_u64(seed);
    init_params(cfg)
        .unwrap()
        .map(|t| t.add(&random_tensor(t.shape(), &mut rng, -0.15, 0.15)))
}

struct Inputs {
    image: Tensor,
    pose: Tensor,
    prev_image: Tensor,
    prev_pose: Tensor,
    target_pose: Tensor,
    target: Tensor,
}

fn inputs(cfg: &ModelConfig, seed: u64) -> Inputs {
    let mut rng = StdRng::seed_from_u64(seed);
    let (h, w) = (cfg.resolution.height, cfg.resolution.width);
    let c = cfg.pose_channels;
    Inputs {
        image: random_tensor(&[3, h, w], &mut rng, 0.0, 1.0),
        pose: random_tensor(&[c, h, w], &mut rng, 0.0, 1.0),
        prev_image: random_tensor(&[3, h, w], &mut rng, 0.0, 1.0),
        prev_pose: random_tensor(&[c, h, w], &mut rng, 0.0, 1.0),
        target_pose: random_tensor(&[c, h, w], &mut rng, 0.0, 1.0),
        target: random_tensor(&[3, h, w], &mut rng, 0.0, 1.0),
    }
}

fn l1(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).abs().mean_all()
}

/// Compares analytic and central-difference gradients of `loss` on a few
/// coordinates of every tensor in `group`.
fn check_group(params: &ParamSet, group: &str, loss: &dyn Fn(&ParamSet) -> Tensor) -> f64 {
    let vars = params.variables();
    let out = loss(&vars);
    let names: Vec<String> = params.group_names(group).into_iter().map(String::from).collect();
    assert!(!names.is_empty(), "group {group} is empty");
    let targets: Vec<Tensor> = names.iter().map(|n| vars.get(n).clone()).collect();
    let grads = grad(&out, &targets, false).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let base = params.get(name);
        let n = base.numel();
        let coords: Vec<usize> = (0..3).map(|i| (i * 7919 + k * 31) % n).collect();
        let g = grads[k].data();
        analytic.extend(coords.iter().map(|&i| g[i]));
        numeric.extend(central_diff(base.data(), &coords, 1e-5, |x| {
            let idx = params.names().iter().position(|m| m == name).unwrap();
            let mut tensors = params.tensors().to_vec();
            tensors[idx] = Tensor::from_vec(base.shape(), x.to_vec());
            loss(&params.with_tensors(tensors)).item()
        }));
    }
    relative_error(&analytic, &numeric, 1e-8)
}

#[test]
fn config_validation() {
    assert!(toy_config().validate().is_ok());
    assert!(ModelConfig::default().validate().is_ok());
    let mut cfg = toy_config();
    cfg.resolution = Resolution::new(18, 8);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.resolution = Resolution::new(16, 8);
    cfg.levels = 1;
    assert!(cfg.validate().is_err());
}

#[test]
fn pyramid_level_sizes() {
    let cfg = ModelConfig {
        resolution: Resolution::new(64, 32),
        ..ModelConfig::default()
    };
    let params = init_params(&cfg).unwrap();
    let net = Tdgn::new(&cfg, &params);
    let pose = Tensor::zeros(&[11, 64, 32]);
    let feats = net.extract_pose_features(&pose).unwrap();
    let sizes: Vec<Vec<usize>> = feats.0.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(sizes, vec![vec![16, 32, 16], vec![32, 16, 8], vec![64, 8, 4]]);
    let img = net.extract_image_features(&Tensor::zeros(&[3, 64, 32])).unwrap();
    assert_eq!(img.levels(), 3);
    assert!(feats.0.iter().chain(img.0.iter()).all(Tensor::all_finite));
}

#[test]
fn init_is_deterministic_and_grouped() {
    let cfg = toy_config();
    let a = init_params(&cfg).unwrap();
    let b = init_params(&cfg).unwrap();
    assert!(a.same_values(&b));
    let other = init_params(&ModelConfig { seed: 8, ..cfg.clone() }).unwrap();
    assert!(!a.same_values(&other));
    let total: usize = GROUPS.iter().map(|g| a.group_names(g).len()).sum();
    assert_eq!(total, a.len());
    for head in ["fn.l0.head.w", "fn.l1.head.w", "mn.l0.gamma.w", "mn.l1.beta.w", "wn.head.w", "wn.head.b"] {
        assert!(a.get(head).data().iter().all(|&v| v == 0.0), "{head} not zero");
    }
    // Archive payloads are f32, so initial values already are.
    assert!(a.same_values(&a.rounded_f32()));
}

#[test]
fn wrong_shapes_are_rejected() {
    let cfg = toy_config();
    let params = init_params(&cfg).unwrap();
    let net = Tdgn::new(&cfg, &params);
    assert!(matches!(
        net.extract_pose_features(&Tensor::zeros(&[3, 16, 8])),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        net.extract_image_features(&Tensor::zeros(&[3, 8, 16])),
        Err(Error::Shape(_))
    ));
    let good = net.extract_pose_features(&Tensor::zeros(&[11, 16, 8])).unwrap();
    let short = Pyramid(vec![good.level(0).clone()]);
    assert!(matches!(net.predict_flow(&good, &short), Err(Error::Shape(_))));
    assert!(net
        .predict_occlusion(&Tensor::zeros(&[3, 16, 8]), &Tensor::zeros(&[1, 16, 8]))
        .is_err());
}

#[test]
fn initial_network_has_zero_flow_plain_modulation_and_even_map() {
    let cfg = toy_config();
    let params = init_params(&cfg).unwrap();
    let net = Tdgn::new(&cfg, &params);
    let x = inputs(&cfg, 1);
    let reference = net.reference(&x.image, &x.pose).unwrap();
    let prev_pose = net.extract_pose_features(&x.prev_pose).unwrap();
    let target = net.extract_pose_features(&x.target_pose).unwrap();
    let (out, mid) = net
        .synthesize_frame(&reference, &x.prev_image, &prev_pose, &target, SynthOptions::default())
        .unwrap();
    assert!(mid.flow.data().iter().all(|&v| v == 0.0));
    assert_eq!(mid.warped.data(), x.image.data());
    assert!(mid.map.data().iter().all(|&v| v == 0.5));
    let prev_feats = net.extract_image_features(&x.prev_image).unwrap();
    for l in 0..cfg.levels {
        let plain = instance_norm(
            &Tensor::concat(&[reference.image_features.level(l).clone(), prev_feats.level(l).clone()]),
            1e-5,
        );
        assert_eq!(mid.modulated.level(l).data(), plain.data());
    }
    assert_eq!(out.shape(), &[3, 16, 8]);
}

#[test]
fn coarse_flow_is_doubled_when_refined() {
    // With every flow layer zero except the coarsest bias, the final flow is
    // that bias scaled by 2 per level and by 2 for the last upsampling.
    let cfg = toy_config();
    let params = init_params(&cfg).unwrap();
    let (u, v) = (0.25, -0.5);
    let names: Vec<String> = params.names().to_vec();
    let tensors = params
        .tensors()
        .iter()
        .zip(&names)
        .map(|(t, n)| {
            if n == "fn.l1.head.b" {
                Tensor::from_vec(&[2], vec![u, v])
            } else {
                t.clone()
            }
        })
        .collect();
    let params = params.with_tensors(tensors);
    let net = Tdgn::new(&cfg, &params);
    let x = inputs(&cfg, 2);
    let a = net.extract_pose_features(&x.pose).unwrap();
    let b = net.extract_pose_features(&x.target_pose).unwrap();
    let flow = net.predict_flow(&a, &b).unwrap();
    let (h, w) = (16, 8);
    assert!(flow.data()[..h * w].iter().all(|&f| f == 4.0 * u));
    assert!(flow.data()[h * w..].iter().all(|&f| f == 4.0 * v));
}

#[test]
fn normalization_ignores_feature_scale() {
    let mut rng = StdRng::seed_from_u64(3);
    let x = random_tensor(&[6, 4, 2], &mut rng, -1.0, 1.0);
    let a = instance_norm(&x, 0.0);
    let b = instance_norm(&x.scale(3.7), 0.0);
    let err = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn compositing_identities_and_convexity() {
    let cfg = toy_config();
    let params = perturbed(&cfg, 11);
    let net = Tdgn::new(&cfg, &params);
    let x = inputs(&cfg, 4);
    let reference = net.reference(&x.image, &x.pose).unwrap();
    let prev_pose = net.extract_pose_features(&x.prev_pose).unwrap();
    let target = net.extract_pose_features(&x.target_pose).unwrap();
    let run = |force| {
        net.synthesize_frame(
            &reference,
            &x.prev_image,
            &prev_pose,
            &target,
            SynthOptions {
                force_map: force,
                independent_frames: false,
            },
        )
        .unwrap()
    };
    let (one, mid1) = run(Some(1.0));
    assert_eq!(one.data(), mid1.warped.data());
    let (zero, mid0) = run(Some(0.0));
    assert_eq!(zero.data(), mid0.rough.data());
    let (out, mid) = run(None);
    assert!(mid.flow.data().iter().any(|&v| v != 0.0));
    assert!(mid.map.data().iter().all(|&m| m > 0.0 && m < 1.0));
    assert!(mid.rough.data().iter().all(|&g| (0.0..=1.0).contains(&g)));
    for ((o, w), g) in out.data().iter().zip(mid.warped.data()).zip(mid.rough.data()) {
        assert!(*o >= w.min(*g) - 1e-12 && *o <= w.max(*g) + 1e-12);
    }
    let direct = composite(&mid.map, &mid.warped, &mid.rough);
    assert_eq!(direct.data(), out.data());
}

#[test]
fn occlusion_map_depends_on_input_order() {
    let cfg = toy_config();
    let params = perturbed(&cfg, 12);
    let net = Tdgn::new(&cfg, &params);
    let x = inputs(&cfg, 5);
    let a = net.predict_occlusion(&x.image, &x.prev_image).unwrap();
    let b = net.predict_occlusion(&x.prev_image, &x.image).unwrap();
    assert_ne!(a.data(), b.data());
}

#[test]
fn forward_pass_is_pure() {
    let cfg = toy_config();
    let params = perturbed(&cfg, 13);
    let before = params.detached();
    let net = Tdgn::new(&cfg, &params);
    let x = inputs(&cfg, 6);
    let reference = net.reference(&x.image, &x.pose).unwrap();
    let poses = vec![x.prev_pose.clone(), x.target_pose.clone(), x.pose.clone()];
    let a = net.synthesize_sequence(&reference, &poses, SynthOptions::default()).unwrap();
    let b = net.synthesize_sequence(&reference, &poses, SynthOptions::default()).unwrap();
    assert_eq!(a.len(), 3);
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.data(), q.data());
    }
    assert!(params.same_values(&before));
}

#[test]
fn parameter_arithmetic() {
    let cfg = toy_config();
    let theta = perturbed(&cfg, 14);
    assert!(theta.add(&theta.zeros_like()).same_values(&theta));
    let copy = theta.clone();
    let moved = copy.add(&theta.map(|t| Tensor::full(t.shape(), 1.0)));
    assert!(!moved.same_values(&theta));
    assert!(copy.same_values(&theta));
    assert!(theta.scale(2.0).sub(&theta).same_values(&theta));
}

#[test]
fn sequence_chains_previous_outputs() {
    let cfg = toy_config();
    let params = perturbed(&cfg, 15);
    let net = Tdgn::new(&cfg, &params);
    let x = inputs(&cfg, 7);
    let reference = net.reference(&x.image, &x.pose).unwrap();
    let poses = vec![x.prev_pose.clone(), x.target_pose.clone(), x.pose.clone()];
    let seq = net.synthesize_sequence(&reference, &poses, SynthOptions::default()).unwrap();
    let feats: Vec<_> = poses.iter().map(|p| net.extract_pose_features(p).unwrap()).collect();
    let opts = SynthOptions::default();
    let (f0, _) = net
        .synthesize_frame(&reference, &x.image, &reference.pose_features, &feats[0], opts)
        .unwrap();
    let (f1, _) = net.synthesize_frame(&reference, &f0, &feats[0], &feats[1], opts).unwrap();
    let (f2, _) = net.synthesize_frame(&reference, &f1, &feats[1], &feats[2], opts).unwrap();
    assert_eq!(seq[0].data(), f0.data());
    assert_eq!(seq[1].data(), f1.data());
    assert_eq!(seq[2].data(), f2.data());

    let (m0, m1) = net
        .synthesize_move(&reference, &x.image, &reference.pose_features, (&feats[0], &feats[1]), opts)
        .unwrap();
    assert_eq!(m0.data(), f0.data());
    assert_eq!(m1.data(), f1.data());

    let single = net.synthesize_sequence(&reference, &poses[..1], opts).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].data(), f0.data());

    let independent = SynthOptions {
        independent_frames: true,
        force_map: None,
    };
    let ind = net.synthesize_sequence(&reference, &poses, independent).unwrap();
    assert_eq!(ind[0].data(), f0.data());
    assert_ne!(ind[1].data(), f1.data());
}

#[test]
fn second_frame_loss_reaches_parameters_through_first_frame() {
    let cfg = toy_config();
    let params = perturbed(&cfg, 16).variables();
    let net = Tdgn::new(&cfg, &params);
    let x = inputs(&cfg, 8);
    let reference = net.reference(&x.image, &x.pose).unwrap();
    let p0 = net.extract_pose_features(&x.prev_pose).unwrap();
    let p1 = net.extract_pose_features(&x.target_pose).unwrap();
    let opts = SynthOptions::default();
    let (first, _) = net
        .synthesize_frame(&reference, &x.image, &reference.pose_features, &p0, opts)
        .unwrap();
    let (chained, _) = net.synthesize_frame(&reference, &first, &p0, &p1, opts).unwrap();
    let (cut, _) = net
        .synthesize_frame(&reference, &first.detach(), &p0, &p1, opts)
        .unwrap();
    let g_chained = grad(&l1(&chained, &x.target), params.tensors(), false).unwrap();
    let g_cut = grad(&l1(&cut, &x.target), params.tensors(), false).unwrap();
    let diff: f64 = g_chained
        .iter()
        .zip(&g_cut)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)))
        .sum::<f64>()
        .sqrt();
    assert!(diff > 1e-6, "first frame contributes no gradient: {diff}");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = toy_config();
    let params = perturbed(&cfg, 17);
    let x = inputs(&cfg, 9);
    let loss = |p: &ParamSet| {
        let net = Tdgn::new(&cfg, p);
        let reference = net.reference(&x.image, &x.pose).unwrap();
        let prev = net.extract_pose_features(&x.prev_pose).unwrap();
        let target = net.extract_pose_features(&x.target_pose).unwrap();
        let (out, _) = net
            .synthesize_frame(&reference, &x.prev_image, &prev, &target, SynthOptions::default())
            .unwrap();
        l1(&out, &x.target)
    };
    for group in GROUPS {
        let err = check_group(&params, group, &loss);
        assert!(err < 1e-3, "{group}: relative error {err}");
    }
}

#[test]
fn warped_image_loss_gradient_for_flow_network() {
    let cfg = toy_config();
    let params = perturbed(&cfg, 18);
    let x = inputs(&cfg, 10);
    let loss = |p: &ParamSet| {
        let net = Tdgn::new(&cfg, p);
        let a = net.extract_pose_features(&x.pose).unwrap();
        let b = net.extract_pose_features(&x.target_pose).unwrap();
        let flow = net.predict_flow(&a, &b).unwrap();
        l1(&gradgraph::layers::warp(&x.image, &flow), &x.target)
    };
    let err = check_group(&params, "fn", &loss);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn sub_network_gradients_match_finite_differences() {
    let cfg = toy_config();
    let params = perturbed(&cfg, 19);
    let x = inputs(&cfg, 11);
    let mut rng = StdRng::seed_from_u64(20);
    let weights = random_tensor(&[3, 16, 8], &mut rng, -1.0, 1.0);
    let modulated = |p: &ParamSet| {
        let net = Tdgn::new(&cfg, p);
        let ri = net.extract_image_features(&x.image).unwrap();
        let rp = net.extract_image_features(&x.prev_image).unwrap();
        let pt = net.extract_pose_features(&x.target_pose).unwrap();
        let pp = net.extract_pose_features(&x.prev_pose).unwrap();
        net.modulate(&ri, &rp, &pt, &pp).unwrap()
    };
    let mn_loss = |p: &ParamSet| {
        let m = modulated(p);
        m.0.iter().map(|t| t.square().mean_all()).fold(Tensor::scalar(0.0), |a, b| a.add(&b))
    };
    let err = check_group(&params, "mn", &mn_loss);
    assert!(err < 1e-3, "mn: {err}");
    let dec_loss = |p: &ParamSet| {
        let net = Tdgn::new(&cfg, p);
        net.decode(&modulated(p)).unwrap().mul(&weights).sum_all()
    };
    let err = check_group(&params, "dec", &dec_loss);
    assert!(err < 1e-3, "dec: {err}");
    let wn_loss = |p: &ParamSet| {
        let net = Tdgn::new(&cfg, p);
        net.predict_occlusion(&x.image, &x.prev_image)
            .unwrap()
            .mul(&weights.slice_channels(0, 1))
            .sum_all()
    };
    let err = check_group(&params, "wn", &wn_loss);
    assert!(err < 1e-3, "wn: {err}");
}
