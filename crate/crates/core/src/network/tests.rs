use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn tiny_config(aggregation: Aggregation) -> NetworkConfig {
    NetworkConfig {
        num_classes: 2,
        backbone: BackboneConfig {
            stem_widths: [2, 3],
            stage_widths: [4, 4, 5],
            convs_per_stage: 1,
        },
        pyramid: PyramidConfig {
            width: 4,
            aggregation,
        },
        heads: HeadConfig {
            depth: 1,
            location_width: 3,
            mask_width: 3,
            correspondence_width: 3,
            ..HeadConfig::default()
        },
        anchors: AnchorSpec {
            scales: vec![1.0],
            ratios: vec![1.0, 2.0],
            ..AnchorSpec::default()
        },
    }
}

fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn output_shapes_follow_strides() {
    for agg in [Aggregation::Pfpn, Aggregation::Fpn, Aggregation::None] {
        let net = PoseNet::<f64>::new(tiny_config(agg), &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, image(64, 96, 1)).unwrap();
        for (l, stride) in [8, 16, 32].into_iter().enumerate() {
            let (h, w) = (64 / stride, 96 / stride);
            assert_eq!(tape.value(out.pyramid[l]).shape(), Shape::new(1, 4, h, w));
            assert_eq!(tape.value(out.location[l]).shape(), Shape::new(1, 4, h, w));
            assert_eq!(tape.value(out.correspondence[l]).shape(), Shape::new(1, 32, h, w));
        }
        assert_eq!(tape.value(out.mask).shape(), Shape::new(1, 2, 8, 12));
    }
}

#[test]
fn initial_scores_sit_near_the_prior() {
    let net = PoseNet::<f64>::new(tiny_config(Aggregation::Pfpn), &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, image(64, 64, 2)).unwrap();
    let v = tape.value(out.location[0]).values();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean - 0.01).abs() < 0.005, "{mean}");
}

#[test]
fn rejects_inputs_not_divisible_by_32() {
    let net = PoseNet::<f64>::new(tiny_config(Aggregation::Pfpn), &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let err = net.forward(&mut tape, image(48, 64, 3)).unwrap_err();
    assert!(matches!(err, TensorError::Indivisible { axis: "height", extent: 48, .. }));
}

#[test]
fn parameter_names_are_hierarchical() {
    let net = PoseNet::<f32>::new(tiny_config(Aggregation::Pfpn), &mut ChaCha8Rng::seed_from_u64(0));
    for name in [
        "backbone.stem1.weight",
        "backbone.c5.conv0.bias",
        "pyramid.t4.weight",
        "pyramid.p5.bias",
        "heads.location.conv0.weight",
        "heads.correspondence.output.weight",
        "heads.mask.output.bias",
    ] {
        assert!(net.params.get(name).is_some(), "{name}");
    }
    let fpn = PoseNet::<f32>::new(tiny_config(Aggregation::Fpn), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(fpn.params.get("pyramid.m4.weight").is_none());
}

#[test]
fn summary_lists_every_node() {
    let net = PoseNet::<f32>::new(tiny_config(Aggregation::Pfpn), &mut ChaCha8Rng::seed_from_u64(0));
    let s = net.summary();
    for node in ["l3", "t4", "t3", "b4", "p3", "p4", "p5"] {
        assert!(s.contains(&format!("node {node}")), "{node}\n{s}");
    }
    assert!(s.contains(&format!("total parameters {}", net.parameter_count())));
}

#[test]
fn l2_penalty_and_gradient_agree() {
    let mut net = PoseNet::<f64>::new(tiny_config(Aggregation::Pfpn), &mut ChaCha8Rng::seed_from_u64(4));
    let idx = net.l2_param_indices();
    assert_eq!(idx.len(), 1);
    assert_eq!(net.params.name(idx[0]), "heads.correspondence.conv0.weight");
    let base = net.l2_penalty();
    net.params.zero_grad();
    net.accumulate_l2_grad().unwrap();
    let g = net.params.by_index(idx[0]).grad().unwrap()[5];
    let h = 1e-6;
    net.params.by_index_mut(idx[0]).values_mut()[5] += h;
    let numeric = (net.l2_penalty() - base) / h;
    assert!((numeric - g).abs() < 1e-6, "{numeric} vs {g}");
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut net = PoseNet::<f64>::new(tiny_config(Aggregation::Pfpn), &mut ChaCha8Rng::seed_from_u64(5));
    let img = image(32, 32, 6);
    // Weighted sum of every head output keeps all parameters live.
    let objective = |net: &PoseNet<f64>, tape: &mut Tape<f64>| -> (f64, Vec<(Var, Vec<f64>)>) {
        let out = net.forward(tape, img.clone()).unwrap();
        let mut total = 0.0;
        let mut seeds = Vec::new();
        let vars = out.location.iter().chain(&out.correspondence).chain([&out.mask]);
        for (k, &v) in vars.enumerate() {
            let vals = tape.value(v).values();
            let w: Vec<f64> = (0..vals.len()).map(|i| ((i * 7 + k * 3) % 11) as f64 / 11.0 - 0.4).collect();
            total += vals.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            seeds.push((v, w));
        }
        (total, seeds)
    };
    let mut tape = Tape::new();
    let (_, seeds) = objective(&net, &mut tape);
    tape.backward(seeds).unwrap();
    net.params.zero_grad();
    tape.write_param_grads(&mut net.params).unwrap();
    let h = 1e-6;
    for p in 0..net.params.len() {
        let n = net.params.by_index(p).len();
        for j in [0, n / 2, n - 1] {
            let analytic = net.params.by_index(p).grad().unwrap()[j];
            let orig = net.params.by_index(p).values()[j];
            net.params.by_index_mut(p).values_mut()[j] = orig + h;
            let plus = objective(&net, &mut Tape::new()).0;
            net.params.by_index_mut(p).values_mut()[j] = orig - h;
            let minus = objective(&net, &mut Tape::new()).0;
            net.params.by_index_mut(p).values_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (analytic - numeric).abs() / scale < 1e-4,
                "{} [{j}]: {analytic} vs {numeric}",
                net.params.name(p)
            );
        }
    }
}

#[test]
fn location_head_channel_arithmetic() {
    let mut cfg = tiny_config(Aggregation::Pfpn);
    cfg.num_classes = 3;
    cfg.pyramid.width = 32;
    cfg.anchors = AnchorSpec::default();
    let net = PoseNet::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let p3 = tape.input(Tensor::filled(Shape::new(1, 32, 24, 32), 0.1));
    let levels = net.heads.location(&mut tape, &bound, [p3, p3, p3]).unwrap();
    assert_eq!(tape.value(levels[0]).shape(), Shape::new(1, 27, 24, 32));
    let corr = net.heads.correspondence(&mut tape, &bound, [p3, p3, p3]).unwrap();
    assert_eq!(tape.value(corr[0]).shape().c, 144);
}

#[test]
fn heads_share_weights_across_levels() {
    let net = PoseNet::<f64>::new(tiny_config(Aggregation::Pfpn), &mut ChaCha8Rng::seed_from_u64(1));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Tensor::from_fn(Shape::new(1, 4, 4, 4), |_| rng.random_range(-1.0..1.0));
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let a = tape.input(t.clone());
    let b = tape.input(t);
    let other = tape.input(Tensor::zeros(Shape::new(1, 4, 2, 2)));
    let loc = net.heads.location(&mut tape, &bound, [a, b, other]).unwrap();
    let corr = net.heads.correspondence(&mut tape, &bound, [a, b, other]).unwrap();
    assert_eq!(tape.value(loc[0]).values(), tape.value(loc[1]).values());
    assert_eq!(tape.value(corr[0]).values(), tape.value(corr[1]).values());
}

#[test]
fn mask_ignores_coarse_levels() {
    let net = PoseNet::<f64>::new(tiny_config(Aggregation::Pfpn), &mut ChaCha8Rng::seed_from_u64(3));
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let img = tape.input(image(64, 64, 4));
    let c = net.backbone_forward(&mut tape, &bound, img).unwrap();
    let p = net.pyramid_forward(&mut tape, &bound, c).unwrap();
    let m1 = net.heads.mask(&mut tape, &bound, p[0]).unwrap();
    let p4 = tape.input(Tensor::filled(tape.value(p[1]).shape(), 5.0));
    let p5 = tape.input(Tensor::filled(tape.value(p[2]).shape(), -5.0));
    let _ = net.heads.location(&mut tape, &bound, [p[0], p4, p5]).unwrap();
    let m2 = net.heads.mask(&mut tape, &bound, p[0]).unwrap();
    assert_eq!(tape.value(m1).values(), tape.value(m2).values());
    assert_eq!(tape.value(m1).shape(), Shape::new(1, 2, 8, 8));
}
