use clipforge::geometry::{sample_transform, TransformSpace};
use clipforge::nn::gradcheck::check_gradients;
use clipforge::nn::{log_softmax, BackboneSpec, DownstreamOutput, Network, NetworkSpec, NetworkVariant, ParameterSet};
use clipforge::permspace::{enumerate_classes, Permutation};
use clipforge::pretrain::{make_sample_with, sample_loss_grad, LossWeights, PretextSample, TransformNorm};
use clipforge::VideoClip;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: NetworkVariant) -> NetworkSpec {
    NetworkSpec {
        backbone: BackboneSpec {
            input_channels: 4,
            widths: vec![8, 8],
            dilations: vec![1, 2],
            strides: vec![2, 1],
            se_ratio: 4,
            input_size: 8,
            norm_groups: 4,
        },
        variant,
    }
}

fn random_clip(rng: &mut ChaCha8Rng, size: usize) -> VideoClip {
    let data = (0..4 * size * size).map(|_| rng.gen::<f32>()).collect();
    VideoClip::new(data, 4, size, size).unwrap()
}

fn sample(seed: u64) -> PretextSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = random_clip(&mut rng, 8);
    let space = enumerate_classes(4).unwrap();
    let tspace = TransformSpace::default();
    let p = Permutation::new(vec![1, 3, 0, 2]).unwrap();
    let tau = sample_transform(&tspace, &mut rng);
    make_sample_with(&clip, &space, &tspace, p, tau).unwrap()
}

fn pretext_loss(net: &Network<f64>, s: &PretextSample, grads: Option<&mut ParameterSet<f64>>) -> f64 {
    let st = sample_loss_grad(net, s, &LossWeights::default(), TransformNorm::L2, grads, 1.0).unwrap();
    st.l_ord + st.l_trans
}

#[test]
fn pretext_gradients_match_central_differences() {
    let s = sample(11);
    for variant in [
        NetworkVariant::Siamese,
        NetworkVariant::Disentangle,
        NetworkVariant::OrderOnly,
        NetworkVariant::TransformOnly,
    ] {
        let net = Network::<f64>::build(&tiny(variant), 5).unwrap();
        let report = check_gradients(&net, 1e-5, |n, g| pretext_loss(n, &s, g));
        let worst = report.worst().unwrap();
        assert!(
            report.max_relative_error() < 1e-4,
            "{variant}: {} rel err {}",
            worst.name,
            worst.relative_error
        );
        assert!(report.tensors.iter().all(|t| t.max_abs_grad > 0.0 || !t.name.starts_with("trunk")));
    }
}

#[test]
fn downstream_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clip = random_clip(&mut rng, 8);
    let target: Vec<f64> = {
        let raw: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let planes = Network::<f64>::build(&tiny(NetworkVariant::Planes { classes: 3 }), 2).unwrap();
    let report = check_gradients(&planes, 1e-5, |n, g| {
        let (out, cache) = n.downstream_forward(&clip).unwrap();
        let DownstreamOutput::Plane { logits } = out else { unreachable!() };
        let logp = log_softmax(&logits);
        if let Some(g) = g {
            let d: Vec<f64> = logp.iter().enumerate().map(|(i, l)| l.exp() - (i == 1) as u8 as f64).collect();
            n.downstream_backward(&cache, &d, g, true);
        }
        -logp[1]
    });
    assert!(report.max_relative_error() < 1e-4, "{:?}", report.worst());

    let sal = Network::<f64>::build(&tiny(NetworkVariant::Saliency), 2).unwrap();
    let report = check_gradients(&sal, 1e-5, |n, g| {
        let (out, cache) = n.downstream_forward(&clip).unwrap();
        let DownstreamOutput::Saliency { logits, map } = out else { unreachable!() };
        let logp = log_softmax(&logits);
        if let Some(g) = g {
            let d: Vec<f64> = map.iter().zip(&target).map(|(p, t)| p - t).collect();
            n.downstream_backward(&cache, &d, g, true);
        }
        target.iter().zip(&logp).map(|(t, lp)| t * (t.ln() - lp)).sum()
    });
    assert!(report.max_relative_error() < 1e-4, "{:?}", report.worst());
}

#[test]
fn siamese_trunk_gradient_is_sum_of_task_gradients() {
    let s = sample(21);
    let net = Network::<f64>::build(&tiny(NetworkVariant::Siamese), 8).unwrap();
    let grad_for = |w: LossWeights| {
        let mut g = net.params().zeros_like();
        sample_loss_grad(&net, &s, &w, TransformNorm::L2, Some(&mut g), 1.0).unwrap();
        g
    };
    let ord = grad_for(LossWeights { order: 1.0, transform: 0.0 });
    let trans = grad_for(LossWeights { order: 0.0, transform: 1.0 });
    let joint = grad_for(LossWeights::default());
    let name = "trunk.stage0.conv1.weight";
    let (a, b, c) = (
        &ord.get(name).unwrap().data,
        &trans.get(name).unwrap().data,
        &joint.get(name).unwrap().data,
    );
    assert_ne!(a, b);
    assert_ne!(a, c);
    for i in 0..a.len() {
        assert!((a[i] + b[i] - c[i]).abs() < 1e-12);
    }
}

#[test]
fn zero_heads_give_uniform_order_loss() {
    let s = sample(4);
    for variant in [NetworkVariant::Siamese, NetworkVariant::Disentangle] {
        let mut net = Network::<f64>::build(&tiny(variant), 1).unwrap();
        net.zero_heads();
        let st = sample_loss_grad(&net, &s, &LossWeights::default(), TransformNorm::L2, None, 1.0).unwrap();
        assert!((st.l_ord - 12f64.ln()).abs() < 1e-9, "{variant}: {}", st.l_ord);
    }
}

#[test]
fn saliency_map_is_normalized_and_uniform_on_constant_input() {
    let spec = NetworkSpec {
        backbone: BackboneSpec {
            input_size: 256,
            ..BackboneSpec::default()
        },
        variant: NetworkVariant::Saliency,
    };
    spec.backbone.validate().unwrap();
    let net = Network::<f64>::build(&spec, 6).unwrap();
    let clip = VideoClip::replicate_frame(&vec![0.4; 256 * 256], 4, 256, 256).unwrap();
    let DownstreamOutput::Saliency { map, .. } = net.forward_downstream(&clip).unwrap() else { unreachable!() };
    assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let centre: Vec<f64> = (64..192)
        .flat_map(|y| (64..192).map(move |x| (y, x)))
        .map(|(y, x)| map[y * 256 + x])
        .collect();
    let (lo, hi) = centre.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    assert!(hi - lo < 1e-6 * hi.max(1e-300) + 1e-15, "spread {lo}..{hi}");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let small = Network::<f32>::build(&tiny(NetworkVariant::Saliency), 0).unwrap();
    let DownstreamOutput::Saliency { map, .. } = small.forward_downstream(&random_clip(&mut rng, 8)).unwrap() else {
        unreachable!()
    };
    assert!((map.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn forward_is_deterministic_and_finite() {
    let s = sample(9);
    let net = Network::<f32>::build(&tiny(NetworkVariant::Siamese), 2).unwrap();
    let a = net.forward_siamese(&s.shuffled, &s.original, &s.transformed).unwrap();
    let b = net.forward_siamese(&s.shuffled, &s.original, &s.transformed).unwrap();
    assert_eq!(a, b);
    assert!(a.0.iter().chain(&a.1).all(|v| v.is_finite()));
    let wrong = VideoClip::new(vec![0.0; 4 * 100], 4, 10, 10).unwrap();
    assert!(net.forward_siamese(&wrong, &s.original, &s.transformed).is_err());
}

#[test]
fn plane_head_arity() {
    let spec = NetworkSpec {
        backbone: BackboneSpec::default(),
        variant: NetworkVariant::Planes { classes: 14 },
    };
    let net = Network::<f32>::build(&spec, 0).unwrap();
    let out = net.forward_frame(&vec![0.2; 64 * 64]).unwrap();
    let DownstreamOutput::Plane { logits } = out else { unreachable!() };
    assert_eq!(logits.len(), 14);
}
