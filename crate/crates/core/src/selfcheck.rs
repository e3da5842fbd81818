//! Fast verification suite: exhaustive permutation-space checks, warp
//! round trips, shuffle/warp commutation, finite-difference gradients and
//! golden metric values.
//!
//! Every check compares against an expected value. `corrupt` names checks
//! whose expectation is deliberately falsified, to prove the harness can
//! fail.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::clip::VideoClip;
use crate::error::Result;
use crate::evalmetrics::{auc_judd, cc, classification_report, kl, nss, sim, ConfusionMatrix, KL_EPS};
use crate::geometry::{invert_for_frame, params_to_matrix, sample_transform, warp_clip, AffineParams, NormalizedParams, TransformSpace};
use crate::nn::gradcheck::check_gradients;
use crate::nn::{BackboneSpec, Network, NetworkSpec, NetworkVariant};
use crate::permspace::{all_permutations, apply_permutation, decode, encode, encode_indices, enumerate_classes, Permutation};
use crate::pretrain::{loss, make_sample_with, sample_loss_grad, LossWeights, TransformNorm};

pub const CHECK_NAMES: [&str; 8] = [
    "permspace",
    "reversal_example",
    "warp_identity",
    "warp_round_trip",
    "commutation",
    "loss_oracle",
    "gradients",
    "metric_goldens",
];

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Outcome of one check body: pass/fail plus a short explanation.
type Verdict = Result<(bool, String)>;

fn check_permspace(bias: usize) -> Verdict {
    let mut sizes = Vec::new();
    for k in 2..=5 {
        let space = enumerate_classes(k)?;
        sizes.push(space.size());
        for p in all_permutations(k)? {
            let c = encode(&space, &p)?;
            let back = decode(&space, c)?;
            if back != p && back != p.reversed() {
                return Ok((false, format!("k={k}: {p} decoded to {back}")));
            }
            if encode(&space, &p.reversed())? != c {
                return Ok((false, format!("k={k}: {p} and its reversal differ")));
            }
        }
    }
    let want = [1 + bias, 3, 12, 60];
    Ok((sizes == want, format!("class counts {sizes:?}, expected {want:?}")))
}

fn check_reversal_example(bias: usize) -> Verdict {
    let space = enumerate_classes(4)?;
    let a = encode_indices(&space, &[1, 3, 0, 2])?;
    let b = encode_indices(&space, &[2, 0, 3, 1])?;
    Ok((a == b + bias, format!("encode(1,3,0,2)={a}, encode(2,0,3,1)={b}")))
}

/// Smooth test clip with values inside (0, 1).
fn smooth_clip(k: usize, size: usize) -> VideoClip {
    let mut frames = Vec::with_capacity(k * size * size);
    let s = size as f64;
    for t in 0..k {
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / s, y as f64 / s);
                let blob = (-((u - 0.45).powi(2) + (v - 0.55).powi(2)) / 0.03).exp();
                let wave = (6.0 * u + t as f64).sin() * (5.0 * v).cos();
                frames.push((0.45 + 0.25 * blob + 0.15 * wave) as f32);
            }
        }
    }
    VideoClip::new(frames, k, size, size).expect("valid shape")
}

fn check_warp_identity(bias: usize) -> Verdict {
    let clip = smooth_clip(4, 32);
    let out = warp_clip(&clip, &AffineParams::identity())?;
    let differing = out.pixels().iter().zip(clip.pixels()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    Ok((differing == bias, format!("{differing} pixels changed by the identity warp")))
}

/// PSNR with peak 1 over the pixels where `keep` holds.
fn masked_psnr(a: &[f32], b: &[f32], keep: impl Fn(usize) -> bool) -> f64 {
    let (mut se, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if keep(i) {
            se += (*x as f64 - *y as f64).powi(2);
            n += 1;
        }
    }
    if se == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (n as f64 / se).log10()
    }
}

fn in_central_crop(i: usize, size: usize, fraction: f64) -> bool {
    let side = (size as f64 * fraction).round() as usize;
    let lo = (size - side) / 2;
    let (x, y) = (i % size, i / size);
    (lo..lo + side).contains(&x) && (lo..lo + side).contains(&y)
}

/// PSNR of the central `fraction` crop of two square frames with peak 1.
pub fn central_psnr(a: &[f32], b: &[f32], size: usize, fraction: f64) -> f64 {
    masked_psnr(a, b, |i| in_central_crop(i, size, fraction))
}

/// Worst-case statistics of warp followed by the inverse warp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundTrip {
    /// Lowest PSNR over the whole central crop.
    pub central_min: f64,
    /// Lowest PSNR over the central-crop pixels whose forward image stays
    /// inside the frame; the rest are zero-filled by the first warp and
    /// cannot come back.
    pub recoverable_min: f64,
    /// Lowest whole-crop PSNR among transforms that keep the crop in frame.
    pub contained_min: f64,
    /// Transforms that push part of the crop out of the frame.
    pub crop_leaves_frame: usize,
}

/// Round trips `trials` transforms drawn from the default space on a
/// smooth 64x64 image, measured on the central 60% crop.
pub fn warp_round_trip(trials: usize, seed: u64) -> Result<RoundTrip> {
    let size = 64;
    let clip = smooth_clip(2, size);
    let space = TransformSpace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rt = RoundTrip {
        central_min: f64::INFINITY,
        recoverable_min: f64::INFINITY,
        contained_min: f64::INFINITY,
        crop_leaves_frame: 0,
    };
    let edge = (size - 1) as f64;
    for _ in 0..trials {
        let p = sample_transform(&space, &mut rng);
        let q = invert_for_frame(&p, size, size)?;
        let back = warp_clip(&warp_clip(&clip, &p)?, &q)?;
        let m = params_to_matrix(&p, size, size);
        let stays = |i: usize| {
            let (x, y) = m.apply((i % size) as f64, (i / size) as f64);
            (0.0..=edge).contains(&x) && (0.0..=edge).contains(&y)
        };
        let (a, b) = (back.frame(0), clip.frame(0));
        let central = central_psnr(a, b, size, 0.6);
        rt.central_min = rt.central_min.min(central);
        let keep = |i: usize| in_central_crop(i, size, 0.6) && stays(i);
        rt.recoverable_min = rt.recoverable_min.min(masked_psnr(a, b, keep));
        if (0..size * size).all(|i| !in_central_crop(i, size, 0.6) || stays(i)) {
            rt.contained_min = rt.contained_min.min(central);
        } else {
            rt.crop_leaves_frame += 1;
        }
    }
    Ok(rt)
}

fn check_warp_round_trip(bias: usize) -> Verdict {
    let rt = warp_round_trip(100, 0)?;
    let threshold = 40.0 + 1e3 * bias as f64;
    Ok((
        rt.recoverable_min > threshold && rt.contained_min > threshold,
        format!(
            "worst recoverable-pixel PSNR {:.2} dB, worst in-frame crop {:.2} dB (need > {threshold} dB); \
             {} of 100 transforms push the 60% crop out of frame, whole-crop worst {:.2} dB",
            rt.recoverable_min, rt.contained_min, rt.crop_leaves_frame, rt.central_min
        ),
    ))
}

fn check_commutation(bias: usize) -> Verdict {
    let clip = smooth_clip(4, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let space = TransformSpace::default();
    let mut mismatches = 0;
    for _ in 0..20 {
        let p = Permutation::random(4, &mut rng)?;
        let tau = sample_transform(&space, &mut rng);
        let a = warp_clip(&apply_permutation(&clip, &p)?, &tau)?;
        let b = apply_permutation(&warp_clip(&clip, &tau)?, &p)?;
        if a.pixels().iter().zip(b.pixels()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            mismatches += 1;
        }
    }
    Ok((mismatches == bias, format!("{mismatches} of 20 shuffle/warp pairs differ")))
}

fn tiny_spec(variant: NetworkVariant) -> NetworkSpec {
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

fn check_loss_oracle(bias: usize) -> Verdict {
    let want = 12f64.ln() + bias as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let clip = VideoClip::new((0..4 * 64).map(|_| rng.gen::<f32>()).collect(), 4, 8, 8)?;
    let space = enumerate_classes(4)?;
    let sample = make_sample_with(
        &clip,
        &space,
        &TransformSpace::default(),
        Permutation::new(vec![2, 0, 3, 1])?,
        AffineParams::identity(),
    )?;
    let mut net = Network::<f64>::build(&tiny_spec(NetworkVariant::Disentangle), 4)?;
    net.zero_heads();
    let st = sample_loss_grad(&net, &sample, &LossWeights::default(), TransformNorm::L2, None, 1.0)?;
    let tau = [0.1, -0.2, 0.3, 0.0, 0.5, -0.6];
    let zero = loss(&[], &[], &[tau.to_vec()], &[NormalizedParams(tau)], &LossWeights::default(), TransformNorm::L2)?;
    let ok = (st.l_ord - want).abs() < 1e-6 && zero.l_trans == 0.0;
    Ok((ok, format!("l_ord {:.9} (want {want:.9}), l_trans at tau_hat == tau {}", st.l_ord, zero.l_trans)))
}

fn check_gradients_tiny(bias: usize) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let clip = VideoClip::new((0..4 * 64).map(|_| rng.gen::<f32>()).collect(), 4, 8, 8)?;
    let space = enumerate_classes(4)?;
    let tspace = TransformSpace::default();
    let tau = sample_transform(&tspace, &mut rng);
    let sample = make_sample_with(&clip, &space, &tspace, Permutation::new(vec![1, 3, 0, 2])?, tau)?;
    let limit = 1e-4 / (1.0 + 1e6 * bias as f64);
    let mut worst: (f64, String) = (0.0, String::new());
    for name in NetworkVariant::PRETEXT_NAMES {
        let variant: NetworkVariant = name.parse()?;
        let net = Network::<f64>::build(&tiny_spec(variant), 5)?;
        let report = check_gradients(&net, 1e-5, |n, g| {
            let st = sample_loss_grad(n, &sample, &LossWeights::default(), TransformNorm::L2, g, 1.0)
                .expect("tiny sample is valid");
            st.l_ord + st.l_trans
        });
        if let Some(t) = report.worst() {
            if t.relative_error >= worst.0 {
                worst = (t.relative_error, format!("{variant}/{}", t.name));
            }
        }
    }
    Ok((worst.0 < limit, format!("max relative error {:.2e} at {} (limit {limit:.0e})", worst.0, worst.1)))
}

fn check_metric_goldens(bias: usize) -> Verdict {
    let off = bias as f64;
    let pred = [0.0, 1.0, 0.0, 1.0];
    let uniform = [0.25; 4];
    let half = [0.5, 0.5, 0.0, 0.0];
    let kl_want = 0.5 * 0.5f64.ln() + 0.5 * (KL_EPS + 0.25 / KL_EPS).ln();
    let cm = ConfusionMatrix::from_counts(vec![vec![3, 1], vec![2, 4]])?;
    let report = classification_report(&cm)?;
    let mut auc_map = [0.05; 9];
    auc_map[4] = 0.6;
    let mut auc_fix = [false; 9];
    auc_fix[4] = true;
    let cases: Vec<(&str, f64, f64)> = vec![
        ("nss +1", nss(&pred, &[false, true, false, true])?, 1.0 + off),
        ("nss -1", nss(&pred, &[true, false, true, false])?, -1.0),
        ("nss constant", nss(&uniform, &[true, false, false, false])?, 0.0),
        ("kl identical", kl(&uniform, &uniform)?, 0.0),
        ("kl epsilon case", kl(&half, &uniform)?, kl_want),
        ("sim", sim(&uniform, &half)?, 0.5),
        ("cc identical", cc(&half, &half)?, 1.0),
        ("auc single fixation", auc_judd(&auc_map, &auc_fix)?, 1.0),
        ("precision", report.per_class[0].precision, 0.6),
        ("recall", report.per_class[0].recall, 0.75),
        ("f1", report.per_class[0].f1, 2.0 * 0.6 * 0.75 / 1.35),
    ];
    let failed: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() >= 1e-6)
        .map(|(name, got, want)| format!("{name}: {got} != {want}"))
        .collect();
    if failed.is_empty() {
        Ok((true, format!("{} golden values match", cases.len())))
    } else {
        Ok((false, failed.join("; ")))
    }
}

/// Runs every check in order. Names in `corrupt` get a falsified
/// expectation.
pub fn run_checks(corrupt: &[String]) -> Vec<CheckResult> {
    let bodies: [(&str, fn(usize) -> Verdict); 8] = [
        ("permspace", check_permspace),
        ("reversal_example", check_reversal_example),
        ("warp_identity", check_warp_identity),
        ("warp_round_trip", check_warp_round_trip),
        ("commutation", check_commutation),
        ("loss_oracle", check_loss_oracle),
        ("gradients", check_gradients_tiny),
        ("metric_goldens", check_metric_goldens),
    ];
    bodies
        .iter()
        .map(|(name, body)| {
            let bias = corrupt.iter().any(|c| c == name) as usize;
            let start = Instant::now();
            let (passed, detail) = match body(bias) {
                Ok(v) => v,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult {
                name: name.to_string(),
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
