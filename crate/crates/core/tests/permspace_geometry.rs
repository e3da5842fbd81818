use std::collections::BTreeSet;

use clipforge::geometry::{
    denormalize, invert_for_frame, normalize, params_to_matrix, sample_transform, warp_clip, AffineParams, NormalizedParams,
    TransformSpace,
};
use clipforge::permspace::{all_permutations, apply_permutation, decode, encode, enumerate_classes, Permutation};
use clipforge::VideoClip;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

#[test]
fn class_counts_are_half_the_factorial() {
    for (k, want) in [(2, 1), (3, 3), (4, 12), (5, 60)] {
        assert_eq!(enumerate_classes(k).unwrap().size(), want);
        assert_eq!(want, factorial(k) / 2);
    }
}

#[test]
fn exhaustive_round_trip_and_reversal_pairs() {
    for k in 2..=5 {
        let space = enumerate_classes(k).unwrap();
        let mut seen = vec![0usize; space.size()];
        for p in all_permutations(k).unwrap() {
            let id = encode(&space, &p).unwrap();
            let rev: Vec<usize> = p.as_slice().iter().rev().copied().collect();
            assert_eq!(encode(&space, &Permutation::new(rev).unwrap()).unwrap(), id);
            let back = decode(&space, id).unwrap();
            assert!(back == p || back == p.reversed(), "k={k} {p:?} decoded to {back:?}");
            seen[id] += 1;
        }
        // every class holds exactly a permutation and its reversal
        assert!(seen.iter().all(|&c| c == 2), "k={k}: {seen:?}");
    }
}

#[test]
fn shuffled_pair_from_the_worked_example_shares_a_class() {
    let space = enumerate_classes(4).unwrap();
    let a = encode(&space, &Permutation::new(vec![1, 3, 0, 2]).unwrap()).unwrap();
    let b = encode(&space, &Permutation::new(vec![2, 0, 3, 1]).unwrap()).unwrap();
    assert_eq!(a, b);
    let representatives: BTreeSet<Vec<usize>> =
        space.representatives().iter().map(|p| p.as_slice().to_vec()).collect();
    assert_eq!(representatives.len(), 12);
}

fn ramp(x: f64, y: f64, c: f64) -> f64 {
    0.5 + 0.004 * (x - c) + 0.003 * (y - c)
}

fn ramp_clip(size: usize) -> VideoClip {
    let c = (size as f64 - 1.0) / 2.0;
    let frame: Vec<f32> = (0..size * size)
        .map(|i| ramp((i % size) as f64, (i / size) as f64, c) as f32)
        .collect();
    VideoClip::replicate_frame(&frame, 2, size, size).unwrap()
}

/// Bilinear interpolation reproduces a linear ramp, so every output pixel
/// whose source lies well inside the frame equals the ramp at the source.
fn assert_matches_ramp(p: &AffineParams, source_of: impl Fn(f64, f64) -> (f64, f64)) {
    let size = 48;
    let c = (size as f64 - 1.0) / 2.0;
    let out = warp_clip(&ramp_clip(size), p).unwrap();
    let mut checked = 0;
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = source_of(x as f64, y as f64);
            if sx < 1.0 || sy < 1.0 || sx > size as f64 - 2.0 || sy > size as f64 - 2.0 {
                continue;
            }
            let got = out.frame(1)[y * size + x] as f64;
            assert!((got - ramp(sx, sy, c)).abs() < 1e-5, "{p:?} at ({x},{y}): {got}");
            checked += 1;
        }
    }
    assert!(checked > size * size / 3, "only {checked} interior pixels");
}

#[test]
fn warp_samples_the_inverse_map() {
    let size = 48.0;
    let c = (size - 1.0) / 2.0;
    let shift = AffineParams::translation(0.125, -0.0625);
    assert_matches_ramp(&shift, |x, y| (x - 6.0, y + 3.0));

    let theta = 0.2f64;
    let turn = AffineParams {
        rot: theta,
        ..AffineParams::identity()
    };
    // forward map rotates by theta about the centre; the source is the
    // point rotated back
    assert_matches_ramp(&turn, |x, y| {
        let (dx, dy) = (x - c, y - c);
        (c + theta.cos() * dx + theta.sin() * dy, c - theta.sin() * dx + theta.cos() * dy)
    });

    let zoom = AffineParams {
        log_sx: 1.25f64.ln(),
        log_sy: 0.8f64.ln(),
        ..AffineParams::identity()
    };
    assert_matches_ramp(&zoom, |x, y| (c + (x - c) / 1.25, c + (y - c) / 0.8));
}

#[test]
fn identity_warp_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clip = VideoClip::new((0..4 * 20 * 12).map(|_| rng.gen::<f32>()).collect(), 4, 12, 20).unwrap();
    let out = warp_clip(&clip, &AffineParams::identity()).unwrap();
    assert!(out.pixels().iter().zip(clip.pixels()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

fn smooth_clip(size: usize) -> VideoClip {
    let frame: Vec<f32> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / size as f64, (i / size) as f64 / size as f64);
            (0.5 + 0.25 * (6.0 * x).sin() * (5.0 * y).cos()) as f32
        })
        .collect();
    VideoClip::replicate_frame(&frame, 2, size, size).unwrap()
}

fn psnr_where(a: &[f32], b: &[f32], keep: impl Fn(usize) -> bool) -> f64 {
    let (mut se, mut n) = (0.0, 0.0);
    for i in (0..a.len()).filter(|&i| keep(i)) {
        se += (a[i] as f64 - b[i] as f64).powi(2);
        n += 1.0;
    }
    -10.0 * (se / n).log10()
}

/// Pixels of the central crop whose forward image stays inside the frame
/// come back above 40 dB; when the whole crop stays inside, so does the
/// whole-crop PSNR. Pixels pushed out by a zoom-in are zero-filled by the
/// first warp and are lost.
#[test]
fn warp_then_inverse_recovers_the_centre() {
    let size = 64;
    let clip = smooth_clip(size);
    let space = TransformSpace::default();
    let side = (size as f64 * 0.6).round() as usize;
    let lo = (size - side) / 2;
    let in_crop = |i: usize| (lo..lo + side).contains(&(i % size)) && (lo..lo + side).contains(&(i / size));
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut contained = 0;
    for _ in 0..100 {
        let p = sample_transform(&space, &mut rng);
        let q = invert_for_frame(&p, size, size).unwrap();
        let back = warp_clip(&warp_clip(&clip, &p).unwrap(), &q).unwrap();
        let m = params_to_matrix(&p, size, size);
        let edge = (size - 1) as f64;
        let stays = |i: usize| {
            let (x, y) = m.apply((i % size) as f64, (i / size) as f64);
            (0.0..=edge).contains(&x) && (0.0..=edge).contains(&y)
        };
        let (a, b) = (back.frame(0), clip.frame(0));
        let recoverable = psnr_where(a, b, |i| in_crop(i) && stays(i));
        assert!(recoverable > 40.0, "{p:?}: {recoverable:.2} dB");
        if (0..size * size).all(|i| !in_crop(i) || stays(i)) {
            contained += 1;
            let whole = psnr_where(a, b, in_crop);
            assert!(whole > 40.0, "{p:?}: {whole:.2} dB");
        }
    }
    assert!(contained >= 90, "only {contained} of 100 transforms keep the crop in frame");
}

#[test]
fn shuffle_and_warp_commute_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let clip = VideoClip::new((0..4 * 24 * 24).map(|_| rng.gen::<f32>()).collect(), 4, 24, 24).unwrap();
    let space = TransformSpace::default();
    for _ in 0..25 {
        let p = Permutation::random(4, &mut rng).unwrap();
        let tau = sample_transform(&space, &mut rng);
        let a = warp_clip(&apply_permutation(&clip, &p).unwrap(), &tau).unwrap();
        let b = apply_permutation(&warp_clip(&clip, &tau).unwrap(), &p).unwrap();
        assert!(a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #[test]
    fn normalization_round_trips(v in prop::array::uniform6(-1.0f64..1.0)) {
        let space = TransformSpace::default();
        let p = denormalize(&NormalizedParams(v), &space).unwrap();
        let back = normalize(&p, &space).unwrap();
        for (a, b) in back.as_array().iter().zip(&v) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_transforms_normalize_into_the_unit_box(seed in any::<u64>()) {
        let space = TransformSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = sample_transform(&space, &mut rng);
        let n = normalize(&p, &space).unwrap();
        prop_assert!(n.as_array().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
