use rand::Rng;
use serde::{Deserialize, Serialize};

use super::resize_bilinear;
use crate::clip::VideoClip;

pub const CROP_FRACTION: f64 = 0.9;
pub const GAMMA_RANGE: (f32, f32) = (0.7, 1.4);
pub const BRIGHTNESS_RANGE: f32 = 0.1;

/// Which augmentations are enabled. Every enabled augmentation draws once
/// per clip and the same draw is applied to all frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub crop: bool,
    pub flip: bool,
    pub gamma: bool,
    pub brightness: bool,
}

impl AugmentPolicy {
    pub fn all() -> Self {
        Self {
            crop: true,
            flip: true,
            gamma: true,
            brightness: true,
        }
    }

    pub fn none() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

/// One concrete augmentation, applied in the order crop, flip, gamma,
/// brightness.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentDraw {
    pub crop: Option<CropWindow>,
    pub flip: bool,
    pub gamma: Option<f32>,
    pub brightness: Option<f32>,
}

impl AugmentDraw {
    pub fn sample<R: Rng + ?Sized>(policy: &AugmentPolicy, width: usize, height: usize, rng: &mut R) -> Self {
        let crop = policy.crop.then(|| {
            let cw = ((width as f64 * CROP_FRACTION).round() as usize).max(1);
            let ch = ((height as f64 * CROP_FRACTION).round() as usize).max(1);
            CropWindow {
                x0: rng.gen_range(0..=width - cw),
                y0: rng.gen_range(0..=height - ch),
                width: cw,
                height: ch,
            }
        });
        let flip = policy.flip && rng.gen_bool(0.5);
        let gamma = policy
            .gamma
            .then(|| rng.gen_range(GAMMA_RANGE.0..=GAMMA_RANGE.1));
        let brightness = policy
            .brightness
            .then(|| rng.gen_range(-BRIGHTNESS_RANGE..=BRIGHTNESS_RANGE));
        Self {
            crop,
            flip,
            gamma,
            brightness,
        }
    }
}

pub fn apply_augment(clip: &VideoClip, draw: &AugmentDraw) -> VideoClip {
    let (w, h) = (clip.width(), clip.height());
    let mut out = clip.clone();
    for t in 0..clip.k() {
        let frame = out.frame_mut(t);
        if let Some(c) = draw.crop {
            let mut window = Vec::with_capacity(c.width * c.height);
            for y in c.y0..c.y0 + c.height {
                window.extend_from_slice(&frame[y * w + c.x0..y * w + c.x0 + c.width]);
            }
            frame.copy_from_slice(&resize_bilinear(&window, c.width, c.height, w, h));
        }
        if draw.flip {
            for row in frame.chunks_mut(w) {
                row.reverse();
            }
        }
        if let Some(g) = draw.gamma {
            for v in frame.iter_mut() {
                *v = v.powf(g);
            }
        }
        if let Some(b) = draw.brightness {
            for v in frame.iter_mut() {
                *v = (*v + b).clamp(0.0, 1.0);
            }
        }
        for v in frame.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

pub fn augment<R: Rng + ?Sized>(clip: &VideoClip, policy: &AugmentPolicy, rng: &mut R) -> VideoClip {
    let draw = AugmentDraw::sample(policy, clip.width(), clip.height(), rng);
    apply_augment(clip, &draw)
}
