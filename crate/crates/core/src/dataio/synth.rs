//! Synthetic phantom videos.
//!
//! Each video shows a cluster of bright ellipses on a dark speckled
//! background. The cluster layout is fixed per class; per video it gets a
//! random pose, a straight-line drift with fixed direction, a slow monotone
//! rotation and a gentle breathing deformation. The speckle texture moves
//! with the cluster, so consecutive frames differ everywhere and frame order
//! is recoverable up to reversal. Fixations are jittered around the first
//! ("target") ellipse.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::store::{frame_path, load_store, write_gray_png, write_manifest, Manifest, VideoEntry, VideoStore, MANIFEST_VERSION};
use crate::error::{Error, Result};

const BACKGROUND: f64 = 0.18;
const ACQUISITION_NOISE: f64 = 0.02;
const ELLIPSES_PER_CLUSTER: usize = 3;
const EDGE_SHARPNESS: f64 = 8.0;
const FIXATION_JITTER: f64 = 0.03;
const FAN_APEX_OFFSET: f64 = 0.6;
const FAN_HALF_ANGLE_DEG: f64 = 31.0;
const FAN_RADIUS: f64 = 1.62;
const SPECKLE_SIGMA_X: f64 = 2.0;
const SPECKLE_SIGMA_Y: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Drift speed of the cluster in pixels per frame.
    pub motion_amplitude: f64,
    /// Standard deviation of the multiplicative speckle.
    pub speckle: f64,
    pub fan_mask: bool,
    pub fixations_per_frame: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 60,
            frames_per_video: 256,
            width: 80,
            height: 80,
            num_classes: 4,
            motion_amplitude: 0.3,
            speckle: 0.3,
            fan_mask: true,
            fixations_per_frame: 4,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_video == 0 || self.fixations_per_frame == 0 {
            return Err(Error::invalid("frame and fixation counts must be positive"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::invalid("synthetic frames must be at least 8x8"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(self.motion_amplitude.is_finite() && self.motion_amplitude >= 0.0) {
            return Err(Error::invalid("motion amplitude must be finite and non-negative"));
        }
        if !(self.speckle.is_finite() && self.speckle >= 0.0) {
            return Err(Error::invalid("speckle level must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct EllipseSpec {
    dx: f64,
    dy: f64,
    a: f64,
    b: f64,
    theta: f64,
    brightness: f64,
}

fn class_templates(cfg: &SynthConfig) -> Vec<Vec<EllipseSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let size = cfg.width.min(cfg.height) as f64;
    (0..cfg.num_classes)
        .map(|_| {
            (0..ELLIPSES_PER_CLUSTER)
                .map(|i| {
                    let (r, ang) = if i == 0 {
                        (rng.gen_range(0.0..0.05) * size, rng.gen_range(0.0..2.0 * PI))
                    } else {
                        (rng.gen_range(0.08..0.17) * size, rng.gen_range(0.0..2.0 * PI))
                    };
                    EllipseSpec {
                        dx: r * ang.cos(),
                        dy: r * ang.sin(),
                        a: rng.gen_range(0.06..0.10) * size,
                        b: rng.gen_range(0.035..0.06) * size,
                        theta: rng.gen_range(0.0..PI),
                        brightness: rng.gen_range(0.55..0.8),
                    }
                })
                .collect()
        })
        .collect()
}

/// `true` inside the imaging sector.
pub fn fan_mask(width: usize, height: usize) -> Vec<bool> {
    let apex_x = (width as f64 - 1.0) / 2.0;
    let apex_y = -FAN_APEX_OFFSET * height as f64;
    let half = FAN_HALF_ANGLE_DEG.to_radians();
    let radius = FAN_RADIUS * height as f64;
    let mut mask = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 - apex_x;
            let dy = y as f64 - apex_y;
            let inside = dx.atan2(dy).abs() <= half && (dx * dx + dy * dy).sqrt() <= radius;
            mask.push(inside);
        }
    }
    mask
}

/// One rendered video plus the ground truth used to make it.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub id: String,
    pub plane_class: u32,
    pub frames: Vec<u8>,
    pub fixations: Vec<Vec<[f64; 2]>>,
    /// Target ellipse centre per frame.
    pub target_centres: Vec<[f64; 2]>,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn blur_1d(src: &[f64], w: usize, h: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let o = j as isize - r;
                let (xx, yy) = if horizontal {
                    ((x as isize + o).clamp(0, w as isize - 1) as usize, y)
                } else {
                    (x, (y as isize + o).clamp(0, h as isize - 1) as usize)
                };
                acc += kv * src[yy * w + xx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// White noise smoothed more laterally than axially, rescaled to unit
/// variance: speckle grains are elongated along x.
fn streaked_field(white: &[f64], w: usize, h: usize) -> Vec<f64> {
    let a = blur_1d(white, w, h, &gaussian_kernel(SPECKLE_SIGMA_X), true);
    let b = blur_1d(&a, w, h, &gaussian_kernel(SPECKLE_SIGMA_Y), false);
    let n = b.len() as f64;
    let mean = b.iter().sum::<f64>() / n;
    let sd = (b.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(1e-12);
    b.into_iter().map(|v| (v - mean) / sd).collect()
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:04}")
}

pub fn render_video(cfg: &SynthConfig, index: usize) -> Result<SynthVideo> {
    cfg.validate()?;
    let templates = class_templates(cfg);
    Ok(render_with_templates(cfg, &templates, index))
}

fn render_with_templates(cfg: &SynthConfig, templates: &[Vec<EllipseSpec>], index: usize) -> SynthVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let (w, h) = (cfg.width, cfg.height);
    let n = cfg.frames_per_video;
    let size = w.min(h) as f64;
    let class = index % cfg.num_classes;
    let template = &templates[class];

    let centre0 = [
        (w as f64 - 1.0) / 2.0 + rng.gen_range(-0.04..0.04) * size,
        (h as f64 - 1.0) / 2.0 + rng.gen_range(-0.04..0.04) * size,
    ];
    let heading = rng.gen_range(0.0..2.0 * PI);
    let velocity = [
        cfg.motion_amplitude * heading.cos(),
        cfg.motion_amplitude * heading.sin(),
    ];
    let psi0 = rng.gen_range(-0.35..0.35);
    let spin = rng.gen_range(0.001..0.003) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let scale = rng.gen_range(0.9..1.1);
    let period = rng.gen_range(80.0..160.0);
    let phases: Vec<f64> = (0..template.len()).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let mid = (n as f64 - 1.0) / 2.0;
    let drift = |t: usize| [velocity[0] * (t as f64 - mid), velocity[1] * (t as f64 - mid)];

    // speckle texture, anchored to the tissue and large enough for the whole drift
    let margin = (cfg.motion_amplitude * n as f64 / 2.0).ceil() as usize + 2;
    let tw = w + 2 * margin;
    let th = h + 2 * margin;
    let white: Vec<f64> = (0..tw * th).map(|_| rng.sample(StandardNormal)).collect();
    let texture: Vec<f64> = streaked_field(&white, tw, th)
        .into_iter()
        .map(|z| (1.0 + cfg.speckle * z).max(0.0))
        .collect();
    let sample_texture = |x: f64, y: f64| -> f64 {
        let x = x.clamp(0.0, (tw - 1) as f64);
        let y = y.clamp(0.0, (th - 1) as f64);
        let x0 = (x.floor() as usize).min(tw - 2);
        let y0 = (y.floor() as usize).min(th - 2);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let t = |xx: usize, yy: usize| texture[yy * tw + xx];
        (1.0 - fy) * ((1.0 - fx) * t(x0, y0) + fx * t(x0 + 1, y0))
            + fy * ((1.0 - fx) * t(x0, y0 + 1) + fx * t(x0 + 1, y0 + 1))
    };

    let mask = cfg.fan_mask.then(|| fan_mask(w, h));
    let mut frames = Vec::with_capacity(n * w * h);
    let mut fixations = Vec::with_capacity(n);
    let mut target_centres = Vec::with_capacity(n);

    for t in 0..n {
        let d = drift(t);
        let centre = [centre0[0] + d[0], centre0[1] + d[1]];
        let psi = psi0 + spin * t as f64;
        let (sp, cp) = psi.sin_cos();
        let ellipses: Vec<(f64, f64, f64, f64, f64, f64, f64)> = template
            .iter()
            .zip(&phases)
            .map(|(e, ph)| {
                let breathe = 1.0 + 0.06 * (2.0 * PI * t as f64 / period + ph).sin();
                let ex = centre[0] + scale * (cp * e.dx - sp * e.dy);
                let ey = centre[1] + scale * (sp * e.dx + cp * e.dy);
                let (so, co) = (e.theta + psi).sin_cos();
                (ex, ey, scale * e.a * breathe, scale * e.b / breathe, so, co, e.brightness)
            })
            .collect();
        target_centres.push([ellipses[0].0, ellipses[0].1]);

        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if let Some(m) = &mask {
                    if !m[idx] {
                        frames.push(0u8);
                        continue;
                    }
                }
                let mut v = BACKGROUND;
                for &(ex, ey, a, b, so, co, bright) in &ellipses {
                    let px = x as f64 - ex;
                    let py = y as f64 - ey;
                    let u = co * px + so * py;
                    let q = -so * px + co * py;
                    let r = ((u / a).powi(2) + (q / b).powi(2)).sqrt();
                    v += bright / (1.0 + ((r - 1.0) * EDGE_SHARPNESS).exp());
                }
                let speckle = sample_texture(x as f64 - d[0] + margin as f64, y as f64 - d[1] + margin as f64);
                let noise: f64 = rng.sample(StandardNormal);
                let v = (v.min(1.0) * speckle + ACQUISITION_NOISE * noise).clamp(0.0, 1.0);
                frames.push((v * 255.0).round() as u8);
            }
        }

        let jitter = FIXATION_JITTER * size;
        let points = (0..cfg.fixations_per_frame)
            .map(|_| {
                let zx: f64 = rng.sample(StandardNormal);
                let zy: f64 = rng.sample(StandardNormal);
                [
                    (ellipses[0].0 + jitter * zx).clamp(0.0, (w - 1) as f64),
                    (ellipses[0].1 + jitter * zy).clamp(0.0, (h - 1) as f64),
                ]
            })
            .collect();
        fixations.push(points);
    }

    SynthVideo {
        id: video_id(index),
        plane_class: class as u32,
        frames,
        fixations,
        target_centres,
    }
}

/// Writes a synthetic store to `out` and returns it, validated.
pub fn gen_synth(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<VideoStore> {
    cfg.validate()?;
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let templates = class_templates(cfg);
    let entries = (0..cfg.num_videos)
        .into_par_iter()
        .map(|i| {
            let video = render_with_templates(cfg, &templates, i);
            let dir = out.join(&video.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let n = cfg.width * cfg.height;
            for t in 0..cfg.frames_per_video {
                write_gray_png(
                    &frame_path(out, &video.id, t),
                    cfg.width,
                    cfg.height,
                    &video.frames[t * n..(t + 1) * n],
                )?;
            }
            Ok(VideoEntry {
                id: video.id,
                num_frames: cfg.frames_per_video,
                width: cfg.width,
                height: cfg.height,
                plane_class: Some(video.plane_class),
                fixations: Some(video.fixations),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(
        out,
        &Manifest {
            version: MANIFEST_VERSION,
            videos: entries,
        },
    )?;
    load_store(out)
}
