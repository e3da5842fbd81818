//! Dataset access, clip extraction, augmentation and synthetic data.

mod augment;
mod store;
mod synth;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::clip::VideoClip;
use crate::error::{Error, Result};

pub use augment::{apply_augment, augment, AugmentDraw, AugmentPolicy, CropWindow};
pub use store::{
    frame_file_name, frame_path, load_store, read_gray_png, split_videos, write_gray_png,
    write_manifest, FrameBank, Manifest, Split, VideoEntry, VideoFrames, VideoStore,
    MANIFEST_FILE, MANIFEST_VERSION,
};
pub use synth::{fan_mask, gen_synth, render_video, SynthConfig, SynthVideo};

/// How clips are cut from a video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipParams {
    pub downsample_rate: usize,
    pub k: usize,
    pub crop_fraction: f64,
    /// Side of the square network input, in pixels.
    pub input_size: usize,
}

impl Default for ClipParams {
    fn default() -> Self {
        Self {
            downsample_rate: 8,
            k: 4,
            crop_fraction: 0.8,
            input_size: 64,
        }
    }
}

impl ClipParams {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_rate == 0 {
            return Err(Error::invalid("downsample rate must be at least 1"));
        }
        if self.k < 2 {
            return Err(Error::invalid(format!("clip length k={} must be at least 2", self.k)));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "crop fraction {} outside (0, 1]",
                self.crop_fraction
            )));
        }
        if self.input_size < 2 {
            return Err(Error::invalid("input size must be at least 2"));
        }
        Ok(())
    }

    /// Raw frames a video needs to yield one clip.
    pub fn min_frames(&self) -> usize {
        self.downsample_rate * (self.k - 1) + 1
    }

    /// Raw frame indices of the clip starting at `start`.
    pub fn frame_indices(&self, start: usize) -> Vec<usize> {
        (0..self.k).map(|i| start + i * self.downsample_rate).collect()
    }
}

/// Square centre crop window `(x0, y0, side)` in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CentreCrop {
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
}

impl CentreCrop {
    pub fn new(width: usize, height: usize, fraction: f64) -> Self {
        let side = ((fraction * width.min(height) as f64).round() as usize).clamp(1, width.min(height));
        Self {
            x0: (width - side) / 2,
            y0: (height - side) / 2,
            side,
        }
    }

    /// Maps a source pixel position into the `out_size` network input frame.
    pub fn map_point(&self, x: f64, y: f64, out_size: usize) -> (f64, f64) {
        let s = out_size as f64 / self.side as f64;
        (
            (x + 0.5 - self.x0 as f64) * s - 0.5,
            (y + 0.5 - self.y0 as f64) * s - 0.5,
        )
    }
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    let sx = sw as f64 / dw as f64;
    let sy = sh as f64 / dh as f64;
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let p = |xx: usize, yy: usize| src[yy * sw + xx] as f64;
            let v = (1.0 - wy) * ((1.0 - wx) * p(x0, y0) + wx * p(x1, y0))
                + wy * ((1.0 - wx) * p(x0, y1) + wx * p(x1, y1));
            out.push(v as f32);
        }
    }
    out
}

/// Centre-crops one 8-bit frame and resizes it to the network input size.
pub fn crop_frame(video: &VideoFrames, index: usize, params: &ClipParams) -> Vec<f32> {
    let crop = CentreCrop::new(video.width, video.height, params.crop_fraction);
    let raw = video.frame(index);
    let mut cropped = Vec::with_capacity(crop.side * crop.side);
    for y in crop.y0..crop.y0 + crop.side {
        let row = &raw[y * video.width + crop.x0..y * video.width + crop.x0 + crop.side];
        cropped.extend(row.iter().map(|&v| v as f32 / 255.0));
    }
    resize_bilinear(&cropped, crop.side, crop.side, params.input_size, params.input_size)
}

/// Cuts the clip whose first raw frame is `start`.
pub fn extract_clip(video: &VideoFrames, start: usize, params: &ClipParams) -> Result<VideoClip> {
    params.validate()?;
    if start + params.min_frames() > video.num_frames {
        return Err(Error::invalid(format!(
            "{}: clip at start {start} needs {} frames (minimum video length {}), video has {}",
            video.id,
            start + params.min_frames(),
            params.min_frames(),
            video.num_frames
        )));
    }
    let n = params.input_size;
    let mut frames = Vec::with_capacity(params.k * n * n);
    for idx in params.frame_indices(start) {
        frames.extend(crop_frame(video, idx, params));
    }
    Ok(VideoClip::from_parts(frames, params.k, n, n).with_source(video.id.clone(), start))
}

/// Samples a clip from a uniformly chosen video among `videos`, starting at a
/// uniformly chosen valid frame.
pub fn sample_clip<R: Rng + ?Sized>(
    bank: &FrameBank,
    videos: &[usize],
    params: &ClipParams,
    rng: &mut R,
) -> Result<VideoClip> {
    if videos.is_empty() {
        return Err(Error::invalid("cannot sample a clip from an empty video set"));
    }
    let video = &bank.videos[videos[rng.gen_range(0..videos.len())]];
    if video.num_frames < params.min_frames() {
        return Err(Error::invalid(format!(
            "{} has {} frames; minimum length is {}",
            video.id,
            video.num_frames,
            params.min_frames()
        )));
    }
    let start = rng.gen_range(0..=video.num_frames - params.min_frames());
    extract_clip(video, start, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_video(frames: usize, w: usize, h: usize) -> VideoFrames {
        let entry = VideoEntry {
            id: "v".into(),
            num_frames: frames,
            width: w,
            height: h,
            plane_class: None,
            fixations: None,
        };
        let mut pixels = Vec::new();
        for t in 0..frames {
            pixels.extend(std::iter::repeat(t as u8).take(w * h));
        }
        VideoFrames::new(&entry, pixels).unwrap()
    }

    #[test]
    fn clip_frame_indices() {
        let p = ClipParams {
            downsample_rate: 1,
            ..ClipParams::default()
        };
        assert_eq!(p.frame_indices(0), vec![0, 1, 2, 3]);
        assert_eq!(ClipParams::default().frame_indices(5), vec![5, 13, 21, 29]);
    }

    #[test]
    fn extract_uses_stride() {
        let video = ramp_video(40, 10, 10);
        let params = ClipParams {
            input_size: 8,
            ..ClipParams::default()
        };
        let clip = extract_clip(&video, 5, &params).unwrap();
        let tags: Vec<u8> = (0..4).map(|i| (clip.frame(i)[0] * 255.0).round() as u8).collect();
        assert_eq!(tags, vec![5, 13, 21, 29]);
        assert_eq!(clip.start_index, 5);
        let err = extract_clip(&video, 16, &params).unwrap_err().to_string();
        assert!(err.contains("minimum video length 25"), "{err}");
    }

    #[test]
    fn centre_crop_arithmetic() {
        let crop = CentreCrop::new(200, 200, 0.8);
        assert_eq!(crop, CentreCrop { x0: 20, y0: 20, side: 160 });
        // window centre
        assert_eq!(crop.x0 as f64 + crop.side as f64 / 2.0, 100.0);
        let (x, y) = crop.map_point(20.0, 179.0, 160);
        assert_eq!((x, y), (0.0, 159.0));
    }

    #[test]
    fn short_video_rejected() {
        let bank = FrameBank {
            videos: vec![ramp_video(20, 8, 8)],
        };
        let mut rng = rand::thread_rng();
        let err = sample_clip(&bank, &[0], &ClipParams::default(), &mut rng)
            .unwrap_err()
            .to_string();
        assert!(err.contains("minimum length is 25"), "{err}");
        assert!(sample_clip(&bank, &[], &ClipParams::default(), &mut rng).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let src: Vec<f32> = (0..16).map(|v| v as f32 / 16.0).collect();
        assert_eq!(resize_bilinear(&src, 4, 4, 4, 4), src);
        let flat = vec![0.3f32; 25];
        for v in resize_bilinear(&flat, 5, 5, 9, 7) {
            assert!((v - 0.3).abs() < 1e-6);
        }
    }
}
