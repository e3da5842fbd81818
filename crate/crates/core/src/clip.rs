use crate::error::{Error, Result};

/// An ordered stack of `k` grayscale frames, each `h x w`, pixels in `[0, 1]`.
///
/// Frames are stored contiguously in frame-major, row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Vec<f32>,
    k: usize,
    h: usize,
    w: usize,
    pub source_id: String,
    /// Index of the first frame in the downsampled frame stream.
    pub start_index: usize,
}

impl VideoClip {
    pub fn new(frames: Vec<f32>, k: usize, h: usize, w: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("clip needs at least 2 frames, got {k}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("clip frames must be non-empty"));
        }
        if frames.len() != k * h * w {
            return Err(Error::invalid(format!(
                "clip buffer has {} values, expected {k}x{h}x{w}",
                frames.len()
            )));
        }
        if let Some(v) = frames.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            frames,
            k,
            h,
            w,
            source_id: String::new(),
            start_index: 0,
        })
    }

    /// Builds a clip from already-validated data produced inside the crate.
    pub(crate) fn from_parts(frames: Vec<f32>, k: usize, h: usize, w: usize) -> Self {
        debug_assert_eq!(frames.len(), k * h * w);
        Self {
            frames,
            k,
            h,
            w,
            source_id: String::new(),
            start_index: 0,
        }
    }

    pub fn with_source(mut self, source_id: impl Into<String>, start_index: usize) -> Self {
        self.source_id = source_id.into();
        self.start_index = start_index;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.frames[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.frames
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.frames
    }

    pub fn same_shape(&self, other: &VideoClip) -> bool {
        self.k == other.k && self.h == other.h && self.w == other.w
    }

    /// Replaces pixel data, keeping shape and provenance.
    pub(crate) fn with_pixels(&self, frames: Vec<f32>) -> Self {
        debug_assert_eq!(frames.len(), self.frames.len());
        Self {
            frames,
            k: self.k,
            h: self.h,
            w: self.w,
            source_id: self.source_id.clone(),
            start_index: self.start_index,
        }
    }

    /// Builds a `k`-frame clip by repeating a single frame, the input layout
    /// used for single-frame downstream tasks.
    pub fn replicate_frame(frame: &[f32], k: usize, h: usize, w: usize) -> Result<Self> {
        if frame.len() != h * w {
            return Err(Error::invalid(format!(
                "frame has {} pixels, expected {h}x{w}",
                frame.len()
            )));
        }
        let mut frames = Vec::with_capacity(k * h * w);
        for _ in 0..k {
            frames.extend_from_slice(frame);
        }
        Self::new(frames, k, h, w)
    }
}
