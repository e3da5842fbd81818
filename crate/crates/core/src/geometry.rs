//! Affine transforms applied to whole clips.
//!
//! A transform is parameterized by translation (fraction of the frame size),
//! log scale per axis, rotation (radians) and x-shear, composed about the
//! frame centre as `T(c) · T(t) · R · Sh · S · T(-c)`. The matrix returned by
//! [`params_to_matrix`] is the forward map: content at input pixel `x`
//! appears at output pixel `M·x`. Warping samples the input at `M⁻¹·y`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::error::{Error, Result};

pub const PARAM_NAMES: [&str; 6] = ["tx", "ty", "log_sx", "log_sy", "rot", "shear"];

/// Bound on `|log_s|` for inversion; beyond it the matrix is numerically singular.
const MAX_ABS_LOG_SCALE: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineParams {
    pub tx: f64,
    pub ty: f64,
    pub log_sx: f64,
    pub log_sy: f64,
    pub rot: f64,
    pub shear: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            tx,
            ty,
            ..Self::default()
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.tx, self.ty, self.log_sx, self.log_sy, self.rot, self.shear]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            tx: v[0],
            ty: v[1],
            log_sx: v[2],
            log_sy: v[3],
            rot: v[4],
            shear: v[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Symmetric sampling ranges (half-widths) for each parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSpace {
    pub translation: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub shear: f64,
}

impl Default for TransformSpace {
    fn default() -> Self {
        Self {
            translation: 0.10,
            log_scale: 1.25f64.ln(),
            rotation: 15f64.to_radians(),
            shear: 0.10,
        }
    }
}

impl TransformSpace {
    pub fn new(translation: f64, log_scale: f64, rotation: f64, shear: f64) -> Result<Self> {
        let space = Self {
            translation,
            log_scale,
            rotation,
            shear,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("translation", self.translation),
            ("log_scale", self.log_scale),
            ("rotation", self.rotation),
            ("shear", self.shear),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!(
                    "transform range half-width {name}={v} must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Half-width for each component, in [`PARAM_NAMES`] order.
    pub fn half_widths(&self) -> [f64; 6] {
        [
            self.translation,
            self.translation,
            self.log_scale,
            self.log_scale,
            self.rotation,
            self.shear,
        ]
    }
}

/// Regression target: every parameter divided by its range half-width.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizedParams(pub [f64; 6]);

impl NormalizedParams {
    pub fn as_array(&self) -> &[f64; 6] {
        &self.0
    }
}

pub fn sample_transform<R: Rng + ?Sized>(space: &TransformSpace, rng: &mut R) -> AffineParams {
    let h = space.half_widths();
    let mut v = [0.0; 6];
    for (out, w) in v.iter_mut().zip(h) {
        *out = rng.gen_range(-w..=w);
    }
    AffineParams::from_array(v)
}

pub fn normalize(p: &AffineParams, space: &TransformSpace) -> Result<NormalizedParams> {
    let mut out = [0.0; 6];
    for (i, (v, w)) in p.to_array().into_iter().zip(space.half_widths()).enumerate() {
        if !v.is_finite() || v.abs() > w {
            return Err(Error::invalid(format!(
                "{}={v} outside transform range [-{w}, {w}]",
                PARAM_NAMES[i]
            )));
        }
        out[i] = v / w;
    }
    Ok(NormalizedParams(out))
}

pub fn denormalize(n: &NormalizedParams, space: &TransformSpace) -> Result<AffineParams> {
    let mut out = [0.0; 6];
    for (i, (v, w)) in n.0.into_iter().zip(space.half_widths()).enumerate() {
        if !v.is_finite() || v.abs() > 1.0 {
            return Err(Error::invalid(format!(
                "normalized {}={v} outside [-1, 1]",
                PARAM_NAMES[i]
            )));
        }
        out[i] = v * w;
    }
    Ok(AffineParams::from_array(out))
}

/// 2x3 affine matrix `[[a, b, tx], [c, d, ty]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix(pub [[f64; 3]; 2]);

impl AffineMatrix {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    fn homogeneous(&self) -> [[f64; 3]; 3] {
        [self.0[0], self.0[1], [0.0, 0.0, 1.0]]
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    pub fn determinant(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(Error::invalid("singular affine matrix"));
        }
        let [[a, b, e], [c, d, f]] = self.0;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(Self([
            [ia, ib, -(ia * e + ib * f)],
            [ic, id, -(ic * e + id * f)],
        ]))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m: f64 = 0.0;
        for r in 0..2 {
            for c in 0..3 {
                m = m.max((self.0[r][c] - other.0[r][c]).abs());
            }
        }
        m
    }
}

/// Homogeneous product `a · b`, truncated to 2x3.
pub fn compose(a: &AffineMatrix, b: &AffineMatrix) -> AffineMatrix {
    let ha = a.homogeneous();
    let hb = b.homogeneous();
    let mut out = [[0.0; 3]; 2];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|i| ha[r][i] * hb[i][c]).sum();
        }
    }
    AffineMatrix(out)
}

fn centre(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// Linear part `R(rot) · Sh(shear) · S(sx, sy)`.
fn linear_part(p: &AffineParams) -> [[f64; 2]; 2] {
    let (s, c) = p.rot.sin_cos();
    let sx = p.log_sx.exp();
    let sy = p.log_sy.exp();
    // Sh · S = [[sx, shear * sy], [0, sy]]
    let u = [[sx, p.shear * sy], [0.0, sy]];
    [
        [c * u[0][0] - s * u[1][0], c * u[0][1] - s * u[1][1]],
        [s * u[0][0] + c * u[1][0], s * u[0][1] + c * u[1][1]],
    ]
}

pub fn params_to_matrix(p: &AffineParams, width: usize, height: usize) -> AffineMatrix {
    let (cx, cy) = centre(width, height);
    let a = linear_part(p);
    let tx = p.tx * width as f64;
    let ty = p.ty * height as f64;
    // M(x) = c + t + A (x - c)
    AffineMatrix([
        [a[0][0], a[0][1], cx + tx - (a[0][0] * cx + a[0][1] * cy)],
        [a[1][0], a[1][1], cy + ty - (a[1][0] * cx + a[1][1] * cy)],
    ])
}

/// Parameters whose matrix is the inverse of `p`'s matrix on square frames.
pub fn invert(p: &AffineParams) -> Result<AffineParams> {
    invert_for_frame(p, 1, 1)
}

/// Parameters whose matrix is the inverse of `p`'s matrix on a
/// `width x height` frame. Translation is stored as a fraction of the frame
/// size, so the inverse depends on the aspect ratio when rotation or shear
/// mixes the axes.
///
/// The inverse linear part is factored back into rotation · shear · scale
/// (a QR factorization with positive diagonal, always possible since the
/// determinant is positive).
pub fn invert_for_frame(p: &AffineParams, width: usize, height: usize) -> Result<AffineParams> {
    if !p.is_finite() {
        return Err(Error::invalid("affine parameters must be finite"));
    }
    if p.log_sx.abs() > MAX_ABS_LOG_SCALE || p.log_sy.abs() > MAX_ABS_LOG_SCALE {
        return Err(Error::invalid(format!(
            "log scale ({}, {}) exceeds +/-{MAX_ABS_LOG_SCALE}; inversion would be singular",
            p.log_sx, p.log_sy
        )));
    }
    let a = linear_part(p);
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let sx = (inv[0][0] * inv[0][0] + inv[1][0] * inv[1][0]).sqrt();
    let rot = inv[1][0].atan2(inv[0][0]);
    let (s, c) = rot.sin_cos();
    // U = Rᵀ · inv = [[sx, h], [0, sy]]
    let h = c * inv[0][1] + s * inv[1][1];
    let sy = -s * inv[0][1] + c * inv[1][1];
    // translation t' = -A⁻¹ t, in pixels
    let (w, hgt) = (width as f64, height as f64);
    let t = [p.tx * w, p.ty * hgt];
    let tx = -(inv[0][0] * t[0] + inv[0][1] * t[1]) / w;
    let ty = -(inv[1][0] * t[0] + inv[1][1] * t[1]) / hgt;
    Ok(AffineParams {
        tx,
        ty,
        log_sx: sx.ln(),
        log_sy: sy.ln(),
        rot,
        shear: h / sy,
    })
}

/// Bilinear sample with zero outside the frame.
#[inline]
fn sample_bilinear(frame: &[f32], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let xi = x0 as i64;
    let yi = y0 as i64;
    let px = |xx: i64, yy: i64| -> f64 {
        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
            0.0
        } else {
            frame[yy as usize * w + xx as usize] as f64
        }
    };
    let top = (1.0 - fx) * px(xi, yi) + fx * px(xi + 1, yi);
    let bottom = (1.0 - fx) * px(xi, yi + 1) + fx * px(xi + 1, yi + 1);
    (1.0 - fy) * top + fy * bottom
}

/// Applies one transform to every frame of the clip (inverse warping,
/// bilinear interpolation, zero fill).
pub fn warp_clip(clip: &VideoClip, p: &AffineParams) -> Result<VideoClip> {
    let (w, h) = (clip.width(), clip.height());
    let inv = params_to_matrix(p, w, h).inverse()?;
    let mut out = vec![0f32; clip.pixels().len()];
    for t in 0..clip.k() {
        let src = clip.frame(t);
        let dst = &mut out[t * w * h..(t + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inv.apply(x as f64, y as f64);
                let v = sample_bilinear(src, w, h, sx, sy);
                dst[y * w + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(clip.with_pixels(out))
}
