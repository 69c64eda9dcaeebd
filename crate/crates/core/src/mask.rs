//! Binary validity masks and free-form brush-stroke occlusions.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use rand::Rng as _;
use texrect_tensor::Tensor;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAX_DECODE_SIDE: u32 = 8192;

/// `H x W` binary mask: 1 = valid / observed, 0 = occluded / invalid.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("h", &self.h)
            .field("w", &self.w)
            .field("valid_fraction", &self.valid_fraction())
            .finish()
    }
}

impl Mask {
    pub fn ones(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![1; h * w] }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Dimension(format!("mask data length {} for {h}x{w}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(Mask { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, valid: bool) {
        self.data[y * self.w + x] = valid as u8;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.data.len().max(1) as f64
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::Dimension(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect();
        Ok(Mask { h: self.h, w: self.w, data })
    }

    /// `1 x H x W` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([1, self.h, self.w], self.data.iter().map(|&v| v as f32).collect()).expect("mask shape")
    }

    /// Zero every channel of a `C x H x W` image where the mask is 0.
    pub fn apply(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = img.shape();
        if s.len() != 3 || s[1] != self.h || s[2] != self.w {
            return Err(Error::Dimension(format!("image {s:?} does not match mask {}x{}", self.h, self.w)));
        }
        let hw = self.h * self.w;
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if self.data[i % hw] == 0 {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.w as u32, self.h as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Strict decode: every pixel must be exactly 0 or 255.
    pub fn from_gray(img: &GrayImage) -> Result<Mask> {
        let mut data = Vec::with_capacity(img.len());
        for p in img.pixels() {
            data.push(match p[0] {
                0 => 0,
                255 => 1,
                v => return Err(Error::Contract(format!("mask is not binary (found value {v})"))),
            });
        }
        Mask::from_data(img.height() as usize, img.width() as usize, data)
    }

    /// Decode an in-memory PNG. Sides above `MAX_DECODE_SIDE` are refused
    /// before any pixel buffer is allocated.
    pub fn decode_png(bytes: &[u8]) -> Result<Mask> {
        let mut limits = image::Limits::default();
        limits.max_image_width = Some(MAX_DECODE_SIDE);
        limits.max_image_height = Some(MAX_DECODE_SIDE);
        let mut reader = image::ImageReader::with_format(std::io::Cursor::new(bytes), ImageFormat::Png);
        reader.limits(limits);
        let img = reader.decode().map_err(|e| Error::image("<memory>", e))?;
        Mask::from_gray(&img.to_luma8())
    }

    pub fn load(path: &Path) -> Result<Mask> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        Mask::from_gray(&img.to_luma8())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray().save_with_format(path, ImageFormat::Png).map_err(|e| Error::image(path, e))
    }
}

/// Parameters of the brush-stroke occlusion generator. Widths are fractions
/// of the mask height.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskParams {
    pub stroke_count: (u32, u32),
    pub brush_width: (f64, f64),
    pub vertex_count: (u32, u32),
    pub valid_fraction: (f64, f64),
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            stroke_count: (1, 5),
            brush_width: (1.0 / 16.0, 1.0 / 6.0),
            vertex_count: (4, 12),
            valid_fraction: (0.35, 0.9),
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.stroke_count.0 <= self.stroke_count.1
            && self.vertex_count.0 >= 1
            && self.vertex_count.0 <= self.vertex_count.1
            && self.brush_width.0 > 0.0
            && self.brush_width.0 <= self.brush_width.1
            && 0.0 <= self.valid_fraction.0
            && self.valid_fraction.0 <= self.valid_fraction.1
            && self.valid_fraction.1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid mask parameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
struct Stroke {
    points: Vec<(f64, f64)>,
    radius: f64,
}

const MAX_TURN: f64 = 2.0 * PI / 5.0;

fn random_stroke(h: usize, w: usize, p: &MaskParams, shrink: f64, rng: &mut Rng) -> Stroke {
    let vertices = rng.random_range(p.vertex_count.0..=p.vertex_count.1);
    let width = rng.random_range(p.brush_width.0..=p.brush_width.1) * h as f64 * shrink;
    let max_len = (h.min(w) as f64 / 4.0 * shrink).max(1.0);
    let mut x = rng.random_range(0.0..w as f64);
    let mut y = rng.random_range(0.0..h as f64);
    let mut angle = rng.random_range(0.0..2.0 * PI);
    let mut points = vec![(x, y)];
    for _ in 0..vertices {
        angle += rng.random_range(-MAX_TURN..=MAX_TURN);
        let len = rng.random_range(max_len * 0.25..=max_len);
        x = (x + len * angle.cos()).clamp(0.0, w as f64 - 1.0);
        y = (y + len * angle.sin()).clamp(0.0, h as f64 - 1.0);
        points.push((x, y));
    }
    Stroke { points, radius: (width / 2.0).max(0.5) }
}

fn dist2_to_segment(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    (px - cx).powi(2) + (py - cy).powi(2)
}

/// Rasterise strokes as capsules (round caps and joins) onto an all-valid mask.
fn render(h: usize, w: usize, strokes: &[Stroke]) -> Mask {
    let mut m = Mask::ones(h, w);
    for s in strokes {
        let r2 = s.radius * s.radius;
        for seg in s.points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = (a.0.min(b.0) - s.radius).floor().max(0.0) as usize;
            let x1 = ((a.0.max(b.0) + s.radius).ceil() as usize).min(w - 1);
            let y0 = (a.1.min(b.1) - s.radius).floor().max(0.0) as usize;
            let y1 = ((a.1.max(b.1) + s.radius).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if dist2_to_segment(x as f64 + 0.5, y as f64 + 0.5, a, b) <= r2 {
                        m.set(y, x, false);
                    }
                }
            }
        }
    }
    m
}

/// Result of [`free_form_mask`]; `converged` is false when the target valid
/// fraction was not reached and the closest mask seen is returned instead.
#[derive(Clone, Debug)]
pub struct FreeFormMask {
    pub mask: Mask,
    pub converged: bool,
}

const MAX_ATTEMPTS: usize = 64;

/// Union of random polyline brush strokes, with strokes added or removed
/// until the valid fraction lands inside `params.valid_fraction`.
pub fn free_form_mask(h: usize, w: usize, params: &MaskParams, rng: &mut Rng) -> Result<FreeFormMask> {
    if h < 16 || w < 16 {
        return Err(Error::Dimension(format!("free-form masks need at least 16x16, got {h}x{w}")));
    }
    params.validate()?;
    if params.stroke_count.1 == 0 {
        return Ok(FreeFormMask { mask: Mask::ones(h, w), converged: true });
    }
    let (lo, hi) = params.valid_fraction;
    let n = rng.random_range(params.stroke_count.0..=params.stroke_count.1);
    let mut shrink = 1.0;
    let mut strokes: Vec<Stroke> = (0..n).map(|_| random_stroke(h, w, params, shrink, rng)).collect();
    let mut best: Option<(f64, Mask)> = None;
    for _ in 0..MAX_ATTEMPTS {
        let m = render(h, w, &strokes);
        let f = m.valid_fraction();
        if (lo..=hi).contains(&f) {
            return Ok(FreeFormMask { mask: m, converged: true });
        }
        let miss = if f > hi { f - hi } else { lo - f };
        if best.as_ref().is_none_or(|(d, _)| miss < *d) {
            best = Some((miss, m));
        }
        if f > hi {
            strokes.push(random_stroke(h, w, params, shrink, rng));
        } else {
            strokes.pop();
            shrink *= 0.7;
        }
    }
    let (_, mask) = best.expect("at least one attempt");
    log::warn!("free-form mask did not reach valid fraction [{lo}, {hi}]; using {:.3}", mask.valid_fraction());
    Ok(FreeFormMask { mask, converged: false })
}
