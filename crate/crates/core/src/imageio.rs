//! Conversions between 8-bit RGB files and `3 x H x W` tensors in `[0, 1]`.

use std::path::Path;

use image::{ImageFormat, RgbImage};
use texrect_tensor::Tensor;

use crate::error::{Error, Result};

pub fn from_rgb(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data).expect("rgb buffer")
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let [c, h, w] = dims3(t)?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| quantize(d[(c * h + y as usize) * w + x as usize]);
        image::Rgb([at(0), at(1), at(2)])
    }))
}

pub fn dims3(t: &Tensor<f32>) -> Result<[usize; 3]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::Dimension(format!("expected C x H x W image, got {:?}", t.shape())))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(img.to_rgb8())
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    Ok(from_rgb(&load_rgb(path)?))
}

pub fn save_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    to_rgb(t)?.save_with_format(path, ImageFormat::Png).map_err(|e| Error::image(path, e))
}

/// `[0, 1]` to the symmetric `[-1, 1]` range used by the models.
pub fn to_signed(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v * 2.0 - 1.0)
}

pub fn to_unit(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Bilinear resize of an RGB image.
pub fn resize(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    image::imageops::resize(img, w, h, image::imageops::FilterType::Triangle)
}
