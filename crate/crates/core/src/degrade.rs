//! Synthetic degradation: homography, then TPS, then a free-form occlusion.

use image::RgbImage;
use rand::Rng as _;
use texrect_tensor::Tensor;

use crate::error::{Error, Result};
use crate::geometry::{sample_homography, sample_tps, warp_image, Transform};
use crate::imageio::{dims3, from_rgb, resize};
use crate::mask::{free_form_mask, Mask, MaskParams};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct DegradeConfig {
    pub p_hmg: f64,
    pub s_hmg: (f64, f64),
    pub p_tps: f64,
    pub s_tps: (f64, f64),
    pub tps_grid: usize,
    pub mask: MaskParams,
    /// Samples below this valid fraction are redrawn.
    pub min_valid: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            p_hmg: 0.8,
            s_hmg: (0.3, 0.5),
            p_tps: 0.8,
            s_tps: (0.1, 0.3),
            tps_grid: 4,
            mask: MaskParams::default(),
            min_valid: 0.05,
        }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |(a, b): (f64, f64)| 0.0 <= a && a <= b && b <= 1.0;
        if !(prob(self.p_hmg) && prob(self.p_tps) && range(self.s_hmg) && range(self.s_tps)) {
            return Err(Error::Config(format!("invalid degradation probabilities or scales: {self:?}")));
        }
        if self.tps_grid < 2 || !(0.0..1.0).contains(&self.min_valid) {
            return Err(Error::Config("tps_grid must be >= 2 and min_valid in [0, 1)".into()));
        }
        self.mask.validate()
    }
}

/// Everything needed to regenerate a degraded sample from its planar crop.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformRecord {
    pub seed: u64,
    pub s_hmg: f64,
    pub s_tps: f64,
    pub hmg_applied: bool,
    pub tps_applied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSample {
    pub degraded: Tensor<f32>,
    pub mask: Mask,
    pub source_id: String,
    pub record: TransformRecord,
}

/// Scale and on/off draws for one degradation attempt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draw {
    pub hmg: Option<f64>,
    pub tps: Option<f64>,
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Both scales are always drawn so the stream layout does not depend on
/// the coin flips.
pub fn sample_draw(cfg: &DegradeConfig, rng: &mut Rng) -> Draw {
    let use_h = rng.random_bool(cfg.p_hmg);
    let s_h = uniform(rng, cfg.s_hmg);
    let use_t = rng.random_bool(cfg.p_tps);
    let s_t = uniform(rng, cfg.s_tps);
    Draw { hmg: use_h.then_some(s_h), tps: use_t.then_some(s_t) }
}

const MAX_ATTEMPTS: usize = 16;

/// Degrade `planar` (`3 x H x W`, `[0, 1]`) with randomness from `stream(seed, 1)`.
pub fn degrade(planar: &Tensor<f32>, source_id: &str, cfg: &DegradeConfig, seed: u64) -> Result<MaskedSample> {
    cfg.validate()?;
    let [_, h, w] = dims3(planar)?;
    let mut rng = stream(seed, 1);
    for _ in 0..MAX_ATTEMPTS {
        let draw = sample_draw(cfg, &mut rng);
        let mut img = planar.clone();
        let mut valid = Mask::ones(h, w);
        if let Some(s) = draw.hmg {
            let t = Transform::Homography(sample_homography(s, &mut rng)?);
            (img, valid) = warp_image(&img, &t, Some(&valid))?;
        }
        if let Some(s) = draw.tps {
            let t = Transform::Tps(sample_tps(s, cfg.tps_grid, &mut rng)?);
            (img, valid) = warp_image(&img, &t, Some(&valid))?;
        }
        let occ = free_form_mask(h, w, &cfg.mask, &mut rng)?;
        let mask = valid.intersect(&occ.mask)?;
        if mask.valid_fraction() < cfg.min_valid {
            log::debug!("{source_id}: valid fraction {:.3} below guard, redrawing", mask.valid_fraction());
            continue;
        }
        return Ok(MaskedSample {
            degraded: mask.apply(&img)?,
            mask,
            source_id: source_id.to_string(),
            record: TransformRecord {
                seed,
                s_hmg: draw.hmg.unwrap_or(0.0),
                s_tps: draw.tps.unwrap_or(0.0),
                hmg_applied: draw.hmg.is_some(),
                tps_applied: draw.tps.is_some(),
            },
        });
    }
    Err(Error::Degenerate(format!("{source_id}: no sample above valid fraction {} in {MAX_ATTEMPTS} attempts", cfg.min_valid)))
}

pub fn regenerate(planar: &Tensor<f32>, source_id: &str, cfg: &DegradeConfig, record: &TransformRecord) -> Result<MaskedSample> {
    degrade(planar, source_id, cfg, record.seed)
}

/// Side length the shorter image side is resized to before cropping `size`.
pub fn resize_target(size: usize) -> usize {
    (size * 294).div_ceil(256)
}

/// Resize the shorter side to `resize_target(size)`, then crop `size x size`
/// at random (train) or in the center (eval).
pub fn crop_pipeline(img: &RgbImage, size: usize, train: bool, rng: &mut Rng) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w.min(h) < size || size == 0 {
        return Err(Error::Dimension(format!("image {w}x{h} is smaller than the {size}px crop")));
    }
    let target = resize_target(size);
    let (rw, rh) = if w <= h { (target, (h * target).div_ceil(w)) } else { ((w * target).div_ceil(h), target) };
    let resized = resize(img, rw as u32, rh as u32);
    let (x0, y0) = if train {
        (rng.random_range(0..=rw - size), rng.random_range(0..=rh - size))
    } else {
        ((rw - size) / 2, (rh - size) / 2)
    };
    let crop = image::imageops::crop_imm(&resized, x0 as u32, y0 as u32, size as u32, size as u32).to_image();
    Ok(from_rgb(&crop))
}
