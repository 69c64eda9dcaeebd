//! Image quality metrics: windowed SSIM and a Gram-matrix texture distance.

use std::fmt::Write as _;

use texrect_tensor::{Ctx, ParamStore, Scalar, Tape, Tensor};

use crate::error::{Error, Result};
use crate::imageio::dims3;
use crate::nn::{Builder, Conv2d, Init};
use crate::rng::stream;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" Gaussian filter of an `h x w` plane.
fn blur(plane: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows and channels of two
/// `C x H x W` images in `[0, 1]`.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("ssim of {:?} and {:?}", a.shape(), b.shape())));
    }
    let [c, h, w] = dims3(a)?;
    if h < WINDOW || w < WINDOW {
        return Err(Error::Dimension(format!("ssim needs at least {WINDOW}x{WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_kernel();
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data()[ch * hw..(ch + 1) * hw].iter().map(|&v| v as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mu_a = blur(&pa, h, w, &k);
        let mu_b = blur(&pb, h, w, &k);
        let e_aa = blur(&prod(&pa, &pa), h, w, &k);
        let e_bb = blur(&prod(&pb, &pb), h, w, &k);
        let e_ab = blur(&prod(&pa, &pb), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Output channels and strides of the feature extractor's layers.
pub const GRAM_LAYERS: [(usize, usize); 4] = [(16, 1), (32, 2), (32, 1), (64, 2)];

/// Fixed, randomly initialised ReLU conv stack whose activations feed the
/// Gram matrices. Identified by its weight seed.
#[derive(Clone, Debug)]
pub struct GramExtractor {
    seed: u64,
    layers: Vec<Conv2d>,
    store: ParamStore<f64>,
}

/// Per-layer Gram matrices of one image, tagged with the extractor seed.
#[derive(Clone, Debug, PartialEq)]
pub struct GramSet {
    pub seed: u64,
    pub grams: Vec<Tensor<f64>>,
}

impl GramExtractor {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, 0);
        let mut b = Builder::new(&mut store, &mut rng);
        let mut prev = 3;
        let layers = GRAM_LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(c, s))| {
                let l = Conv2d::build(&mut b, &format!("gram.conv{i}"), prev, c, 3, s, Init::He, false);
                prev = c;
                l
            })
            .collect();
        GramExtractor { seed, layers, store: store.cast() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Gram matrices `F F^T / (C H W)` of every layer for a `3 x H x W`
    /// image in `[0, 1]`.
    pub fn grams(&self, img: &Tensor<f32>) -> Result<GramSet> {
        let [c, h, w] = dims3(img)?;
        if c != 3 {
            return Err(Error::Dimension(format!("gram extractor expects 3 channels, got {c}")));
        }
        let tape = Tape::<f64>::new();
        let ctx = Ctx::inference(&tape, &self.store);
        let x = Tensor::from_fn([1, 3, h, w], |i| img.data()[i] as f64 * 2.0 - 1.0);
        let mut f = tape.constant(x);
        let mut grams = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            f = layer.forward(&ctx, f)?.relu();
            let v = f.value();
            let s = v.shape();
            let (ch, n) = (s[1], s[2] * s[3]);
            let mut g = vec![0.0; ch * ch];
            f64::gemm(ch, n, ch, 1.0 / (ch * n) as f64, v.data(), false, v.data(), true, 0.0, &mut g);
            grams.push(Tensor::new([ch, ch], g)?);
        }
        Ok(GramSet { seed: self.seed, grams })
    }

    pub fn distance(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!("gram distance of {:?} and {:?}", a.shape(), b.shape())));
        }
        gram_set_distance(&self.grams(a)?, &self.grams(b)?)
    }
}

/// Sum over layers of the Frobenius norm of the Gram difference.
pub fn gram_set_distance(a: &GramSet, b: &GramSet) -> Result<f64> {
    if a.seed != b.seed || a.grams.len() != b.grams.len() {
        return Err(Error::Contract(format!("gram sets from different extractors ({} vs {})", a.seed, b.seed)));
    }
    let mut total = 0.0;
    for (ga, gb) in a.grams.iter().zip(&b.grams) {
        if ga.shape() != gb.shape() {
            return Err(Error::Dimension(format!("gram {:?} vs {:?}", ga.shape(), gb.shape())));
        }
        total += ga.data().iter().zip(gb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
    Ok(total)
}

pub fn gram_distance(a: &Tensor<f32>, b: &Tensor<f32>, extractor: &GramExtractor) -> Result<f64> {
    extractor.distance(a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub ssim: f64,
    pub gmd: f64,
}

/// Per-image metrics with their aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fingerprint: String,
    pub gmd_seed: u64,
    pub rows: Vec<EvalRow>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl EvalReport {
    pub fn ssim_stats(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.ssim).collect::<Vec<_>>())
    }

    pub fn gmd_stats(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.gmd).collect::<Vec<_>>())
    }

    /// CSV with `#` comment lines for provenance and aggregates.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# fingerprint {}", self.fingerprint);
        let _ = writeln!(s, "# gmd extractor: random conv4 (16,32,32,64 channels), weight seed {}", self.gmd_seed);
        s.push_str("id,ssim,gmd\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6}", r.id, r.ssim, r.gmd);
        }
        let (sm, ss) = self.ssim_stats();
        let (gm, gs) = self.gmd_stats();
        let _ = writeln!(s, "# count {}", self.rows.len());
        let _ = writeln!(s, "# ssim mean {sm:.6} std {ss:.6}");
        let _ = writeln!(s, "# gmd mean {gm:.6} std {gs:.6}");
        s
    }
}
