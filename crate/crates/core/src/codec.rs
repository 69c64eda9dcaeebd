//! Vector-quantized autoencoder mapping `[-1, 1]` images to `c x S/f x S/f`
//! latents and back.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng as _;
use texrect_tensor::{adam_step, AdamConfig, AdamState, Ctx, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Init};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    /// Spatial downsampling factor, a power of two.
    pub f: usize,
    /// Latent channels.
    pub c: usize,
    /// Codebook entries.
    pub k: usize,
    /// Channels after each stride-2 stage; `log2(f)` entries.
    pub hidden: Vec<usize>,
    pub res_blocks: usize,
    pub beta: f64,
    /// Steps without use after which a codebook entry is re-seeded.
    pub dead_after: u32,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { f: 4, c: 4, k: 512, hidden: vec![32, 64], res_blocks: 3, beta: 0.25, dead_after: 100 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.f.is_power_of_two() || self.f < 2 || 1usize << self.hidden.len() != self.f {
            return Err(Error::Config(format!(
                "codec f={} must be a power of two >= 2 with log2(f) hidden widths, got {:?}",
                self.f, self.hidden
            )));
        }
        if self.c == 0 || self.k < 2 || self.hidden.iter().any(|&h| h < 2) || self.beta < 0.0 {
            return Err(Error::Config(format!("invalid codec config {self:?}")));
        }
        Ok(())
    }

    pub fn latent_side(&self, size: usize) -> Result<usize> {
        if size == 0 || size % self.f != 0 {
            return Err(Error::Dimension(format!("image size {size} is not divisible by f={}", self.f)));
        }
        Ok(size / self.f)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(b: &mut Builder<'_>, name: &str, ch: usize) -> Self {
        b.scope(name, |b| ResBlock {
            conv1: Conv2d::new(b, "conv1", ch, (ch / 2).max(1), 3, 1, Init::He),
            conv2: Conv2d::new(b, "conv2", (ch / 2).max(1), ch, 1, 1, Init::Fan),
        })
    }

    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.conv1.forward(ctx, x.relu())?.relu();
        Ok(x.add(self.conv2.forward(ctx, h)?)?)
    }
}

/// Layer handles of the codec; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct CodecNet {
    pub cfg: CodecConfig,
    down: Vec<Conv2d>,
    enc_mid: Conv2d,
    enc_res: Vec<ResBlock>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_res: Vec<ResBlock>,
    up: Vec<Conv2d>,
    pub codebook: ParamId,
    pub latent_scale: ParamId,
}

impl CodecNet {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<(CodecNet, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, 10);
        let mut b = Builder::new(&mut store, &mut rng);
        let top = *cfg.hidden.last().expect("validated");
        let net = b.scope("codec", |b| {
            let mut prev = 3;
            let down = cfg
                .hidden
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let c = Conv2d::new(b, &format!("enc.down{i}"), prev, h, 3, 2, Init::He);
                    prev = h;
                    c
                })
                .collect();
            let enc_mid = Conv2d::new(b, "enc.mid", top, top, 3, 1, Init::He);
            let enc_res = (0..cfg.res_blocks).map(|i| ResBlock::new(b, &format!("enc.res{i}"), top)).collect();
            let enc_out = Conv2d::new(b, "enc.out", top, cfg.c, 1, 1, Init::Fan);
            let dec_in = Conv2d::new(b, "dec.in", cfg.c, top, 3, 1, Init::He);
            let dec_res = (0..cfg.res_blocks).map(|i| ResBlock::new(b, &format!("dec.res{i}"), top)).collect();
            let mut outs: Vec<usize> = cfg.hidden.iter().rev().skip(1).copied().collect();
            outs.push(3);
            let mut prev = top;
            let up = outs
                .iter()
                .enumerate()
                .map(|(i, &o)| {
                    let init = if o == 3 { Init::Fan } else { Init::He };
                    let c = Conv2d::new(b, &format!("dec.up{i}"), prev, o, 3, 1, init);
                    prev = o;
                    c
                })
                .collect();
            let bound = 1.0 / cfg.k as f32;
            let rng = b.rng();
            let book = Tensor::from_fn([cfg.k, cfg.c], |_| rng.random_range(-bound..=bound));
            CodecNet {
                codebook: b.constant("codebook", book),
                latent_scale: b.buffer("latent_scale", Tensor::scalar(1.0)),
                cfg: cfg.clone(),
                down,
                enc_mid,
                enc_res,
                enc_out,
                dec_in,
                dec_res,
                up,
            }
        });
        Ok((net, store))
    }

    /// Continuous encoder output before quantization, `N x c x h x w`.
    pub fn encode_pre<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] {
            return Err(Error::Dimension(format!("codec expects N x 3 x S x S images, got {s:?}")));
        }
        self.cfg.latent_side(s[2])?;
        let mut h = x;
        for c in &self.down {
            h = c.forward(ctx, h)?.relu();
        }
        h = self.enc_mid.forward(ctx, h)?;
        for r in &self.enc_res {
            h = r.forward(ctx, h)?;
        }
        self.enc_out.forward(ctx, h.relu())
    }

    pub fn decode_forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.cfg.c {
            return Err(Error::Dimension(format!("decoder expects N x {} x h x w latents, got {s:?}", self.cfg.c)));
        }
        let mut h = self.dec_in.forward(ctx, z)?;
        for r in &self.dec_res {
            h = r.forward(ctx, h)?;
        }
        h = h.relu();
        let last = self.up.len() - 1;
        for (i, c) in self.up.iter().enumerate() {
            h = c.forward(ctx, h.upsample2x()?)?;
            if i != last {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

/// Nearest codebook entry for every spatial vector of `z` (`N x c x h x w`).
/// Ties resolve to the lowest index. Returns indices in `(n, y, x)` order
/// and the quantized tensor.
pub fn quantize<T: Scalar>(codebook: &Tensor<T>, z: &Tensor<T>) -> (Vec<usize>, Tensor<T>) {
    let (k, c) = (codebook.shape()[0], codebook.shape()[1]);
    let s = z.shape();
    let (n, hw) = (s[0], s[2] * s[3]);
    assert_eq!(s[1], c, "latent channels vs codebook width");
    let book = codebook.data();
    let zd = z.data();
    let mut idx = Vec::with_capacity(n * hw);
    let mut out = vec![T::zero(); z.numel()];
    let mut v = vec![T::zero(); c];
    for b in 0..n {
        for p in 0..hw {
            for ch in 0..c {
                v[ch] = zd[(b * c + ch) * hw + p];
            }
            let mut best = (0, T::infinity());
            for e in 0..k {
                let row = &book[e * c..(e + 1) * c];
                let mut d = T::zero();
                for ch in 0..c {
                    let t = v[ch] - row[ch];
                    d = d + t * t;
                }
                if d < best.1 {
                    best = (e, d);
                }
            }
            idx.push(best.0);
            for ch in 0..c {
                out[(b * c + ch) * hw + p] = book[best.0 * c + ch];
            }
        }
    }
    (idx, Tensor::new(s, out).expect("quantized shape"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecLoss {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
}

/// Losses of one batch; the straight-through estimator carries the
/// reconstruction gradient past the quantizer.
pub fn codec_losses<'t, T: Scalar>(net: &CodecNet, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Vec<usize>, Arc<Tensor<T>>)> {
    let ze = net.encode_pre(ctx, x)?;
    let ze_val = ze.value();
    let (idx, zq_val) = quantize(ctx.value(net.codebook), &ze_val);
    let s = ze.shape();
    let zq = ctx
        .p(net.codebook)
        .gather_rows(&idx)?
        .reshape(&[s[0], s[2], s[3], s[1]])?
        .permute(&[0, 3, 1, 2])?;
    let cb = zq.mse(ze.detach())?;
    let commit = ze.mse(zq.detach())?.scale(net.cfg.beta);
    let rec = net.decode_forward(ctx, ze.straight_through(zq_val)?)?.mse(x)?;
    let total = rec.add(cb)?.add(commit)?;
    Ok((total, idx, ze_val))
}

/// A codec with its parameters and codebook usage counters.
#[derive(Clone, Debug)]
pub struct Codec {
    pub net: CodecNet,
    pub store: ParamStore<f32>,
    idle: Vec<u32>,
}

impl Codec {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Codec> {
        let (net, store) = CodecNet::new(cfg, seed)?;
        let idle = vec![0; net.cfg.k];
        Ok(Codec { net, store, idle })
    }

    pub fn from_parts(net: CodecNet, store: ParamStore<f32>) -> Codec {
        let idle = vec![0; net.cfg.k];
        Codec { net, store, idle }
    }

    pub fn cfg(&self) -> &CodecConfig {
        &self.net.cfg
    }

    pub fn idle_steps(&self) -> &[u32] {
        &self.idle
    }

    pub fn latent_scale(&self) -> f32 {
        self.store.get(self.net.latent_scale).item()
    }

    /// Quantized latents of `[-1, 1]` images (`N x 3 x S x S`), unscaled.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.store);
        let ze = self.net.encode_pre(&ctx, tape.constant(x.clone()))?;
        Ok(quantize(self.store.get(self.net.codebook), &ze.value()).1)
    }

    /// Images in `[-1, 1]` from unscaled latents.
    pub fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.store);
        let out = self.net.decode_forward(&ctx, tape.constant(z.clone()))?;
        Ok(out.value().map(|v| v.clamp(-1.0, 1.0)))
    }

    /// Latents multiplied by the calibrated scale, as seen by the diffusion model.
    pub fn encode_scaled(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = self.latent_scale();
        Ok(self.encode(x)?.map(|v| v * s))
    }

    pub fn decode_scaled(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = self.latent_scale();
        self.decode(&z.map(|v| v / s))
    }

    /// Set the latent scale to `1 / std` of the quantized latents of `x`.
    pub fn calibrate_scale(&mut self, x: &Tensor<f32>) -> Result<f32> {
        let z = self.encode(x)?;
        let n = z.numel() as f64;
        let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 1e-12 { (1.0 / var.sqrt()) as f32 } else { 1.0 };
        self.store.set(self.net.latent_scale, Tensor::scalar(scale))?;
        Ok(scale)
    }

    /// Update usage counters and re-seed entries idle for `dead_after` steps
    /// with encoder vectors drawn from the batch.
    fn refresh_codebook(&mut self, used: &[usize], ze: &Tensor<f32>, rng: &mut Rng) -> usize {
        for v in &mut self.idle {
            *v += 1;
        }
        for &i in used {
            self.idle[i] = 0;
        }
        let dead: Vec<usize> = (0..self.idle.len()).filter(|&i| self.idle[i] >= self.net.cfg.dead_after).collect();
        if dead.is_empty() {
            return 0;
        }
        let s = ze.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let count = s[0] * hw;
        let book = self.store.get_mut(self.net.codebook).data_mut();
        for &e in &dead {
            let j = rng.random_range(0..count);
            let (b, p) = (j / hw, j % hw);
            for ch in 0..c {
                book[e * c + ch] = ze.data()[(b * c + ch) * hw + p];
            }
            self.idle[e] = 0;
        }
        dead.len()
    }
}

#[derive(Clone, Debug)]
pub struct CodecTrainReport {
    /// Total loss per step.
    pub losses: Vec<f64>,
    pub recon: Vec<f64>,
    pub reseeded: usize,
}

/// Train on `[-1, 1]` images (`N x 3 x S x S`) with random mini-batches.
pub fn train_codec(
    codec: &mut Codec,
    images: &Tensor<f32>,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<CodecTrainReport> {
    let n = images.shape()[0];
    if n == 0 || batch == 0 {
        return Err(Error::Config("codec training needs a non-empty dataset and batch".into()));
    }
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        items.push(images.narrow0(i, 1)?.reshape(&images.shape()[1..])?);
    }
    let mut rng = stream(seed, 11);
    let mut adam = AdamState::new(&codec.store);
    let cfg = AdamConfig::with_lr(lr);
    let mut report = CodecTrainReport { losses: Vec::with_capacity(steps), recon: Vec::with_capacity(steps), reseeded: 0 };
    for step in 0..steps {
        let picks: Vec<usize> = if batch >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, batch).into_vec()
        };
        let x = Tensor::stack(&picks.iter().map(|&i| items[i].clone()).collect::<Vec<_>>())?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &codec.store, true, true);
        let (loss, idx, ze) = codec_losses(&codec.net, &ctx, tape.constant(x.clone()))?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged(format!("codec loss {value} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let g = ctx.grads(&grads);
        adam_step(&mut codec.store, &g, &mut adam, &cfg);
        report.reseeded += codec.refresh_codebook(&idx, &ze, &mut rng);
        report.losses.push(value);
        on_step(step, value);
    }
    // Reconstruction-only MSE on the whole set after training.
    let rec = codec.decode(&codec.encode(images)?)?;
    let mse = rec.data().iter().zip(images.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / images.numel() as f64;
    report.recon.push(mse);
    Ok(report)
}

/// Mean squared reconstruction error of `decode(encode(x))`.
pub fn reconstruction_mse(codec: &Codec, x: &Tensor<f32>) -> Result<f64> {
    let rec = codec.decode(&codec.encode(x)?)?;
    Ok(rec.data().iter().zip(x.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CodecConfig {
        CodecConfig { f: 2, c: 2, k: 8, hidden: vec![4], res_blocks: 1, beta: 0.25, dead_after: 3 }
    }

    #[test]
    fn desk_codec_maps_64_to_4x16x16() {
        let codec = Codec::new(CodecConfig::default(), 0).unwrap();
        let x = Tensor::from_fn([1, 3, 64, 64], |i| ((i % 7) as f32 / 3.5) - 1.0);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.shape(), &[1, 4, 16, 16]);
        let y = codec.decode(&z).unwrap();
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(codec.encode(&x).unwrap(), z);
    }

    #[test]
    fn indivisible_sizes_are_dimension_errors() {
        let codec = Codec::new(CodecConfig::default(), 0).unwrap();
        assert!(matches!(codec.encode(&Tensor::zeros([1, 3, 30, 30])), Err(Error::Dimension(_))));
        assert!(codec.decode(&Tensor::zeros([1, 3, 16, 16])).is_err());
    }

    #[test]
    fn quantization_is_idempotent_and_picks_nearest() {
        let book = Tensor::new([3, 2], vec![0.0f32, 0.0, 1.0, 1.0, -1.0, 0.5]).unwrap();
        let z = Tensor::new([1, 2, 1, 3], vec![0.9f32, 0.1, -0.8, 0.8, -0.1, 0.6]).unwrap();
        let (idx, q) = quantize(&book, &z);
        assert_eq!(idx, vec![1, 0, 2]);
        let (idx2, q2) = quantize(&book, &q);
        assert_eq!((idx2, q2), (idx, q));
    }

    #[test]
    fn straight_through_reaches_the_encoder() {
        let codec = Codec::new(tiny(), 1).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &codec.store, true, true);
        let x = tape.constant(Tensor::from_fn([2, 3, 8, 8], |i| ((i * 37 % 11) as f32 / 5.5) - 1.0));
        let (loss, _, _) = codec_losses(&codec.net, &ctx, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = ctx.grads(&grads);
        let w = codec.store.find("codec.enc.down0.w").unwrap();
        let gw = g[w.index()].as_ref().unwrap();
        assert!(gw.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn idle_entries_are_reseeded_from_encoder_vectors() {
        let mut codec = Codec::new(tiny(), 2).unwrap();
        let x = Tensor::from_fn([2, 3, 8, 8], |i| ((i * 13 % 17) as f32 / 8.5) - 1.0);
        let report = train_codec(&mut codec, &x, 4, 2, 1e-3, 0, |_, _| {}).unwrap();
        assert!(report.reseeded > 0);
        assert!(codec.idle_steps().iter().all(|&v| v < 3));
    }

    #[test]
    fn codec_losses_match_finite_differences() {
        use crate::nn::check_model;
        use texrect_tensor::check::CheckOptions;
        let codec = Codec::new(tiny(), 3).unwrap();
        let store = codec.store.cast::<f64>();
        let x = Tensor::<f64>::from_fn([1, 3, 4, 4], |i| ((i * 7 % 5) as f64 / 2.5) - 1.0);
        // Reconstruction path only: the quantizer's argmin is piecewise constant.
        let report = check_model(&store, true, CheckOptions::default(), |ctx| {
            let ze = codec.net.encode_pre(ctx, ctx.tape().constant(x.clone()))?;
            Ok(codec.net.decode_forward(ctx, ze)?.mse(ctx.tape().constant(x.clone()))?)
        })
        .unwrap();
        report.assert_within(1e-4);
    }
}
