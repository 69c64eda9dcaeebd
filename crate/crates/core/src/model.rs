//! The conditional latent diffusion model: occlusion-aware transformer,
//! noise-predicting U-Net and the learned null conditions, with the training
//! objective and the guided DDIM sampler.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use texrect_tensor::{adam_step, AdamConfig, AdamState, Ctx, ParamId, ParamStore, Tape, Tensor, Var};

use crate::codec::Codec;
use crate::config::RunConfig;
use crate::dataset::Triplet;
use crate::denoiser::Denoiser;
use crate::diffusion::{ddim_sample, forward_diffuse, gaussian, Branch, SampleStats, SamplerConfig, Schedule};
use crate::error::{Error, Result};
use crate::imageio::{to_signed, to_unit};
use crate::mask::Mask;
use crate::nn::{mask_batch, Builder, Init};
use crate::rng::{stream, Rng};
use crate::transformer::LatentTransformer;

/// Conditioning and encoder variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Degraded latent concatenated to the input only.
    Concat,
    /// Transformer tokens through cross-attention only.
    Crossattn,
    /// Standard convolutions with self-attention.
    Sae,
    /// Partial convolutions without self-attention.
    Pce,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::Concat, Variant::Crossattn, Variant::Sae, Variant::Pce];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Concat => "concat",
            Variant::Crossattn => "crossattn",
            Variant::Sae => "sae",
            Variant::Pce => "pce",
        }
    }

    /// Set the switches this variant controls; everything else is kept.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        let (concat, cross, partial, attn) = match self {
            Variant::Full => (true, true, true, true),
            Variant::Concat => (true, false, true, true),
            Variant::Crossattn => (false, true, true, true),
            Variant::Sae => (true, true, false, true),
            Variant::Pce => (true, true, true, false),
        };
        c.denoiser.concat = concat;
        c.denoiser.crossattn = cross;
        c.transformer.partial = partial;
        c.transformer.attention = attn;
        c
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
            Error::Config(format!("unknown variant {s:?}; valid variants: {}", names.join(", ")))
        })
    }
}

/// Transformer, denoiser and null embeddings in one parameter store.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub transformer: Option<LatentTransformer>,
    pub denoiser: Denoiser,
    /// Replaces the degraded latent (`c x h x w`) when unconditioned.
    pub null_vq: Option<ParamId>,
    /// One token (`C_lt x 1`) repeated over every position when unconditioned.
    pub null_lt: Option<ParamId>,
    pub store: ParamStore<f32>,
    /// `(c, h, w)` of the latents.
    pub latent: [usize; 3],
    /// Token count of the transformer output.
    pub tokens: usize,
}

impl DiffusionModel {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let side = cfg.codec.latent_side(cfg.size)?;
        let latent = [cfg.codec.c, side, side];
        let (c_lt, d_lt) = cfg.transformer.out_shape(cfg.size)?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, 20);
        let mut b = Builder::new(&mut store, &mut rng);
        let cross = cfg.denoiser.crossattn;
        let transformer = if cross { Some(LatentTransformer::new(&mut b, "lt", cfg.transformer.clone())?) } else { None };
        let denoiser = Denoiser::new(&mut b, "unet", cfg.denoiser.clone())?;
        let null_vq = cfg.denoiser.concat.then(|| b.constant("null.vq", Tensor::zeros(latent)));
        // A zero token would stall against the zero-initialised output
        // projections: each one's gradient is proportional to the other.
        let null_lt = cross.then(|| b.weight("null.lt", &[c_lt, 1], 1, Init::Fan));
        Ok(DiffusionModel { transformer, denoiser, null_vq, null_lt, store, latent, tokens: d_lt })
    }

    fn null_vq_batch<'t>(&self, ctx: &Ctx<'t, f32>) -> Result<Var<'t, f32>> {
        let [c, h, w] = self.latent;
        Ok(ctx.p(self.null_vq.expect("concat model")).reshape(&[1, c, h, w])?)
    }

    fn null_lt_batch<'t>(&self, ctx: &Ctx<'t, f32>) -> Result<Var<'t, f32>> {
        let p = ctx.p(self.null_lt.expect("cross-attention model"));
        let c = p.shape()[0];
        Ok(Var::concat(&vec![p; self.tokens], 1)?.reshape(&[1, c, self.tokens])?)
    }

    /// Per item, the real condition or (where `drop[i]`) the null one.
    fn choose<'t>(&self, real: Var<'t, f32>, null: Var<'t, f32>, drop: &[bool]) -> Result<Var<'t, f32>> {
        if !drop.iter().any(|&d| d) {
            return Ok(real);
        }
        let parts = drop
            .iter()
            .enumerate()
            .map(|(i, &d)| if d { Ok(null) } else { real.narrow(0, i, 1) })
            .collect::<texrect_tensor::Result<Vec<_>>>()?;
        Ok(Var::concat(&parts, 0)?)
    }

    /// Predicted noise for a batch. `degraded` is signed and masked,
    /// `mask` is `N x 1 x S x S`.
    #[allow(clippy::too_many_arguments)]
    pub fn predict<'t>(
        &self,
        ctx: &Ctx<'t, f32>,
        z_t: Var<'t, f32>,
        ts: &[usize],
        z_vq: &Tensor<f32>,
        degraded: &Tensor<f32>,
        mask: &Tensor<f32>,
        drop: &[bool],
    ) -> Result<Var<'t, f32>> {
        let tape = ctx.tape();
        let zv = match self.null_vq {
            Some(_) => Some(self.choose(tape.constant(z_vq.clone()), self.null_vq_batch(ctx)?, drop)?),
            None => None,
        };
        let context = match &self.transformer {
            Some(lt) => {
                let tokens = lt.forward(ctx, degraded, mask)?.tokens;
                Some(self.choose(tokens, self.null_lt_batch(ctx)?, drop)?)
            }
            None => None,
        };
        self.denoiser.forward(ctx, z_t, ts, zv, context)
    }
}

fn repeat0<'t>(v: Var<'t, f32>, n: usize) -> Result<Var<'t, f32>> {
    Ok(Var::concat(&vec![v; n], 0)?)
}

/// Frozen-codec latents and conditioning inputs of a training set.
#[derive(Clone, Debug)]
pub struct TrainData {
    /// Scaled latents of the planar targets, `N x c x h x w`.
    pub z0: Tensor<f32>,
    /// Scaled latents of the masked degraded inputs.
    pub z_vq: Tensor<f32>,
    /// Masked degraded inputs in `[-1, 1]`.
    pub degraded: Tensor<f32>,
    pub mask: Tensor<f32>,
}

/// Degraded images in `[-1, 1]` with occluded pixels zeroed before mapping.
pub fn condition_inputs(items: &[(&Tensor<f32>, &Mask)]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let imgs = items.iter().map(|(d, m)| Ok(to_signed(&m.apply(d)?))).collect::<Result<Vec<_>>>()?;
    let masks: Vec<&Mask> = items.iter().map(|(_, m)| *m).collect();
    Ok((Tensor::stack(&imgs)?, mask_batch(&masks)))
}

impl TrainData {
    pub fn new(codec: &Codec, triplets: &[Triplet]) -> Result<Self> {
        if triplets.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let planar = Tensor::stack(&triplets.iter().map(|t| to_signed(&t.planar)).collect::<Vec<_>>())?;
        let (degraded, mask) = condition_inputs(&triplets.iter().map(|t| (&t.degraded, &t.mask)).collect::<Vec<_>>())?;
        Ok(TrainData { z0: codec.encode_scaled(&planar)?, z_vq: codec.encode_scaled(&degraded)?, degraded, mask })
    }

    pub fn len(&self) -> usize {
        self.z0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
        let parts = idx.iter().map(|&i| t.narrow0(i, 1)).collect::<texrect_tensor::Result<Vec<_>>>()?;
        Ok(Tensor::cat0(&parts)?)
    }
}

/// Optimizer, sampling stream and step counter of a diffusion run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: AdamState<f32>,
    pub rng: Rng,
    pub step: usize,
}

impl TrainState {
    pub fn new(model: &DiffusionModel, seed: u64) -> Self {
        TrainState { adam: AdamState::new(&model.store), rng: stream(seed, 21), step: 0 }
    }
}

/// One optimisation step on a random mini-batch; returns the loss.
pub fn train_step(
    model: &mut DiffusionModel,
    state: &mut TrainState,
    data: &TrainData,
    sched: &Schedule,
    cfg: &RunConfig,
) -> Result<f64> {
    let n = data.len();
    let batch = cfg.train.batch;
    let rng = &mut state.rng;
    let idx: Vec<usize> = if batch >= n { (0..n).collect() } else { sample(rng, n, batch).into_vec() };
    let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=sched.t)).collect();
    let z0 = TrainData::gather(&data.z0, &idx)?;
    let eps = gaussian(z0.shape(), rng);
    let drop: Vec<bool> = idx.iter().map(|_| rng.random::<f64>() < cfg.diffusion.p_uncond).collect();
    let z_t = forward_diffuse(&z0, &ts, &eps, sched)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, true, true);
    let pred = model.predict(
        &ctx,
        tape.constant(z_t),
        &ts,
        &TrainData::gather(&data.z_vq, &idx)?,
        &TrainData::gather(&data.degraded, &idx)?,
        &TrainData::gather(&data.mask, &idx)?,
        &drop,
    )?;
    let loss = pred.mse(tape.constant(eps))?;
    let value = loss.value().item() as f64;
    if !value.is_finite() {
        return Err(Error::Diverged(format!(
            "diffusion loss {value} at step {} (timesteps {ts:?}, dropped {drop:?})",
            state.step + 1
        )));
    }
    let grads = tape.backward(loss)?;
    let g = ctx.grads(&grads);
    ctx.apply_updates(&mut model.store)?;
    adam_step(&mut model.store, &g, &mut state.adam, &AdamConfig::with_lr(cfg.train.lr));
    state.step += 1;
    Ok(value)
}

/// Conditions of a batch, computed once per sampling run in eval mode.
pub struct Conditioning {
    pub z_vq: Option<Tensor<f32>>,
    pub tokens: Option<Tensor<f32>>,
}

impl DiffusionModel {
    pub fn condition(&self, codec: &Codec, degraded: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Conditioning> {
        let z_vq = if self.null_vq.is_some() { Some(codec.encode_scaled(degraded)?) } else { None };
        let tokens = match &self.transformer {
            Some(lt) => {
                let tape = Tape::new();
                let ctx = Ctx::inference(&tape, &self.store);
                Some((*lt.forward(&ctx, degraded, mask)?.tokens.value()).clone())
            }
            None => None,
        };
        Ok(Conditioning { z_vq, tokens })
    }

    /// Noise prediction for one sampler step.
    pub fn eps(&self, z: &Tensor<f32>, t: usize, cond: &Conditioning, branch: Branch) -> Result<Tensor<f32>> {
        let n = z.shape()[0];
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &self.store);
        let (zv, context) = match branch {
            Branch::Cond => (
                cond.z_vq.as_ref().map(|z| tape.constant(z.clone())),
                cond.tokens.as_ref().map(|t| tape.constant(t.clone())),
            ),
            Branch::Uncond => (
                match self.null_vq {
                    Some(_) => Some(repeat0(self.null_vq_batch(&ctx)?, n)?),
                    None => None,
                },
                match self.null_lt {
                    Some(_) => Some(repeat0(self.null_lt_batch(&ctx)?, n)?),
                    None => None,
                },
            ),
        };
        let out = self.denoiser.forward(&ctx, tape.constant(z.clone()), &vec![t; n], zv, context)?;
        Ok((*out.value()).clone())
    }
}

/// Rectify degraded images (`3 x S x S`, `[0, 1]`) with their masks; item
/// `i` starts from noise seeded by `seeds[i]`. Returns `[0, 1]` images.
pub fn rectify_batch(
    model: &DiffusionModel,
    codec: &Codec,
    sched: &Schedule,
    sampler: &SamplerConfig,
    items: &[(&Tensor<f32>, &Mask)],
    seeds: &[u64],
) -> Result<(Vec<Tensor<f32>>, SampleStats)> {
    if items.is_empty() || items.len() != seeds.len() {
        return Err(Error::Config(format!("{} images with {} seeds", items.len(), seeds.len())));
    }
    let (degraded, mask) = condition_inputs(items)?;
    let cond = model.condition(codec, &degraded, &mask)?;
    let [c, h, w] = model.latent;
    let noise = seeds.iter().map(|&s| gaussian(&[1, c, h, w], &mut stream(s, 3))).collect::<Vec<_>>();
    let z_t = Tensor::cat0(&noise)?;
    let mut rng = stream(seeds[0], 4);
    let (z0, stats) = ddim_sample(sched, sampler, z_t, &mut rng, |z, t, b| model.eps(z, t, &cond, b))?;
    let img = codec.decode_scaled(&z0)?;
    let out = (0..items.len())
        .map(|i| Ok(to_unit(&img.narrow0(i, 1)?.reshape(&img.shape()[1..])?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn micro() -> RunConfig {
        let mut c = RunConfig::preset(Preset::Desk);
        c.size = 32;
        c.codec.hidden = vec![4, 8];
        c.codec.k = 16;
        c.codec.res_blocks = 1;
        c.transformer.divisor = 16;
        c.denoiser.base = 8;
        c.denoiser.groups = 4;
        c.denoiser.time_dim = 16;
        c.denoiser.sin_dim = 8;
        c.denoiser.res_blocks = 1;
        c.train.batch = 2;
        let text = c.to_text();
        RunConfig::parse(&text).unwrap()
    }

    fn triplets(n: usize, size: usize) -> Vec<Triplet> {
        (0..n)
            .map(|k| {
                let planar = Tensor::from_fn([3, size, size], |i| (((i * (k + 3)) % 17) as f32) / 16.0);
                let mut mask = Mask::ones(size, size);
                for y in 0..size / 2 {
                    mask.set(y, (y + k) % size, false);
                }
                Triplet { id: format!("{k}"), degraded: planar.clone(), planar, mask }
            })
            .collect()
    }

    #[test]
    fn variant_names_parse_and_toggle_switches() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        let err = "vqgan".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("full, concat, crossattn, sae, pce"));
        let base = micro();
        assert!(!Variant::Concat.apply(&base).denoiser.crossattn);
        assert!(!Variant::Crossattn.apply(&base).denoiser.concat);
        assert!(!Variant::Sae.apply(&base).transformer.partial);
        assert!(!Variant::Pce.apply(&base).transformer.attention);
        for v in Variant::ALL {
            let m = DiffusionModel::new(&v.apply(&base), 0).unwrap();
            assert_eq!(m.transformer.is_some(), v != Variant::Concat);
            assert_eq!(m.null_vq.is_some(), v != Variant::Crossattn);
        }
    }

    #[test]
    fn null_embeddings_get_no_gradient_without_dropout() {
        let mut cfg = micro();
        cfg.diffusion.p_uncond = 0.0;
        let codec = Codec::new(cfg.codec.clone(), 0).unwrap();
        let data = TrainData::new(&codec, &triplets(2, 32)).unwrap();
        let mut model = DiffusionModel::new(&cfg, 0).unwrap();
        let mut state = TrainState::new(&model, 0);
        let before = model.store.clone();
        let sched = cfg.schedule().unwrap();
        for _ in 0..2 {
            train_step(&mut model, &mut state, &data, &sched, &cfg).unwrap();
        }
        for id in [model.null_vq.unwrap(), model.null_lt.unwrap()] {
            assert_eq!(model.store.get(id), before.get(id));
        }
        let w = model.store.find("unet.conv_in.w").unwrap();
        assert_ne!(model.store.get(w), before.get(w));
    }

    #[test]
    fn full_dropout_trains_the_null_embeddings() {
        let mut cfg = micro();
        cfg.diffusion.p_uncond = 1.0;
        let codec = Codec::new(cfg.codec.clone(), 0).unwrap();
        let data = TrainData::new(&codec, &triplets(2, 32)).unwrap();
        let mut model = DiffusionModel::new(&cfg, 0).unwrap();
        let mut state = TrainState::new(&model, 0);
        let before = model.store.clone();
        let sched = cfg.schedule().unwrap();
        // The zero-initialised output projections block the null token's
        // gradient on the first step.
        for _ in 0..3 {
            train_step(&mut model, &mut state, &data, &sched, &cfg).unwrap();
        }
        assert_ne!(model.store.get(model.null_vq.unwrap()), before.get(model.null_vq.unwrap()));
        assert_ne!(model.store.get(model.null_lt.unwrap()), before.get(model.null_lt.unwrap()));
    }

    #[test]
    fn sampling_is_deterministic_and_shaped() {
        let mut cfg = micro();
        cfg.diffusion.sampler.steps = 4;
        let codec = Codec::new(cfg.codec.clone(), 0).unwrap();
        let model = DiffusionModel::new(&cfg, 0).unwrap();
        let sched = cfg.schedule().unwrap();
        let t = triplets(2, 32);
        let items: Vec<_> = t.iter().map(|t| (&t.degraded, &t.mask)).collect();
        let (a, stats) = rectify_batch(&model, &codec, &sched, &cfg.diffusion.sampler, &items, &[5, 6]).unwrap();
        let (b, _) = rectify_batch(&model, &codec, &sched, &cfg.diffusion.sampler, &items, &[5, 6]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), &[3, 32, 32]);
        assert_eq!((stats.cond_evals, stats.uncond_evals), (4, 0));
        let guided = SamplerConfig { guidance: 2.0, ..cfg.diffusion.sampler };
        let (_, stats) = rectify_batch(&model, &codec, &sched, &guided, &items, &[5, 6]).unwrap();
        assert_eq!(stats.uncond_evals, 4);
    }
}
