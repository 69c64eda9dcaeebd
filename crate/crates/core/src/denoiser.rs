//! Noise predictor: a time-conditioned U-Net over latents. The degraded
//! latent is concatenated to the input; transformer tokens enter through
//! cross-attention.

use texrect_tensor::{Ctx, ParamId, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{attention, from_tokens, sinusoidal, to_tokens, Builder, Conv2d, GroupNorm, Init, Linear};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Latent channels `c`.
    pub latent_channels: usize,
    pub base: usize,
    pub mults: Vec<usize>,
    pub res_blocks: usize,
    /// Levels (indices into `mults`) that carry cross-attention.
    pub attn_levels: Vec<usize>,
    pub mid_attn: bool,
    pub sin_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    /// Width `C_lt` of the transformer tokens.
    pub context_dim: usize,
    /// Concatenate the degraded latent to the input.
    pub concat: bool,
    /// Cross-attend to the transformer tokens.
    pub crossattn: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 4,
            base: 32,
            mults: vec![1, 2],
            res_blocks: 2,
            attn_levels: vec![1],
            mid_attn: true,
            sin_dim: 32,
            time_dim: 128,
            groups: 8,
            context_dim: 64,
            concat: true,
            crossattn: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let widths_ok = self.mults.iter().all(|&m| m > 0 && (self.base * m) % self.groups == 0);
        if self.mults.is_empty() || self.groups == 0 || !widths_ok || self.res_blocks == 0 {
            return Err(Error::Config(format!("invalid denoiser widths {self:?}")));
        }
        if self.attn_levels.iter().any(|&l| l >= self.mults.len()) {
            return Err(Error::Config(format!("attention level out of range in {:?}", self.attn_levels)));
        }
        if !self.concat && !self.crossattn {
            return Err(Error::Config("denoiser needs concat or cross-attention conditioning".into()));
        }
        if self.crossattn && self.attn_levels.is_empty() && !self.mid_attn {
            return Err(Error::Config("cross-attention enabled but placed nowhere".into()));
        }
        if self.sin_dim < 2 || self.time_dim == 0 || self.latent_channels == 0 || self.context_dim == 0 {
            return Err(Error::Config(format!("invalid denoiser dims {self:?}")));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        if self.concat {
            2 * self.latent_channels
        } else {
            self.latent_channels
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &mut Builder<'_>, name: &str, c_in: usize, c_out: usize, cfg: &DenoiserConfig) -> Self {
        b.scope(name, |b| ResBlock {
            norm1: GroupNorm::new(b, "norm1", c_in, cfg.groups),
            conv1: Conv2d::new(b, "conv1", c_in, c_out, 3, 1, Init::Fan),
            temb: Linear::new(b, "temb", cfg.time_dim, c_out, Init::Fan),
            norm2: GroupNorm::new(b, "norm2", c_out, cfg.groups),
            conv2: Conv2d::new(b, "conv2", c_out, c_out, 3, 1, Init::Zero),
            skip: (c_in != c_out).then(|| Conv2d::new(b, "skip", c_in, c_out, 1, 1, Init::Fan)),
        })
    }

    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>, temb: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.conv1.forward(ctx, self.norm1.forward(ctx, x)?.silu())?;
        let h = h.add_channel_bias(self.temb.forward(ctx, temb)?)?;
        let h = self.conv2.forward(ctx, self.norm2.forward(ctx, h)?.silu())?;
        let skip = match &self.skip {
            Some(s) => s.forward(ctx, x)?,
            None => x,
        };
        Ok(skip.add(h)?)
    }
}

/// `x + W_O softmax(Q K^T / sqrt(d)) V` with `Q` from the normalised
/// feature map and `K`, `V` from the context tokens.
#[derive(Clone, Debug)]
pub struct CrossAttn {
    norm: GroupNorm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl CrossAttn {
    pub fn new(b: &mut Builder<'_>, name: &str, ch: usize, context_dim: usize, groups: usize) -> Self {
        b.scope(name, |b| CrossAttn {
            norm: GroupNorm::new(b, "norm", ch, groups),
            wq: b.weight("wq", &[ch, ch], ch, Init::Fan),
            wk: b.weight("wk", &[context_dim, ch], context_dim, Init::Fan),
            wv: b.weight("wv", &[context_dim, ch], context_dim, Init::Fan),
            wo: b.weight("wo", &[ch, ch], ch, Init::Zero),
        })
    }

    /// `x`: `N x C x h x w`; `context`: `N x C_lt x d_lt` (tokens are columns).
    /// Returns the output and the `N x hw x d_lt` attention weights.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>, context: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        let cs = context.shape();
        let c_lt = ctx.value(self.wk).shape()[0];
        if cs.len() != 3 || cs[0] != s[0] || cs[1] != c_lt {
            return Err(Error::Dimension(format!("context {cs:?} does not match feature {s:?} with C_lt={c_lt}")));
        }
        let tokens = to_tokens(self.norm.forward(ctx, x)?)?;
        let ctx_tokens = context.permute(&[0, 2, 1])?;
        let q = tokens.matmul(ctx.p(self.wq))?;
        let k = ctx_tokens.matmul(ctx.p(self.wk))?;
        let v = ctx_tokens.matmul(ctx.p(self.wv))?;
        let (a, w) = attention(q, k, v)?;
        let out = from_tokens(a.matmul(ctx.p(self.wo))?, s[2], s[3])?;
        Ok((x.add(out)?, w))
    }
}

#[derive(Clone, Debug)]
struct Stage {
    res: ResBlock,
    attn: Option<CrossAttn>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Vec<Stage>>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: Option<CrossAttn>,
    mid2: ResBlock,
    up: Vec<Vec<Stage>>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(b.scope(name, |b| {
            let cross = |b: &mut Builder<'_>, name: &str, ch: usize, on: bool| {
                (on && cfg.crossattn).then(|| CrossAttn::new(b, name, ch, cfg.context_dim, cfg.groups))
            };
            let widths: Vec<usize> = cfg.mults.iter().map(|m| m * cfg.base).collect();
            let levels = widths.len();
            let time1 = Linear::new(b, "time1", cfg.sin_dim, cfg.time_dim, Init::Fan);
            let time2 = Linear::new(b, "time2", cfg.time_dim, cfg.time_dim, Init::Fan);
            let conv_in = Conv2d::new(b, "conv_in", cfg.in_channels(), cfg.base, 3, 1, Init::Fan);
            let mut skips = vec![cfg.base];
            let mut prev = cfg.base;
            let mut down = Vec::new();
            let mut downsample = Vec::new();
            for (l, &ch) in widths.iter().enumerate() {
                let attn_here = cfg.attn_levels.contains(&l);
                let stages = (0..cfg.res_blocks)
                    .map(|i| {
                        let st = Stage {
                            res: ResBlock::new(b, &format!("down{l}.res{i}"), prev, ch, &cfg),
                            attn: cross(b, &format!("down{l}.attn{i}"), ch, attn_here),
                        };
                        prev = ch;
                        skips.push(ch);
                        st
                    })
                    .collect();
                down.push(stages);
                if l + 1 < levels {
                    downsample.push(Conv2d::new(b, &format!("down{l}.sample"), ch, ch, 3, 2, Init::Fan));
                    skips.push(ch);
                }
            }
            let mid1 = ResBlock::new(b, "mid.res0", prev, prev, &cfg);
            let mid_attn = cross(b, "mid.attn", prev, cfg.mid_attn);
            let mid2 = ResBlock::new(b, "mid.res1", prev, prev, &cfg);
            let mut up = Vec::new();
            let mut upsample = Vec::new();
            for (l, &ch) in widths.iter().enumerate().rev() {
                let attn_here = cfg.attn_levels.contains(&l);
                let stages = (0..=cfg.res_blocks)
                    .map(|i| {
                        let skip = skips.pop().expect("skip per up block");
                        let st = Stage {
                            res: ResBlock::new(b, &format!("up{l}.res{i}"), prev + skip, ch, &cfg),
                            attn: cross(b, &format!("up{l}.attn{i}"), ch, attn_here),
                        };
                        prev = ch;
                        st
                    })
                    .collect();
                up.push(stages);
                if l > 0 {
                    upsample.push(Conv2d::new(b, &format!("up{l}.sample"), ch, ch, 3, 1, Init::Fan));
                }
            }
            Denoiser {
                norm_out: GroupNorm::new(b, "norm_out", prev, cfg.groups),
                conv_out: Conv2d::new(b, "conv_out", prev, cfg.latent_channels, 3, 1, Init::Fan),
                cfg: cfg.clone(),
                time1,
                time2,
                conv_in,
                down,
                downsample,
                mid1,
                mid_attn,
                mid2,
                up,
                upsample,
            }
        }))
    }

    pub fn time_embed<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, ts: &[usize]) -> Result<Var<'t, T>> {
        let s = ctx.tape().constant(sinusoidal(ts, self.cfg.sin_dim));
        self.time2.forward(ctx, self.time1.forward(ctx, s)?.silu())
    }

    /// Predicted noise for `z_t` (`N x c x h x w`). `z_vq` is required with
    /// concat conditioning and `context` (`N x C_lt x d_lt`) with cross-attention.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        z_t: Var<'t, T>,
        ts: &[usize],
        z_vq: Option<Var<'t, T>>,
        context: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let s = z_t.shape();
        let levels = self.cfg.mults.len();
        let factor = 1usize << (levels - 1);
        if s.len() != 4 || s[1] != self.cfg.latent_channels || s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::Dimension(format!("denoiser input {s:?} incompatible with config")));
        }
        if ts.len() != s[0] {
            return Err(Error::Dimension(format!("{} timesteps for batch {}", ts.len(), s[0])));
        }
        let x = match (self.cfg.concat, z_vq) {
            (true, Some(zv)) => {
                if zv.shape() != s {
                    return Err(Error::Dimension(format!("z_vq {:?} vs z_t {s:?}", zv.shape())));
                }
                Var::concat(&[z_t, zv], 1)?
            }
            (true, None) => return Err(Error::Contract("concat conditioning requires z_vq".into())),
            (false, _) => z_t,
        };
        let context = match (self.cfg.crossattn, context) {
            (true, Some(c)) => Some(c),
            (true, None) => return Err(Error::Contract("cross-attention requires context tokens".into())),
            (false, _) => None,
        };
        let stage = |st: &Stage, h: Var<'t, T>, temb: Var<'t, T>| -> Result<Var<'t, T>> {
            let h = st.res.forward(ctx, h, temb)?;
            match (&st.attn, context) {
                (Some(a), Some(c)) => Ok(a.forward(ctx, h, c)?.0),
                _ => Ok(h),
            }
        };
        let temb = self.time_embed(ctx, ts)?;
        let mut h = self.conv_in.forward(ctx, x)?;
        let mut skips = vec![h];
        for (l, stages) in self.down.iter().enumerate() {
            for st in stages {
                h = stage(st, h, temb)?;
                skips.push(h);
            }
            if l + 1 < levels {
                h = self.downsample[l].forward(ctx, h)?;
                skips.push(h);
            }
        }
        h = self.mid1.forward(ctx, h, temb)?;
        if let (Some(a), Some(c)) = (&self.mid_attn, context) {
            h = a.forward(ctx, h, c)?.0;
        }
        h = self.mid2.forward(ctx, h, temb)?;
        for (i, stages) in self.up.iter().enumerate() {
            for st in stages {
                let skip = skips.pop().expect("matching skip");
                h = stage(st, Var::concat(&[h, skip], 1)?, temb)?;
            }
            if i + 1 < levels {
                h = self.upsample[i].forward(ctx, h.upsample2x()?)?;
            }
        }
        self.conv_out.forward(ctx, self.norm_out.forward(ctx, h)?.silu())
    }
}

/// Zero tensor helper for tests and stubs.
pub fn zeros_like<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::zeros(t.shape())
}
