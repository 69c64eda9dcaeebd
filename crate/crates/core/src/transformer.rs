//! Occlusion-aware latent transformer: a stack of partial convolutions with
//! masked batch norm, self-attention before the last layer, and a
//! flattened token output used as the cross-attention condition.

use texrect_tensor::{Ctx, ParamId, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{attention, from_tokens, to_tokens, BatchNorm, Builder, Conv2d, Init};

/// Output channels and strides of the full-scale (divisor 1) stack; the last entry
/// follows the self-attention block.
pub const PAPER_LAYERS: [(usize, usize); 8] =
    [(64, 2), (128, 1), (128, 2), (256, 1), (256, 2), (512, 1), (512, 1), (256, 1)];

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    /// Channel counts are divided by this.
    pub divisor: usize,
    /// Standard convolutions instead of partial ones when false.
    pub partial: bool,
    pub attention: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig { divisor: 4, partial: true, attention: true }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.divisor == 0 || 64 % self.divisor != 0 {
            return Err(Error::Config(format!("transformer divisor {} must divide 64", self.divisor)));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<(usize, usize)> {
        PAPER_LAYERS.iter().map(|&(c, s)| (c / self.divisor, s)).collect()
    }

    /// `(C_lt, d_lt)` for input side `size`.
    pub fn out_shape(&self, size: usize) -> Result<(usize, usize)> {
        let mut side = size;
        for (_, s) in self.layers() {
            if s == 2 {
                if side % 2 != 0 {
                    return Err(Error::Dimension(format!("size {size} is not divisible by 8")));
                }
                side /= 2;
            }
        }
        Ok((self.layers().last().expect("eight layers").0, side * side))
    }
}

/// `x + gamma * W_o attn(W_q x, W_k x, W_v x)` over spatial tokens.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    o: Conv2d,
    pub gamma: ParamId,
}

impl SelfAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, ch: usize) -> Self {
        let d = (ch / 8).max(1);
        b.scope(name, |b| SelfAttention {
            q: Conv2d::new(b, "q", ch, d, 1, 1, Init::Fan),
            k: Conv2d::new(b, "k", ch, d, 1, 1, Init::Fan),
            v: Conv2d::new(b, "v", ch, ch, 1, 1, Init::Fan),
            o: Conv2d::new(b, "o", ch, ch, 1, 1, Init::Fan),
            gamma: b.constant("gamma", Tensor::scalar(0.0)),
        })
    }

    /// Output and the `N x HW x HW` attention weights.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        let q = to_tokens(self.q.forward(ctx, x)?)?;
        let k = to_tokens(self.k.forward(ctx, x)?)?;
        let v = to_tokens(self.v.forward(ctx, x)?)?;
        let (a, w) = attention(q, k, v)?;
        let out = self.o.forward(ctx, from_tokens(a, s[2], s[3])?)?;
        Ok((x.add(out.mul(ctx.p(self.gamma))?)?, w))
    }
}

#[derive(Clone, Debug)]
struct Layer {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct LatentTransformer {
    pub cfg: TransformerConfig,
    layers: Vec<Layer>,
    pub attn: Option<SelfAttention>,
}

/// Transformer output with the mask seen after each layer.
pub struct LtOutput<'t, T: Scalar> {
    /// `N x C_lt x d_lt`.
    pub tokens: Var<'t, T>,
    pub masks: Vec<Tensor<T>>,
}

impl LatentTransformer {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(b.scope(name, |b| {
            let mut prev = 6;
            let specs = cfg.layers();
            let mut layers = Vec::new();
            let mut attn = None;
            for (i, &(c, s)) in specs.iter().enumerate() {
                if i == specs.len() - 1 && cfg.attention {
                    attn = Some(SelfAttention::new(b, "attn", prev));
                }
                layers.push(Layer {
                    conv: Conv2d::new(b, &format!("pconv{i}"), prev, c, 3, s, Init::He),
                    bn: BatchNorm::new(b, &format!("bn{i}"), c),
                });
                prev = c;
            }
            LatentTransformer { cfg: cfg.clone(), layers, attn }
        }))
    }

    /// `degraded`: `N x 3 x S x S` in `[-1, 1]`; `mask`: `N x 1 x S x S` binary.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, degraded: &Tensor<T>, mask: &Tensor<T>) -> Result<LtOutput<'t, T>> {
        let ds = degraded.shape();
        if ds.len() != 4 || ds[1] != 3 || mask.shape() != [ds[0], 1, ds[2], ds[3]] {
            return Err(Error::Dimension(format!("transformer input {ds:?} with mask {:?}", mask.shape())));
        }
        let hw = ds[2] * ds[3];
        for (n, m) in mask.data().chunks(hw).enumerate() {
            if m.iter().all(|&v| v == T::zero()) {
                return Err(Error::Contract(format!("no valid pixels in sample {n}")));
            }
        }
        let tape = ctx.tape();
        let m = tape.constant(mask.clone());
        let mut h = Var::concat(&[tape.constant(degraded.clone()), m, m, m], 1)?;
        let mut cur = mask.clone();
        let mut masks = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if i == last {
                if let Some(a) = &self.attn {
                    h = a.forward(ctx, h)?.0;
                }
            }
            if self.cfg.partial {
                let (y, next) = layer.conv.forward_partial(ctx, h, &cur)?;
                h = layer.bn.forward(ctx, y, Some(&next))?.relu();
                cur = next;
            } else {
                h = layer.bn.forward(ctx, layer.conv.forward(ctx, h)?, None)?.relu();
                let s = h.shape();
                cur = Tensor::ones([s[0], 1, s[2], s[3]]);
            }
            masks.push(cur.clone());
        }
        let s = h.shape();
        Ok(LtOutput { tokens: h.reshape(&[s[0], s[1], s[2] * s[3]])?, masks })
    }
}
