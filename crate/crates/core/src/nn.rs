//! Layers shared by the codec, latent transformer and denoiser. Layers hold
//! [`ParamId`]s into a model's [`ParamStore`]; forward passes are generic
//! over the scalar so the same model runs in f32 and, for gradient checks,
//! in f64.

use rand::Rng as _;
use texrect_tensor::check::{CheckOptions, CheckReport};
use texrect_tensor::{BnMode, Ctx, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

use crate::error::Result;
use crate::rng::Rng;

/// Weight initialisation schemes; biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`, for layers followed by ReLU.
    He,
    /// `U(-1/sqrt(fan_in), +1/sqrt(fan_in))`.
    Fan,
    Zero,
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut Rng) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_>) -> R) -> R {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut sub = Builder { store: self.store, rng: self.rng, prefix };
        f(&mut sub)
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn weight(&mut self, leaf: &str, shape: &[usize], fan_in: usize, init: Init) -> ParamId {
        let bound = match init {
            Init::He => (6.0 / fan_in as f64).sqrt(),
            Init::Fan => 1.0 / (fan_in as f64).sqrt(),
            Init::Zero => 0.0,
        } as f32;
        let rng = &mut *self.rng;
        let t = if bound == 0.0 {
            Tensor::zeros(shape)
        } else {
            Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
        };
        let name = self.name(leaf);
        self.store.trainable(name, t)
    }

    pub fn constant(&mut self, leaf: &str, value: Tensor<f32>) -> ParamId {
        let name = self.name(leaf);
        self.store.trainable(name, value)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor<f32>) -> ParamId {
        let name = self.name(leaf);
        self.store.buffer(name, value)
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(bld: &mut Builder<'_>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, init: Init) -> Self {
        Self::build(bld, name, c_in, c_out, k, stride, init, true)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build(
        bld: &mut Builder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        bld.scope(name, |b| Conv2d {
            w: b.weight("w", &[c_out, c_in, k, k], c_in * k * k, init),
            b: bias.then(|| b.weight("b", &[c_out], 1, Init::Zero)),
            c_in,
            c_out,
            k,
            stride,
        })
    }

    /// "Same" padding for odd kernels.
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.conv2d(ctx.p(self.w), self.b.map(|b| ctx.p(b)), self.stride, self.pad())?)
    }

    pub fn forward_partial<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, T>,
        x: Var<'t, T>,
        mask: &Tensor<T>,
    ) -> Result<(Var<'t, T>, Tensor<T>)> {
        Ok(x.partial_conv2d(ctx.p(self.w), self.b.map(|b| ctx.p(b)), mask, self.stride, self.pad())?)
    }
}

/// `y = x W + b` on `N x in` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(bld: &mut Builder<'_>, name: &str, d_in: usize, d_out: usize, init: Init) -> Self {
        bld.scope(name, |b| Linear {
            w: b.weight("w", &[d_in, d_out], d_in, init),
            b: b.weight("b", &[d_out], 1, Init::Zero),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.matmul(ctx.p(self.w))?.add_channel_bias(ctx.p(self.b))?)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(bld: &mut Builder<'_>, name: &str, channels: usize, groups: usize) -> Self {
        bld.scope(name, |b| GroupNorm {
            gamma: b.constant("gamma", Tensor::ones([channels])),
            beta: b.constant("beta", Tensor::zeros([channels])),
            groups,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.group_norm(ctx.p(self.gamma), ctx.p(self.beta), self.groups)?)
    }
}

/// Batch norm with running statistics kept as store buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(bld: &mut Builder<'_>, name: &str, channels: usize) -> Self {
        bld.scope(name, |b| BatchNorm {
            gamma: b.constant("gamma", Tensor::ones([channels])),
            beta: b.constant("beta", Tensor::zeros([channels])),
            running_mean: b.buffer("running_mean", Tensor::zeros([channels])),
            running_var: b.buffer("running_var", Tensor::ones([channels])),
        })
    }

    /// Training mode normalises with (masked) batch statistics and queues a
    /// running-statistics update on `ctx`; evaluation uses the buffers.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, T>, x: Var<'t, T>, mask: Option<&Tensor<T>>) -> Result<Var<'t, T>> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.training() {
            let (y, stats) = x.batch_norm(g, b, mask, BnMode::Train)?;
            let stats = stats.expect("training batch norm reports statistics");
            let m = T::of(texrect_tensor::kernels::norm::BN_MOMENTUM);
            let blend = |old: &Tensor<T>, new: &[T]| {
                let d = old.data().iter().zip(new).map(|(&o, &n)| (T::one() - m) * o + m * n).collect();
                Tensor::new(old.shape(), d).expect("running stat shape")
            };
            ctx.queue_update(self.running_mean, blend(ctx.value(self.running_mean), &stats.mean));
            ctx.queue_update(self.running_var, blend(ctx.value(self.running_var), &stats.var_unbiased));
            Ok(y)
        } else {
            let (mean, var) = (ctx.value(self.running_mean), ctx.value(self.running_var));
            let (y, _) = x.batch_norm(g, b, mask, BnMode::Eval { mean: mean.data(), var: var.data() })?;
            Ok(y)
        }
    }
}

/// [`check_store`](texrect_tensor::check::check_store) for model code that
/// reports crate errors.
pub fn check_model<F>(store: &ParamStore<f64>, training: bool, opts: CheckOptions, f: F) -> Result<CheckReport>
where
    F: for<'t> Fn(&Ctx<'t, f64>) -> Result<Var<'t, f64>>,
{
    fn pin<G: for<'t> Fn(&Ctx<'t, f64>) -> texrect_tensor::Result<Var<'t, f64>>>(g: G) -> G {
        g
    }
    let wrapped = pin(|ctx| f(ctx).map_err(|e| TensorError::Contract { op: "model", detail: e.to_string() }));
    Ok(texrect_tensor::check::check_store(store, training, opts, wrapped)?)
}

/// `N x C x H x W` feature map to `N x (H W) x C` tokens.
pub fn to_tokens<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    Ok(x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<'t, T: Scalar>(t: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = t.shape();
    Ok(t.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])?)
}

/// Single-head scaled dot-product attention on batched token matrices:
/// `softmax(q k^T / sqrt(d)) v` with `q: N x Lq x d`, `k: N x Lk x d`,
/// `v: N x Lk x dv`. Also returns the attention weights.
pub fn attention<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let d = *q.shape().last().expect("non-empty shape");
    let logits = q.matmul(k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    let weights = logits.softmax(2)?;
    Ok((weights.matmul(v)?, weights))
}

/// Sinusoidal features of integer timesteps, `N x dim`: the first half are
/// `sin(t w_i)`, the second half `cos(t w_i)` with `w_i = 10000^(-i/half)`.
pub fn sinusoidal<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (t as f64) * 10000f64.powf(-(i as f64) / half as f64));
        let f: Vec<f64> = freqs.collect();
        out.extend(f.iter().map(|a| T::of(a.sin())));
        out.extend(f.iter().map(|a| T::of(a.cos())));
        out.extend((2 * half..dim).map(|_| T::zero()));
    }
    Tensor::new([ts.len(), dim], out).expect("embedding shape")
}

/// Tensor `[N, 1, H, W]` stacking single-channel masks.
pub fn mask_batch<T: Scalar>(masks: &[&crate::mask::Mask]) -> Tensor<T> {
    let mut data = Vec::new();
    let (h, w) = (masks[0].height(), masks[0].width());
    for m in masks {
        data.extend(m.data().iter().map(|&v| if v == 1 { T::one() } else { T::zero() }));
    }
    Tensor::new([masks.len(), 1, h, w], data).expect("mask batch shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use texrect_tensor::Tape;

    #[test]
    fn builder_scopes_names() {
        let mut store = ParamStore::new();
        let mut rng = stream(0, 0);
        let mut b = Builder::new(&mut store, &mut rng);
        let c = b.scope("enc", |b| Conv2d::new(b, "c1", 3, 8, 3, 1, Init::He));
        assert_eq!(store.find("enc.c1.w"), Some(c.w));
        assert_eq!(store.get(c.w).shape(), &[8, 3, 3, 3]);
        assert!(store.find("enc.c1.b").is_some());
    }

    #[test]
    fn sinusoid_at_zero_is_sin_zero_cos_one() {
        let e: Tensor<f64> = sinusoidal(&[0], 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sinusoid_is_injective_on_schedule_range() {
        let e: Tensor<f64> = sinusoidal(&(0..=1000).collect::<Vec<_>>(), 32);
        let rows: Vec<&[f64]> = e.data().chunks(32).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_uniform_values_pass_through() {
        let tape = Tape::<f64>::new();
        let mut rng = stream(1, 0);
        let q = tape.constant(Tensor::from_fn([2, 5, 4], |_| rng.random_range(-1.0..1.0)));
        let k = tape.constant(Tensor::from_fn([2, 3, 4], |_| rng.random_range(-1.0..1.0)));
        let v = tape.constant(Tensor::from_fn([2, 3, 6], |i| (i % 6) as f64));
        let (out, w) = attention(q, k, v).unwrap();
        for row in w.value().data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for row in out.value().data().chunks(6) {
            for (j, x) in row.iter().enumerate() {
                assert!((x - j as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn running_stats_update_only_in_training() {
        let mut store = ParamStore::new();
        let mut rng = stream(0, 0);
        let bn = BatchNorm::new(&mut Builder::new(&mut store, &mut rng), "bn", 2);
        let x = Tensor::from_fn([2, 2, 2, 2], |i| i as f32);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false, true);
        bn.forward(&ctx, tape.constant(x.clone()), None).unwrap();
        let mut trained = store.clone();
        ctx.apply_updates(&mut trained).unwrap();
        assert!(!trained.bit_equal(&store));
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        bn.forward(&ctx, tape.constant(x), None).unwrap();
        let mut evald = store.clone();
        ctx.apply_updates(&mut evald).unwrap();
        assert!(evald.bit_equal(&store));
    }
}
