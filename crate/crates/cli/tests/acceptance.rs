//! Acceptance suite. Every criterion prints one `criterion N PASS|FAIL` line
//! before asserting; run with `--nocapture` to see them.
//!
//! Criterion 8 retrains every ablation variant and is ignored by default.

use std::collections::BTreeMap;
use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use texrect_core::codec::Codec;
use texrect_core::config::{Preset, RunConfig};
use texrect_core::dataset::Triplet;
use texrect_core::degrade::{degrade, sample_draw};
use texrect_core::denoiser::{CrossAttn, Denoiser, DenoiserConfig};
use texrect_core::diffusion::{forward_diffuse, gaussian, Schedule};
use texrect_core::imageio::{load_tensor, save_png};
use texrect_core::mask::{free_form_mask, Mask, MaskParams};
use texrect_core::metrics::{ssim, GramExtractor};
use texrect_core::model::{rectify_batch, DiffusionModel};
use texrect_core::nn::{attention, check_model, mask_batch, Builder};
use texrect_core::pipeline::{rectify_all, run_training, TrainOptions, MODEL_CKPT};
use texrect_core::rng::stream;
use texrect_core::transformer::{LatentTransformer, SelfAttention, TransformerConfig};
use texrect_tensor::check::{check_inputs, CheckOptions};
use texrect_tensor::{BnMode, Ctx, ParamKind, ParamStore, Tape, Tensor, Var};

fn report(n: u32, what: &str, ok: bool, detail: String) {
    println!("criterion {n:>2} {}: {what} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {what} ({detail})");
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_texrect")
}

fn texrect(args: &[&str]) -> Output {
    Command::new(bin()).args(args).env("TEXRECT_THREADS", "1").output().expect("spawn texrect")
}

fn expect_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Procedural texture `3 x size x size` in `[0, 1]`. `kind` picks the family,
/// `seed` its parameters.
fn texture(kind: usize, seed: u64, size: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + kind as u64);
    let c0: [f32; 3] = [rng.random_range(0.05..0.5), rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)];
    let c1: [f32; 3] = [rng.random_range(0.5..0.95), rng.random_range(0.5..0.95), rng.random_range(0.5..0.95)];
    let period = rng.random_range(6.0..14.0f32);
    let angle = rng.random_range(0.0..PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let phase = rng.random_range(0.0..period);
    let s = size;
    let field = move |x: f32, y: f32| -> f32 {
        let u = x * ca + y * sa + phase;
        let v = -x * sa + y * ca;
        match kind % 8 {
            0 => 0.5 + 0.5 * (2.0 * PI * u / period).sin(),
            1 => (((u / period).floor() + (v / period).floor()) as i64).rem_euclid(2) as f32,
            2 => {
                let (fx, fy) = ((u / period).fract() - 0.5, (v / period).fract() - 0.5);
                if (fx * fx + fy * fy).sqrt() < 0.3 { 1.0 } else { 0.0 }
            }
            3 => 0.5 + 0.25 * ((2.0 * PI * u / period).sin() + (2.0 * PI * v / (period * 0.7)).sin()),
            4 => {
                let row = (v / period).floor();
                let shift = if (row as i64).rem_euclid(2) == 0 { 0.0 } else { period };
                let bu = ((u + shift) / (2.0 * period)).fract();
                let bv = (v / period).fract();
                if bu < 0.08 || bv < 0.15 { 0.0 } else { 1.0 }
            }
            5 => {
                let r = ((x - s as f32 / 2.0).powi(2) + (y - s as f32 / 2.0).powi(2)).sqrt();
                0.5 + 0.5 * (2.0 * PI * r / period).cos()
            }
            6 => {
                let a = (2.0 * PI * u / period).sin();
                let b = (2.0 * PI * v / period).sin();
                if a * b > 0.0 { 0.8 } else { 0.2 }
            }
            _ => {
                let w = (2.0 * PI * u / period + 2.0 * (2.0 * PI * v / (2.0 * period)).sin()).sin();
                0.5 + 0.5 * w
            }
        }
    };
    Tensor::from_fn([3, s, s], |i| {
        let (c, y, x) = (i / (s * s), (i / s) % s, i % s);
        let t = field(x as f32, y as f32).clamp(0.0, 1.0);
        c0[c] + (c1[c] - c0[c]) * t
    })
}

fn write_sources(dir: &Path, n: usize, size: usize) {
    fs::create_dir_all(dir).unwrap();
    for k in 0..n {
        save_png(&dir.join(format!("tex{k:02}.png")), &texture(k, k as u64 + 100, size)).unwrap();
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn desk() -> RunConfig {
    RunConfig::preset(Preset::Desk)
}

fn build_lt(cfg: TransformerConfig, seed: u64) -> (LatentTransformer, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, 0);
    let lt = LatentTransformer::new(&mut Builder::new(&mut store, &mut rng), "lt", cfg).unwrap();
    (lt, store)
}

/// Give the self-attention a nonzero residual gain and the batch norms
/// non-trivial running statistics, so eval mode exercises every path.
fn warm_up(lt: &LatentTransformer, store: &mut ParamStore<f32>, size: usize, rng: &mut ChaCha8Rng) {
    if let Some(a) = &lt.attn {
        store.set(a.gamma, Tensor::scalar(0.7)).unwrap();
    }
    for _ in 0..4 {
        let mask = free_form_mask(size, size, &MaskParams::default(), &mut stream(rng.random(), 0)).unwrap().mask;
        let x = Tensor::from_fn([2, 3, size, size], |_| rng.random_range(-1.0..1.0f32));
        let m = mask_batch::<f32>(&[&mask, &mask]);
        let x = masked(&x, &m);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false, true);
        lt.forward(&ctx, &x, &m).unwrap();
        ctx.apply_updates(store).unwrap();
    }
}

fn masked(x: &Tensor<f32>, m: &Tensor<f32>) -> Tensor<f32> {
    let s = x.shape().to_vec();
    let hw = s[2] * s[3];
    Tensor::from_fn(&s[..], |i| {
        let n = i / (s[1] * hw);
        x.data()[i] * m.data()[n * hw + i % hw]
    })
}

fn lt_eval(lt: &LatentTransformer, store: &ParamStore<f32>, x: &Tensor<f32>, m: &Tensor<f32>) -> Tensor<f32> {
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    lt.forward(&ctx, x, m).unwrap().tokens.value().as_ref().clone()
}

#[test]
fn criterion_01_occlusion_invariance() {
    let t0 = Instant::now();
    let cfg = desk();
    let s = cfg.size;
    let (lt, mut store) = build_lt(cfg.transformer.clone(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    warm_up(&lt, &mut store, s, &mut rng);
    let mask = free_form_mask(s, s, &MaskParams::default(), &mut stream(77, 0)).unwrap().mask;
    let m = mask_batch::<f32>(&[&mask]);
    let base = Tensor::from_fn([1, 3, s, s], |_| rng.random_range(-1.0..1.0f32));
    let reference = bits(&lt_eval(&lt, &store, &base, &m));
    let mut identical = 0;
    let trials = 100;
    for trial in 0..trials {
        let mut r = ChaCha8Rng::seed_from_u64(1000 + trial);
        let hw = s * s;
        let x = Tensor::from_fn([1, 3, s, s], |i| {
            if m.data()[i % hw] == 1.0 {
                base.data()[i]
            } else {
                r.random_range(-50.0..50.0f32)
            }
        });
        if bits(&lt_eval(&lt, &store, &x, &m)) == reference {
            identical += 1;
        }
    }
    let el = t0.elapsed();
    report(
        1,
        "occlusion invariance of the latent transformer",
        identical == trials && el < Duration::from_secs(60),
        format!("{identical}/{trials} trials bit-identical, valid fraction {:.2}, {}", mask.valid_fraction(), secs(el)),
    );
}

#[test]
fn criterion_02_partial_conv_reduction() {
    let t0 = Instant::now();
    let cfg = desk();
    let s = cfg.size;
    let (lt, mut store) = build_lt(cfg.transformer.clone(), 2);
    let twin_cfg = TransformerConfig { partial: false, ..cfg.transformer.clone() };
    let (twin, twin_store) = build_lt(twin_cfg, 2);
    assert!(store.bit_equal(&twin_store), "twin networks must start from the same weights");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    warm_up(&lt, &mut store, s, &mut rng);
    let ones = Tensor::ones([2, 1, s, s]);
    let mut worst = 0.0f32;
    for trial in 0..5 {
        let x = Tensor::from_fn([2, 3, s, s], |_| rng.random_range(-1.0..1.0f32));
        for training in [false, true] {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, false, training);
            let a = lt.forward(&ctx, &x, &ones).unwrap().tokens;
            let b = twin.forward(&ctx, &x, &ones).unwrap().tokens;
            let (a, b) = (a.value(), b.value());
            let d = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
            worst = worst.max(d);
            assert!(a.data().iter().any(|v| *v != 0.0), "trial {trial}: transformer output is all zero");
        }
    }
    let el = t0.elapsed();
    report(
        2,
        "partial conv with an all-ones mask equals the standard-conv twin",
        worst < 1e-5 && el < Duration::from_secs(60),
        format!("max abs diff {worst:.3e} over eval and train mode, {}", secs(el)),
    );
}

/// Valid where any input pixel of the 3x3 window (padding 1) is valid.
fn window_or(m: &[bool], h: usize, w: usize, stride: usize) -> (Vec<bool>, usize, usize) {
    let (oh, ow) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
    let mut out = vec![false; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut any = false;
            for dy in 0..3 {
                for dx in 0..3 {
                    let (y, x) = ((oy * stride + dy) as isize - 1, (ox * stride + dx) as isize - 1);
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        any |= m[y as usize * w + x as usize];
                    }
                }
            }
            out[oy * ow + ox] = any;
        }
    }
    (out, oh, ow)
}

fn random_mask(i: u64, s: usize) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + i);
    let mut m = match i % 5 {
        0 => free_form_mask(s, s, &MaskParams::default(), &mut stream(i, 0)).unwrap().mask,
        1 => {
            let p = MaskParams { valid_fraction: (0.02, 0.2), stroke_count: (4, 12), ..MaskParams::default() };
            free_form_mask(s, s, &p, &mut stream(i, 0)).unwrap().mask
        }
        2 => {
            let p = [0.003, 0.02, 0.1, 0.4][(i / 5) as usize % 4];
            let data = (0..s * s).map(|_| u8::from(rng.random_bool(p))).collect();
            Mask::from_data(s, s, data).unwrap()
        }
        3 => {
            let (y0, x0) = (rng.random_range(0..s), rng.random_range(0..s));
            let (y1, x1) = (rng.random_range(y0..s), rng.random_range(x0..s));
            let mut m = Mask::zeros(s, s);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    m.set(y, x, true);
                }
            }
            m
        }
        _ => {
            let mut m = Mask::zeros(s, s);
            m.set(rng.random_range(0..s), rng.random_range(0..s), true);
            m
        }
    };
    if m.valid_count() == 0 {
        m.set(0, 0, true);
    }
    m
}

#[test]
fn criterion_03_mask_update_oracle() {
    let t0 = Instant::now();
    let cfg = desk();
    let s = cfg.size;
    let (lt, store) = build_lt(cfg.transformer.clone(), 3);
    let layers = cfg.transformer.layers();
    let mut exact = 0;
    let mut layer_checks = 0;
    for i in 0..50 {
        let mask = random_mask(i, s);
        let x = masked(&Tensor::from_fn([1, 3, s, s], |j| ((j * 37 % 101) as f32 / 50.0) - 1.0), &mask_batch(&[&mask]));
        let tape = Tape::new();
        let ctx = Ctx::inference(&tape, &store);
        let out = lt.forward(&ctx, &x, &mask_batch(&[&mask])).unwrap();
        let mut cur: Vec<bool> = mask.data().iter().map(|&v| v == 1).collect();
        let (mut h, mut w) = (s, s);
        let mut all = true;
        for (l, &(_, stride)) in layers.iter().enumerate() {
            let (next, oh, ow) = window_or(&cur, h, w, stride);
            let got = &out.masks[l];
            let same = got.shape() == [1, 1, oh, ow]
                && got.data().iter().zip(&next).all(|(&g, &e)| (g == 1.0 && e) || (g == 0.0 && !e));
            layer_checks += 1;
            all &= same;
            cur = next;
            (h, w) = (oh, ow);
        }
        if all {
            exact += 1;
        }
    }
    let el = t0.elapsed();
    report(
        3,
        "layer masks match the brute-force window-OR oracle",
        exact == 50 && el < Duration::from_secs(60),
        format!("{exact}/50 masks exact across {layer_checks} layer comparisons, {}", secs(el)),
    );
}

const GRAD_TOL: f64 = 1e-4;
const INSTANCES: u64 = 5;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn probe<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> texrect_tensor::Result<Var<'t, f64>> {
    let w = Tensor::from_fn(y.shape(), |i| ((i * 7919 % 23) as f64 - 11.0) / 10.0);
    Ok(y.mul(tape.constant(w))?.sum())
}

/// Worst relative error of an op over seeded random instances.
fn op_check<F>(shapes: &[&[usize]], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> texrect_tensor::Result<Var<'t, f64>>,
{
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7 + 1);
        let inputs: Vec<_> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
        worst = worst.max(check_inputs(&inputs, CheckOptions::default(), &f).unwrap().max_rel_err());
    }
    worst
}

/// Replace every trainable tensor with uniform noise so zero-initialised
/// projections and gains do not hide gradient paths.
fn randomize(store: &ParamStore<f32>, seed: u64) -> ParamStore<f64> {
    let mut s = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = s.ids().collect();
    for id in ids {
        if s.entries()[id.index()].kind == ParamKind::Trainable {
            let shape = s.get(id).shape().to_vec();
            s.set(id, Tensor::from_fn(&shape[..], |_| rng.random_range(-0.6..0.6))).unwrap();
        }
    }
    s
}

fn micro_lt_cfg() -> TransformerConfig {
    TransformerConfig { divisor: 16, ..TransformerConfig::default() }
}

fn micro_denoiser_cfg(context_dim: usize) -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 2,
        base: 4,
        mults: vec![1, 2],
        res_blocks: 1,
        attn_levels: vec![1],
        mid_attn: true,
        sin_dim: 4,
        time_dim: 8,
        groups: 2,
        context_dim,
        concat: true,
        crossattn: true,
    }
}

#[test]
fn criterion_04_gradient_checks() {
    let t0 = Instant::now();
    let mut results: Vec<(&str, f64)> = Vec::new();

    results.push(("matmul", op_check(&[&[2, 3, 4], &[2, 4, 5]], |tp, v| probe(tp, v[0].matmul(v[1])?))));
    results.push(("conv2d", op_check(&[&[2, 3, 6, 5], &[4, 3, 3, 3], &[4]], |tp, v| probe(tp, v[0].conv2d(v[1], Some(v[2]), 2, 1)?))));
    let mut mr = ChaCha8Rng::seed_from_u64(40);
    let pmask = Tensor::from_fn([2, 1, 6, 6], |_| if mr.random_bool(0.6) { 1.0 } else { 0.0 });
    for stride in [1usize, 2] {
        let m = pmask.clone();
        results.push((
            if stride == 1 { "partial_conv s1" } else { "partial_conv s2" },
            op_check(&[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]], move |tp, v| probe(tp, v[0].partial_conv2d(v[1], Some(v[2]), &m, stride, 1)?.0)),
        ));
    }
    let bmask = Tensor::from_fn([3, 1, 3, 3], |_| if mr.random_bool(0.5) { 1.0 } else { 0.0 });
    results.push((
        "batch_norm train",
        op_check(&[&[3, 2, 3, 3], &[2], &[2]], |tp, v| probe(tp, v[0].batch_norm(v[1], v[2], None, BnMode::Train)?.0)),
    ));
    results.push((
        "batch_norm masked",
        op_check(&[&[3, 2, 3, 3], &[2], &[2]], move |tp, v| probe(tp, v[0].batch_norm(v[1], v[2], Some(&bmask), BnMode::Train)?.0)),
    ));
    let (mean, var) = ([0.3, -0.2], [1.4, 0.6]);
    results.push((
        "batch_norm eval",
        op_check(&[&[2, 2, 3, 3], &[2], &[2]], move |tp, v| {
            probe(tp, v[0].batch_norm(v[1], v[2], None, BnMode::Eval { mean: &mean, var: &var })?.0)
        }),
    ));
    results.push(("group_norm", op_check(&[&[2, 4, 3, 3], &[4], &[4]], |tp, v| probe(tp, v[0].group_norm(v[1], v[2], 2)?))));
    results.push(("softmax", op_check(&[&[2, 4, 3]], |tp, v| probe(tp, v[0].softmax(2)?))));
    results.push((
        "attention",
        op_check(&[&[2, 5, 3], &[2, 4, 3], &[2, 4, 6]], |tp, v| {
            probe(tp, attention(v[0], v[1], v[2]).map_err(|e| texrect_tensor::TensorError::Contract { op: "attention", detail: e.to_string() })?.0)
        }),
    ));
    results.push((
        "elementwise",
        op_check(&[&[3, 4], &[3, 4]], |tp, v| probe(tp, v[0].mul(v[1])?.silu().add(v[0].tanh())?.sub(v[1].relu())?.exp())),
    ));
    results.push((
        "shape ops",
        op_check(&[&[1, 2, 3, 3], &[2]], |tp, v| {
            let u = v[0].upsample2x()?.add_channel_bias(v[1])?;
            let c = Var::concat(&[u, u.narrow(1, 1, 1)?], 1)?;
            probe(tp, c.permute(&[0, 2, 3, 1])?.reshape(&[6, 18])?)
        }),
    ));

    let opts = CheckOptions { step: 1e-6, max_coords: 24 };
    let module = |name: &'static str, f: &dyn Fn(u64) -> f64| -> (&'static str, f64) {
        (name, (0..INSTANCES).map(f).fold(0.0, f64::max))
    };

    results.push(module("self-attention", &|seed| {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, 0);
        let sa = SelfAttention::new(&mut Builder::new(&mut store, &mut rng), "sa", 8);
        let store = randomize(&store, seed);
        let x = rand_t(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 8, 3, 3]);
        check_model(&store, true, opts, |ctx| {
            let (y, _) = sa.forward(ctx, ctx.tape().constant(x.clone()))?;
            Ok(probe(ctx.tape(), y)?)
        })
        .unwrap()
        .max_rel_err()
    }));
    results.push(module("cross-attention", &|seed| {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, 1);
        let ca = CrossAttn::new(&mut Builder::new(&mut store, &mut rng), "ca", 4, 6, 2);
        let store = randomize(&store, seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&mut r, &[2, 4, 3, 3]);
        let c = rand_t(&mut r, &[2, 6, 5]);
        check_model(&store, true, opts, |ctx| {
            let tape = ctx.tape();
            let (y, _) = ca.forward(ctx, tape.constant(x.clone()), tape.constant(c.clone()))?;
            Ok(probe(tape, y)?)
        })
        .unwrap()
        .max_rel_err()
    }));
    results.push(module("latent transformer", &|seed| {
        let (lt, store) = build_lt(micro_lt_cfg(), seed);
        let store = randomize(&store, seed);
        let mask = random_mask(seed, 16);
        let m = mask_batch::<f64>(&[&mask, &random_mask(seed + 10, 16)]);
        let x = rand_t(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 3, 16, 16]);
        check_model(&store, true, opts, |ctx| {
            let out = lt.forward(ctx, &x, &m)?;
            Ok(probe(ctx.tape(), out.tokens)?)
        })
        .unwrap()
        .max_rel_err()
    }));
    results.push(module("micro denoiser", &|seed| {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, 2);
        let den = Denoiser::new(&mut Builder::new(&mut store, &mut rng), "unet", micro_denoiser_cfg(6)).unwrap();
        let store = randomize(&store, seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let z = rand_t(&mut r, &[2, 2, 4, 4]);
        let zv = rand_t(&mut r, &[2, 2, 4, 4]);
        let c = rand_t(&mut r, &[2, 6, 3]);
        let ts = [1 + seed as usize * 37, 900 - seed as usize * 11];
        check_model(&store, true, opts, |ctx| {
            let tape = ctx.tape();
            let y = den.forward(ctx, tape.constant(z.clone()), &ts, Some(tape.constant(zv.clone())), Some(tape.constant(c.clone())))?;
            Ok(y.mse(tape.constant(zv.clone()))?)
        })
        .unwrap()
        .max_rel_err()
    }));

    let el = t0.elapsed();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let failing: Vec<_> = results.iter().filter(|r| !(r.1 < GRAD_TOL)).map(|r| format!("{} {:.2e}", r.0, r.1)).collect();
    report(
        4,
        "analytic gradients match central differences at 64-bit",
        failing.is_empty() && el < Duration::from_secs(300),
        format!(
            "{} checks x {INSTANCES} instances, worst rel err {worst:.2e}{}, {}",
            results.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join("; ")) },
            secs(el)
        ),
    );
}

#[test]
fn criterion_05_schedule_statistics() {
    let t0 = Instant::now();
    let sched = Schedule::paper();
    let t = sched.t;
    let ab_t = sched.alpha_bar[t];
    let n = 10_000;
    let mut rng = stream(5, 0);
    let z0 = gaussian(&[n, 4, 4, 4], &mut rng);
    let eps = gaussian(&[n, 4, 4, 4], &mut rng);
    let zt = forward_diffuse(&z0, &vec![t; n], &eps, &sched).unwrap();
    let d = zt.data();
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    let el = t0.elapsed();
    report(
        5,
        "paper schedule endpoint and forward marginals",
        ab_t < 1e-3 && mean.abs() < 0.05 && (var - 1.0).abs() < 0.05 && el < Duration::from_secs(60),
        format!("alpha_bar_T {ab_t:.3e}, mean {mean:+.4}, var {var:.4} over {n} latents, {}", secs(el)),
    );
}

#[test]
fn criterion_06_ddim_determinism() {
    let t0 = Instant::now();
    let cfg = desk();
    assert_eq!(cfg.diffusion.sampler.eta, 0.0);
    let codec = Codec::new(cfg.codec.clone(), 6).unwrap();
    let model = DiffusionModel::new(&cfg, 6).unwrap();
    let sched = cfg.schedule().unwrap();
    let imgs: Vec<Tensor<f32>> = (0..2).map(|k| texture(k, 6, cfg.size)).collect();
    let masks: Vec<Mask> = (0..2).map(|k| random_mask(k * 5, cfg.size)).collect();
    let degraded: Vec<Tensor<f32>> = imgs.iter().zip(&masks).map(|(x, m)| m.apply(x).unwrap()).collect();
    let items: Vec<_> = degraded.iter().zip(&masks).collect();
    let runs: Vec<Vec<Vec<u32>>> = (0..3)
        .map(|_| {
            let (out, _) = rectify_batch(&model, &codec, &sched, &cfg.diffusion.sampler, &items, &[11, 12]).unwrap();
            out.iter().map(bits).collect()
        })
        .collect();
    let el = t0.elapsed();
    let same = runs.iter().all(|r| *r == runs[0]);
    let distinct = runs[0][0] != runs[0][1];
    report(
        6,
        "DDIM sampling with eta 0 is bit-reproducible",
        same && distinct && el < Duration::from_secs(120),
        format!("3 runs x 2 images x {} steps identical: {same}, {}", cfg.diffusion.sampler.steps, secs(el)),
    );
}

struct Overfit {
    dir: TempDir,
    cfg: RunConfig,
    triplets: Vec<Triplet>,
    losses: Vec<f64>,
    outputs: Vec<Tensor<f32>>,
    elapsed: Duration,
}

fn overfit_pairs(cfg: &RunConfig) -> Vec<Triplet> {
    (0..8)
        .map(|k| {
            let planar = texture(k, 700 + k as u64, cfg.size);
            let id = format!("pair{k}");
            let s = degrade(&planar, &id, &cfg.degrade, 900 + k as u64).unwrap();
            Triplet { id, planar, degraded: s.degraded, mask: s.mask }
        })
        .collect()
}

/// The desk-preset overfit run, shared by every test that needs a trained model.
fn overfit() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| {
        let t0 = Instant::now();
        let cfg = desk();
        let triplets = overfit_pairs(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&cfg, &triplets, dir.path(), &TrainOptions::default()).unwrap();
        let outputs = rectify_all(&out.trained, &triplets).unwrap();
        Overfit { dir, cfg, triplets, losses: out.losses, outputs, elapsed: t0.elapsed() }
    })
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_07_overfit_end_to_end() {
    let run = overfit();
    assert_eq!(run.losses.len(), run.cfg.train.steps);
    // Baseline is the mean over the first 50 steps, which can only sit below
    // the step-0 value once learning starts; the end is the last 250 steps.
    let start = window_mean(&run.losses[..50]);
    let end = window_mean(&run.losses[run.losses.len() - 250..]);
    let drop = 1.0 - end / start;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for (t, o) in run.triplets.iter().zip(&run.outputs) {
        let a = ssim(o, &t.planar).unwrap();
        let b = ssim(&t.degraded, &t.planar).unwrap();
        if a > b {
            wins += 1;
        }
        pairs.push(format!("{a:.3}/{b:.3}"));
    }
    report(
        7,
        "overfit run: loss drop and rectified beats degraded",
        drop >= 0.9 && wins >= 6 && run.elapsed < Duration::from_secs(3600),
        format!(
            "loss {start:.4} -> {end:.4} ({:.1}% drop), {wins}/8 pairs improved [rectified/degraded ssim {}], {}",
            100.0 * drop,
            pairs.join(" "),
            secs(run.elapsed)
        ),
    );
}

/// The command line `rectify` on the overfit checkpoint: a planar training
/// texture with a full mask comes back close to itself, and a repeated seed
/// gives identical bytes.
#[test]
fn rectify_command_on_overfit_model() {
    let run = overfit();
    let d = run.dir.path();
    let ckpt = d.join(MODEL_CKPT);
    let input = d.join("planar0.png");
    let mask = d.join("ones.png");
    save_png(&input, &run.triplets[0].planar).unwrap();
    Mask::ones(run.cfg.size, run.cfg.size).save(&mask).unwrap();
    let mut bytes = Vec::new();
    for k in 0..2 {
        let out = d.join(format!("rect{k}.png"));
        let o = texrect(&[
            "rectify", "--input", input.to_str().unwrap(), "--mask", mask.to_str().unwrap(),
            "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9",
        ]);
        expect_ok(&o, "rectify");
        bytes.push(fs::read(&out).unwrap());
    }
    assert_eq!(bytes[0], bytes[1], "same seed must give identical PNG bytes");
    let small = d.join("small.png");
    Mask::ones(run.cfg.size / 2, run.cfg.size / 2).save(&small).unwrap();
    let o = texrect(&[
        "rectify", "--input", input.to_str().unwrap(), "--mask", small.to_str().unwrap(),
        "--checkpoint", ckpt.to_str().unwrap(), "--out", d.join("bad.png").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimension error"));

    let got = load_tensor(&d.join("rect0.png")).unwrap();
    let planar = load_tensor(&input).unwrap();
    let s = ssim(&got, &planar).unwrap();
    println!("rectify on a planar training texture with a full mask: ssim {s:.3}");
    assert!(s > 0.6, "ssim {s:.3} should exceed 0.6");
}

#[test]
fn criterion_08_note() {
    println!("criterion  8 is the slow ablation suite; run it with `cargo test -p texrect --test acceptance -- --ignored`");
}

#[test]
#[ignore = "slow suite: trains five variants"]
fn criterion_08_ablation_mechanics() {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    let data = tmp.path().join("data");
    let out = tmp.path().join("ablation");
    write_sources(&src, 10, 96);
    let o = texrect(&[
        "gen-data", "--src", src.to_str().unwrap(), "--out", data.to_str().unwrap(),
        "--splits", "0.8,0.1,0.1", "--samples-per-source", "1",
    ]);
    expect_ok(&o, "gen-data");
    let o = texrect(&["ablate", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--eval-split", "train"]);
    expect_ok(&o, "ablate");
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next(), Some("variant,ssim,gmd"));
    let rows: BTreeMap<String, (f64, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 3, "row {l:?}");
            (f[0].to_string(), (f[1].parse().unwrap(), f[2].parse().unwrap()))
        })
        .collect();
    let names: Vec<&str> = rows.keys().map(String::as_str).collect();
    let expected = ["concat", "crossattn", "full", "pce", "sae"];
    let full = rows.get("full").map(|r| r.0).unwrap_or(f64::NAN);
    let beaten = ["concat", "crossattn", "sae", "pce"].iter().filter(|v| rows.get(**v).is_some_and(|r| full >= r.0)).count();
    let el = t0.elapsed();
    let table: Vec<String> = rows.iter().map(|(k, v)| format!("{k} {:.3}", v.0)).collect();
    report(
        8,
        "ablation emits the five variants and full leads on ssim",
        names == expected && beaten >= 3 && el < Duration::from_secs(5 * 3600),
        format!("rows [{}], full >= {beaten}/4 ablations, {}", table.join(", "), secs(el)),
    );
}

#[test]
fn criterion_09_metric_sanity() {
    let t0 = Instant::now();
    let gram = GramExtractor::new(desk().gmd_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_identity = 0.0f64;
    let mut gram_self = 0.0f64;
    let mut asymmetric = 0;
    for i in 0..100 {
        let a = if i % 2 == 0 { texture(i, i as u64, 32) } else { Tensor::from_fn([3, 32, 32], |_| rng.random_range(0.0..1.0f32)) };
        let b = Tensor::from_fn([3, 32, 32], |j| (a.data()[j] + rng.random_range(-0.3..0.3f32)).clamp(0.0, 1.0));
        worst_identity = worst_identity.max((ssim(&a, &a).unwrap() - 1.0).abs());
        gram_self = gram_self.max(gram.distance(&a, &a).unwrap());
        if ssim(&a, &b).unwrap() != ssim(&b, &a).unwrap() || gram.distance(&a, &b).unwrap() != gram.distance(&b, &a).unwrap() {
            asymmetric += 1;
        }
    }
    let el = t0.elapsed();
    report(
        9,
        "ssim identity, zero self gram distance, symmetry",
        worst_identity <= 1e-9 && gram_self == 0.0 && asymmetric == 0 && el < Duration::from_secs(60),
        format!("|ssim(x,x)-1| <= {worst_identity:.1e}, max gmd(x,x) {gram_self}, {asymmetric}/100 asymmetric pairs, {}", secs(el)),
    );
}

#[test]
fn criterion_10_data_determinism() {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    write_sources(&src, 10, 96);
    let mut trees = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("d{k}"));
        let o = texrect(&["gen-data", "--src", src.to_str().unwrap(), "--out", out.to_str().unwrap(), "--size", "64", "--seed", "7"]);
        expect_ok(&o, "gen-data");
        trees.push(tree(&out));
    }
    let files = trees[0].len();
    let identical = trees[0] == trees[1];

    let cfg = desk().degrade;
    let mut rng = stream(10, 0);
    let (mut h, mut t) = (Vec::new(), Vec::new());
    for _ in 0..10_000 {
        let d = sample_draw(&cfg, &mut rng);
        h.extend(d.hmg);
        t.extend(d.tps);
    }
    let range = |v: &[f64]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let (hl, hh) = range(&h);
    let (tl, th) = range(&t);
    let in_range = !h.is_empty() && !t.is_empty() && hl >= 0.3 && hh <= 0.5 && tl >= 0.1 && th <= 0.3;
    let el = t0.elapsed();
    report(
        10,
        "gen-data is byte-reproducible and warp scales stay in range",
        identical && files > 30 && in_range && el < Duration::from_secs(120),
        format!(
            "{files} files identical: {identical}; s_hmg [{hl:.3}, {hh:.3}] over {} draws, s_tps [{tl:.3}, {th:.3}] over {}, {}",
            h.len(),
            t.len(),
            secs(el)
        ),
    );
}

#[test]
fn usage_and_configuration_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = texrect(&["gen-data", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--src"));

    let src = tmp.path().join("src");
    write_sources(&src, 3, 80);
    let o = texrect(&["gen-data", "--src", src.to_str().unwrap(), "--out", out.to_str().unwrap(), "--splits", "0.5,0.5,0.5"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("configuration error"));

    let o = texrect(&["ablate", "--data", "d", "--out", "o", "--variants", "full,vqgan"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("full, concat, crossattn, sae, pce"), "{err}");

    let o = texrect(&["eval", "--checkpoint", tmp.path().join("none.ckpt").to_str().unwrap(), "--data", "d", "--out", "o"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no checkpoint"));

    let o = texrect(&["--preset", "paper", "train", "--data", tmp.path().join("missing").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
}
