//! Linear noise schedule, closed-form forward diffusion and the DDIM sampler.

use rand::Rng as _;
use rand_distr::StandardNormal;
use texrect_tensor::Tensor;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Schedule arrays are indexed by timestep `0..=T`; index 0 is the clean
/// signal (`beta_0 = 0`, `alpha_bar_0 = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub t: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if t < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "schedule needs T >= 2 and 0 < beta_start <= beta_end < 1, got T={t}, [{beta_start}, {beta_end}]"
        )));
    }
    let mut beta = vec![0.0; t + 1];
    let mut alpha = vec![1.0; t + 1];
    let mut alpha_bar = vec![1.0; t + 1];
    for i in 1..=t {
        beta[i] = beta_start + (beta_end - beta_start) * (i - 1) as f64 / (t - 1) as f64;
        alpha[i] = 1.0 - beta[i];
        alpha_bar[i] = alpha_bar[i - 1] * alpha[i];
    }
    Ok(Schedule { t, beta, alpha, alpha_bar })
}

impl Schedule {
    pub fn paper() -> Schedule {
        make_schedule(1000, 0.0015, 0.0195).expect("paper schedule is valid")
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t {
            return Err(Error::Config(format!("timestep {t} outside [1, {}]", self.t)));
        }
        Ok(())
    }
}

pub fn gaussian(shape: &[usize], rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps` with one timestep per leading
/// batch entry of `z0`.
pub fn forward_diffuse(z0: &Tensor<f32>, ts: &[usize], eps: &Tensor<f32>, sched: &Schedule) -> Result<Tensor<f32>> {
    if z0.shape() != eps.shape() {
        return Err(Error::Dimension(format!("noise {:?} vs latent {:?}", eps.shape(), z0.shape())));
    }
    let n = z0.shape()[0];
    if ts.len() != n {
        return Err(Error::Dimension(format!("{} timesteps for batch of {n}", ts.len())));
    }
    let per = z0.numel() / n.max(1);
    let mut out = Vec::with_capacity(z0.numel());
    for (b, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let (a, s) = (sched.alpha_bar[t].sqrt(), (1.0 - sched.alpha_bar[t]).sqrt());
        let range = b * per..(b + 1) * per;
        for (z, e) in z0.data()[range.clone()].iter().zip(&eps.data()[range]) {
            out.push((a * *z as f64 + s * *e as f64) as f32);
        }
    }
    Ok(Tensor::new(z0.shape(), out)?)
}

/// Uniform-stride subsequence `1, 1 + k, 1 + 2k, ...` of length `steps`.
pub fn ddim_timesteps(t: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t {
        return Err(Error::Config(format!("ddim steps must lie in [1, {t}], got {steps}")));
    }
    let stride = t / steps;
    Ok((0..steps).map(|i| 1 + i * stride).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub guidance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, eta: 0.0, guidance: 1.0 }
    }
}

/// How often each conditioning branch was evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub cond_evals: usize,
    pub uncond_evals: usize,
}

/// Which conditioning the predictor should use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Cond,
    Uncond,
}

/// DDIM from `z_t` (pure noise at the top of the subsequence) down to `z_0`.
/// `predict(z, t, branch)` returns the predicted noise; the null branch is
/// only evaluated when guidance differs from 1.
pub fn ddim_sample<F>(sched: &Schedule, cfg: &SamplerConfig, z_t: Tensor<f32>, rng: &mut Rng, mut predict: F) -> Result<(Tensor<f32>, SampleStats)>
where
    F: FnMut(&Tensor<f32>, usize, Branch) -> Result<Tensor<f32>>,
{
    let ts = ddim_timesteps(sched.t, cfg.steps)?;
    let mut stats = SampleStats::default();
    let mut z = z_t;
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let prev = if i == 0 { 0 } else { ts[i - 1] };
        let cond = predict(&z, t, Branch::Cond)?;
        stats.cond_evals += 1;
        let eps = if cfg.guidance != 1.0 {
            let unc = predict(&z, t, Branch::Uncond)?;
            stats.uncond_evals += 1;
            let g = cfg.guidance as f32;
            Tensor::new(cond.shape(), unc.data().iter().zip(cond.data()).map(|(u, c)| u + g * (c - u)).collect())?
        } else {
            cond
        };
        if eps.shape() != z.shape() {
            return Err(Error::Dimension(format!("predictor returned {:?} for latent {:?}", eps.shape(), z.shape())));
        }
        let (ab, ab_prev) = (sched.alpha_bar[t], sched.alpha_bar[prev]);
        let sigma = if cfg.eta > 0.0 {
            cfg.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt()
        } else {
            0.0
        };
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let noise = if sigma > 0.0 { Some(gaussian(z.shape(), rng)) } else { None };
        let data = z
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(j, (&zt, &e))| {
                let x0 = (zt as f64 - (1.0 - ab).sqrt() * e as f64) / ab.sqrt();
                let mut v = ab_prev.sqrt() * x0 + dir * e as f64;
                if let Some(n) = &noise {
                    v += sigma * n.data()[j] as f64;
                }
                v as f32
            })
            .collect();
        z = Tensor::new(z.shape(), data)?;
    }
    Ok((z, stats))
}
