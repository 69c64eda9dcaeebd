//! Run configuration: a flat `section.key = value` text format with a
//! content fingerprint.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::dataset::{DataConfig, SplitFractions};
use crate::degrade::DegradeConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{make_schedule, SamplerConfig, Schedule};
use crate::error::{Error, Result};
use crate::transformer::TransformerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preset> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?}; expected desk or paper"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Probability of replacing both conditions by the null embeddings.
    pub p_uncond: f64,
    pub sampler: SamplerConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub size: usize,
    pub seed: u64,
    pub split: SplitFractions,
    pub samples_per_source: usize,
    pub degrade: DegradeConfig,
    pub codec: CodecConfig,
    pub codec_train: OptimConfig,
    pub transformer: TransformerConfig,
    /// `latent_channels` and `context_dim` are derived from the codec and
    /// transformer and are not keys of their own.
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub train: OptimConfig,
    pub checkpoint_every: usize,
    pub gmd_seed: u64,
    pub sample_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk)
    }
}

fn list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn pair<T: Display>(p: (T, T)) -> String {
    format!("{},{}", p.0, p.1)
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| scalar(key, p.trim())).collect()
}

fn parse_pair<T: FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)> {
    match parse_list::<T>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated values, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = RunConfig {
            size: 64,
            seed: 0,
            split: SplitFractions::default(),
            samples_per_source: 4,
            degrade: DegradeConfig::default(),
            codec: CodecConfig::default(),
            codec_train: OptimConfig { steps: 2000, lr: 1e-3, batch: 8 },
            transformer: TransformerConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion: DiffusionConfig {
                t: 1000,
                beta_start: 0.0015,
                beta_end: 0.0195,
                p_uncond: 0.1,
                sampler: SamplerConfig { steps: 50, eta: 0.0, guidance: 1.0 },
            },
            train: OptimConfig { steps: 5000, lr: 1e-4, batch: 8 },
            checkpoint_every: 1000,
            gmd_seed: 1234,
            sample_seed: 0,
        };
        let mut c = match p {
            Preset::Desk => desk,
            Preset::Paper => RunConfig {
                size: 256,
                transformer: TransformerConfig { divisor: 1, ..TransformerConfig::default() },
                denoiser: DenoiserConfig {
                    base: 128,
                    mults: vec![1, 2, 4],
                    attn_levels: vec![1, 2],
                    sin_dim: 128,
                    time_dim: 512,
                    groups: 32,
                    ..DenoiserConfig::default()
                },
                diffusion: DiffusionConfig { sampler: SamplerConfig { steps: 200, ..desk.diffusion.sampler }, ..desk.diffusion },
                codec: CodecConfig { k: 8192, hidden: vec![128, 256], ..CodecConfig::default() },
                codec_train: OptimConfig { steps: 100_000, lr: 1e-4, batch: 32 },
                train: OptimConfig { steps: 1_000_000, lr: 1e-6, batch: 32 },
                checkpoint_every: 10_000,
                ..desk
            },
        };
        c.derive();
        c
    }

    /// Fill the denoiser fields that follow from other sections.
    fn derive(&mut self) {
        self.denoiser.latent_channels = self.codec.c;
        self.denoiser.context_dim = self.transformer.layers().last().map_or(1, |l| l.0);
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig { size: self.size, samples_per_source: self.samples_per_source, degrade: self.degrade.clone() }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        make_schedule(self.diffusion.t, self.diffusion.beta_start, self.diffusion.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.degrade.validate()?;
        self.codec.validate()?;
        self.transformer.validate()?;
        self.denoiser.validate()?;
        self.schedule()?;
        let latent = self.codec.latent_side(self.size)?;
        self.transformer.out_shape(self.size)?;
        if latent % (1 << (self.denoiser.mults.len() - 1)) != 0 {
            return Err(Error::Config(format!("latent side {latent} is not divisible by the denoiser's downsampling")));
        }
        let d = &self.diffusion;
        if !(0.0..=1.0).contains(&d.p_uncond) || !(0.0..=1.0).contains(&d.sampler.eta) || !d.sampler.guidance.is_finite() {
            return Err(Error::Config("p_uncond and eta must lie in [0, 1] and guidance must be finite".into()));
        }
        if d.sampler.steps == 0 || d.sampler.steps > d.t {
            return Err(Error::Config(format!("ddim steps {} outside [1, {}]", d.sampler.steps, d.t)));
        }
        for (name, o) in [("codec", &self.codec_train), ("train", &self.train)] {
            if o.batch == 0 || !(o.lr > 0.0 && o.lr.is_finite()) {
                return Err(Error::Config(format!("{name}: batch must be >= 1 and lr positive")));
            }
        }
        if self.samples_per_source == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("samples_per_source and checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Every key with its canonical value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.degrade;
        let m = &g.mask;
        let c = &self.codec;
        let t = &self.transformer;
        let d = &self.denoiser;
        let f = &self.diffusion;
        vec![
            ("run.size", self.size.to_string()),
            ("run.seed", self.seed.to_string()),
            ("data.split", list(&self.split.0)),
            ("data.samples_per_source", self.samples_per_source.to_string()),
            ("data.p_hmg", g.p_hmg.to_string()),
            ("data.s_hmg", pair(g.s_hmg)),
            ("data.p_tps", g.p_tps.to_string()),
            ("data.s_tps", pair(g.s_tps)),
            ("data.tps_grid", g.tps_grid.to_string()),
            ("data.min_valid", g.min_valid.to_string()),
            ("data.mask_strokes", pair(m.stroke_count)),
            ("data.mask_brush", pair(m.brush_width)),
            ("data.mask_vertices", pair(m.vertex_count)),
            ("data.mask_valid", pair(m.valid_fraction)),
            ("codec.f", c.f.to_string()),
            ("codec.c", c.c.to_string()),
            ("codec.k", c.k.to_string()),
            ("codec.hidden", list(&c.hidden)),
            ("codec.res_blocks", c.res_blocks.to_string()),
            ("codec.beta", c.beta.to_string()),
            ("codec.dead_after", c.dead_after.to_string()),
            ("codec.steps", self.codec_train.steps.to_string()),
            ("codec.lr", self.codec_train.lr.to_string()),
            ("codec.batch", self.codec_train.batch.to_string()),
            ("transformer.divisor", t.divisor.to_string()),
            ("transformer.partial", t.partial.to_string()),
            ("transformer.attention", t.attention.to_string()),
            ("denoiser.base", d.base.to_string()),
            ("denoiser.mults", list(&d.mults)),
            ("denoiser.res_blocks", d.res_blocks.to_string()),
            ("denoiser.attn_levels", list(&d.attn_levels)),
            ("denoiser.mid_attn", d.mid_attn.to_string()),
            ("denoiser.sin_dim", d.sin_dim.to_string()),
            ("denoiser.time_dim", d.time_dim.to_string()),
            ("denoiser.groups", d.groups.to_string()),
            ("denoiser.concat", d.concat.to_string()),
            ("denoiser.crossattn", d.crossattn.to_string()),
            ("diffusion.t", f.t.to_string()),
            ("diffusion.beta_start", f.beta_start.to_string()),
            ("diffusion.beta_end", f.beta_end.to_string()),
            ("diffusion.p_uncond", f.p_uncond.to_string()),
            ("diffusion.guidance", f.sampler.guidance.to_string()),
            ("diffusion.ddim_steps", f.sampler.steps.to_string()),
            ("diffusion.eta", f.sampler.eta.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.batch", self.train.batch.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("eval.gmd_seed", self.gmd_seed.to_string()),
            ("eval.sample_seed", self.sample_seed.to_string()),
        ]
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.degrade;
        let c = &mut self.codec;
        let t = &mut self.transformer;
        let d = &mut self.denoiser;
        let f = &mut self.diffusion;
        match key {
            "run.size" => self.size = scalar(key, v)?,
            "run.seed" => self.seed = scalar(key, v)?,
            "data.split" => {
                let xs: Vec<f64> = parse_list(key, v)?;
                self.split = SplitFractions(
                    xs.try_into().map_err(|_| Error::Config(format!("{key}: expected three fractions")))?,
                )
            }
            "data.samples_per_source" => self.samples_per_source = scalar(key, v)?,
            "data.p_hmg" => g.p_hmg = scalar(key, v)?,
            "data.s_hmg" => g.s_hmg = parse_pair(key, v)?,
            "data.p_tps" => g.p_tps = scalar(key, v)?,
            "data.s_tps" => g.s_tps = parse_pair(key, v)?,
            "data.tps_grid" => g.tps_grid = scalar(key, v)?,
            "data.min_valid" => g.min_valid = scalar(key, v)?,
            "data.mask_strokes" => g.mask.stroke_count = parse_pair(key, v)?,
            "data.mask_brush" => g.mask.brush_width = parse_pair(key, v)?,
            "data.mask_vertices" => g.mask.vertex_count = parse_pair(key, v)?,
            "data.mask_valid" => g.mask.valid_fraction = parse_pair(key, v)?,
            "codec.f" => c.f = scalar(key, v)?,
            "codec.c" => c.c = scalar(key, v)?,
            "codec.k" => c.k = scalar(key, v)?,
            "codec.hidden" => c.hidden = parse_list(key, v)?,
            "codec.res_blocks" => c.res_blocks = scalar(key, v)?,
            "codec.beta" => c.beta = scalar(key, v)?,
            "codec.dead_after" => c.dead_after = scalar(key, v)?,
            "codec.steps" => self.codec_train.steps = scalar(key, v)?,
            "codec.lr" => self.codec_train.lr = scalar(key, v)?,
            "codec.batch" => self.codec_train.batch = scalar(key, v)?,
            "transformer.divisor" => t.divisor = scalar(key, v)?,
            "transformer.partial" => t.partial = scalar(key, v)?,
            "transformer.attention" => t.attention = scalar(key, v)?,
            "denoiser.base" => d.base = scalar(key, v)?,
            "denoiser.mults" => d.mults = parse_list(key, v)?,
            "denoiser.res_blocks" => d.res_blocks = scalar(key, v)?,
            "denoiser.attn_levels" => d.attn_levels = parse_list(key, v)?,
            "denoiser.mid_attn" => d.mid_attn = scalar(key, v)?,
            "denoiser.sin_dim" => d.sin_dim = scalar(key, v)?,
            "denoiser.time_dim" => d.time_dim = scalar(key, v)?,
            "denoiser.groups" => d.groups = scalar(key, v)?,
            "denoiser.concat" => d.concat = scalar(key, v)?,
            "denoiser.crossattn" => d.crossattn = scalar(key, v)?,
            "diffusion.t" => f.t = scalar(key, v)?,
            "diffusion.beta_start" => f.beta_start = scalar(key, v)?,
            "diffusion.beta_end" => f.beta_end = scalar(key, v)?,
            "diffusion.p_uncond" => f.p_uncond = scalar(key, v)?,
            "diffusion.guidance" => f.sampler.guidance = scalar(key, v)?,
            "diffusion.ddim_steps" => f.sampler.steps = scalar(key, v)?,
            "diffusion.eta" => f.sampler.eta = scalar(key, v)?,
            "train.steps" => self.train.steps = scalar(key, v)?,
            "train.lr" => self.train.lr = scalar(key, v)?,
            "train.batch" => self.train.batch = scalar(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = scalar(key, v)?,
            "eval.gmd_seed" => self.gmd_seed = scalar(key, v)?,
            "eval.sample_seed" => self.sample_seed = scalar(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        self.derive();
        Ok(())
    }

    /// Canonical text: every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Apply `key = value` lines on top of `base`. Blank lines and `#`
    /// comments are ignored; unknown or repeated keys are errors.
    pub fn parse_onto(base: RunConfig, text: &str) -> Result<RunConfig> {
        let mut cfg = base;
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
            cfg.set(k, v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse_onto(RunConfig::default(), text)
    }

    pub fn load(path: &Path, preset: Preset) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_onto(RunConfig::preset(preset), &text)
    }

    /// Hex SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short form used in file headers and logs.
    pub fn short_fingerprint(&self) -> String {
        self.fingerprint()[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_differ() {
        let desk = RunConfig::preset(Preset::Desk);
        let paper = RunConfig::preset(Preset::Paper);
        desk.validate().unwrap();
        paper.validate().unwrap();
        assert_eq!((desk.size, desk.diffusion.sampler.steps, desk.train.lr, desk.train.batch), (64, 50, 1e-4, 8));
        assert_eq!((paper.size, paper.diffusion.sampler.steps, paper.train.lr, paper.train.batch), (256, 200, 1e-6, 32));
        assert_eq!(paper.transformer.out_shape(256).unwrap(), (256, 1024));
        assert_eq!(desk.denoiser.context_dim, 64);
        assert_ne!(desk.fingerprint(), paper.fingerprint());
    }

    #[test]
    fn text_round_trips() {
        for p in [Preset::Desk, Preset::Paper] {
            let c = RunConfig::preset(p);
            let back = RunConfig::parse_onto(RunConfig::preset(Preset::Desk), &c.to_text()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.fingerprint(), c.fingerprint());
        }
    }

    #[test]
    fn overrides_comments_and_errors() {
        let c = RunConfig::parse("# tweak\ntrain.steps = 10  # short\n\ncodec.hidden = 16,32\n").unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.codec.hidden, vec![16, 32]);
        assert!(RunConfig::parse("train.stepz = 10").is_err());
        assert!(RunConfig::parse("train.steps = 1\ntrain.steps = 2").is_err());
        assert!(RunConfig::parse("train.steps 10").is_err());
        assert!(RunConfig::parse("data.split = 0.5,0.2,0.2").is_err());
        assert!(RunConfig::parse("diffusion.ddim_steps = 1001").is_err());
        assert!(RunConfig::parse("run.size = 60").is_err());
    }

    #[test]
    fn transformer_width_feeds_the_denoiser() {
        let c = RunConfig::parse("transformer.divisor = 2").unwrap();
        assert_eq!(c.denoiser.context_dim, 128);
    }
}
