use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use texrect_core::config::{Preset, RunConfig};
use texrect_core::dataset::{build_dataset, Split, SplitFractions};
use texrect_core::imageio::{load_tensor, save_png};
use texrect_core::mask::Mask;
use texrect_core::metrics::mean_std;
use texrect_core::model::{rectify_batch, Variant};
use texrect_core::pipeline::{ablate, evaluate, load_split_checked, run_training, TrainOptions, Trained};
use texrect_core::{Error, Result};

#[derive(Parser)]
#[command(name = "texrect", version, about = "Occlusion-aware texture rectification with latent diffusion")]
struct Cli {
    /// Key-value config file applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = clap::value_parser!(Preset))]
    preset: Option<Preset>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic dataset of planar / degraded / mask triplets.
    GenData(GenData),
    /// Train the codec, then the diffusion model.
    Train(Train),
    /// Rectify one image with a trained checkpoint.
    Rectify(Rectify),
    /// Rectify and score a dataset split.
    Eval(Eval),
    /// Train and score every ablation variant.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    /// Train,val,test fractions.
    #[arg(long)]
    splits: Option<String>,
    #[arg(long)]
    samples_per_source: Option<usize>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this model checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many diffusion steps.
    #[arg(long)]
    until: Option<usize>,
    /// Accept checkpoints written under another config.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Rectify {
    #[arg(long)]
    input: PathBuf,
    /// Binary PNG, white where the input is valid.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated subset of full, concat, crossattn, sae, pce.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(Variant))]
    variants: Option<Vec<Variant>>,
    /// Split the variants are scored on.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    eval_split: Split,
    #[arg(long)]
    force: bool,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?} (expected train, val or test)"))
}

impl Cli {
    fn base_config(&self) -> Result<RunConfig> {
        let preset = self.preset.unwrap_or(Preset::Desk);
        match &self.config {
            Some(path) => RunConfig::load(path, preset),
            None => Ok(RunConfig::preset(preset)),
        }
    }

    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = self.base_config()?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fingerprint a checkpoint must carry when sampling. Without `--config`
    /// or `--preset` the checkpoint's own config is trusted; `--seed` picks
    /// the sampling noise here and is not part of the comparison.
    fn expected_fingerprint(&self) -> Result<Option<String>> {
        if self.config.is_none() && self.preset.is_none() {
            return Ok(None);
        }
        Ok(Some(self.base_config()?.fingerprint()))
    }
}

fn gen_data(cli: &Cli, a: &GenData) -> Result<()> {
    let mut cfg = cli.run_config()?;
    if let Some(s) = a.size {
        cfg.size = s;
    }
    if let Some(s) = &a.splits {
        cfg.split = SplitFractions::parse(s)?;
    }
    if let Some(k) = a.samples_per_source {
        cfg.samples_per_source = k;
    }
    cfg.validate()?;
    let m = build_dataset(&a.src, &a.out, cfg.split, &cfg.data_config(), cfg.seed, &cfg.fingerprint())?;
    println!("dataset {} (fingerprint {})", a.out.display(), cfg.short_fingerprint());
    for split in Split::ALL {
        println!("  {split:<5} {:>6} samples", m.split(split).count());
    }
    if !m.skipped.is_empty() {
        println!("  skipped {} sources", m.skipped.len());
    }
    Ok(())
}

fn train(cli: &Cli, a: &Train) -> Result<()> {
    let cfg = cli.run_config()?;
    let (_, triplets) = load_split_checked(&a.data, Split::Train)?;
    log::info!("training on {} samples, config {}", triplets.len(), cfg.short_fingerprint());
    let opts = TrainOptions { resume: a.resume.clone(), until: a.until, force: a.force };
    let start = Instant::now();
    let out = run_training(&cfg, &triplets, &a.out, &opts)?;
    let tail = &out.losses[out.losses.len().saturating_sub(100)..];
    println!(
        "trained to step {} in {:.1}s, recent loss {:.5}",
        out.trained.state.step,
        start.elapsed().as_secs_f64(),
        mean_std(tail).0
    );
    Ok(())
}

fn rectify(cli: &Cli, a: &Rectify) -> Result<()> {
    let t = Trained::load(&a.checkpoint, cli.expected_fingerprint()?.as_deref(), a.force)?;
    let img = load_tensor(&a.input)?;
    let mask = Mask::load(&a.mask)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Dimension(format!(
            "mask is {}x{} but input is {w}x{h}",
            mask.width(),
            mask.height()
        )));
    }
    if (h, w) != (t.cfg.size, t.cfg.size) {
        return Err(Error::Dimension(format!("input is {w}x{h}; this model works at {0}x{0}", t.cfg.size)));
    }
    let seed = cli.seed.unwrap_or(t.cfg.sample_seed);
    let start = Instant::now();
    let degraded = mask.apply(&img)?;
    let (out, stats) = rectify_batch(&t.model, &t.codec, &t.cfg.schedule()?, &t.cfg.diffusion.sampler, &[(&degraded, &mask)], &[seed])?;
    save_png(&a.out, &out[0])?;
    log::info!(
        "{} ddim steps ({} conditional, {} unconditional evaluations) in {:.2}s",
        t.cfg.diffusion.sampler.steps,
        stats.cond_evals,
        stats.uncond_evals,
        start.elapsed().as_secs_f64()
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(cli: &Cli, a: &Eval) -> Result<()> {
    if !a.checkpoint.is_file() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", a.checkpoint.display())));
    }
    let t = Trained::load(&a.checkpoint, cli.expected_fingerprint()?.as_deref(), a.force)?;
    let (_, triplets) = load_split_checked(&a.data, a.split)?;
    let r = evaluate(&t, &triplets, &a.out)?;
    let (sm, ss) = r.ssim_stats();
    let (gm, gs) = r.gmd_stats();
    println!("{} samples  ssim {sm:.4} ± {ss:.4}  gmd {gm:.4} ± {gs:.4}", r.rows.len());
    println!("wrote {}", a.out.join("eval.csv").display());
    Ok(())
}

fn run_ablate(cli: &Cli, a: &Ablate) -> Result<()> {
    let cfg = cli.run_config()?;
    let variants = a.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
    let (_, train_set) = load_split_checked(&a.data, Split::Train)?;
    let (_, eval_set) = load_split_checked(&a.data, a.eval_split)?;
    let every = cfg.checkpoint_every.max(1);
    let results = ablate(&cfg, &train_set, &eval_set, &a.out, &variants, a.force, |v, step, loss| {
        if step % every == 0 {
            log::info!("{v} step {step} loss {loss:.5}");
        }
    })?;
    println!("{:<10} {:>8} {:>10}", "variant", "ssim", "gmd");
    for (v, r, _) in &results {
        println!("{:<10} {:>8.4} {:>10.4}", v.as_str(), r.ssim_stats().0, r.gmd_stats().0);
    }
    println!("wrote {}", a.out.join("ablation.csv").display());
    Ok(())
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("TEXRECT_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| format!("TEXRECT_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("TEXRECT_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let res = match &cli.cmd {
        Command::GenData(a) => gen_data(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Rectify(a) => rectify(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::Ablate(a) => run_ablate(&cli, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
