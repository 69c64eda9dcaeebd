//! Training, evaluation and ablation runs on top of the model pieces, with
//! checkpoints and loss logs on disk.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use texrect_tensor::Tensor;

use crate::checkpoint::{load_params, optim_state, restore_optim, store_params, Checkpoint};
use crate::codec::{train_codec, Codec};
use crate::config::RunConfig;
use crate::dataset::{load_split, sample_seed, Manifest, Split, Triplet, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::imageio::{save_png, to_signed};
use crate::metrics::{ssim, EvalReport, EvalRow, GramExtractor};
use crate::model::{rectify_batch, train_step, DiffusionModel, TrainData, TrainState, Variant};

pub const CODEC_CKPT: &str = "codec.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss.csv";
const EVAL_BATCH: usize = 8;
const GRID_ROWS: usize = 16;

/// Append-only `stage,step,loss,wall_s,seed` log. Rows are buffered and
/// written when a checkpoint is saved, so the log never runs ahead of the
/// state it describes.
pub struct LossLog {
    path: PathBuf,
    seed: u64,
    start: Instant,
    pending: Vec<String>,
}

impl LossLog {
    pub fn open(path: &Path, fingerprint: &str, seed: u64) -> Result<LossLog> {
        let header = format!("# fingerprint {fingerprint}");
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if text.lines().next() != Some(header.as_str()) {
                return Err(Error::Config(format!("{} belongs to a different configuration", path.display())));
            }
        } else {
            fs::write(path, format!("{header}\nstage,step,loss,wall_s,seed\n")).map_err(|e| Error::io(path, e))?;
        }
        Ok(LossLog { path: path.to_path_buf(), seed, start: Instant::now(), pending: Vec::new() })
    }

    pub fn push(&mut self, stage: &str, step: usize, loss: f64) {
        let wall = self.start.elapsed().as_secs_f64();
        self.pending.push(format!("{stage},{step},{loss:.8},{wall:.3},{}\n", self.seed));
    }

    pub fn flush(&mut self) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.write_all(self.pending.concat().as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.pending.clear();
        Ok(())
    }
}

/// `[-1, 1]` planar targets and masked degraded inputs, the codec's
/// training images.
fn codec_images(triplets: &[Triplet]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let planar: Vec<_> = triplets.iter().map(|t| to_signed(&t.planar)).collect();
    let mut all = planar.clone();
    for t in triplets {
        all.push(to_signed(&t.mask.apply(&t.degraded)?));
    }
    Ok((Tensor::stack(&planar)?, Tensor::stack(&all)?))
}

/// Train the codec, then calibrate the latent scale on the planar targets.
pub fn train_codec_stage(cfg: &RunConfig, triplets: &[Triplet], log: Option<&mut LossLog>) -> Result<Codec> {
    let (planar, all) = codec_images(triplets)?;
    let mut codec = Codec::new(cfg.codec.clone(), cfg.seed)?;
    let o = &cfg.codec_train;
    let mut rows = Vec::new();
    train_codec(&mut codec, &all, o.steps, o.batch, o.lr, cfg.seed, |step, loss| rows.push((step + 1, loss)))?;
    let scale = codec.calibrate_scale(&planar)?;
    log::info!("codec trained for {} steps, latent scale {scale:.4}", o.steps);
    if let Some(log) = log {
        for (step, loss) in rows {
            log.push("codec", step, loss);
        }
    }
    Ok(codec)
}

fn base_checkpoint(cfg: &RunConfig, stage: &str, step: usize) -> Checkpoint {
    Checkpoint {
        fingerprint: cfg.fingerprint(),
        config: cfg.to_text(),
        meta: vec![("stage".into(), stage.into()), ("step".into(), step.to_string())],
        params: Vec::new(),
        optim: None,
        rng: None,
    }
}

pub fn codec_checkpoint(cfg: &RunConfig, codec: &Codec) -> Checkpoint {
    Checkpoint { params: store_params(&codec.store), ..base_checkpoint(cfg, "codec", cfg.codec_train.steps) }
}

pub fn model_checkpoint(cfg: &RunConfig, codec: &Codec, model: &DiffusionModel, state: &TrainState) -> Checkpoint {
    let mut params = store_params(&codec.store);
    params.extend(store_params(&model.store));
    Checkpoint {
        params,
        optim: Some(optim_state(&model.store, &state.adam)),
        rng: Some(crate::rng::RngState::capture(&state.rng)),
        ..base_checkpoint(cfg, "diffusion", state.step)
    }
}

/// The configuration a checkpoint was written with, checked against its
/// recorded fingerprint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<RunConfig> {
    let cfg = RunConfig::parse(&ck.config)?;
    if cfg.fingerprint() != ck.fingerprint {
        return Err(Error::Checkpoint("embedded configuration does not match its fingerprint".into()));
    }
    Ok(cfg)
}

pub fn codec_from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Codec> {
    let mut codec = Codec::new(cfg.codec.clone(), cfg.seed)?;
    load_params(&mut codec.store, ck)?;
    Ok(codec)
}

/// Everything needed to sample from a trained run.
pub struct Trained {
    pub cfg: RunConfig,
    pub codec: Codec,
    pub model: DiffusionModel,
    pub state: TrainState,
}

impl Trained {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Trained> {
        let cfg = checkpoint_config(ck)?;
        let codec = codec_from_checkpoint(&cfg, ck)?;
        let mut model = DiffusionModel::new(&cfg, cfg.seed)?;
        load_params(&mut model.store, ck)?;
        let mut state = TrainState::new(&model, cfg.seed);
        if let Some(o) = &ck.optim {
            state.adam = restore_optim(&model.store, o)?;
        }
        if let Some(r) = &ck.rng {
            state.rng = r.restore();
        }
        state.step = ck
            .meta("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("model checkpoint has no step".into()))?;
        Ok(Trained { cfg, codec, model, state })
    }

    pub fn load(path: &Path, expected: Option<&str>, force: bool) -> Result<Trained> {
        let ck = Checkpoint::load(path, expected, force)?;
        if ck.meta("stage") != Some("diffusion") {
            return Err(Error::Checkpoint(format!("{} is not a diffusion checkpoint", path.display())));
        }
        Trained::from_checkpoint(&ck)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this many diffusion steps (at most `train.steps`).
    pub until: Option<usize>,
    pub force: bool,
}

pub struct TrainOutcome {
    pub trained: Trained,
    /// Diffusion losses of the steps run by this call.
    pub losses: Vec<f64>,
}

/// Load `dir/codec.ckpt` when present, otherwise train and save it.
pub fn codec_stage(cfg: &RunConfig, triplets: &[Triplet], dir: &Path, force: bool, log: &mut LossLog) -> Result<Codec> {
    let path = dir.join(CODEC_CKPT);
    if path.exists() {
        let ck = Checkpoint::load(&path, Some(&cfg.fingerprint()), force)?;
        log::info!("reusing codec from {}", path.display());
        return codec_from_checkpoint(cfg, &ck);
    }
    let codec = train_codec_stage(cfg, triplets, Some(log))?;
    codec_checkpoint(cfg, &codec).save(&path)?;
    log.flush()?;
    Ok(codec)
}

/// Diffusion training from scratch or from `opts.resume`, checkpointing to
/// `dir/model.ckpt` every `checkpoint_every` steps and at the end.
pub fn diffusion_stage(
    cfg: &RunConfig,
    codec: Codec,
    triplets: &[Triplet],
    dir: &Path,
    opts: &TrainOptions,
    log: &mut LossLog,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let data = TrainData::new(&codec, triplets)?;
    let mut trained = match &opts.resume {
        Some(path) => {
            let t = Trained::load(path, Some(&cfg.fingerprint()), opts.force)?;
            Trained { codec, ..t }
        }
        None => {
            let model = DiffusionModel::new(cfg, cfg.seed)?;
            let state = TrainState::new(&model, cfg.seed);
            Trained { cfg: cfg.clone(), codec, model, state }
        }
    };
    let sched = cfg.schedule()?;
    let until = opts.until.unwrap_or(cfg.train.steps).min(cfg.train.steps);
    let mut losses = Vec::new();
    let path = dir.join(MODEL_CKPT);
    if trained.state.step >= until && !path.exists() {
        model_checkpoint(cfg, &trained.codec, &trained.model, &trained.state).save(&path)?;
    }
    while trained.state.step < until {
        let loss = train_step(&mut trained.model, &mut trained.state, &data, &sched, cfg)?;
        let step = trained.state.step;
        losses.push(loss);
        log.push("diffusion", step, loss);
        on_step(step, loss);
        if step % cfg.checkpoint_every == 0 || step == until {
            model_checkpoint(cfg, &trained.codec, &trained.model, &trained.state).save(&path)?;
            log.flush()?;
        }
    }
    Ok(TrainOutcome { trained, losses })
}

/// Both stages into `dir`.
pub fn run_training(cfg: &RunConfig, triplets: &[Triplet], dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut log = LossLog::open(&dir.join(LOSS_LOG), &cfg.fingerprint(), cfg.seed)?;
    let codec = codec_stage(cfg, triplets, dir, opts.force, &mut log)?;
    diffusion_stage(cfg, codec, triplets, dir, opts, &mut log, |_, _| {})
}

/// Every readable triplet of a split; unreadable ones are logged and
/// skipped. An empty result is a configuration error.
pub fn load_split_checked(root: &Path, split: Split) -> Result<(Manifest, Vec<Triplet>)> {
    let manifest = Manifest::load(&root.join(MANIFEST_FILE))?;
    let (ok, missing) = load_split(root, &manifest, split);
    for (id, e) in &missing {
        log::warn!("skipping {split} sample {id}: {e}");
    }
    if ok.is_empty() {
        return Err(Error::Config(format!("split {split} has no usable samples")));
    }
    Ok((manifest, ok))
}

/// Rectified outputs of `triplets`, each from its own seeded noise.
pub fn rectify_all(t: &Trained, triplets: &[Triplet]) -> Result<Vec<Tensor<f32>>> {
    let sched = t.cfg.schedule()?;
    let mut out = Vec::with_capacity(triplets.len());
    for (c, chunk) in triplets.chunks(EVAL_BATCH).enumerate() {
        let items: Vec<_> = chunk.iter().map(|x| (&x.degraded, &x.mask)).collect();
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| sample_seed(t.cfg.sample_seed, c * EVAL_BATCH + i, 0)).collect();
        out.extend(rectify_batch(&t.model, &t.codec, &sched, &t.cfg.diffusion.sampler, &items, &seeds)?.0);
    }
    Ok(out)
}

/// SSIM and Gram distance of each output against its planar target.
pub fn score(cfg: &RunConfig, triplets: &[Triplet], outputs: &[Tensor<f32>]) -> Result<EvalReport> {
    let gram = GramExtractor::new(cfg.gmd_seed);
    let rows = triplets
        .par_iter()
        .zip(outputs)
        .map(|(t, o)| Ok(EvalRow { id: t.id.clone(), ssim: ssim(o, &t.planar)?, gmd: gram.distance(o, &t.planar)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { fingerprint: cfg.fingerprint(), gmd_seed: cfg.gmd_seed, rows })
}

/// Rows of `degraded | output | planar`, up to sixteen samples.
pub fn comparison_grid(triplets: &[Triplet], outputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let n = triplets.len().min(outputs.len()).min(GRID_ROWS);
    if n == 0 {
        return Err(Error::Config("comparison grid needs at least one sample".into()));
    }
    let s = triplets[0].planar.shape()[1];
    let (h, w) = (n * s, 3 * s);
    let mut grid = Tensor::zeros([3, h, w]);
    let data = grid.data_mut();
    for (r, (t, o)) in triplets.iter().zip(outputs).take(n).enumerate() {
        let shown = t.mask.apply(&t.degraded)?;
        for (col, img) in [&shown, o, &t.planar].into_iter().enumerate() {
            for c in 0..3 {
                for y in 0..s {
                    let src = &img.data()[(c * s + y) * s..(c * s + y + 1) * s];
                    let at = (c * h + r * s + y) * w + col * s;
                    data[at..at + s].copy_from_slice(src);
                }
            }
        }
    }
    Ok(grid)
}

/// Rectify and score `triplets`, writing `eval.csv` and `grid.png` into `out`.
pub fn evaluate(t: &Trained, triplets: &[Triplet], out: &Path) -> Result<EvalReport> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let outputs = rectify_all(t, triplets)?;
    let report = score(&t.cfg, triplets, &outputs)?;
    let csv = out.join("eval.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    save_png(&out.join("grid.png"), &comparison_grid(triplets, &outputs)?)?;
    Ok(report)
}

/// Train every variant with a shared codec and score it on `eval_set`.
/// Writes `ablation.csv` with one row per variant.
pub fn ablate(
    cfg: &RunConfig,
    train_set: &[Triplet],
    eval_set: &[Triplet],
    dir: &Path,
    variants: &[Variant],
    force: bool,
    mut progress: impl FnMut(Variant, usize, f64),
) -> Result<Vec<(Variant, EvalReport, Vec<f64>)>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut log = LossLog::open(&dir.join(LOSS_LOG), &cfg.fingerprint(), cfg.seed)?;
    let codec = codec_stage(cfg, train_set, dir, force, &mut log)?;
    let mut results = Vec::new();
    for &v in variants {
        let vcfg = v.apply(cfg);
        let vdir = dir.join(v.as_str());
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        let mut vlog = LossLog::open(&vdir.join(LOSS_LOG), &vcfg.fingerprint(), vcfg.seed)?;
        let outcome = diffusion_stage(&vcfg, codec.clone(), train_set, &vdir, &TrainOptions::default(), &mut vlog, |s, l| {
            progress(v, s, l)
        })?;
        let report = evaluate(&outcome.trained, eval_set, &vdir)?;
        results.push((v, report, outcome.losses));
    }
    let mut csv = format!("# fingerprint {}\nvariant,ssim,gmd\n", cfg.fingerprint());
    for (v, r, _) in &results {
        csv.push_str(&format!("{v},{:.6},{:.6}\n", r.ssim_stats().0, r.gmd_stats().0));
    }
    let path = dir.join("ablation.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}
