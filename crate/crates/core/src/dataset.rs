//! Source-disjoint train/val/test corpus generation and its text manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use texrect_tensor::Tensor;

use crate::degrade::{degrade, DegradeConfig, TransformRecord};
use crate::error::{Error, Result};
use crate::imageio::{load_rgb, load_tensor, save_png};
use crate::mask::Mask;
use crate::rng::stream;

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.as_str() == s)
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions(pub [f64; 3]);

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions([0.7, 0.1, 0.2])
    }
}

impl SplitFractions {
    /// Parse `"0.7,0.1,0.2"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad split fractions {s:?}: {e}")))?;
        let arr: [f64; 3] = parts
            .try_into()
            .map_err(|_| Error::Config(format!("expected three split fractions, got {s:?}")))?;
        let f = SplitFractions(arr);
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(Error::Config(format!("every split needs a positive fraction, got {:?}", self.0)));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Floor plus largest remainder, with at least one source per split.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        if n < 3 {
            return Err(Error::Config(format!("need at least 3 source textures, found {n}")));
        }
        let exact = self.0.map(|f| f * n as f64);
        let mut counts = exact.map(|e| (e + 1e-9).floor() as usize);
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| (exact[b] - counts[b] as f64).total_cmp(&(exact[a] - counts[a] as f64)));
        let mut left = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        for i in 0..3 {
            if counts[i] == 0 {
                let donor = (0..3).max_by_key(|&j| counts[j]).expect("three splits");
                counts[donor] -= 1;
                counts[i] = 1;
            }
        }
        Ok(counts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub size: usize,
    pub samples_per_source: usize,
    pub degrade: DegradeConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { size: 64, samples_per_source: 4, degrade: DegradeConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub split: Split,
    pub id: String,
    /// File name relative to the source directory.
    pub source: String,
    pub transform: TransformRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub fingerprint: String,
    pub size: usize,
    pub records: Vec<Record>,
    /// Sources that could not be used, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn field_ok(s: &str) -> bool {
    !s.is_empty() && !s.contains(['\t', '\n', '\r'])
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# texrect-manifest {MANIFEST_VERSION}").unwrap();
        writeln!(s, "# fingerprint {}", self.fingerprint).unwrap();
        writeln!(s, "# size {}", self.size).unwrap();
        for (src, why) in &self.skipped {
            writeln!(s, "# skipped {src}\t{}", why.replace(['\t', '\n', '\r'], " ")).unwrap();
        }
        for r in &self.records {
            let t = &r.transform;
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.split, r.id, r.source, t.seed, t.s_hmg, t.s_tps, t.hmg_applied as u8, t.tps_applied as u8
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let err = |line: usize, detail: String| Error::Manifest { line, detail };
        let (mut version, mut fingerprint, mut size) = (None, None, None);
        let mut records = Vec::new();
        let mut skipped = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            // a lone trailing CR would not survive a write and re-read
            let raw = raw.strip_suffix('\r').unwrap_or(raw);
            if raw.trim().is_empty() {
                continue;
            }
            if let Some(h) = raw.strip_prefix("# ") {
                let (key, val) = h.split_once(' ').ok_or_else(|| err(ln, format!("malformed header {raw:?}")))?;
                match key {
                    "texrect-manifest" => {
                        let v: u32 = val.parse().map_err(|_| err(ln, format!("bad version {val:?}")))?;
                        if v != MANIFEST_VERSION {
                            return Err(err(ln, format!("unsupported manifest version {v}")));
                        }
                        version = Some(v);
                    }
                    "fingerprint" => fingerprint = Some(val.to_string()),
                    "size" => size = Some(val.parse::<usize>().map_err(|_| err(ln, format!("bad size {val:?}")))?),
                    "skipped" => {
                        let (s, why) = val.split_once('\t').unwrap_or((val, ""));
                        skipped.push((s.to_string(), why.to_string()));
                    }
                    _ => return Err(err(ln, format!("unknown header {key:?}"))),
                }
                continue;
            }
            if version.is_none() {
                return Err(err(ln, "record before version header".into()));
            }
            let f: Vec<&str> = raw.split('\t').collect();
            if f.len() != 8 {
                return Err(err(ln, format!("expected 8 tab-separated fields, got {}", f.len())));
            }
            let split = Split::parse(f[0]).ok_or_else(|| err(ln, format!("unknown split {:?}", f[0])))?;
            if !field_ok(f[1]) || !field_ok(f[2]) || f[1].contains(['/', '\\']) || f[1].starts_with('.') {
                return Err(err(ln, "empty or unsafe id/source".into()));
            }
            let num = |s: &str, what: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|_| err(ln, format!("bad {what} {s:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(err(ln, format!("{what} {v} outside [0, 1]")));
                }
                Ok(v)
            };
            let flag = |s: &str| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(err(ln, format!("bad flag {s:?}"))),
            };
            records.push(Record {
                split,
                id: f[1].to_string(),
                source: f[2].to_string(),
                transform: TransformRecord {
                    seed: f[3].parse().map_err(|_| err(ln, format!("bad seed {:?}", f[3])))?,
                    s_hmg: num(f[4], "s_hmg")?,
                    s_tps: num(f[5], "s_tps")?,
                    hmg_applied: flag(f[6])?,
                    tps_applied: flag(f[7])?,
                },
            });
        }
        let end = text.lines().count();
        if version.is_none() {
            return Err(err(end, "missing version header".into()));
        }
        let m = Manifest {
            fingerprint: fingerprint.ok_or_else(|| err(end, "missing fingerprint header".into()))?,
            size: size.ok_or_else(|| err(end, "missing size header".into()))?,
            records,
            skipped,
        };
        m.check_disjoint()?;
        Ok(m)
    }

    /// No source texture may feed two splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut owner = std::collections::HashMap::new();
        for r in &self.records {
            if let Some(prev) = owner.insert(r.source.as_str(), r.split) {
                if prev != r.split {
                    return Err(Error::Config(format!("source {} appears in {prev} and {}", r.source, r.split)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Per-sample seed; stream 0 drives the crop and stream 1 the degradation.
pub fn sample_seed(seed: u64, src_idx: usize, k: usize) -> u64 {
    // SplitMix64 finalizer over the packed coordinates.
    let mut z = seed ^ ((src_idx as u64) << 20 | k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_path(root: &Path, split: Split, id: &str, kind: &str) -> PathBuf {
    root.join(split.as_str()).join(format!("{id}_{kind}.png"))
}

fn list_sources(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let ext = Path::new(&name).extension().map(|e| e.to_ascii_lowercase());
        let is_image = ext.is_some_and(|e| e == "png" || e == "jpg" || e == "jpeg");
        if is_image && entry.path().is_file() && field_ok(&name) {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Crop, degrade and write `samples_per_source` triplets per source texture.
pub fn build_dataset(
    source_dir: &Path,
    out_dir: &Path,
    fractions: SplitFractions,
    cfg: &DataConfig,
    seed: u64,
    fingerprint: &str,
) -> Result<Manifest> {
    cfg.degrade.validate()?;
    fractions.validate()?;
    if cfg.samples_per_source == 0 {
        return Err(Error::Config("samples_per_source must be >= 1".into()));
    }
    let mut skipped = Vec::new();
    let mut images = Vec::new();
    for name in list_sources(source_dir)? {
        match load_rgb(&source_dir.join(&name)) {
            Ok(img) if img.width().min(img.height()) as usize >= cfg.size => images.push((name, img)),
            Ok(img) => {
                let why = format!("{}x{} smaller than {}", img.width(), img.height(), cfg.size);
                log::warn!("skipping {name}: {why}");
                skipped.push((name, why));
            }
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                skipped.push((name, e.to_string()));
            }
        }
    }
    let counts = fractions.counts(images.len())?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut stream(seed, 2));
    let mut split_of = vec![Split::Train; images.len()];
    let mut at = 0;
    for (split, &n) in Split::ALL.iter().zip(&counts) {
        for &i in &order[at..at + n] {
            split_of[i] = *split;
        }
        at += n;
    }
    for split in Split::ALL {
        let dir = out_dir.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..images.len())
        .flat_map(|i| (0..cfg.samples_per_source).map(move |k| (i, k)))
        .collect();
    let records: Vec<Record> = jobs
        .par_iter()
        .map(|&(i, k)| -> Result<Record> {
            let (name, img) = &images[i];
            let split = split_of[i];
            let s = sample_seed(seed, i, k);
            let planar = crate::degrade::crop_pipeline(img, cfg.size, split == Split::Train, &mut stream(s, 0))?;
            let sample = degrade(&planar, name, &cfg.degrade, s)?;
            let id = format!("{i:04}-{k:02}");
            save_png(&sample_path(out_dir, split, &id, "planar"), &planar)?;
            save_png(&sample_path(out_dir, split, &id, "degraded"), &sample.degraded)?;
            sample.mask.save(&sample_path(out_dir, split, &id, "mask"))?;
            Ok(Record { split, id, source: name.clone(), transform: sample.record })
        })
        .collect::<Result<_>>()?;
    let mut records = records;
    records.sort_by(|a, b| (a.split, &a.id).cmp(&(b.split, &b.id)));
    let manifest = Manifest { fingerprint: fingerprint.to_string(), size: cfg.size, records, skipped };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Planar target, degraded input and mask, all `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub id: String,
    pub planar: Tensor<f32>,
    pub degraded: Tensor<f32>,
    pub mask: Mask,
}

pub fn load_triplet(root: &Path, split: Split, id: &str) -> Result<Triplet> {
    let planar = load_tensor(&sample_path(root, split, id, "planar"))?;
    let degraded = load_tensor(&sample_path(root, split, id, "degraded"))?;
    let mask = Mask::load(&sample_path(root, split, id, "mask"))?;
    if planar.shape() != degraded.shape() || planar.shape()[1..] != [mask.height(), mask.width()] {
        return Err(Error::Dimension(format!("triplet {id} has inconsistent sizes")));
    }
    let degraded = mask.apply(&degraded)?;
    Ok(Triplet { id: id.to_string(), planar, degraded, mask })
}

/// Every triplet of `split`; missing or broken files are reported and skipped.
pub fn load_split(root: &Path, manifest: &Manifest, split: Split) -> (Vec<Triplet>, Vec<(String, Error)>) {
    let mut ok = Vec::new();
    let mut missing = Vec::new();
    for r in manifest.split(split) {
        match load_triplet(root, split, &r.id) {
            Ok(t) => ok.push(t),
            Err(e) => missing.push((r.id.clone(), e)),
        }
    }
    (ok, missing)
}
