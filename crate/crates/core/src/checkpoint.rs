//! Binary checkpoints: magic `TXRC`, a version byte, then little-endian
//! length-prefixed sections.
//!
//! ```text
//! "TXRC" u8:version
//! str:fingerprint str:config
//! u32:n  { str:key str:value }*n                 metadata
//! u32:n  { str:name u32:ndim u64:dim*ndim f32*numel }*n
//! u8:has_optim [ u64:step u32:n { str:name u64:len f32*len f32*len }*n ]
//! u8:has_rng   [ [u8;32]:seed u64:stream u128:word_pos ]
//! ```
//! `str` is a `u32` byte length followed by UTF-8.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use texrect_tensor::{numel, AdamState, ParamKind, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const MAGIC: &[u8; 4] = b"TXRC";
pub const VERSION: u8 = 1;
const MAX_NDIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor<f32>,
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub config: String,
    pub meta: Vec<(String, String)>,
    pub params: Vec<NamedTensor>,
    pub optim: Option<OptimState>,
    pub rng: Option<RngState>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, xs: &[f32]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(bad(format!("truncated while reading {what} at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| bad(format!("{what} is not UTF-8")))
    }
    /// A count of items each at least `min_size` bytes long.
    fn count(&mut self, what: &str, min_size: usize) -> Result<usize> {
        let n = self.u32(what)?;
        if n.saturating_mul(min_size) > self.buf.len() - self.at {
            return Err(bad(format!("{what} count {n} exceeds remaining data")));
        }
        Ok(n)
    }
    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad(format!("{what} too large")))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u8(VERSION);
        w.str(&self.fingerprint);
        w.str(&self.config);
        w.u32(self.meta.len());
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(self.params.len());
        for p in &self.params {
            w.str(&p.name);
            w.u32(p.value.ndim());
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.floats(p.value.data());
        }
        match &self.optim {
            Some(o) => {
                w.u8(1);
                w.u64(o.step);
                w.u32(o.moments.len());
                for (name, m, v) in &o.moments {
                    w.str(name);
                    w.u64(m.len() as u64);
                    w.floats(m);
                    w.floats(v);
                }
            }
            None => w.u8(0),
        }
        match &self.rng {
            Some(r) => {
                w.u8(1);
                w.0.extend_from_slice(&r.seed);
                w.u64(r.stream);
                w.0.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => w.u8(0),
        }
        w.0
    }

    /// Parse a checkpoint, validating every length against the input.
    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, at: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let fingerprint = r.str("fingerprint")?;
        let config = r.str("config")?;
        let n = r.count("metadata", 8)?;
        let mut meta = Vec::with_capacity(n);
        for _ in 0..n {
            meta.push((r.str("metadata key")?, r.str("metadata value")?));
        }
        let n = r.count("parameters", 8)?;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str("parameter name")?;
            let ndim = r.u32("rank")?;
            if ndim > MAX_NDIM {
                return Err(bad(format!("{name}: rank {ndim} exceeds {MAX_NDIM}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut total: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64("dimension")?).map_err(|_| bad("dimension overflows"))?;
                total = total.checked_mul(d).ok_or_else(|| bad(format!("{name}: element count overflows")))?;
                shape.push(d);
            }
            debug_assert_eq!(total, numel(&shape));
            let data = r.floats(total, &name)?;
            params.push(NamedTensor { name, value: Tensor::new(shape, data)? });
        }
        let optim = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let n = r.count("moments", 12)?;
                let mut moments = Vec::with_capacity(n);
                for _ in 0..n {
                    let name = r.str("moment name")?;
                    let len = usize::try_from(r.u64("moment length")?).map_err(|_| bad("moment length overflows"))?;
                    let m = r.floats(len, "first moment")?;
                    let v = r.floats(len, "second moment")?;
                    moments.push((name, m, v));
                }
                Some(OptimState { step, moments })
            }
            f => return Err(bad(format!("bad optimizer flag {f}"))),
        };
        let rng = match r.u8("rng flag")? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
                let stream = r.u64("rng stream")?;
                let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            f => return Err(bad(format!("bad rng flag {f}"))),
        };
        if r.at != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint { fingerprint, config, meta, params, optim, rng })
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Write through a temporary file and rename, removing the partial file
    /// on failure.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.partial");
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        })();
        result.map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    /// Load and check the fingerprint; `force` downgrades a mismatch to a
    /// warning.
    pub fn load(path: &Path, expected: Option<&str>, force: bool) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Checkpoint::decode(&bytes)?;
        if let Some(want) = expected {
            if ck.fingerprint != want {
                if !force {
                    return Err(bad(format!(
                        "{}: config fingerprint {} does not match {want} (use --force to override)",
                        path.display(),
                        ck.fingerprint
                    )));
                }
                log::warn!("loading {} despite fingerprint mismatch", path.display());
            }
        }
        Ok(ck)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }
}

/// Every entry of `store` as a named block.
pub fn store_params(store: &ParamStore<f32>) -> Vec<NamedTensor> {
    store.entries().iter().map(|e| NamedTensor { name: e.name.clone(), value: (*e.value).clone() }).collect()
}

/// Copy blocks into `store` by name; every store entry must be present with
/// a matching shape.
pub fn load_params(store: &mut ParamStore<f32>, ck: &Checkpoint) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.entries()[id.index()].name.clone();
        let value = ck.param(&name).ok_or_else(|| bad(format!("missing parameter {name}")))?;
        if value.shape() != store.get(id).shape() {
            return Err(bad(format!("{name}: shape {:?} vs expected {:?}", value.shape(), store.get(id).shape())));
        }
        store.set(id, value.clone())?;
    }
    Ok(())
}

pub fn optim_state(store: &ParamStore<f32>, adam: &AdamState<f32>) -> OptimState {
    let moments = store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == ParamKind::Trainable)
        .map(|(i, e)| (e.name.clone(), adam.m[i].clone(), adam.v[i].clone()))
        .collect();
    OptimState { step: adam.step, moments }
}

pub fn restore_optim(store: &ParamStore<f32>, o: &OptimState) -> Result<AdamState<f32>> {
    let mut adam = AdamState::new(store);
    adam.step = o.step;
    for (i, e) in store.entries().iter().enumerate() {
        if e.kind != ParamKind::Trainable {
            continue;
        }
        let (_, m, v) = o
            .moments
            .iter()
            .find(|(n, _, _)| *n == e.name)
            .ok_or_else(|| bad(format!("missing optimizer moments for {}", e.name)))?;
        if m.len() != e.value.numel() || v.len() != e.value.numel() {
            return Err(bad(format!("optimizer moments for {} have the wrong length", e.name)));
        }
        adam.m[i] = m.clone();
        adam.v[i] = v.clone();
    }
    Ok(adam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.trainable("a.w", Tensor::from_fn([2, 3], |i| i as f32 * 0.1 - 0.2));
        store.buffer("a.mean", Tensor::from_fn([3], |i| f32::from_bits(0x3f80_0001 + i as u32)));
        store.trainable("b", Tensor::scalar(-0.0f32));
        let mut adam = AdamState::new(&store);
        adam.step = 7;
        adam.m[0][1] = 0.5;
        Checkpoint {
            fingerprint: "abc".into(),
            config: "run.size = 64\n".into(),
            meta: vec![("stage".into(), "diffusion".into()), ("step".into(), "7".into())],
            params: store_params(&store),
            optim: Some(optim_state(&store, &adam)),
            rng: Some(RngState::capture(&stream(3, 4))),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
        let bits = |c: &Checkpoint| c.params.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ck));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().encode();
        for n in 0..bytes.len() {
            assert!(Checkpoint::decode(&bytes[..n]).is_err(), "prefix {n} accepted");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut wrong = bytes;
        wrong[4] = 2;
        assert!(Checkpoint::decode(&wrong).is_err());
    }

    #[test]
    fn fingerprint_mismatch_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        sample().save(&p).unwrap();
        assert!(Checkpoint::load(&p, Some("abc"), false).is_ok());
        assert!(matches!(Checkpoint::load(&p, Some("zzz"), false), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::load(&p, Some("zzz"), true).is_ok());
        assert!(!dir.path().join("x.ckpt.partial").exists());
    }

    #[test]
    fn stores_and_optimizer_restore() {
        let ck = sample();
        let mut store = ParamStore::new();
        store.trainable("a.w", Tensor::zeros([2, 3]));
        store.buffer("a.mean", Tensor::zeros([3]));
        store.trainable("b", Tensor::scalar(1.0f32));
        load_params(&mut store, &ck).unwrap();
        assert_eq!(store_params(&store), ck.params);
        let adam = restore_optim(&store, ck.optim.as_ref().unwrap()).unwrap();
        assert_eq!((adam.step, adam.m[0][1]), (7, 0.5));
        let mut other = ParamStore::new();
        other.trainable("a.w", Tensor::zeros([3, 2]));
        assert!(load_params(&mut other, &ck).is_err());
    }
}
