//! Binary checkpoint format (little endian):
//!
//! ```text
//! magic "IAPO" | version u32 | header_len u64 | header JSON | weight_count u64
//! | weights f64 × weight_count | [m f64 × weight_count | v f64 × weight_count]
//! ```
//!
//! The header carries the model config, optional optimizer hyperparameters and
//! step, and free-form metadata. Moments are present iff the header says so.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::grad::{AdamWHyper, AdamWState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IAPO";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    hyper: AdamWHyper,
    step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: Params,
    pub optimizer: Option<AdamWState>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Fails with [`Error::Incompatible`] unless the stored architecture equals `expected`.
    pub fn ensure_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let got = self.config();
        if got.vocab_size != expected.vocab_size {
            return Err(Error::Incompatible(format!(
                "vocab_size {} in checkpoint, expected {}",
                got.vocab_size, expected.vocab_size
            )));
        }
        if got != expected {
            return Err(Error::Incompatible(format!(
                "model config {got:?} differs from expected {expected:?}"
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &Params,
    optimizer: Option<&AdamWState>,
    meta: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(opt) = optimizer {
        if opt.m.len() != params.len() || opt.v.len() != params.len() {
            return Err(Error::Shape("optimizer moments do not match parameter count".into()));
        }
    }
    let header = Header {
        model: params.config.clone(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            hyper: o.hyper.clone(),
            step: o.step,
        }),
        meta,
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(32 + header.len() + 8 * params.len() * 3);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    let mut put = |xs: &[f64]| {
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    put(&params.data);
    if let Some(opt) = optimizer {
        put(&opt.m);
        put(&opt.v);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Integrity(format!("file truncated while reading {what}")));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("size overflow".into()))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, at: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Integrity(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = r.u64("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::Integrity(format!("bad header: {e}")))?;
    let count = r.u64("weight count")? as usize;
    let mut params = Params::zeros(header.model).map_err(|e| Error::Integrity(e.to_string()))?;
    if count != params.len() {
        return Err(Error::Integrity(format!(
            "weight count {count} does not match config ({})",
            params.len()
        )));
    }
    params.data = r.f64s(count, "weights")?;
    let optimizer = match header.optimizer {
        Some(h) => Some(AdamWState {
            m: r.f64s(count, "first moments")?,
            v: r.f64s(count, "second moments")?,
            step: h.step,
            hyper: h.hyper,
        }),
        None => None,
    };
    if r.at != bytes.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 32,
            vocab_size: 18,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let p = Params::init(cfg(), 4).unwrap();
        let mut opt = AdamWState::new(p.len(), AdamWHyper::default());
        opt.m.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 1e-3);
        opt.v.iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64).sqrt());
        opt.step = 17;
        save_checkpoint(&path, &p, Some(&opt), serde_json::json!({"note": 1})).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.params.data, p.data);
        let o = ck.optimizer.unwrap();
        assert_eq!(o.m, opt.m);
        assert_eq!(o.v, opt.v);
        assert_eq!(o.step, 17);
        assert_eq!(o.hyper, opt.hyper);
        assert_eq!(ck.meta["note"], 1);

        save_checkpoint(&path, &p, None, serde_json::Value::Null).unwrap();
        assert!(load_checkpoint(&path).unwrap().optimizer.is_none());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let p = Params::init(cfg(), 4).unwrap();
        save_checkpoint(&path, &p, None, serde_json::Value::Null).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));

        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Incompatible(_))));
    }

    #[test]
    fn vocab_mismatch_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let other = ModelConfig {
            vocab_size: 20,
            ..cfg()
        };
        save_checkpoint(&path, &Params::init(other, 1).unwrap(), None, serde_json::Value::Null).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(matches!(ck.ensure_compatible(&cfg()), Err(Error::Incompatible(_))));
    }
}
