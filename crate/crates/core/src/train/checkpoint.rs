use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::OutputNormalizer;
use crate::error::{Error, Result};
use crate::knn::Extractor;
use crate::model::{McnnConfig, McnnParams, OUTPUT_DIM};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"MCNN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training progress needed to resume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u32,
    /// Seed of the run; per-epoch shuffles derive from `(seed, epoch)`.
    pub seed: u64,
    pub learning_rate: f64,
    pub best_val_loss: f64,
    /// Epochs since the last validation improvement.
    pub stale_epochs: u32,
}

/// Everything needed to run or resume a trained matcher.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: McnnParams<f32>,
    pub extractor: Extractor,
    pub normalizer: OutputNormalizer,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    model: McnnConfig,
    extractor: Extractor,
}

impl Checkpoint {
    pub fn config(&self) -> &McnnConfig {
        &self.params.config
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, CHECKPOINT_VERSION);
        let cfg = serde_json::to_vec(&ConfigBlock { model: self.params.config.clone(), extractor: self.extractor })?;
        put_u32(&mut b, cfg.len() as u32);
        b.extend_from_slice(&cfg);
        let named = self.params.named_tensors();
        put_u32(&mut b, named.len() as u32);
        for (name, t) in named {
            put_u32(&mut b, name.len() as u32);
            b.extend_from_slice(name.as_bytes());
            put_u32(&mut b, t.dims().len() as u32);
            for &d in t.dims() {
                put_u32(&mut b, d as u32);
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.normalizer.mean.iter().chain(&self.normalizer.variance) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let s = &self.state;
        put_u32(&mut b, s.epoch);
        b.extend_from_slice(&s.seed.to_le_bytes());
        b.extend_from_slice(&s.learning_rate.to_le_bytes());
        b.extend_from_slice(&s.best_val_loss.to_le_bytes());
        put_u32(&mut b, s.stale_epochs);
        Ok(b)
    }

    /// Parses a checkpoint, validating every tensor against the shapes its
    /// own config implies.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes, None)
    }

    fn parse(bytes: &[u8], expect: Option<&McnnConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("version {version} unsupported (expected {CHECKPOINT_VERSION})")));
        }
        let len = r.u32()? as usize;
        let block: ConfigBlock = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let config = expect.cloned().unwrap_or(block.model);
        let mut params =
            McnnParams::<f32>::zeros(&config).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let names: Vec<(String, Vec<usize>)> =
            params.named_tensors().into_iter().map(|(n, t)| (n, t.dims().to_vec())).collect();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(Error::Checkpoint(format!("file has {count} tensors, config expects {}", names.len())));
        }
        let mut loaded = Vec::with_capacity(count);
        for (want_name, want_dims) in &names {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if &name != want_name {
                return Err(Error::Checkpoint(format!("expected tensor {want_name}, found {name}")));
            }
            let ndim = r.u32()? as usize;
            if ndim > 4 {
                return Err(Error::Checkpoint(format!("tensor {name}: order {ndim} exceeds 4")));
            }
            let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            if &dims != want_dims {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch in tensor {name}: file {dims:?}, config {want_dims:?}"
                )));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            loaded.push(Tensor::from_vec(&dims, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?);
        }
        for (slot, t) in params.tensors_mut().into_iter().zip(loaded) {
            *slot = t;
        }
        let mut normalizer = OutputNormalizer::default();
        for i in 0..OUTPUT_DIM {
            normalizer.mean[i] = r.f64()?;
        }
        for i in 0..OUTPUT_DIM {
            normalizer.variance[i] = r.f64()?;
        }
        let state = TrainState {
            epoch: r.u32()?,
            seed: u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
            learning_rate: r.f64()?,
            best_val_loss: r.f64()?,
            stale_epochs: r.u32()?,
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { params, extractor: block.extractor, normalizer, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    ck.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint whose tensors must fit `config`; a mismatch names the
/// first offending tensor.
pub fn load_checkpoint_expecting(path: &Path, config: &McnnConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::parse(&bytes, Some(config))
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
