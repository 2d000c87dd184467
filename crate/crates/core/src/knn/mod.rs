//! Global image embeddings and exact nearest-neighbor retrieval.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusEntry, Raster};
use crate::error::{Error, Result};
use crate::model::McnnParams;
use crate::tensor::conv2d_forward;

/// How images are turned into feature vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Extractor {
    /// Bilinear thumbnail of `side × side × 3`, mean-subtracted and
    /// L2-normalized.
    Downsample { side: usize },
    /// Flattened final feature maps of a trained image path, L2-normalized.
    Network,
}

impl Default for Extractor {
    fn default() -> Self {
        Extractor::Downsample { side: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub id: u32,
    pub vector: Vec<f32>,
}

/// Mean-subtract then scale to unit length; the zero vector stays zero.
fn center_and_normalize(mut v: Vec<f64>) -> Vec<f32> {
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return vec![0.0; v.len()];
    }
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

/// Embeds `image`. `params` is required by [`Extractor::Network`].
pub fn embed(image: &Raster, extractor: Extractor, params: Option<&McnnParams<f32>>) -> Result<Vec<f32>> {
    match extractor {
        Extractor::Downsample { side } => {
            if side == 0 {
                return Err(Error::Config("embedding side must be positive".into()));
            }
            let thumb = image.resize_bilinear(side, side);
            Ok(center_and_normalize(thumb.data().iter().map(|&v| v as f64 / 255.0).collect()))
        }
        Extractor::Network => {
            let p = params.ok_or_else(|| Error::Config("network extractor needs trained parameters".into()))?;
            let mut x = image.to_tensor::<f32>(p.config.input_height, p.config.input_width);
            for layer in &p.image_path {
                x = conv2d_forward(&x, layer)?;
                crate::tensor::relu_inplace(&mut x);
            }
            let v: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            Ok(if norm <= 1e-12 { vec![0.0; v.len()] } else { v.iter().map(|x| (x / norm) as f32).collect() })
        }
    }
}

/// Exhaustive Euclidean index over one embedding per corpus entry.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnIndex {
    pub dim: usize,
    pub entries: Vec<Embedding>,
}

const INDEX_MAGIC: &[u8; 4] = b"KNNX";
const INDEX_VERSION: u32 = 1;

impl KnnIndex {
    pub fn new(entries: Vec<Embedding>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.vector.len());
        if let Some(bad) = entries.iter().find(|e| e.vector.len() != dim) {
            return Err(Error::Retrieval(format!("entry {} has dim {}, index dim {dim}", bad.id, bad.vector.len())));
        }
        if let Some(bad) = entries.iter().find(|e| e.vector.iter().any(|v| !v.is_finite())) {
            return Err(Error::Retrieval(format!("entry {} has a non-finite embedding", bad.id)));
        }
        Ok(Self { dim, entries })
    }

    pub fn build<'a>(
        entries: impl IntoParallelIterator<Item = &'a CorpusEntry>,
        extractor: Extractor,
        params: Option<&McnnParams<f32>>,
    ) -> Result<Self> {
        let embedded: Result<Vec<Embedding>> = entries
            .into_par_iter()
            .map(|e| Ok(Embedding { id: e.id, vector: embed(&e.image, extractor, params)? }))
            .collect();
        Self::new(embedded?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.entries.len() * (4 + 4 * self.dim));
        buf.extend_from_slice(INDEX_MAGIC);
        for v in [INDEX_VERSION, self.dim as u32, self.entries.len() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for e in &self.entries {
            buf.extend_from_slice(&e.id.to_le_bytes());
            for v in &e.vector {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let corrupt = |what: &str| Error::Retrieval(format!("{}: {what}", path.display()));
        if bytes.len() < 16 || &bytes[..4] != INDEX_MAGIC {
            return Err(corrupt("not a KNNX index"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("four bytes"));
        if word(4) != INDEX_VERSION {
            return Err(corrupt(&format!("unsupported index version {}", word(4))));
        }
        let (dim, count) = (word(8) as usize, word(12) as usize);
        let stride = 4 + 4 * dim;
        if bytes.len() != 16 + count * stride {
            return Err(corrupt("truncated or oversized index"));
        }
        let entries = (0..count)
            .map(|i| {
                let base = 16 + i * stride;
                let vector = (0..dim).map(|d| f32::from_bits(word(base + 4 + 4 * d))).collect();
                Embedding { id: word(base), vector }
            })
            .collect();
        Self::new(entries)
    }
}

/// Ids of the `k` entries nearest to `query`, by ascending Euclidean
/// distance with ties broken by ascending id. `exclude` drops one id from
/// consideration (leave-one-out).
pub fn retrieve_knn(index: &KnnIndex, query: &[f32], k: usize, exclude: Option<u32>) -> Result<Vec<u32>> {
    if query.len() != index.dim {
        return Err(Error::Retrieval(format!("query dim {} vs index dim {}", query.len(), index.dim)));
    }
    let mut scored: Vec<(f64, u32)> = index
        .entries
        .iter()
        .filter(|e| Some(e.id) != exclude)
        .map(|e| {
            let d2: f64 = e.vector.iter().zip(query).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            (d2, e.id)
        })
        .collect();
    if k == 0 || k > scored.len() {
        return Err(Error::Retrieval(format!("cannot retrieve {k} neighbors from {} candidates", scored.len())));
    }
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}
