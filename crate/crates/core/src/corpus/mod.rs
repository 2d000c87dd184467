//! Corpus data model: labelled rasters, boxes, KNN regions, training pairs
//! and output normalization.
//!
//! Coordinate convention: pixel `(r, c)` of an `H×W` raster spans
//! `[c/W, (c+1)/W) × [r/H, (r+1)/H)`; boxes use the outer pixel edges.

mod augment;
mod normalize;
mod pairs;
mod raster;
mod region;

pub use augment::{augment, mirror, zoom_out, AUGMENT_SCALE};
pub use normalize::{OutputNormalizer, VARIANCE_FLOOR};
pub use pairs::{balance_positives, gen_pairs, BalanceConfig, PairRef, PairSet, TrainPair};
pub use raster::{LabelMap, Raster};
pub use region::{apply_displacement, compute_mean_image, displacement_target, make_knn_region, KnnRegion};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized corner box `(x1, y1)–(x2, y2)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxNorm {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxNorm {
    pub const EMPTY: BoxNorm = BoxNorm { x1: 0.0, y1: 0.0, x2: 0.0, y2: 0.0 };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.x1)
            && (0.0..=1.0).contains(&self.y1)
            && (0.0..=1.0).contains(&self.x2)
            && (0.0..=1.0).contains(&self.y2)
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    /// Clamped to the unit square; corners are reordered if crossed.
    pub fn clipped(&self) -> BoxNorm {
        let c = |v: f64| v.clamp(0.0, 1.0);
        BoxNorm::new(c(self.x1.min(self.x2)), c(self.y1.min(self.y2)), c(self.x1.max(self.x2)), c(self.y1.max(self.y2)))
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Tight box around pixels with `label`, or `None` if there are none.
    pub fn of_label(map: &LabelMap, label: u8) -> Option<BoxNorm> {
        let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..map.height() {
            for c in 0..map.width() {
                if map.get(r, c) == label {
                    rmin = rmin.min(r);
                    rmax = rmax.max(r);
                    cmin = cmin.min(c);
                    cmax = cmax.max(c);
                }
            }
        }
        if rmin == usize::MAX {
            return None;
        }
        let (h, w) = (map.height() as f64, map.width() as f64);
        Some(BoxNorm::new(cmin as f64 / w, rmin as f64 / h, (cmax + 1) as f64 / w, (rmax + 1) as f64 / h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

/// One annotated image. Label set and boxes are derived from the label map
/// at construction, so they always agree with it.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub id: u32,
    pub split: Split,
    pub image: Raster,
    pub label_map: LabelMap,
    num_labels: usize,
    /// Indexed by label id; slot 0 is unused.
    boxes: Vec<Option<BoxNorm>>,
}

impl CorpusEntry {
    pub fn new(id: u32, split: Split, image: Raster, label_map: LabelMap, num_labels: usize) -> Result<Self> {
        if image.height() != label_map.height() || image.width() != label_map.width() {
            return Err(Error::Corpus(format!(
                "entry {id}: image {}x{} vs label map {}x{}",
                image.height(),
                image.width(),
                label_map.height(),
                label_map.width()
            )));
        }
        if let Some(&bad) = label_map.data().iter().find(|&&v| v as usize > num_labels) {
            return Err(Error::Corpus(format!("entry {id}: label id {bad} exceeds L = {num_labels}")));
        }
        let boxes = (0..=num_labels).map(|l| if l == 0 { None } else { BoxNorm::of_label(&label_map, l as u8) }).collect();
        Ok(Self { id, split, image, label_map, num_labels, boxes })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn has_label(&self, label: u8) -> bool {
        self.boxes.get(label as usize).is_some_and(Option::is_some)
    }

    /// Present foreground labels in ascending order (the label set φ).
    pub fn label_set(&self) -> Vec<u8> {
        (1..=self.num_labels as u8).filter(|&l| self.has_label(l)).collect()
    }

    pub fn label_box(&self, label: u8) -> Option<BoxNorm> {
        self.boxes.get(label as usize).copied().flatten()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u32,
    pub split: Split,
    pub image: String,
    pub label_map: String,
    /// Optional per-label boxes keyed by label id; checked on load.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub boxes: BTreeMap<u8, [f64; 4]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub num_labels: usize,
    /// Names of labels `1..=L`.
    pub label_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// An in-memory corpus: all rasters share one size.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub height: usize,
    pub width: usize,
    pub label_names: Vec<String>,
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn new(height: usize, width: usize, label_names: Vec<String>, entries: Vec<CorpusEntry>) -> Result<Self> {
        let c = Self { height, width, label_names, entries };
        c.validate()?;
        Ok(c)
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_names.is_empty() || self.label_names.len() > 254 {
            return Err(Error::Corpus(format!("label count {} out of range 1..=254", self.label_names.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if e.image.height() != self.height || e.image.width() != self.width {
                return Err(Error::Corpus(format!(
                    "entry {} is {}x{}, corpus is {}x{}",
                    e.id,
                    e.image.height(),
                    e.image.width(),
                    self.height,
                    self.width
                )));
            }
            if e.num_labels() != self.num_labels() {
                return Err(Error::Corpus(format!("entry {} built for a different label count", e.id)));
            }
            if !seen.insert(e.id) {
                return Err(Error::Corpus(format!("duplicate entry id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&CorpusEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn subset(&self, split: Split) -> Corpus {
        Corpus {
            height: self.height,
            width: self.width,
            label_names: self.label_names.clone(),
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    pub fn get(&self, id: u32) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Fraction of entries containing each label `1..=L`.
    pub fn label_frequencies(&self) -> Vec<f64> {
        let n = self.entries.len().max(1) as f64;
        (1..=self.num_labels() as u8)
            .map(|l| self.entries.iter().filter(|e| e.has_label(l)).count() as f64 / n)
            .collect()
    }

    /// Writes `manifest.json`, `images/*.png` and `labels/*.png` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("labels"))?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let image = format!("images/{:05}.png", e.id);
            let label_map = format!("labels/{:05}.png", e.id);
            e.image.to_rgb8().save(dir.join(&image))?;
            e.label_map.to_luma8().save(dir.join(&label_map))?;
            let boxes = e.label_set().into_iter().map(|l| (l, e.label_box(l).expect("present").to_array())).collect();
            entries.push(ManifestEntry { id: e.id, split: e.split, image, label_map, boxes });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            height: self.height,
            width: self.width,
            num_labels: self.num_labels(),
            label_names: self.label_names.clone(),
            entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Corpus(format!("bad manifest {}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Corpus(format!("manifest version {} unsupported", m.version)));
        }
        if m.label_names.len() != m.num_labels {
            return Err(Error::Corpus(format!(
                "manifest lists {} label names for L = {}",
                m.label_names.len(),
                m.num_labels
            )));
        }
        let mut entries = Vec::with_capacity(m.entries.len());
        for me in &m.entries {
            let image = read_png(&dir.join(&me.image))?.to_rgb8();
            let labels = read_png(&dir.join(&me.label_map))?;
            if labels.color() != image::ColorType::L8 {
                return Err(Error::Corpus(format!("{} is not an 8-bit single-channel PNG", me.label_map)));
            }
            let entry =
                CorpusEntry::new(me.id, me.split, Raster::from_rgb8(&image), LabelMap::from_luma8(&labels.to_luma8()), m.num_labels)?;
            for (&l, b) in &me.boxes {
                if entry.label_box(l).map(BoxNorm::to_array) != Some(*b) {
                    return Err(Error::Corpus(format!("entry {}: stored box for label {l} disagrees with pixels", me.id)));
                }
            }
            entries.push(entry);
        }
        Corpus::new(m.height, m.width, m.label_names, entries)
    }
}

fn read_png(path: &PathBuf) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))
}
