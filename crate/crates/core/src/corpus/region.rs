use super::{BoxNorm, CorpusEntry, Raster};
use crate::error::{Error, Result};

/// Per-pixel, per-channel arithmetic mean of `images`.
pub fn compute_mean_image<'a>(images: impl IntoIterator<Item = &'a Raster>) -> Result<Raster> {
    let mut iter = images.into_iter();
    let first = iter.next().ok_or_else(|| Error::Corpus("mean image of an empty corpus".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut sum: Vec<f64> = first.data().iter().map(|&v| v as f64).collect();
    let mut n = 1usize;
    for img in iter {
        if img.height() != h || img.width() != w {
            return Err(Error::Corpus(format!(
                "mean image: {}x{} raster in a {h}x{w} corpus",
                img.height(),
                img.width()
            )));
        }
        for (s, &v) in sum.iter_mut().zip(img.data()) {
            *s += v as f64;
        }
        n += 1;
    }
    Raster::from_data(h, w, sum.into_iter().map(|s| (s / n as f64) as f32).collect())
}

/// A neighbor image with only one label's pixels kept.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnRegion {
    pub source: u32,
    pub label: u8,
    /// Label pixels from the source; every other pixel is the mean image.
    pub image: Raster,
    /// Source-frame binary mask of the label, row-major.
    pub mask: Vec<bool>,
    pub region_box: BoxNorm,
    pub present: bool,
}

/// Keeps `label`'s pixels of `entry` and fills the rest from `mean`.
///
/// An absent label yields exactly the mean image, an empty mask and the
/// degenerate box `(0, 0, 0, 0)`.
pub fn make_knn_region(entry: &CorpusEntry, label: u8, mean: &Raster) -> Result<KnnRegion> {
    if mean.height() != entry.image.height() || mean.width() != entry.image.width() {
        return Err(Error::Corpus(format!(
            "mean image {}x{} does not match entry {}",
            mean.height(),
            mean.width(),
            entry.id
        )));
    }
    let mask: Vec<bool> = entry.label_map.data().iter().map(|&v| v == label && label != 0).collect();
    let mut image = mean.clone();
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        image.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&entry.image.data()[p * 3..p * 3 + 3]);
    }
    let (present, region_box) = match entry.label_box(label) {
        Some(b) if label != 0 => (true, b),
        _ => (false, BoxNorm::EMPTY),
    };
    Ok(KnnRegion { source: entry.id, label, image, mask, region_box, present })
}

/// Corner differences `(U_I − U_g, W_I − W_g)` taking the neighbor box onto
/// the query box.
pub fn displacement_target(box_g: BoxNorm, box_i: BoxNorm) -> [f64; 4] {
    [box_i.x1 - box_g.x1, box_i.y1 - box_g.y1, box_i.x2 - box_g.x2, box_i.y2 - box_g.y2]
}

/// The query box predicted from a neighbor box and displacements.
pub fn apply_displacement(box_g: BoxNorm, t: [f64; 4]) -> BoxNorm {
    BoxNorm::new(box_g.x1 + t[0], box_g.y1 + t[1], box_g.x2 + t[2], box_g.y2 + t[3])
}
