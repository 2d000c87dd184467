use super::{CorpusEntry, LabelMap, Raster};

/// Enlargement factor of the second crop.
pub const AUGMENT_SCALE: f64 = 1.2;

/// Horizontal mirror of image and labels.
pub fn mirror(entry: &CorpusEntry) -> CorpusEntry {
    let (h, w) = (entry.image.height(), entry.image.width());
    let mut image = Raster::new(h, w);
    let mut labels = LabelMap::new(h, w);
    for r in 0..h {
        for c in 0..w {
            image.set_pixel(r, c, entry.image.pixel(r, w - 1 - c));
            labels.set(r, c, entry.label_map.get(r, w - 1 - c));
        }
    }
    rebuild(entry, image, labels)
}

/// Crop `scale` times larger than the frame around its centre, resampled
/// back to the frame size: content shrinks by `1/scale` about the centre.
/// Out-of-frame source pixels clamp to the nearest edge pixel; both image
/// and labels use nearest-neighbour sampling so they stay aligned.
pub fn zoom_out(entry: &CorpusEntry, scale: f64) -> CorpusEntry {
    let (h, w) = (entry.image.height(), entry.image.width());
    let src = |i: usize, n: usize| -> usize {
        let v = (i as f64 + 0.5) / n as f64;
        let u = 0.5 + (v - 0.5) * scale;
        ((u * n as f64).floor().max(0.0) as usize).min(n - 1)
    };
    let mut image = Raster::new(h, w);
    let mut labels = LabelMap::new(h, w);
    for r in 0..h {
        let sr = src(r, h);
        for c in 0..w {
            let sc = src(c, w);
            image.set_pixel(r, c, entry.image.pixel(sr, sc));
            labels.set(r, c, entry.label_map.get(sr, sc));
        }
    }
    rebuild(entry, image, labels)
}

fn rebuild(entry: &CorpusEntry, image: Raster, labels: LabelMap) -> CorpusEntry {
    CorpusEntry::new(entry.id, entry.split, image, labels, entry.num_labels()).expect("same shape and label range")
}

/// The four training variants: `{×1, ×1.2} × {original, mirrored}`.
pub fn augment(entry: &CorpusEntry) -> [CorpusEntry; 4] {
    let zoomed = zoom_out(entry, AUGMENT_SCALE);
    let m = mirror(entry);
    let zm = mirror(&zoomed);
    [entry.clone(), m, zoomed, zm]
}
