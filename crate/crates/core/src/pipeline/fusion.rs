use crate::corpus::{apply_displacement, KnnRegion};
use crate::model::MatchOutput;

/// Per-label outcome of confidence aggregation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabelVisibility {
    /// Mean confidence over eligible regions, 0 when none.
    pub confidence: f64,
    pub visible: bool,
}

/// Averages confidences over regions whose source contains their label.
/// A label is visible when its mean strictly exceeds `xi1`.
pub fn aggregate_confidence(
    outputs: &[MatchOutput<f64>],
    regions: &[&KnnRegion],
    xi1: f64,
    num_labels: usize,
) -> Vec<LabelVisibility> {
    assert_eq!(outputs.len(), regions.len(), "one output per region");
    let mut sum = vec![0.0; num_labels];
    let mut count = vec![0usize; num_labels];
    for (o, r) in outputs.iter().zip(regions) {
        if r.present && (1..=num_labels).contains(&(r.label as usize)) {
            sum[r.label as usize - 1] += o.confidence;
            count[r.label as usize - 1] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &n)| {
            if n == 0 {
                LabelVisibility { confidence: 0.0, visible: false }
            } else {
                let c = s / n as f64;
                LabelVisibility { confidence: c, visible: c > xi1 }
            }
        })
        .collect()
}

/// Moves the region's label mask into the box predicted by `t`.
///
/// Destination pixels whose centres fall inside `region_box + t` read the
/// source mask by nearest-neighbour sampling relative to the source box;
/// pixels outside the frame are dropped and everything else is 0.
pub fn transfer_label_mask(region: &KnnRegion, t: [f64; 4], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; height * width];
    if !region.present || region.mask.len() != height * width {
        return out;
    }
    let src = region.region_box;
    let dst = apply_displacement(src, t);
    if dst.clipped().area() <= 0.0 || dst.x2 <= dst.x1 || dst.y2 <= dst.y1 {
        return out;
    }
    // Source box in whole pixels (boxes are tight to pixel edges).
    let sc0 = (src.x1 * width as f64).round() as usize;
    let sc1 = ((src.x2 * width as f64).round() as usize).max(sc0 + 1);
    let sr0 = (src.y1 * height as f64).round() as usize;
    let sr1 = ((src.y2 * height as f64).round() as usize).max(sr0 + 1);
    for r in 0..height {
        let y = (r as f64 + 0.5) / height as f64;
        if y < dst.y1 || y >= dst.y2 {
            continue;
        }
        let v = (y - dst.y1) / (dst.y2 - dst.y1);
        let sr = (sr0 + (v * (sr1 - sr0) as f64).floor() as usize).min(sr1 - 1).min(height - 1);
        for c in 0..width {
            let x = (c as f64 + 0.5) / width as f64;
            if x < dst.x1 || x >= dst.x2 {
                continue;
            }
            let u = (x - dst.x1) / (dst.x2 - dst.x1);
            let sc = (sc0 + (u * (sc1 - sc0) as f64).floor() as usize).min(sc1 - 1).min(width - 1);
            out[r * width + c] = region.mask[sr * width + sc];
        }
    }
    out
}

/// Per-label probability maps in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMaps {
    pub height: usize,
    pub width: usize,
    /// `maps[l - 1]` is the map of label `l`.
    pub maps: Vec<Vec<f64>>,
}

impl ProbabilityMaps {
    pub fn zeros(num_labels: usize, height: usize, width: usize) -> Self {
        Self { height, width, maps: vec![vec![0.0; height * width]; num_labels] }
    }

    pub fn num_labels(&self) -> usize {
        self.maps.len()
    }

    /// Pixel-wise maximum over labels.
    pub fn max_map(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.height * self.width];
        for m in &self.maps {
            for (o, &v) in out.iter_mut().zip(m) {
                *o = o.max(v);
            }
        }
        out
    }
}

/// A transferred mask with the label and confidence it carries.
#[derive(Clone, Debug)]
pub struct TransferredMask {
    pub label: u8,
    pub mask: Vec<bool>,
    pub confidence: f64,
}

/// Confidence-weighted mean of each visible label's masks. Weights are
/// clamped to `[0, 1]`; if they sum to zero the plain mean is used.
/// Invisible labels get all-zero maps.
pub fn build_probability_maps(
    masks: &[TransferredMask],
    visibility: &[LabelVisibility],
    height: usize,
    width: usize,
) -> ProbabilityMaps {
    let mut out = ProbabilityMaps::zeros(visibility.len(), height, width);
    for (li, vis) in visibility.iter().enumerate() {
        if !vis.visible {
            continue;
        }
        let mine: Vec<&TransferredMask> = masks.iter().filter(|m| m.label as usize == li + 1).collect();
        if mine.is_empty() {
            continue;
        }
        let weights: Vec<f64> = mine.iter().map(|m| m.confidence.clamp(0.0, 1.0)).collect();
        let total: f64 = weights.iter().sum();
        let (weights, total) = if total > 0.0 { (weights, total) } else { (vec![1.0; mine.len()], mine.len() as f64) };
        let map = &mut out.maps[li];
        for (m, w) in mine.iter().zip(&weights) {
            for (p, &on) in map.iter_mut().zip(&m.mask) {
                if on {
                    *p += w;
                }
            }
        }
        map.iter_mut().for_each(|p| *p = (*p / total).clamp(0.0, 1.0));
    }
    out
}
