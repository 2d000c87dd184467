use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::fusion::ProbabilityMaps;
use crate::corpus::{LabelMap, Raster};

/// Binary erosion by a `size × size` square.
///
/// The window around `(r, c)` spans rows `r − ⌊(size−1)/2⌋ ..= r + ⌈(size−1)/2⌉`
/// (columns alike), so a solid rectangle loses `size − 1` pixels per axis.
/// Pixels outside the frame count as members, so regions touching the border
/// are not eaten from that side.
pub fn erode(mask: &[bool], height: usize, width: usize, size: usize) -> Vec<bool> {
    if size <= 1 {
        return mask.to_vec();
    }
    let before = (size - 1) / 2;
    let after = size - 1 - before;
    // Separable: a pixel survives iff its row window and then column window
    // are all members. Prefix counts of non-members make each test O(1).
    let pass = |src: &[bool], along_rows: bool| -> Vec<bool> {
        let (outer, inner) = if along_rows { (height, width) } else { (width, height) };
        let mut out = vec![false; src.len()];
        let idx = |o: usize, i: usize| if along_rows { o * width + i } else { i * width + o };
        let mut holes = vec![0usize; inner + 1];
        for o in 0..outer {
            for i in 0..inner {
                holes[i + 1] = holes[i] + (!src[idx(o, i)]) as usize;
            }
            for i in 0..inner {
                let lo = i.saturating_sub(before);
                let hi = (i + after).min(inner - 1);
                out[idx(o, i)] = holes[hi + 1] - holes[lo] == 0;
            }
        }
        out
    };
    pass(&pass(mask, true), false)
}

/// Foreground and background seed masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Seeds {
    pub foreground: Vec<bool>,
    pub background: Vec<bool>,
    /// Set when erosion emptied a seed set and the rough mask was used.
    pub fallback: bool,
}

/// Rough foreground is `max_l M_l > xi2`, rough background its complement;
/// both are eroded. An erosion that empties a set falls back to its rough
/// mask.
pub fn foreground_seeds(maps: &ProbabilityMaps, xi2: f64, erosion_size: usize) -> Seeds {
    let (h, w) = (maps.height, maps.width);
    let rough_fg: Vec<bool> = maps.max_map().iter().map(|&v| v > xi2).collect();
    let rough_bg: Vec<bool> = rough_fg.iter().map(|&v| !v).collect();
    let mut fg = erode(&rough_fg, h, w, erosion_size);
    let mut bg = erode(&rough_bg, h, w, erosion_size);
    let mut fallback = false;
    if !fg.iter().any(|&v| v) && rough_fg.iter().any(|&v| v) {
        fg = rough_fg;
        fallback = true;
    }
    if !bg.iter().any(|&v| v) && rough_bg.iter().any(|&v| v) {
        bg = rough_bg;
        fallback = true;
    }
    Seeds { foreground: fg, background: bg, fallback }
}

#[derive(PartialEq)]
struct Node(f64, usize);

impl Eq for Node {}

impl Ord for Node {
    // Reversed for a min-heap; index breaks ties for determinism.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Geodesic distance from `seeds` over a 4-connected grid where a step
/// between neighbours `p, q` costs `1 + lambda·‖rgb(p) − rgb(q)‖` with
/// channels scaled to `[0, 1]`.
pub fn geodesic_distance(image: &Raster, seeds: &[bool], lambda: f64) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let mut dist = vec![f64::INFINITY; h * w];
    let mut heap = BinaryHeap::new();
    for (i, _) in seeds.iter().enumerate().filter(|(_, &s)| s) {
        dist[i] = 0.0;
        heap.push(Node(0.0, i));
    }
    let px = |i: usize| image.pixel(i / w, i % w);
    while let Some(Node(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        let (r, c) = (i / w, i % w);
        let a = px(i);
        let mut relax = |j: usize| {
            let b = px(j);
            let diff: f64 = (0..3).map(|k| ((a[k] - b[k]) as f64 / 255.0).powi(2)).sum::<f64>().sqrt();
            let nd = d + 1.0 + lambda * diff;
            if nd < dist[j] {
                dist[j] = nd;
                heap.push(Node(nd, j));
            }
        };
        if r > 0 {
            relax(i - w);
        }
        if r + 1 < h {
            relax(i + w);
        }
        if c > 0 {
            relax(i - 1);
        }
        if c + 1 < w {
            relax(i + 1);
        }
    }
    dist
}

/// `P(bg) = d_fg / (d_fg + d_bg)` from geodesic distances to each seed set.
/// Without foreground seeds every pixel is background; without background
/// seeds none is.
pub fn background_probability(image: &Raster, seeds: &Seeds, lambda: f64) -> Vec<f64> {
    let n = image.height() * image.width();
    let any = |m: &[bool]| m.iter().any(|&v| v);
    match (any(&seeds.foreground), any(&seeds.background)) {
        (false, _) => return vec![1.0; n],
        (true, false) => return vec![0.0; n],
        _ => {}
    }
    let d_fg = geodesic_distance(image, &seeds.foreground, lambda);
    let d_bg = geodesic_distance(image, &seeds.background, lambda);
    d_fg.iter()
        .zip(&d_bg)
        .map(|(&f, &b)| if f + b > 0.0 { (f / (f + b)).clamp(0.0, 1.0) } else { 0.5 })
        .collect()
}

/// Per-pixel argmax over `[bg, (1 − bg)·M_1, …, (1 − bg)·M_L]`; ties go to
/// background, then the lowest label id.
pub fn map_assign(maps: &ProbabilityMaps, bg: &[f64]) -> LabelMap {
    let mut out = LabelMap::new(maps.height, maps.width);
    for (p, &b) in bg.iter().enumerate() {
        let (mut best, mut label) = (b, 0u8);
        for (li, m) in maps.maps.iter().enumerate() {
            let s = (1.0 - b) * m[p];
            if s > best {
                best = s;
                label = (li + 1) as u8;
            }
        }
        out.data_mut()[p] = label;
    }
    out
}
