use crate::corpus::{LabelMap, Raster};

/// Over-segmentation: segment id per pixel, ids contiguous from 0, every
/// segment 4-connected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub height: usize,
    pub width: usize,
    pub segments: Vec<u32>,
    pub count: usize,
}

/// sRGB (0–255) to CIE L*a*b* under D65.
fn to_lab(rgb: [f32; 3]) -> [f64; 3] {
    let lin = |v: f32| {
        let v = v as f64 / 255.0;
        if v <= 0.04045 {
            v / 12.92
        } else {
            ((v + 0.055) / 1.055).powf(2.4)
        }
    };
    let (r, g, b) = (lin(rgb[0]), lin(rgb[1]), lin(rgb[2]));
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    let f = |t: f64| if t > 216.0 / 24389.0 { t.cbrt() } else { (24389.0 / 27.0 * t + 16.0) / 116.0 };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

const ITERATIONS: usize = 10;

/// Simple linear iterative clustering on `(L*, a*, b*, x, y)`.
///
/// Centres start on a regular grid of about `target_count` cells and are
/// nudged to the lowest-gradient pixel of their 3×3 neighbourhood when
/// cells span at least three pixels. Each iteration assigns pixels within
/// `2S` of a centre by
/// `d_lab² + (d_xy / S)²·compactness²`. Afterwards every 4-connected
/// fragment becomes its own segment and fragments smaller than a quarter of
/// the nominal cell area are merged into a neighbouring segment.
/// Fully deterministic.
pub fn superpixel_segment(image: &Raster, target_count: usize, compactness: f64) -> SuperpixelMap {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let target = target_count.clamp(1, n);
    let lab: Vec<[f64; 3]> = (0..n).map(|i| to_lab(image.pixel(i / w, i % w))).collect();
    let step = (n as f64 / target as f64).sqrt();
    let nx = ((w as f64 / step).round() as usize).clamp(1, w);
    let ny = ((h as f64 / step).round() as usize).clamp(1, h);

    let grad = |r: usize, c: usize| -> f64 {
        let at = |rr: usize, cc: usize| lab[rr * w + cc];
        let (l, rt) = (at(r, c.saturating_sub(1)), at(r, (c + 1).min(w - 1)));
        let (u, d) = (at(r.saturating_sub(1), c), at((r + 1).min(h - 1), c));
        (0..3).map(|k| (rt[k] - l[k]).powi(2) + (d[k] - u[k]).powi(2)).sum()
    };
    // Centre: (L, a, b, y, x).
    let mut centres: Vec<[f64; 5]> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let r0 = (((j as f64 + 0.5) * h as f64 / ny as f64) as usize).min(h - 1);
            let c0 = (((i as f64 + 0.5) * w as f64 / nx as f64) as usize).min(w - 1);
            let (mut br, mut bc, mut bg) = (r0, c0, f64::INFINITY);
            // Nudging only makes sense when cells are wider than the 3×3 window.
            if nx * ny > 1 && step >= 3.0 {
                for r in r0.saturating_sub(1)..=(r0 + 1).min(h - 1) {
                    for c in c0.saturating_sub(1)..=(c0 + 1).min(w - 1) {
                        let g = grad(r, c);
                        if g < bg {
                            (br, bc, bg) = (r, c, g);
                        }
                    }
                }
            }
            let l = lab[br * w + bc];
            centres.push([l[0], l[1], l[2], br as f64, bc as f64]);
        }
    }

    let m2 = compactness * compactness;
    let s2 = step * step;
    let window = (2.0 * step).ceil() as isize;
    let mut assign = vec![u32::MAX; n];
    for _ in 0..ITERATIONS {
        let mut best = vec![f64::INFINITY; n];
        for (k, cen) in centres.iter().enumerate() {
            let (cr, cc) = (cen[3].round() as isize, cen[4].round() as isize);
            for r in (cr - window).max(0)..=(cr + window).min(h as isize - 1) {
                for c in (cc - window).max(0)..=(cc + window).min(w as isize - 1) {
                    let p = r as usize * w + c as usize;
                    let l = lab[p];
                    let dc = (l[0] - cen[0]).powi(2) + (l[1] - cen[1]).powi(2) + (l[2] - cen[2]).powi(2);
                    let ds = (r as f64 - cen[3]).powi(2) + (c as f64 - cen[4]).powi(2);
                    let d = dc + ds / s2 * m2;
                    if d < best[p] {
                        best[p] = d;
                        assign[p] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![[0.0f64; 6]; centres.len()];
        for (p, &k) in assign.iter().enumerate() {
            if k == u32::MAX {
                continue;
            }
            let a = &mut acc[k as usize];
            let l = lab[p];
            a[0] += l[0];
            a[1] += l[1];
            a[2] += l[2];
            a[3] += (p / w) as f64;
            a[4] += (p % w) as f64;
            a[5] += 1.0;
        }
        for (cen, a) in centres.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                for d in 0..5 {
                    cen[d] = a[d] / a[5];
                }
            }
        }
    }
    // Pixels no window reached (only possible with extreme aspect ratios)
    // join the nearest centre spatially.
    for p in 0..n {
        if assign[p] == u32::MAX {
            let (r, c) = ((p / w) as f64, (p % w) as f64);
            let k = (0..centres.len())
                .min_by(|&a, &b| {
                    let da = (centres[a][3] - r).powi(2) + (centres[a][4] - c).powi(2);
                    let db = (centres[b][3] - r).powi(2) + (centres[b][4] - c).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one centre");
            assign[p] = k as u32;
        }
    }
    enforce_connectivity(&assign, h, w, (n / target / 4).max(1))
}

/// Relabels 4-connected fragments, merging those below `min_size` into the
/// segment of an adjacent, earlier-visited fragment.
fn enforce_connectivity(assign: &[u32], h: usize, w: usize, min_size: usize) -> SuperpixelMap {
    let n = h * w;
    let mut out = vec![u32::MAX; n];
    let mut sizes: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    let mut members = Vec::new();
    for start in 0..n {
        if out[start] != u32::MAX {
            continue;
        }
        let id = sizes.len() as u32;
        // An already-labelled neighbour of the seed pixel, for merging.
        let (r0, c0) = (start / w, start % w);
        let mut adjacent = None;
        for (dr, dc) in [(-1isize, 0isize), (0, -1), (1, 0), (0, 1)] {
            let (r, c) = (r0 as isize + dr, c0 as isize + dc);
            if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                let q = r as usize * w + c as usize;
                if out[q] != u32::MAX {
                    adjacent = Some(out[q]);
                    break;
                }
            }
        }
        members.clear();
        stack.push(start);
        out[start] = id;
        while let Some(p) = stack.pop() {
            members.push(p);
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if out[q] == u32::MAX && assign[q] == assign[start] {
                    out[q] = id;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        match adjacent {
            Some(a) if members.len() < min_size => {
                for &p in &members {
                    out[p] = a;
                }
                sizes[a as usize] += members.len();
            }
            _ => sizes.push(members.len()),
        }
    }
    SuperpixelMap { height: h, width: w, segments: out, count: sizes.len() }
}

/// Gives every pixel of a segment the segment's most frequent initial
/// label; ties go to background, then the lowest id.
pub fn smooth_labels(initial: &LabelMap, sp: &SuperpixelMap) -> LabelMap {
    assert_eq!(initial.data().len(), sp.segments.len(), "label map and superpixels differ in size");
    let mut hist = vec![[0u32; 256]; sp.count];
    for (&s, &l) in sp.segments.iter().zip(initial.data()) {
        hist[s as usize][l as usize] += 1;
    }
    let modal: Vec<u8> = hist
        .iter()
        .map(|h| {
            let mut best = 0usize;
            for l in 1..256 {
                if h[l] > h[best] {
                    best = l;
                }
            }
            best as u8
        })
        .collect();
    let mut out = initial.clone();
    for (o, &s) in out.data_mut().iter_mut().zip(&sp.segments) {
        *o = modal[s as usize];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_connected(sp: &SuperpixelMap, id: u32) -> bool {
        let (h, w) = (sp.height, sp.width);
        let pixels: Vec<usize> = (0..h * w).filter(|&p| sp.segments[p] == id).collect();
        let mut seen = vec![false; h * w];
        let mut stack = vec![pixels[0]];
        seen[pixels[0]] = true;
        let mut count = 0;
        while let Some(p) = stack.pop() {
            count += 1;
            let (r, c) = (p / w, p % w);
            let mut nb = Vec::new();
            if r > 0 {
                nb.push(p - w);
            }
            if r + 1 < h {
                nb.push(p + w);
            }
            if c > 0 {
                nb.push(p - 1);
            }
            if c + 1 < w {
                nb.push(p + 1);
            }
            for q in nb {
                if !seen[q] && sp.segments[q] == id {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        count == pixels.len()
    }

    #[test]
    fn single_target_covers_frame() {
        let img = Raster::from_data(6, 5, (0..90).map(|i| (i * 13 % 256) as f32).collect()).unwrap();
        let sp = superpixel_segment(&img, 1, 10.0);
        assert_eq!(sp.count, 1);
        assert!(sp.segments.iter().all(|&s| s == 0));
    }

    #[test]
    fn four_colours_four_segments() {
        let mut img = Raster::new(2, 2);
        img.set_pixel(0, 0, [255.0, 0.0, 0.0]);
        img.set_pixel(0, 1, [0.0, 255.0, 0.0]);
        img.set_pixel(1, 0, [0.0, 0.0, 255.0]);
        img.set_pixel(1, 1, [255.0, 255.0, 255.0]);
        let sp = superpixel_segment(&img, 4, 10.0);
        assert_eq!(sp.count, 4);
        let mut ids = sp.segments.clone();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn constant_image_gives_near_regular_grid() {
        let img = Raster::filled(64, 64, [90.0, 120.0, 30.0]);
        for target in [16, 64, 100] {
            let sp = superpixel_segment(&img, target, 10.0);
            let lo = (target as f64 * 0.8).floor() as usize;
            let hi = (target as f64 * 1.2).ceil() as usize;
            assert!((lo..=hi).contains(&sp.count), "target {target}: {} segments", sp.count);
            assert!((0..sp.count as u32).all(|id| is_connected(&sp, id)));
        }
    }

    #[test]
    fn segments_are_connected_and_contiguous() {
        let data = (0..40 * 30 * 3).map(|i| ((i * 7919) % 251) as f32).collect();
        let img = Raster::from_data(40, 30, data).unwrap();
        let sp = superpixel_segment(&img, 30, 10.0);
        let max = *sp.segments.iter().max().unwrap() as usize;
        assert_eq!(max + 1, sp.count);
        assert!((0..sp.count as u32).all(|id| is_connected(&sp, id)));
    }

    #[test]
    fn smoothing_majority_and_ties() {
        let sp = SuperpixelMap { height: 1, width: 5, segments: vec![0, 0, 0, 1, 1], count: 2 };
        let init = LabelMap::from_data(1, 5, vec![1, 1, 2, 3, 0]).unwrap();
        assert_eq!(smooth_labels(&init, &sp).data(), &[1, 1, 1, 0, 0]);
        let uniform = LabelMap::from_data(1, 5, vec![4; 5]).unwrap();
        assert_eq!(smooth_labels(&uniform, &sp), uniform);
    }

    #[test]
    fn aligned_checkerboard_is_unchanged() {
        let (h, w) = (4, 4);
        let labels: Vec<u8> = (0..16).map(|p| if ((p / w) + (p % w)) % 2 == 0 { 1 } else { 2 }).collect();
        let sp = SuperpixelMap { height: h, width: w, segments: (0..16).collect(), count: 16 };
        let init = LabelMap::from_data(h, w, labels).unwrap();
        assert_eq!(smooth_labels(&init, &sp), init);
    }
}
