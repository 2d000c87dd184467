use std::fs;
use std::path::Path;

use serde::Serialize;

use super::ParseResult;
use crate::corpus::{LabelMap, Raster};
use crate::error::Result;

/// Fixed palette; background is black.
pub fn label_color(label: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 12] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
    ];
    if (label as usize) < PALETTE.len() {
        PALETTE[label as usize]
    } else {
        let l = label as u32;
        [(l * 67 % 256) as u8, (l * 137 % 256) as u8, (l * 211 % 256) as u8]
    }
}

const LEGEND_ROW: u32 = 8;

/// Image beside its coloured labelling, above a legend strip with one
/// swatch per label id (left to right, background first).
pub fn render_visualization(image: &Raster, labels: &LabelMap, num_labels: usize) -> image::RgbImage {
    let (h, w) = (labels.height() as u32, labels.width() as u32);
    let mut out = image::RgbImage::new(2 * w, h + LEGEND_ROW);
    let src = image.to_rgb8();
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x, y, *src.get_pixel(x, y));
            out.put_pixel(w + x, y, image::Rgb(label_color(labels.get(y as usize, x as usize))));
        }
    }
    let swatch = (2 * w / (num_labels as u32 + 1)).max(1);
    for x in 0..2 * w {
        let l = ((x / swatch) as usize).min(num_labels) as u8;
        for y in h..h + LEGEND_ROW {
            out.put_pixel(x, y, image::Rgb(label_color(l)));
        }
    }
    out
}

#[derive(Serialize)]
struct LabelReport<'a> {
    id: u8,
    name: &'a str,
    confidence: f64,
    visible: bool,
}

#[derive(Serialize)]
struct ResultReport<'a> {
    labels: Vec<LabelReport<'a>>,
    neighbors: &'a [u32],
    seed_fallback: bool,
}

impl ParseResult {
    /// Writes `<stem>_labels.png`, `<stem>_vis.png` and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str, image: &Raster, label_names: &[String]) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.label_map.to_luma8().save(dir.join(format!("{stem}_labels.png")))?;
        render_visualization(image, &self.label_map, label_names.len()).save(dir.join(format!("{stem}_vis.png")))?;
        let report = ResultReport {
            labels: self
                .labels
                .iter()
                .zip(label_names)
                .enumerate()
                .map(|(i, (v, n))| LabelReport { id: (i + 1) as u8, name: n, confidence: v.confidence, visible: v.visible })
                .collect(),
            neighbors: &self.neighbors,
            seed_fallback: self.seed_fallback,
        };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&report)?)?;
        Ok(())
    }
}
