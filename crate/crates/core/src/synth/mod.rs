//! Procedural "doll" corpora: layered coloured body-part regions with
//! controlled layout jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusEntry, LabelMap, Raster, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect,
    Ellipse,
}

/// One primitive of a label; a label may have several (e.g. two arms).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Part {
    pub shape: Shape,
    /// Normalized centre `(x, y)`.
    pub center: [f64; 2],
    /// Normalized `(width, height)`.
    pub size: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelTemplate {
    pub name: String,
    pub parts: Vec<Part>,
    /// Alternative offsets added to every part centre; one is drawn per
    /// image. Empty means no offset.
    #[serde(default)]
    pub anchors: Vec<[f64; 2]>,
    pub presence: f64,
    /// Base RGB colour, 0–255.
    pub color: [f64; 3],
}

/// Everything needed to generate a corpus; fully determined by `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Labels in back-to-front drawing order; label id = position + 1.
    pub labels: Vec<LabelTemplate>,
    /// Whole-figure shift range, normalized units (±).
    pub shift: f64,
    /// Independent per-part centre jitter, normalized units (±).
    pub part_jitter: f64,
    /// Relative size jitter (±fraction).
    pub size_jitter: f64,
    /// Per-image colour jitter per channel (±).
    pub color_jitter: f64,
    /// Per-pixel noise amplitude per channel (±).
    pub pixel_noise: f64,
    pub background: [f64; 3],
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

fn rect(cx: f64, cy: f64, w: f64, h: f64) -> Part {
    Part { shape: Shape::Rect, center: [cx, cy], size: [w, h] }
}

fn ellipse(cx: f64, cy: f64, w: f64, h: f64) -> Part {
    Part { shape: Shape::Ellipse, center: [cx, cy], size: [w, h] }
}

fn template(name: &str, parts: Vec<Part>, presence: f64, color: [f64; 3]) -> LabelTemplate {
    LabelTemplate { name: name.into(), parts, anchors: Vec::new(), presence, color }
}

impl Default for SynthSpec {
    /// 64×64 dolls with eight labels and a 160/40/40 split.
    fn default() -> Self {
        let mut bag = template("bag", vec![ellipse(0.5, 0.55, 0.2, 0.18)], 0.5, [200.0, 60.0, 160.0]);
        bag.anchors = vec![[-0.3, 0.0], [0.3, 0.0], [0.0, -0.08]];
        Self {
            height: 64,
            width: 64,
            labels: vec![
                template("hair", vec![ellipse(0.5, 0.23, 0.32, 0.3)], 0.7, [70.0, 40.0, 20.0]),
                template("arms", vec![rect(0.27, 0.47, 0.1, 0.3), rect(0.73, 0.47, 0.1, 0.3)], 1.0, [230.0, 180.0, 150.0]),
                template("upper-cloth", vec![rect(0.5, 0.46, 0.36, 0.26)], 1.0, [40.0, 90.0, 210.0]),
                template("pants", vec![rect(0.5, 0.72, 0.3, 0.24)], 1.0, [30.0, 150.0, 60.0]),
                template("shoes", vec![rect(0.4, 0.9, 0.14, 0.06), rect(0.6, 0.9, 0.14, 0.06)], 1.0, [20.0, 20.0, 20.0]),
                template("face", vec![ellipse(0.5, 0.25, 0.2, 0.18)], 1.0, [250.0, 210.0, 170.0]),
                template("hat", vec![rect(0.5, 0.13, 0.28, 0.1)], 0.6, [220.0, 40.0, 40.0]),
                bag,
            ],
            shift: 0.04,
            part_jitter: 0.015,
            size_jitter: 0.1,
            color_jitter: 25.0,
            pixel_noise: 8.0,
            background: [150.0, 150.0, 140.0],
            seed: 0,
            train: 160,
            val: 40,
            test: 40,
        }
    }
}

impl SynthSpec {
    pub fn with_counts(mut self, train: usize, val: usize, test: usize) -> Self {
        (self.train, self.val, self.test) = (train, val, test);
        self
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.height == 0 || self.width == 0 {
            return err("image size must be positive".into());
        }
        if self.labels.is_empty() || self.labels.len() > 254 {
            return err(format!("{} labels; need 1..=254", self.labels.len()));
        }
        if self.train + self.val + self.test == 0 {
            return err("no entries requested".into());
        }
        for v in [self.shift, self.part_jitter, self.size_jitter, self.color_jitter, self.pixel_noise] {
            if !(v >= 0.0) || !v.is_finite() {
                return err("jitter and noise amplitudes must be finite and non-negative".into());
            }
        }
        if self.size_jitter >= 1.0 {
            return err("size jitter must be below 1".into());
        }
        for t in &self.labels {
            if !(0.0..=1.0).contains(&t.presence) {
                return err(format!("label {}: presence {} outside [0, 1]", t.name, t.presence));
            }
            if t.parts.is_empty() {
                return err(format!("label {} has no parts", t.name));
            }
            let anchors: Vec<[f64; 2]> = if t.anchors.is_empty() { vec![[0.0, 0.0]] } else { t.anchors.clone() };
            for p in &t.parts {
                if p.size.iter().any(|&s| !(s > 0.0)) {
                    return err(format!("label {}: part sizes must be positive", t.name));
                }
                for a in &anchors {
                    for axis in 0..2 {
                        let half = p.size[axis] * (1.0 + self.size_jitter) / 2.0;
                        let reach = self.shift + self.part_jitter + half;
                        let c = p.center[axis] + a[axis];
                        if c - reach < 0.0 || c + reach > 1.0 {
                            return err(format!(
                                "label {}: a part can leave the frame (centre {c:.3}, reach {reach:.3})",
                                t.name
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Generates the corpus in memory. Entry `i` depends only on
    /// `(seed, i)`; ids run train, then val, then test.
    pub fn generate(&self) -> Result<Corpus> {
        self.validate()?;
        let n = self.train + self.val + self.test;
        let entries: Result<Vec<CorpusEntry>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let split = if i < self.train {
                    Split::Train
                } else if i < self.train + self.val {
                    Split::Val
                } else {
                    Split::Test
                };
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(i as u64);
                let (image, labels) = self.render(&mut rng);
                CorpusEntry::new(i as u32, split, image, labels, self.labels.len())
            })
            .collect();
        Corpus::new(self.height, self.width, self.label_names(), entries?)
    }

    fn render(&self, rng: &mut ChaCha8Rng) -> (Raster, LabelMap) {
        let (h, w) = (self.height, self.width);
        let sym = |rng: &mut ChaCha8Rng, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let shift = [sym(rng, self.shift), sym(rng, self.shift)];
        let bg: Vec<f64> = self.background.iter().map(|&c| c + sym(rng, self.color_jitter)).collect();

        let mut labels = LabelMap::new(h, w);
        let mut colors = vec![[0.0f64; 3]; self.labels.len() + 1];
        colors[0] = [bg[0], bg[1], bg[2]];
        for (li, t) in self.labels.iter().enumerate() {
            let id = (li + 1) as u8;
            // Draw every random quantity even for absent labels so one
            // label's presence does not shift another's geometry.
            let present = rng.random_bool(t.presence);
            let anchor = if t.anchors.is_empty() { [0.0, 0.0] } else { t.anchors[rng.random_range(0..t.anchors.len())] };
            for ch in 0..3 {
                colors[li + 1][ch] = t.color[ch] + sym(rng, self.color_jitter);
            }
            let scale = 1.0 + sym(rng, self.size_jitter);
            let parts: Vec<(Shape, [f64; 2], [f64; 2])> = t
                .parts
                .iter()
                .map(|p| {
                    let cx = p.center[0] + anchor[0] + shift[0] + sym(rng, self.part_jitter);
                    let cy = p.center[1] + anchor[1] + shift[1] + sym(rng, self.part_jitter);
                    (p.shape, [cx, cy], [p.size[0] * scale / 2.0, p.size[1] * scale / 2.0])
                })
                .collect();
            if !present {
                continue;
            }
            for r in 0..h {
                let y = (r as f64 + 0.5) / h as f64;
                for c in 0..w {
                    let x = (c as f64 + 0.5) / w as f64;
                    let inside = parts.iter().any(|(shape, ctr, half)| {
                        let (dx, dy) = ((x - ctr[0]) / half[0], (y - ctr[1]) / half[1]);
                        match shape {
                            Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                            Shape::Ellipse => dx * dx + dy * dy <= 1.0,
                        }
                    });
                    if inside {
                        labels.set(r, c, id);
                    }
                }
            }
        }
        let mut image = Raster::new(h, w);
        for r in 0..h {
            for c in 0..w {
                let base = colors[labels.get(r, c) as usize];
                let mut px = [0.0f32; 3];
                for ch in 0..3 {
                    px[ch] = (base[ch] + sym(rng, self.pixel_noise)).round().clamp(0.0, 255.0) as f32;
                }
                image.set_pixel(r, c, px);
            }
        }
        (image, labels)
    }
}

/// Generates `spec` and writes it in the corpus directory format.
pub fn gen_corpus(spec: &SynthSpec, out: &std::path::Path) -> Result<Corpus> {
    let corpus = spec.generate()?;
    corpus.save(out)?;
    Ok(corpus)
}
