//! Inference: retrieve neighbors, match their label regions against the
//! query, fuse transferred masks into probability maps, estimate background,
//! assign labels and smooth them over superpixels.

mod background;
mod export;
mod fusion;
mod superpixel;

pub use background::{background_probability, erode, foreground_seeds, geodesic_distance, map_assign, Seeds};
pub use export::{label_color, render_visualization};
pub use fusion::{
    aggregate_confidence, build_probability_maps, transfer_label_mask, LabelVisibility, ProbabilityMaps,
    TransferredMask,
};
pub use superpixel::{smooth_labels, superpixel_segment, SuperpixelMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{compute_mean_image, displacement_target, make_knn_region, Corpus, CorpusEntry, KnnRegion, LabelMap, OutputNormalizer, Raster, Split};
use crate::error::{Error, Result};
use crate::knn::{embed, retrieve_knn, Extractor, KnnIndex};
use crate::model::{forward, McnnParams, MatchOutput};

/// Thresholds and sizes of the post-processing stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParseOptions {
    /// Neighbors retrieved per query.
    pub k: usize,
    /// Visibility threshold on mean confidence (strict).
    pub xi1: f64,
    /// Rough-foreground threshold on the max probability map.
    pub xi2: f64,
    pub erosion_size: usize,
    /// Colour-edge weight of the geodesic cost.
    pub lambda: f64,
    pub superpixels: usize,
    pub compactness: f64,
    pub smoothing: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { k: 9, xi1: 0.8, xi2: 0.5, erosion_size: 10, lambda: 10.0, superpixels: 100, compactness: 10.0, smoothing: true }
    }
}

impl ParseOptions {
    /// Defaults rescaled for 64×64 images: a 10-pixel erosion is sized for
    /// full-resolution photographs and wipes out thin parts at this scale.
    pub fn desk() -> Self {
        Self { erosion_size: 3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.superpixels == 0 {
            return Err(Error::Config("k and superpixels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.xi1) || !(0.0..1.0).contains(&self.xi2) {
            return Err(Error::Config("xi1 and xi2 must lie in [0, 1)".into()));
        }
        if !(self.lambda >= 0.0) || !(self.compactness > 0.0) {
            return Err(Error::Config("lambda must be non-negative and compactness positive".into()));
        }
        Ok(())
    }
}

/// Scores KNN regions against a query image. Outputs are in absolute
/// (denormalized) units.
pub trait RegionMatcher: Sync {
    fn match_regions(&self, query: &Raster, regions: &[KnnRegion]) -> Result<Vec<MatchOutput<f64>>>;
}

/// The trained network as a matcher.
pub struct NetworkMatcher<'a> {
    pub params: &'a McnnParams<f32>,
    pub normalizer: OutputNormalizer,
}

impl RegionMatcher for NetworkMatcher<'_> {
    fn match_regions(&self, query: &Raster, regions: &[KnnRegion]) -> Result<Vec<MatchOutput<f64>>> {
        let (h, w) = (self.params.config.input_height, self.params.config.input_width);
        let q = query.to_tensor::<f32>(h, w);
        regions
            .par_iter()
            .map(|r| {
                let (out, _) = forward(self.params, &q, &r.image.to_tensor(h, w))?;
                Ok(self.normalizer.denormalize(&out.cast()))
            })
            .collect()
    }
}

/// Answers from the query's ground truth: confidence 1 exactly when both
/// images contain the label, displacements taking the region box onto the
/// true box. Upper-bounds what a perfect network could deliver.
pub struct OracleMatcher<'a> {
    pub truth: &'a CorpusEntry,
}

impl RegionMatcher for OracleMatcher<'_> {
    fn match_regions(&self, _query: &Raster, regions: &[KnnRegion]) -> Result<Vec<MatchOutput<f64>>> {
        Ok(regions
            .iter()
            .map(|r| match self.truth.label_box(r.label) {
                Some(b) if r.present => MatchOutput::new(1.0, displacement_target(r.region_box, b)),
                _ => MatchOutput::new(0.0, [0.0; 4]),
            })
            .collect())
    }
}

/// Retrieval side of inference: the labelled neighbor pool, its mean image
/// and index.
#[derive(Clone, Debug)]
pub struct ParseContext {
    pub neighbors: Vec<CorpusEntry>,
    pub mean: Raster,
    pub index: KnnIndex,
    pub extractor: Extractor,
    pub num_labels: usize,
}

impl ParseContext {
    /// Uses the training split as the neighbor pool, mirroring training.
    pub fn from_corpus(corpus: &Corpus, extractor: Extractor, params: Option<&McnnParams<f32>>) -> Result<Self> {
        let neighbors: Vec<CorpusEntry> = corpus.split(Split::Train).into_iter().cloned().collect();
        if neighbors.is_empty() {
            return Err(Error::Corpus("no training entries to retrieve from".into()));
        }
        let mean = compute_mean_image(neighbors.iter().map(|e| &e.image))?;
        let index = KnnIndex::build(&neighbors, extractor, params)?;
        Ok(Self { neighbors, mean, index, extractor, num_labels: corpus.num_labels() })
    }

    pub fn entry(&self, id: u32) -> Option<&CorpusEntry> {
        self.neighbors.iter().find(|e| e.id == id)
    }

    /// The `k` retrieved neighbor ids for `image`.
    pub fn retrieve(&self, image: &Raster, k: usize, exclude: Option<u32>, params: Option<&McnnParams<f32>>) -> Result<Vec<u32>> {
        retrieve_knn(&self.index, &embed(image, self.extractor, params)?, k, exclude)
    }
}

/// Final labelling of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseResult {
    pub label_map: LabelMap,
    /// Indexed by label − 1.
    pub labels: Vec<LabelVisibility>,
    pub neighbors: Vec<u32>,
    /// Seed erosion fell back to the rough masks.
    pub seed_fallback: bool,
    /// The labelling before superpixel smoothing.
    pub unsmoothed: LabelMap,
}

/// Runs the whole inference chain for one query.
///
/// `exclude` drops one neighbor id (leave-one-out when the query itself is
/// in the pool); `params` is only needed by the network extractor.
pub fn parse(
    image: &Raster,
    ctx: &ParseContext,
    matcher: &dyn RegionMatcher,
    opts: &ParseOptions,
    exclude: Option<u32>,
    params: Option<&McnnParams<f32>>,
) -> Result<(ParseResult, ProbabilityMaps)> {
    opts.validate()?;
    let (h, w) = (image.height(), image.width());
    if h != ctx.mean.height() || w != ctx.mean.width() {
        return Err(Error::Corpus(format!("query is {h}x{w}, corpus is {}x{}", ctx.mean.height(), ctx.mean.width())));
    }
    let ids = ctx.retrieve(image, opts.k, exclude, params)?;
    if ids.is_empty() {
        return Err(Error::Retrieval("no neighbors retrieved".into()));
    }
    let mut regions = Vec::with_capacity(ids.len() * ctx.num_labels);
    for &id in &ids {
        let e = ctx.entry(id).ok_or_else(|| Error::Retrieval(format!("neighbor {id} not in the pool")))?;
        for l in 1..=ctx.num_labels as u8 {
            regions.push(make_knn_region(e, l, &ctx.mean)?);
        }
    }
    let outputs = matcher.match_regions(image, &regions)?;
    if outputs.len() != regions.len() {
        return Err(Error::Config("matcher returned the wrong number of outputs".into()));
    }
    let refs: Vec<&KnnRegion> = regions.iter().collect();
    let labels = aggregate_confidence(&outputs, &refs, opts.xi1, ctx.num_labels);
    let masks: Vec<TransferredMask> = regions
        .par_iter()
        .zip(&outputs)
        .filter(|(r, _)| r.present && labels[r.label as usize - 1].visible)
        .map(|(r, o)| TransferredMask {
            label: r.label,
            mask: transfer_label_mask(r, o.displacements, h, w),
            confidence: o.confidence,
        })
        .collect();
    let maps = build_probability_maps(&masks, &labels, h, w);
    let seeds = foreground_seeds(&maps, opts.xi2, opts.erosion_size);
    let bg = background_probability(image, &seeds, opts.lambda);
    let unsmoothed = map_assign(&maps, &bg);
    let label_map = if opts.smoothing {
        smooth_labels(&unsmoothed, &superpixel_segment(image, opts.superpixels, opts.compactness))
    } else {
        unsmoothed.clone()
    };
    Ok((ParseResult { label_map, labels, neighbors: ids, seed_fallback: seeds.fallback, unsmoothed }, maps))
}
