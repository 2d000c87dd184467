use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{displacement_target, make_knn_region, CorpusEntry, KnnRegion, Raster};
use crate::error::{Error, Result};
use crate::knn::{embed, retrieve_knn, Extractor, KnnIndex};
use crate::model::MatchOutput;

/// Positive-pair balancing across labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceConfig {
    pub enabled: bool,
    /// Largest allowed ratio between the positive counts of two labels.
    pub max_ratio: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self { enabled: true, max_ratio: 2.0 }
    }
}

/// One generated pair, referring into a [`PairSet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairRef {
    /// Index into `PairSet::queries`.
    pub query: usize,
    /// Index into `PairSet::regions`.
    pub region: usize,
    pub label: u8,
    pub target: MatchOutput<f64>,
    pub displacement_valid: bool,
}

/// A query image matched against one KNN region.
#[derive(Clone, Copy, Debug)]
pub struct TrainPair<'a> {
    pub query: &'a CorpusEntry,
    pub region: &'a KnnRegion,
    pub target: MatchOutput<f64>,
    pub displacement_valid: bool,
}

/// Pairs plus the query images and KNN regions they share.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub queries: Vec<CorpusEntry>,
    pub regions: Vec<KnnRegion>,
    pub pairs: Vec<PairRef>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, i: usize) -> TrainPair<'_> {
        let p = &self.pairs[i];
        TrainPair {
            query: &self.queries[p.query],
            region: &self.regions[p.region],
            target: p.target,
            displacement_valid: p.displacement_valid,
        }
    }

    /// Positive pair count per label `1..=L`.
    pub fn positive_counts(&self, num_labels: usize) -> Vec<usize> {
        let mut counts = vec![0; num_labels];
        for p in &self.pairs {
            if p.target.confidence == 1.0 {
                counts[p.label as usize - 1] += 1;
            }
        }
        counts
    }
}

/// Builds every `(query, neighbor, label)` pair.
///
/// Each query retrieves `k` neighbors from `index` (excluding its own id),
/// and is paired with the KNN region of every label `1..=L` of every
/// neighbor. Positives are then balanced and the whole list shuffled, both
/// seeded by `seed`.
#[allow(clippy::too_many_arguments)]
pub fn gen_pairs(
    queries: Vec<CorpusEntry>,
    neighbors: &[&CorpusEntry],
    index: &KnnIndex,
    extractor: Extractor,
    k: usize,
    mean: &Raster,
    balance: BalanceConfig,
    seed: u64,
) -> Result<PairSet> {
    if queries.is_empty() || neighbors.is_empty() {
        return Err(Error::Corpus("pair generation needs queries and neighbors".into()));
    }
    let num_labels = queries[0].num_labels();
    let by_id: HashMap<u32, &CorpusEntry> = neighbors.iter().map(|e| (e.id, *e)).collect();
    let retrieved: Result<Vec<Vec<u32>>> = queries
        .par_iter()
        .map(|q| retrieve_knn(index, &embed(&q.image, extractor, None)?, k, Some(q.id)))
        .collect();
    let retrieved = retrieved?;

    let mut region_slot: HashMap<(u32, u8), usize> = HashMap::new();
    let mut regions = Vec::new();
    let mut pairs = Vec::new();
    for (qi, (q, ids)) in queries.iter().zip(&retrieved).enumerate() {
        for &id in ids {
            let g = by_id
                .get(&id)
                .ok_or_else(|| Error::Retrieval(format!("index returned id {id} outside the neighbor corpus")))?;
            for l in 1..=num_labels as u8 {
                let slot = match region_slot.get(&(id, l)) {
                    Some(&s) => s,
                    None => {
                        regions.push(make_knn_region(g, l, mean)?);
                        region_slot.insert((id, l), regions.len() - 1);
                        regions.len() - 1
                    }
                };
                let in_query = q.has_label(l);
                let valid = in_query && g.has_label(l);
                let disp = if valid {
                    displacement_target(g.label_box(l).expect("present"), q.label_box(l).expect("present"))
                } else {
                    [0.0; 4]
                };
                let target = MatchOutput::new(if in_query { 1.0 } else { 0.0 }, disp);
                pairs.push(PairRef { query: qi, region: slot, label: l, target, displacement_valid: valid });
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if balance.enabled {
        pairs = balance_positives(pairs, num_labels, balance.max_ratio, &mut rng)?;
    }
    pairs.shuffle(&mut rng);
    Ok(PairSet { queries, regions, pairs })
}

/// Subsamples positive pairs so no label has more than `max_ratio` times the
/// positives of the rarest label that has any. Negatives are kept.
pub fn balance_positives(
    pairs: Vec<PairRef>,
    num_labels: usize,
    max_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairRef>> {
    if !(max_ratio >= 1.0) {
        return Err(Error::Config(format!("balance ratio {max_ratio} must be at least 1")));
    }
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); num_labels];
    for (i, p) in pairs.iter().enumerate() {
        if p.target.confidence == 1.0 {
            by_label[p.label as usize - 1].push(i);
        }
    }
    let Some(rarest) = by_label.iter().map(Vec::len).filter(|&n| n > 0).min() else {
        return Ok(pairs);
    };
    let cap = (max_ratio * rarest as f64).floor() as usize;
    let mut keep = vec![true; pairs.len()];
    for idx in &mut by_label {
        if idx.len() > cap {
            idx.shuffle(rng);
            for &i in &idx[cap..] {
                keep[i] = false;
            }
        }
    }
    Ok(pairs.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect())
}
