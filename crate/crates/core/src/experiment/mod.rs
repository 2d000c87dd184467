//! Experiment drivers: split evaluation of the pipeline, the direct
//! label-copy baseline and the architectural ablation table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, LabelMap, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, report, MetricsReport};
use crate::model::{McnnConfig, McnnParams};
use crate::pipeline::{parse, NetworkMatcher, ParseContext, ParseOptions, ParseResult, RegionMatcher};
use crate::train::{prepare, train, TrainConfig, TrainOptions};

/// Copies the nearest neighbor's label map verbatim.
pub fn label_copy(ctx: &ParseContext, image: &crate::corpus::Raster, exclude: Option<u32>) -> Result<LabelMap> {
    let id = ctx.retrieve(image, 1, exclude, None)?[0];
    Ok(ctx.entry(id).expect("retrieved ids come from the pool").label_map.clone())
}

/// Metrics of the pipeline on one split, with and without smoothing (one
/// parse per image yields both).
#[derive(Clone, Debug)]
pub struct SplitEvaluation {
    pub smoothed: MetricsReport,
    pub unsmoothed: MetricsReport,
    pub results: Vec<(u32, ParseResult)>,
}

/// Parses every entry of `split`. `matcher_for` builds the matcher for each
/// query, so oracle matchers can see the query's truth.
pub fn evaluate_split<'c, M: RegionMatcher>(
    corpus: &'c Corpus,
    split: Split,
    ctx: &ParseContext,
    opts: &ParseOptions,
    mut matcher_for: impl FnMut(&'c crate::corpus::CorpusEntry) -> M,
) -> Result<SplitEvaluation> {
    let entries = corpus.split(split);
    if entries.is_empty() {
        return Err(Error::Eval(format!("split {split:?} is empty")));
    }
    let mut results = Vec::with_capacity(entries.len());
    for e in &entries {
        let exclude = (e.split == Split::Train).then_some(e.id);
        let (r, _) = parse(&e.image, ctx, &matcher_for(e), opts, exclude, None)?;
        results.push((e.id, r));
    }
    let l = corpus.num_labels();
    let pairs = |f: fn(&ParseResult) -> &LabelMap| -> Vec<(&LabelMap, &LabelMap)> {
        results.iter().zip(&entries).map(|((_, r), e)| (f(r), &e.label_map)).collect()
    };
    let smoothed = report(&evaluate_all(&pairs(|r| &r.label_map), l)?, &corpus.label_names)?;
    let unsmoothed = report(&evaluate_all(&pairs(|r| &r.unsmoothed), l)?, &corpus.label_names)?;
    Ok(SplitEvaluation { smoothed, unsmoothed, results })
}

/// The trained network on one split.
pub fn evaluate_network(
    corpus: &Corpus,
    split: Split,
    ctx: &ParseContext,
    params: &McnnParams<f32>,
    normalizer: crate::corpus::OutputNormalizer,
    opts: &ParseOptions,
) -> Result<SplitEvaluation> {
    evaluate_split(corpus, split, ctx, opts, |_| NetworkMatcher { params, normalizer })
}

/// The label-copy baseline on one split.
pub fn evaluate_label_copy(corpus: &Corpus, split: Split, ctx: &ParseContext) -> Result<MetricsReport> {
    let entries = corpus.split(split);
    if entries.is_empty() {
        return Err(Error::Eval(format!("split {split:?} is empty")));
    }
    let preds: Vec<LabelMap> = entries
        .iter()
        .map(|e| label_copy(ctx, &e.image, (e.split == Split::Train).then_some(e.id)))
        .collect::<Result<_>>()?;
    let pairs: Vec<_> = preds.iter().zip(&entries).map(|(p, e)| (p, &e.label_map)).collect();
    report(&evaluate_all(&pairs, corpus.num_labels())?, &corpus.label_names)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub model: McnnConfig,
    pub smoothing: bool,
}

/// The architectural variants over `base`: no cross filters, cross on the
/// last layer only, then growing suffixes down to every layer, the Siamese
/// baseline, and the full model without superpixel smoothing. `base` itself
/// is the full model.
pub fn standard_variants(base: &McnnConfig) -> Vec<AblationVariant> {
    let n = base.num_layers();
    let v = |name: String, model: McnnConfig, smoothing| AblationVariant { name, model, smoothing };
    let mut out = vec![v("w/o cross".into(), base.with_cross(&[]), true)];
    for first in (1..=n).rev() {
        let layers: Vec<usize> = (first..=n).collect();
        let name = format!("cross {}", layers.iter().rev().map(|j| j.to_string()).collect::<Vec<_>>().join(","));
        out.push(v(name, base.with_cross(&layers), true));
    }
    out.push(v("siamese".into(), base.siamese(), true));
    out.push(v("w/o ss".into(), base.clone(), false));
    out
}

/// Picks variants by name; unknown names are a config error.
pub fn select_variants(all: &[AblationVariant], names: &[String]) -> Result<Vec<AblationVariant>> {
    names
        .iter()
        .map(|n| {
            all.iter()
                .find(|v| v.name == n.trim())
                .cloned()
                .ok_or_else(|| {
                    let known: Vec<&str> = all.iter().map(|v| v.name.as_str()).collect();
                    Error::Config(format!("unknown variant {n:?}; known: {}", known.join(", ")))
                })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub parameters: usize,
    pub metrics: MetricsReport,
}

/// Trains and evaluates each variant on `split`. Variants sharing a model
/// config reuse one training run.
pub fn run_ablation(
    corpus: &Corpus,
    variants: &[AblationVariant],
    tc: &TrainConfig,
    opts: &ParseOptions,
    split: Split,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let data = prepare(corpus, tc)?;
    let ctx = ParseContext::from_corpus(corpus, tc.extractor, None)?;
    let mut trained: Vec<(McnnConfig, SplitEvaluation, usize)> = Vec::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let idx = match trained.iter().position(|(m, _, _)| *m == v.model) {
            Some(i) => i,
            None => {
                progress(&format!("training {}", v.name));
                let out = train(&data, tc, &v.model, None, &TrainOptions::default(), |_| {})?;
                let ck = out.checkpoint;
                let eval = evaluate_network(corpus, split, &ctx, &ck.params, ck.normalizer, opts)?;
                trained.push((v.model.clone(), eval, ck.params.num_parameters()));
                trained.len() - 1
            }
        };
        let (_, eval, parameters) = &trained[idx];
        let metrics = if v.smoothing { eval.smoothed.clone() } else { eval.unsmoothed.clone() };
        progress(&format!("{}: avg F1 {:.4}", v.name, metrics.avg_f1));
        rows.push(AblationRow { name: v.name.clone(), parameters: *parameters, metrics });
    }
    Ok(rows)
}

/// Aligned text table, percentages.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "Method", "Params", "Accuracy", "F.g. acc", "Avg. P", "Avg. R", "Avg. F1"
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:<18} {:>9} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
            r.name,
            r.parameters,
            100.0 * m.accuracy,
            100.0 * m.fg_accuracy,
            100.0 * m.avg_precision,
            100.0 * m.avg_recall,
            100.0 * m.avg_f1
        );
    }
    s
}
