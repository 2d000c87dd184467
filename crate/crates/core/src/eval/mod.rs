//! Pixel-level evaluation: accuracy, foreground accuracy and per-label
//! precision / recall / F1, micro-aggregated over a test set.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LabelMap;
use crate::error::{Error, Result};

/// Pixel confusion counts of one or more images. Merging is plain addition,
/// so aggregation is associative and order-independent.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Indexed by label − 1.
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub correct: u64,
    pub total: u64,
    pub fg_correct: u64,
    pub fg_total: u64,
    pub images: u64,
}

impl EvalCounts {
    pub fn new(num_labels: usize) -> Self {
        Self { tp: vec![0; num_labels], fp: vec![0; num_labels], fn_: vec![0; num_labels], ..Self::default() }
    }

    pub fn num_labels(&self) -> usize {
        self.tp.len()
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.num_labels(), other.num_labels(), "merging counts over different label sets");
        for l in 0..self.num_labels() {
            self.tp[l] += other.tp[l];
            self.fp[l] += other.fp[l];
            self.fn_[l] += other.fn_[l];
        }
        self.correct += other.correct;
        self.total += other.total;
        self.fg_correct += other.fg_correct;
        self.fg_total += other.fg_total;
        self.images += other.images;
    }
}

/// Counts for one prediction against its ground truth. Label ids above
/// `num_labels` are a data error.
pub fn evaluate(pred: &LabelMap, truth: &LabelMap, num_labels: usize) -> Result<EvalCounts> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::Eval(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut c = EvalCounts::new(num_labels);
    c.images = 1;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        if p as usize > num_labels || t as usize > num_labels {
            return Err(Error::Eval(format!("label {} exceeds {num_labels}", p.max(t))));
        }
        c.total += 1;
        if t != 0 {
            c.fg_total += 1;
        }
        if p == t {
            c.correct += 1;
            if t != 0 {
                c.fg_correct += 1;
                c.tp[t as usize - 1] += 1;
            }
        } else {
            if p != 0 {
                c.fp[p as usize - 1] += 1;
            }
            if t != 0 {
                c.fn_[t as usize - 1] += 1;
            }
        }
    }
    Ok(c)
}

/// Evaluates many pairs in parallel and merges the counts.
pub fn evaluate_all(pairs: &[(&LabelMap, &LabelMap)], num_labels: usize) -> Result<EvalCounts> {
    let parts: Vec<EvalCounts> = pairs.par_iter().map(|(p, t)| evaluate(p, t, num_labels)).collect::<Result<_>>()?;
    let mut total = EvalCounts::new(num_labels);
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub id: u8,
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Ground-truth pixels of this label.
    pub support: u64,
    /// Counted in the averages (present in the test-set truth).
    pub averaged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub fg_accuracy: f64,
    pub avg_precision: f64,
    pub avg_recall: f64,
    pub avg_f1: f64,
    pub per_label: Vec<LabelMetrics>,
    pub images: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2PR / (P + R)`, zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Ratios from pooled counts. Averages run over foreground labels with
/// nonzero support; every 0/0 ratio is 0.
pub fn report(counts: &EvalCounts, label_names: &[String]) -> Result<MetricsReport> {
    if counts.images == 0 || counts.total == 0 {
        return Err(Error::Eval("empty test set".into()));
    }
    let mut per_label = Vec::with_capacity(counts.num_labels());
    let (mut sp, mut sr, mut sf, mut n) = (0.0, 0.0, 0.0, 0usize);
    for l in 0..counts.num_labels() {
        let support = counts.tp[l] + counts.fn_[l];
        let precision = ratio(counts.tp[l], counts.tp[l] + counts.fp[l]);
        let recall = ratio(counts.tp[l], support);
        let f1 = f1_score(precision, recall);
        let averaged = support > 0;
        if averaged {
            sp += precision;
            sr += recall;
            sf += f1;
            n += 1;
        }
        let name = label_names.get(l).cloned().unwrap_or_else(|| format!("label{}", l + 1));
        per_label.push(LabelMetrics { id: (l + 1) as u8, name, precision, recall, f1, support, averaged });
    }
    let avg = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(MetricsReport {
        accuracy: ratio(counts.correct, counts.total),
        fg_accuracy: ratio(counts.fg_correct, counts.fg_total),
        avg_precision: avg(sp),
        avg_recall: avg(sr),
        avg_f1: avg(sf),
        per_label,
        images: counts.images,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Summary row plus per-label F1, as percentages.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>10} {:>10} {:>10} {:>10} {:>10}",
            "Accuracy", "F.g. acc", "Avg. P", "Avg. R", "Avg. F1"
        );
        let _ = writeln!(
            s,
            "{:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2}",
            100.0 * self.accuracy,
            100.0 * self.fg_accuracy,
            100.0 * self.avg_precision,
            100.0 * self.avg_recall,
            100.0 * self.avg_f1
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<14} {:>8} {:>8} {:>8} {:>10}", "Label", "P", "R", "F1", "Support");
        for l in &self.per_label {
            let mark = if l.averaged { "" } else { " (excluded)" };
            let _ = writeln!(
                s,
                "{:<14} {:>8.2} {:>8.2} {:>8.2} {:>10}{mark}",
                l.name,
                100.0 * l.precision,
                100.0 * l.recall,
                100.0 * l.f1,
                l.support
            );
        }
        s
    }
}
