//! Ranking metrics with anomalous as the positive class.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// Number of uniform histogram bins over `[0, 1]`.
pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Samples scoring at or above this are flagged. The `(0, 0)` point
    /// uses the next float above the maximum score.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub auc: f64,
    /// From `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<RocPoint>,
}

fn counts(labels: &[Label]) -> (usize, usize) {
    let pos = labels.iter().filter(|l| l.is_anomalous()).count();
    (pos, labels.len() - pos)
}

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            location: "scores passed to a metric".into(),
        });
    }
    let (pos, neg) = counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both labels, got {pos} anomalous and {neg} normal"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Tie-aware rank AUC: the probability that a random anomalous sample
/// outscores a random normal one, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<Roc> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let order = ascending(scores);
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k].is_anomalous()).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    let auc = u / (pos * neg) as f64;

    let max = scores[order[order.len() - 1]];
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: max.next_up(),
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = order.len();
    while k > 0 {
        let s = scores[order[k - 1]];
        while k > 0 && scores[order[k - 1]] == s {
            if labels[order[k - 1]].is_anomalous() {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    Ok(Roc { auc, points })
}

/// Fraction of anomalous samples scoring at or above `threshold`.
pub fn recall_at_threshold(scores: &[f64], labels: &[Label], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.is_anomalous())
        .map(|(s, _)| *s)
        .collect();
    if positives.is_empty() {
        return Err(Error::UndefinedMetric("recall needs at least one anomalous sample".into()));
    }
    Ok(positives.iter().filter(|&&s| s >= threshold).count() as f64 / positives.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ThresholdPolicy {
    /// Maximize TPR - FPR.
    #[default]
    Youden,
    /// The `q`-quantile of the normal scores.
    Fixed(f64),
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Youden => f.write_str("youden"),
            ThresholdPolicy::Fixed(q) => write!(f, "fixed({q})"),
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    /// `youden` or `fixed(q)` with `q` in `[0, 1]`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "youden" {
            return Ok(ThresholdPolicy::Youden);
        }
        let q = s
            .strip_prefix("fixed(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|q| q.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Config(format!("threshold policy {s:?} is not 'youden' or 'fixed(q)'")))?;
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Config(format!("fixed threshold quantile {q} outside [0, 1]")));
        }
        Ok(ThresholdPolicy::Fixed(q))
    }
}

impl Serialize for ThresholdPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ThresholdPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Linear-interpolation quantile of `values`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn select_threshold(scores: &[f64], labels: &[Label], policy: ThresholdPolicy) -> Result<f64> {
    check_inputs(scores, labels)?;
    match policy {
        ThresholdPolicy::Fixed(q) => {
            let normals: Vec<f64> = scores
                .iter()
                .zip(labels)
                .filter(|(_, l)| !l.is_anomalous())
                .map(|(s, _)| *s)
                .collect();
            Ok(quantile(&normals, q))
        }
        ThresholdPolicy::Youden => {
            let roc = roc_auc(scores, labels)?;
            let distinct = &roc.points[1..];
            if distinct.len() == 1 {
                log::warn!("all scores equal {}; threshold is degenerate", distinct[0].threshold);
                return Ok(distinct[0].threshold);
            }
            // TPR - FPR scaled by P * N, in exact integers. Points run from
            // the highest threshold down, so `>=` keeps the lowest threshold
            // among equal maxima.
            let (pos, neg) = counts(labels);
            let youden = |p: &RocPoint| {
                let tp = (p.tpr * pos as f64).round() as i64;
                let fp = (p.fpr * neg as f64).round() as i64;
                tp * neg as i64 - fp * pos as i64
            };
            let mut best = 0;
            for (k, p) in distinct.iter().enumerate() {
                if youden(p) >= youden(&distinct[best]) {
                    best = k;
                }
            }
            let upper = distinct[best].threshold;
            Ok(match distinct.get(best + 1) {
                Some(next) => (upper + next.threshold) / 2.0,
                None => upper,
            })
        }
    }
}

/// Recall per class tag over anomalous samples only.
pub fn per_class_recall(
    scores: &[f64],
    labels: &[Label],
    class_tags: &[String],
    threshold: f64,
) -> Result<BTreeMap<String, f64>> {
    if class_tags.len() != labels.len() || scores.len() != labels.len() {
        return Err(Error::Shape("scores, labels and class tags differ in length".into()));
    }
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ((s, l), tag) in scores.iter().zip(labels).zip(class_tags) {
        if l.is_anomalous() {
            let e = tally.entry(tag.clone()).or_default();
            e.1 += 1;
            if *s >= threshold {
                e.0 += 1;
            }
        }
    }
    Ok(tally
        .into_iter()
        .map(|(tag, (hit, total))| (tag, hit as f64 / total as f64))
        .collect())
}

/// Counts of `values` in `bins` uniform bins over `[0, 1]`; out-of-range
/// values land in the end bins.
pub fn histogram(values: &[f64], bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for v in values {
        let b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

/// Image score from its patch scores.
pub fn aggregate(patch_scores: &[f64], how: Aggregation) -> f64 {
    assert!(!patch_scores.is_empty(), "an image has at least one patch");
    match how {
        Aggregation::Max => patch_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => patch_scores.iter().sum::<f64>() / patch_scores.len() as f64,
    }
}
