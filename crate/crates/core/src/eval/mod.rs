//! Scoring, image-level metrics and report artifacts.

mod metrics;
mod plot;
mod score;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use metrics::{
    aggregate, histogram, per_class_recall, quantile, recall_at_threshold, roc_auc, select_threshold, Aggregation,
    Roc, RocPoint, ThresholdPolicy, HISTOGRAM_BINS,
};
pub use score::{check_compatible, image_scores, score_dataset, ImageScores};

use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{validate_eta, ScorePair, ScoreRange};

/// Values swept when an eta sweep is requested.
pub const ETA_SWEEP: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const HISTOGRAM_PLOT: &str = "histogram.png";
pub const ROC_PLOT: &str = "roc.png";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub eta: f64,
    pub aggregation: Aggregation,
    pub threshold_policy: ThresholdPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            eta: crate::objectives::DEFAULT_ETA,
            aggregation: Aggregation::Max,
            threshold_policy: ThresholdPolicy::Youden,
        }
    }
}

/// One image of the anomaly score vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub class_tag: String,
    pub label: Label,
    pub raw_score: f64,
    pub normalized_score: f64,
}

/// Per-label counts over uniform bins of the normalized score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub bins: usize,
    pub normal: Vec<u64>,
    pub anomalous: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eta: f64,
    pub aggregation: Aggregation,
    pub threshold_policy: ThresholdPolicy,
    pub n_normal: usize,
    pub n_anomalous: usize,
    /// Image-level AUC.
    pub auc: f64,
    /// Every patch scored on its own, labelled by its image.
    pub patch_auc: f64,
    /// Image-level recall at `threshold`.
    pub recall: f64,
    /// On the normalized scale.
    pub threshold: f64,
    /// Raw-score range behind the normalization.
    pub score_range: ScoreRange,
    pub roc_points: Vec<RocPoint>,
    pub histogram: ScoreHistogram,
    pub per_class_recall: BTreeMap<String, f64>,
}

/// Report plus the score vector it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scores: Vec<ScoreRecord>,
}

/// Builds the report from per-sample score pairs of `dataset`.
pub fn evaluate_pairs(dataset: &Dataset, pairs: &[ScorePair], options: &EvalOptions) -> Result<Evaluation> {
    validate_eta(options.eta)?;
    let images = image_scores(dataset, pairs, options.eta, options.aggregation);
    let range = ScoreRange::fit(&images.raw)?;
    if range.is_degenerate() {
        log::warn!("all {} image scores equal {}; normalized scores set to 0", images.raw.len(), range.min);
    }
    let normalized: Vec<f64> = images.raw.iter().map(|&s| range.apply(s)).collect();
    let roc = roc_auc(&normalized, &images.labels)?;
    let threshold = select_threshold(&normalized, &images.labels, options.threshold_policy)?;
    let recall = recall_at_threshold(&normalized, &images.labels, threshold)?;
    let per_class = per_class_recall(&normalized, &images.labels, &images.class_tags, threshold)?;

    let patch_raw: Vec<f64> = pairs.iter().map(|p| p.blend(options.eta)).collect();
    let patch_labels: Vec<Label> = (0..dataset.len()).map(|i| dataset.label(i)).collect();
    let patch_auc = roc_auc(&patch_raw, &patch_labels)?.auc;

    let pick = |label: Label| -> Vec<f64> {
        normalized
            .iter()
            .zip(&images.labels)
            .filter(|(_, l)| **l == label)
            .map(|(s, _)| *s)
            .collect()
    };
    let report = EvalReport {
        eta: options.eta,
        aggregation: options.aggregation,
        threshold_policy: options.threshold_policy,
        n_normal: images.labels.iter().filter(|l| !l.is_anomalous()).count(),
        n_anomalous: images.labels.iter().filter(|l| l.is_anomalous()).count(),
        auc: roc.auc,
        patch_auc,
        recall,
        threshold,
        score_range: range,
        roc_points: roc.points,
        histogram: ScoreHistogram {
            bins: HISTOGRAM_BINS,
            normal: histogram(&pick(Label::Normal), HISTOGRAM_BINS),
            anomalous: histogram(&pick(Label::Anomalous), HISTOGRAM_BINS),
        },
        per_class_recall: per_class,
    };
    let scores = (0..images.raw.len())
        .map(|i| ScoreRecord {
            sample_id: images.ids[i].clone(),
            class_tag: images.class_tags[i].clone(),
            label: images.labels[i],
            raw_score: images.raw[i],
            normalized_score: normalized[i],
        })
        .collect();
    Ok(Evaluation { report, scores })
}

/// Scores `dataset` with `model` and builds the report.
pub fn evaluate(model: &Model, dataset: &Dataset, options: &EvalOptions, batch_size: usize) -> Result<Evaluation> {
    let pairs = score_dataset(model, dataset, batch_size)?;
    evaluate_pairs(dataset, &pairs, options)
}

/// One evaluation per swept eta, reusing a single scoring pass.
pub fn eta_sweep(dataset: &Dataset, pairs: &[ScorePair], options: &EvalOptions) -> Result<Vec<Evaluation>> {
    ETA_SWEEP
        .iter()
        .map(|&eta| evaluate_pairs(dataset, pairs, &EvalOptions { eta, ..*options }))
        .collect()
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub report: PathBuf,
    pub scores: PathBuf,
    pub histogram: PathBuf,
    pub roc: PathBuf,
    pub histogram_plot: PathBuf,
    pub roc_plot: PathBuf,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Dataset(format!("{}: {other:?}", path.display())),
    })
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the per-image score vector as CSV.
pub fn write_scores(scores: &[ScoreRecord], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in scores {
        w.serialize(row)?;
    }
    finish(w, path)
}

/// Writes the JSON report, score/histogram/ROC tables and two plots into `dir`.
pub fn emit_report(evaluation: &Evaluation, dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        report: dir.join(REPORT_FILE),
        scores: dir.join(SCORES_FILE),
        histogram: dir.join(HISTOGRAM_FILE),
        roc: dir.join(ROC_FILE),
        histogram_plot: dir.join(HISTOGRAM_PLOT),
        roc_plot: dir.join(ROC_PLOT),
    };
    let report = &evaluation.report;
    let json = serde_json::to_string_pretty(report)?;
    fs::write(&files.report, json + "\n").map_err(|e| Error::io(&files.report, e))?;

    write_scores(&evaluation.scores, &files.scores)?;

    let mut w = csv_writer(&files.histogram)?;
    w.write_record(["bin_low", "bin_high", "normal", "anomalous"])?;
    let h = &report.histogram;
    for b in 0..h.bins {
        w.write_record([
            (b as f64 / h.bins as f64).to_string(),
            ((b + 1) as f64 / h.bins as f64).to_string(),
            h.normal[b].to_string(),
            h.anomalous[b].to_string(),
        ])?;
    }
    finish(w, &files.histogram)?;

    let mut w = csv_writer(&files.roc)?;
    for p in &report.roc_points {
        w.serialize(p)?;
    }
    finish(w, &files.roc)?;

    plot::histogram_png(h, &files.histogram_plot)?;
    plot::roc_png(&report.roc_points, &files.roc_plot)?;
    Ok(files)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
