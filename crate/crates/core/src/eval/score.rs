use serde::{Deserialize, Serialize};

use super::metrics::{aggregate, Aggregation};
use crate::data::{Dataset, Label};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::ScorePair;

/// Fails before any scoring when the data cannot feed the model.
pub fn check_compatible(model: &Model, dataset: &Dataset) -> Result<()> {
    let cfg = model.config();
    if dataset.patch_size() != cfg.input_size() || dataset.channels() != cfg.input_channels() {
        return Err(Error::Config(format!(
            "model expects {}-channel {}px inputs, dataset yields {}-channel {}px samples",
            cfg.input_channels(),
            cfg.input_size(),
            dataset.channels(),
            dataset.patch_size()
        )));
    }
    Ok(())
}

/// Contextual and latent terms for every sample, in sample order.
pub fn score_dataset(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<Vec<ScorePair>> {
    check_compatible(model, dataset)?;
    let mut pairs = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.load_batch::<rand_chacha::ChaCha8Rng>(chunk, None)?;
        pairs.extend(model.score_batch(&batch)?.0);
    }
    Ok(pairs)
}

/// Per-image scores after patch aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub class_tags: Vec<String>,
    pub raw: Vec<f64>,
}

/// Blends each sample's pair with `eta` and aggregates per manifest record.
pub fn image_scores(dataset: &Dataset, pairs: &[ScorePair], eta: f64, how: Aggregation) -> ImageScores {
    assert_eq!(pairs.len(), dataset.len(), "one score pair per sample");
    let mut per_record: Vec<Vec<f64>> = vec![Vec::new(); dataset.manifest().len()];
    for (sample, pair) in dataset.samples().iter().zip(pairs) {
        per_record[sample.record].push(pair.blend(eta));
    }
    let mut out = ImageScores {
        ids: Vec::new(),
        labels: Vec::new(),
        class_tags: Vec::new(),
        raw: Vec::new(),
    };
    for (record, scores) in dataset.manifest().records.iter().zip(&per_record) {
        if scores.is_empty() {
            continue;
        }
        out.ids.push(record.path.display().to_string());
        out.labels.push(record.label);
        out.class_tags.push(record.class_tag.clone());
        out.raw.push(aggregate(scores, how));
    }
    out
}
