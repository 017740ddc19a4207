//! Per-category metric tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::cloud::PointCloud;
use crate::data::{Category, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_metric, Metric};

use super::net::Model;

pub const EVAL_CSV_HEADER: &str = "category,metric,value,scale";
pub const AVG_ROW: &str = "Avg";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub metric: Metric,
    /// Per-category mean of the raw metric.
    pub rows: Vec<(Category, f64)>,
    /// Unweighted mean of the category rows.
    pub avg: f64,
}

impl EvalTable {
    /// Values are multiplied by the metric's report scale.
    pub fn to_csv(&self) -> String {
        let scale = self.metric.scale();
        let label = self.metric.variant();
        let mut s = String::from(EVAL_CSV_HEADER);
        s.push('\n');
        for (c, v) in &self.rows {
            let _ = writeln!(s, "{c},{label},{},{scale}", v * scale);
        }
        let _ = writeln!(s, "{AVG_ROW},{label},{},{scale}", self.avg * scale);
        s
    }
}

/// Scores given predictions. CD compares against the ground truth; UCD
/// and UHD compare the partial input against the prediction.
pub fn evaluate_predictions(
    samples: &[Sample],
    preds: &[PointCloud],
    metric: Metric,
) -> Result<EvalTable> {
    if samples.len() != preds.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let mut per_cat: BTreeMap<Category, (f64, usize)> = BTreeMap::new();
    for (s, pred) in samples.iter().zip(preds) {
        let v = match metric {
            Metric::Cd => {
                let gt = s.complete.as_ref().ok_or_else(|| {
                    Error::Usage(format!("CD needs ground truth, sample {} has none", s.id))
                })?;
                evaluate_metric(Metric::Cd, pred, gt)?.value
            }
            Metric::Ucd | Metric::Uhd => evaluate_metric(metric, &s.partial, pred)?.value,
        };
        let e = per_cat.entry(s.category).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    for c in Category::ALL {
        if !per_cat.contains_key(&c) {
            log::warn!("category {c} has no samples; omitted from the table");
        }
    }
    if per_cat.is_empty() {
        return Err(Error::Usage("no samples to evaluate".into()));
    }
    let rows: Vec<(Category, f64)> = per_cat
        .into_iter()
        .map(|(c, (sum, n))| (c, sum / n as f64))
        .collect();
    let avg = rows.iter().map(|(_, v)| v).sum::<f64>() / rows.len() as f64;
    Ok(EvalTable { metric, rows, avg })
}

/// Completes every sample in batches of `cfg.batch` and scores them.
pub fn evaluate(model: &Model, dataset: &Dataset, metric: Metric) -> Result<EvalTable> {
    let preds = predict(model, dataset)?;
    evaluate_predictions(&dataset.samples, &preds, metric)
}

pub fn predict(model: &Model, dataset: &Dataset) -> Result<Vec<PointCloud>> {
    let mut preds = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(model.cfg.batch) {
        let partials: Vec<PointCloud> = chunk.iter().map(|s| s.partial.clone()).collect();
        preds.extend(model.complete(&partials)?.clouds);
    }
    Ok(preds)
}
