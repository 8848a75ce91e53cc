//! Task metrics and model / prediction-file scoring.

mod metrics;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{anls, cider, normalize_answer, vqa_accuracy, CIDER_N, CIDER_SIGMA};

use crate::error::{Result, TapError};
use crate::model::{DecodeMode, TapModel};
use crate::sample::Sample;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Anls,
    Cider,
}

impl Metric {
    pub fn mode(self) -> DecodeMode {
        match self {
            Metric::Accuracy | Metric::Anls => DecodeMode::Vqa,
            Metric::Cider => DecodeMode::Caption,
        }
    }

    /// Default metric set of a task.
    pub fn for_mode(mode: DecodeMode) -> Vec<Metric> {
        match mode {
            DecodeMode::Vqa => vec![Metric::Accuracy, Metric::Anls],
            DecodeMode::Caption => vec![Metric::Cider],
        }
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub sample_id: String,
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub prediction: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub params: serde_json::Value,
    /// Arithmetic mean of `per_sample`.
    pub aggregate: f64,
    pub per_sample: Vec<SampleScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub anls_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { anls_threshold: 0.5 }
    }
}

fn ground_truth(s: &Sample, metric: Metric) -> Result<Vec<String>> {
    let missing = |what: &str| TapError::Metric(format!("sample {} has no {what} for metric {metric:?}", s.image_id));
    match metric {
        Metric::Accuracy | Metric::Anls => s.answers.clone().ok_or_else(|| missing("answers")),
        Metric::Cider => match (&s.caption, &s.answers) {
            (Some(c), _) => Ok(vec![c.clone()]),
            (None, Some(a)) if !a.is_empty() => Ok(a.clone()),
            _ => Err(missing("reference captions")),
        },
    }
}

/// Scores `predictions[i]` against `samples[i]`.
pub fn score(samples: &[Sample], predictions: &[String], metrics: &[Metric], cfg: &EvalConfig) -> Result<Vec<MetricReport>> {
    if samples.len() != predictions.len() {
        return Err(TapError::Metric("one prediction per sample required".into()));
    }
    let mut reports = Vec::with_capacity(metrics.len());
    for &metric in metrics {
        let gts = samples.iter().map(|s| ground_truth(s, metric)).collect::<Result<Vec<_>>>()?;
        let (scores, params) = match metric {
            Metric::Accuracy => (
                predictions.iter().zip(&gts).map(|(p, g)| vqa_accuracy(p, g)).collect::<Result<Vec<_>>>()?,
                serde_json::json!({"normalization": "lowercase, punctuation, articles, whitespace"}),
            ),
            Metric::Anls => (
                predictions
                    .iter()
                    .zip(&gts)
                    .map(|(p, g)| anls(p, g, cfg.anls_threshold))
                    .collect::<Result<Vec<_>>>()?,
                serde_json::json!({"threshold": cfg.anls_threshold}),
            ),
            Metric::Cider => (cider(predictions, &gts)?, serde_json::json!({"n": CIDER_N, "sigma": CIDER_SIGMA})),
        };
        let aggregate = if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        reports.push(MetricReport {
            metric,
            params,
            aggregate,
            per_sample: samples
                .iter()
                .zip(predictions)
                .zip(scores)
                .map(|((s, p), score)| SampleScore {
                    sample_id: s.image_id.clone(),
                    prediction: p.clone(),
                    score,
                })
                .collect(),
        });
    }
    Ok(reports)
}

/// Greedy-decodes every sample (split across `workers` threads, order kept).
pub fn predict<T: Scalar>(model: &TapModel<T>, samples: &[Sample], mode: DecodeMode, workers: usize) -> Result<Vec<String>> {
    let prepare = |s: &Sample| -> Sample {
        let mut s = s.clone();
        if mode == DecodeMode::Caption {
            s.text.question.clear();
        }
        s
    };
    crate::work::par_map(samples, workers, |_, s| model.decode_answer(&prepare(s), mode).map(|a| a.text()))
        .into_iter()
        .collect()
}

/// Decodes and scores a dataset. Every metric must belong to `mode`.
pub fn evaluate_model<T: Scalar>(
    model: &TapModel<T>,
    samples: &[Sample],
    mode: DecodeMode,
    metrics: &[Metric],
    cfg: &EvalConfig,
    workers: usize,
) -> Result<Vec<MetricReport>> {
    if let Some(m) = metrics.iter().find(|m| m.mode() != mode) {
        return Err(TapError::Metric(format!("metric {m:?} does not apply to the {mode:?} task")));
    }
    let preds = predict(model, samples, mode, workers)?;
    score(samples, &preds, metrics, cfg)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let f = fs::File::open(path).map_err(|e| TapError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| TapError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| TapError::Schema(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Matches predictions to samples by id; every sample needs exactly one.
pub fn align_predictions(samples: &[Sample], predictions: &[Prediction]) -> Result<Vec<String>> {
    let mut by_id: HashMap<&str, &str> = HashMap::new();
    for p in predictions {
        if by_id.insert(&p.sample_id, &p.prediction).is_some() {
            return Err(TapError::Schema(format!("duplicate prediction for sample {}", p.sample_id)));
        }
    }
    samples
        .iter()
        .map(|s| {
            by_id
                .get(s.image_id.as_str())
                .map(|p| p.to_string())
                .ok_or_else(|| TapError::Schema(format!("no prediction for sample {}", s.image_id)))
        })
        .collect()
}

/// Writes the per-sample scores of every report, one JSON record per line.
pub fn write_report_lines(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| TapError::io(path, e))?;
    for r in reports {
        for s in &r.per_sample {
            let rec = serde_json::json!({
                "sample_id": s.sample_id,
                "prediction": s.prediction,
                "metric": r.metric,
                "score": s.score,
            });
            writeln!(f, "{rec}").map_err(|e| TapError::io(path, e))?;
        }
    }
    Ok(())
}
