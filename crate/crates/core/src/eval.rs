//! Joining parsed predictions to ground truth and evaluating per task.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::InstructionSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_task, EvalOptions, SamplePair, TaskReport};
use crate::model::TaskKind;
use crate::parser::{parse_response, Prediction};

/// One line of the `parse` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub task: TaskKind,
    #[serde(flatten)]
    pub prediction: Prediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Parse raw responses against the samples they answer.
pub fn parse_responses<'a>(
    samples: &[InstructionSample],
    responses: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<Vec<PredictionRecord>> {
    let by_id: HashMap<&str, &InstructionSample> =
        samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut out = Vec::new();
    let mut unknown = Vec::new();
    for (id, text) in responses {
        match by_id.get(id) {
            Some(s) => out.push(PredictionRecord {
                sample_id: id.to_string(),
                task: s.task,
                prediction: parse_response(text, &s.parse_context()),
                config_digest: None,
                seed: None,
            }),
            None => unknown.push(id.to_string()),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::SampleMismatch {
            missing: Vec::new(),
            unexpected: unknown,
        });
    }
    Ok(out)
}

/// Pair every truth sample with its prediction. Prediction coordinates are
/// rounded to whole pixels here, the same precision as the ground truth.
pub fn join_predictions(
    samples: &[InstructionSample],
    preds: &[PredictionRecord],
) -> Result<Vec<SamplePair>> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::with_capacity(preds.len());
    for p in preds {
        by_id.insert(p.sample_id.as_str(), p);
    }
    let mut missing = Vec::new();
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let Some(p) = by_id.remove(s.sample_id.as_str()) else {
            missing.push(s.sample_id.clone());
            continue;
        };
        if p.task != s.task {
            return Err(Error::MixedTasks {
                expected: s.task,
                found: p.task,
            });
        }
        let mut pred = p.prediction.clone();
        pred.boxes.iter_mut().for_each(|b| *b = b.rounded());
        pred.points.iter_mut().for_each(|q| *q = q.rounded());
        pairs.push(SamplePair {
            sample_id: s.sample_id.clone(),
            task: s.task,
            truth: s.truth()?,
            pred,
        });
    }
    let mut unexpected: Vec<String> = by_id.keys().map(|k| k.to_string()).collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        missing.sort();
        unexpected.sort();
        return Err(Error::SampleMismatch {
            missing,
            unexpected,
        });
    }
    Ok(pairs)
}

/// Evaluate every task present in `pairs` (or only `only`), in table order.
pub fn evaluate_all(
    pairs: Vec<SamplePair>,
    only: Option<TaskKind>,
    opts: &EvalOptions,
) -> Result<Vec<TaskReport>> {
    let mut grouped: BTreeMap<TaskKind, Vec<SamplePair>> = BTreeMap::new();
    for p in pairs {
        if only.is_none_or(|t| t == p.task) {
            grouped.entry(p.task).or_default().push(p);
        }
    }
    if grouped.is_empty() {
        return Err(Error::EmptyInput("no samples for the requested task"));
    }
    TaskKind::ALL
        .into_iter()
        .filter_map(|t| grouped.get(&t).map(|g| evaluate_task(t, g, opts)))
        .collect()
}
