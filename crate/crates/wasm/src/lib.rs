//! Browser bindings: parse a model response, match points, score boxes.
//!
//! Every export takes and returns JSON strings so the page needs no glue
//! beyond `JSON.parse`.

use medbench_core::metrics::{
    ap_at_threshold, coco_thresholds, match_boxes, match_points, SamplePair,
    DEFAULT_MATCH_THRESHOLD,
};
use medbench_core::model::{AnnotationSet, BBox, Point, TaskKind};
use medbench_core::parser::{self, ParseContext, ParseStatus, Prediction};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json(v: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn read<T: serde::de::DeserializeOwned>(what: &str, json: &str) -> Result<T, String> {
    serde_json::from_str(json).map_err(|e| format!("{what}: {e}"))
}

pub fn parse_json(text: &str, task: &str) -> Result<String, String> {
    let task: TaskKind = task.parse()?;
    to_json(&parser::parse_response(
        text,
        &ParseContext::unbounded(task),
    ))
}

#[derive(Serialize)]
struct PointMatch {
    pred: usize,
    truth: usize,
    distance: f64,
    within: bool,
}

#[derive(Serialize)]
struct PointScore {
    pairs: Vec<PointMatch>,
    mae: Option<f64>,
    rmse: Option<f64>,
    matching_accuracy: f64,
    zero_case: bool,
}

pub fn match_points_json(preds: &str, truths: &str, threshold: f64) -> Result<String, String> {
    let preds: Vec<Point> = read("predicted points", preds)?;
    let truths: Vec<Point> = read("true points", truths)?;
    let threshold = if threshold.is_finite() && threshold >= 0.0 {
        threshold
    } else {
        DEFAULT_MATCH_THRESHOLD
    };
    let a = match_points(&preds, &truths);
    let pairs: Vec<PointMatch> = a
        .pairs
        .iter()
        .map(|m| PointMatch {
            pred: m.pred,
            truth: m.truth,
            distance: m.distance,
            within: m.distance <= threshold,
        })
        .collect();
    let k = pairs.len() as f64;
    let within = pairs.iter().filter(|m| m.within).count();
    to_json(&PointScore {
        mae: (k > 0.0).then(|| pairs.iter().map(|m| m.distance).sum::<f64>() / k),
        rmse: (k > 0.0)
            .then(|| (pairs.iter().map(|m| m.distance * m.distance).sum::<f64>() / k).sqrt()),
        matching_accuracy: if preds.is_empty() {
            0.0
        } else {
            within as f64 / preds.len() as f64
        },
        zero_case: preds.is_empty() && !truths.is_empty(),
        pairs,
    })
}

#[derive(Serialize)]
struct BoxMatch {
    pred: usize,
    truth: usize,
    iou: f64,
}

#[derive(Serialize)]
struct BoxScore {
    pairs: Vec<BoxMatch>,
    map: Option<f64>,
    map50: Option<f64>,
    map75: Option<f64>,
    avg_iou: Option<f64>,
}

/// Detection metrics for one image. Predictions are ranked in list order.
pub fn score_boxes_json(preds: &str, truths: &str) -> Result<String, String> {
    let preds: Vec<BBox> = read("predicted boxes", preds)?;
    let truths: Vec<BBox> = read("true boxes", truths)?;
    let pairs: Vec<BoxMatch> = match_boxes(&preds, &truths)
        .into_iter()
        .map(|(pred, truth, iou)| BoxMatch { pred, truth, iou })
        .collect();
    let sample = [SamplePair {
        sample_id: "demo".into(),
        task: TaskKind::BoxOnly,
        truth: AnnotationSet::with_boxes("finding", truths),
        pred: Prediction {
            boxes: preds,
            points: Vec::new(),
            count: None,
            label: None,
            parse_status: ParseStatus::Clean,
            recovery_steps: Vec::new(),
            flags: Vec::new(),
        },
    }];
    let ap = |t: f64| ap_at_threshold(&sample, t).ok();
    let sweep: Option<Vec<f64>> = coco_thresholds().into_iter().map(ap).collect();
    to_json(&BoxScore {
        map: sweep.map(|v| v.iter().sum::<f64>() / v.len() as f64),
        map50: ap(0.5),
        map75: ap(0.75),
        avg_iou: (!pairs.is_empty())
            .then(|| pairs.iter().map(|m| m.iou).sum::<f64>() / pairs.len() as f64),
        pairs,
    })
}

#[wasm_bindgen(js_name = parseResponse)]
pub fn parse_response(text: &str, task: &str) -> Result<String, JsError> {
    parse_json(text, task).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = matchPoints)]
pub fn match_points_js(preds: &str, truths: &str, threshold: f64) -> Result<String, JsError> {
    match_points_json(preds, truths, threshold).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = scoreBoxes)]
pub fn score_boxes(preds: &str, truths: &str) -> Result<String, JsError> {
    score_boxes_json(preds, truths).map_err(|e| JsError::new(&e))
}
