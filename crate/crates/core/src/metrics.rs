//! Counting, pointing and detection metrics.
//!
//! Every dataset-level number is a micro average over instances unless
//! [`Averaging::Macro`] is requested. Failed parses contribute an empty
//! prediction: count 0, no points, no boxes.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::assign::min_cost_assignment;
use crate::error::{Error, Result};
use crate::model::{AnnotationSet, BBox, Point, TaskKind};
use crate::parser::Prediction;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 10.0;

/// One evaluated sample: ground truth and parsed prediction in the same
/// coordinate space.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub sample_id: String,
    pub task: TaskKind,
    pub truth: AnnotationSet,
    pub pred: Prediction,
}

/// Intersection over union with continuous area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub truth: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
}

impl Assignment {
    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.distance).sum()
    }
}

/// Optimal one-to-one matching minimising total Euclidean distance.
pub fn match_points(preds: &[Point], truths: &[Point]) -> Assignment {
    let cost: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| truths.iter().map(|t| p.distance(t)).collect())
        .collect();
    let matched = min_cost_assignment(&cost);
    let mut pred_used = vec![false; preds.len()];
    let mut truth_used = vec![false; truths.len()];
    let pairs = matched
        .into_iter()
        .map(|(p, t)| {
            pred_used[p] = true;
            truth_used[t] = true;
            MatchedPair {
                pred: p,
                truth: t,
                distance: cost[p][t],
            }
        })
        .collect();
    Assignment {
        pairs,
        unmatched_pred: unused(&pred_used),
        unmatched_truth: unused(&truth_used),
    }
}

fn unused(flags: &[bool]) -> Vec<usize> {
    flags
        .iter()
        .enumerate()
        .filter(|(_, &u)| !u)
        .map(|(i, _)| i)
        .collect()
}

/// Optimal one-to-one box matching maximising total IoU. Returns
/// `(pred, truth, iou)` triples.
pub fn match_boxes(preds: &[BBox], truths: &[BBox]) -> Vec<(usize, usize, f64)> {
    let cost: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| truths.iter().map(|t| -iou(p, t)).collect())
        .collect();
    min_cost_assignment(&cost)
        .into_iter()
        .map(|(p, t)| (p, t, -cost[p][t]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Pool instances across the whole dataset.
    #[default]
    Micro,
    /// Average per-sample values.
    Macro,
}

impl std::str::FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "micro" => Ok(Averaging::Micro),
            "macro" => Ok(Averaging::Macro),
            _ => Err(format!("unknown averaging '{s}' (micro|macro)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountMetrics {
    pub mae: f64,
    pub mse: f64,
}

pub fn count_metrics(pairs: &[SamplePair]) -> Result<CountMetrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("count metrics over zero samples"));
    }
    let n = pairs.len() as f64;
    let (abs, sq) = pairs.iter().fold((0.0, 0.0), |(abs, sq), p| {
        let err = p.pred.count.unwrap_or(0) as f64 - p.truth.count as f64;
        (abs + err.abs(), sq + err * err)
    });
    Ok(CountMetrics {
        mae: abs / n,
        mse: sq / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    /// Absent when no predicted point was matched.
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub matching_accuracy: f64,
    pub zero_case_points: u64,
}

pub fn point_metrics(
    pairs: &[SamplePair],
    threshold: f64,
    averaging: Averaging,
) -> Result<PointMetrics> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("point metrics over zero samples"));
    }
    let mut zero_case = 0u64;
    let mut dist_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut n_matched = 0usize;
    let mut within = 0usize;
    let mut n_pred = 0usize;
    // per-sample (mae, rmse) and accuracy for macro averaging
    let mut per_err: Vec<(f64, f64)> = Vec::new();
    let mut per_acc: Vec<f64> = Vec::new();

    for p in pairs {
        let preds = &p.pred.points;
        if !p.truth.points.is_empty() && preds.is_empty() {
            zero_case += 1;
        }
        let a = match_points(preds, &p.truth.points);
        let ok = a.pairs.iter().filter(|m| m.distance <= threshold).count();
        let d: f64 = a.pairs.iter().map(|m| m.distance).sum();
        let d2: f64 = a.pairs.iter().map(|m| m.distance * m.distance).sum();
        dist_sum += d;
        sq_sum += d2;
        n_matched += a.pairs.len();
        within += ok;
        n_pred += preds.len();
        if !a.pairs.is_empty() {
            let k = a.pairs.len() as f64;
            per_err.push((d / k, (d2 / k).sqrt()));
        }
        if !preds.is_empty() {
            per_acc.push(ok as f64 / preds.len() as f64);
        }
    }

    let mean = |xs: &mut dyn Iterator<Item = f64>, n: usize| -> Option<f64> {
        (n > 0).then(|| xs.sum::<f64>() / n as f64)
    };
    Ok(match averaging {
        Averaging::Micro => PointMetrics {
            mae: (n_matched > 0).then(|| dist_sum / n_matched as f64),
            rmse: (n_matched > 0).then(|| (sq_sum / n_matched as f64).sqrt()),
            matching_accuracy: if n_pred > 0 {
                within as f64 / n_pred as f64
            } else {
                0.0
            },
            zero_case_points: zero_case,
        },
        Averaging::Macro => PointMetrics {
            mae: mean(&mut per_err.iter().map(|e| e.0), per_err.len()),
            rmse: mean(&mut per_err.iter().map(|e| e.1), per_err.len()),
            matching_accuracy: mean(&mut per_acc.iter().copied(), per_acc.len()).unwrap_or(0.0),
            zero_case_points: zero_case,
        },
    })
}

/// Confidence stand-in for a prediction at position `rank` of the model's
/// output list.
pub fn pseudo_confidence(rank: usize) -> f64 {
    1.0 / (1.0 + rank as f64)
}

/// Greedy per-image matching in output order: each prediction takes the
/// unmatched ground-truth box it overlaps most, and counts as a true positive
/// when that overlap reaches `threshold`.
fn greedy_true_positives(preds: &[BBox], truths: &[BBox], threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; truths.len()];
    preds
        .iter()
        .map(|p| {
            let best = truths
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, t)| (j, iou(p, t)))
                .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((j, v)),
                });
            match best {
                Some((j, v)) if v >= threshold => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Area under the 101-point interpolated precision/recall curve for ranked
/// detections. `hits` must already be sorted by descending confidence.
pub fn interpolated_ap(hits: &[bool], n_truth: usize) -> f64 {
    if n_truth == 0 || hits.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_truth as f64);
    }
    // Make precision monotone non-increasing from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0usize;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while k < recall.len() && recall[k] < level - 1e-12 {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// (confidence, sample id, rank in output, true positive)
type Detection<'a> = (f64, &'a str, usize, bool);

/// AP at one IoU threshold, averaged over the label classes that have at
/// least one ground-truth box.
pub fn ap_at_threshold(pairs: &[SamplePair], iou_threshold: f64) -> Result<f64> {
    let mut classes: BTreeMap<&str, (usize, Vec<Detection>)> = BTreeMap::new();
    for p in pairs {
        let entry = classes.entry(p.truth.label.as_str()).or_default();
        entry.0 += p.truth.boxes.len();
        let hits = greedy_true_positives(&p.pred.boxes, &p.truth.boxes, iou_threshold);
        entry.1.extend(
            hits.into_iter()
                .enumerate()
                .map(|(rank, hit)| (pseudo_confidence(rank), p.sample_id.as_str(), rank, hit)),
        );
    }
    let mut aps = Vec::new();
    for (_, (n_truth, mut dets)) in classes {
        if n_truth == 0 {
            continue;
        }
        dets.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.cmp(b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        let hits: Vec<bool> = dets.iter().map(|d| d.3).collect();
        aps.push(interpolated_ap(&hits, n_truth));
    }
    if aps.is_empty() {
        return Err(Error::NoGroundTruthBoxes);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// `start:step:stop` inclusive threshold sweep.
pub fn threshold_sweep(start: f64, step: f64, stop: f64) -> Vec<f64> {
    if step <= 0.0 || stop < start {
        return vec![start];
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| ((start + step * i as f64) * 1e9).round() / 1e9)
        .collect()
}

pub fn coco_thresholds() -> Vec<f64> {
    threshold_sweep(0.5, 0.05, 0.95)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
    /// Absent when no box pair could be matched anywhere.
    pub avg_iou: Option<f64>,
}

pub fn detection_metrics(pairs: &[SamplePair], sweep: &[f64]) -> Result<DetectionMetrics> {
    if sweep.is_empty() {
        return Err(Error::EmptyInput("mAP threshold sweep"));
    }
    let mut aps = Vec::with_capacity(sweep.len());
    for &t in sweep {
        aps.push(ap_at_threshold(pairs, t)?);
    }
    let mut iou_sum = 0.0;
    let mut matched = 0usize;
    for p in pairs {
        for (_, _, v) in match_boxes(&p.pred.boxes, &p.truth.boxes) {
            iou_sum += v;
            matched += 1;
        }
    }
    Ok(DetectionMetrics {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        map50: ap_at_threshold(pairs, 0.5)?,
        map75: ap_at_threshold(pairs, 0.75)?,
        avg_iou: (matched > 0).then(|| iou_sum / matched as f64),
    })
}

/// Metric names as they appear in comparison tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CountMae,
    CountMse,
    PointMae,
    PointRmse,
    MatchingAccuracy,
    ZeroCasePoints,
    Map,
    Map50,
    Map75,
    AvgIou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::CountMae => "Count MAE",
            Metric::CountMse => "Count MSE",
            Metric::PointMae => "Point MAE",
            Metric::PointRmse => "Point RMSE",
            Metric::MatchingAccuracy => "Matching Accuracy",
            Metric::ZeroCasePoints => "Zero-case Points",
            Metric::Map => "mAP",
            Metric::Map50 => "mAP@50",
            Metric::Map75 => "mAP@75",
            Metric::AvgIou => "IoU (avg)",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Metric::CountMae
            | Metric::CountMse
            | Metric::PointMae
            | Metric::PointRmse
            | Metric::ZeroCasePoints => Direction::LowerIsBetter,
            _ => Direction::HigherIsBetter,
        }
    }

    pub fn is_integer(self) -> bool {
        self == Metric::ZeroCasePoints
    }

    /// Rows reported for a task, in table order.
    pub fn for_task(task: TaskKind) -> &'static [Metric] {
        const COUNT: &[Metric] = &[Metric::CountMae, Metric::CountMse];
        const POINT: &[Metric] = &[
            Metric::PointMae,
            Metric::PointRmse,
            Metric::MatchingAccuracy,
            Metric::ZeroCasePoints,
        ];
        const BOX: &[Metric] = &[Metric::Map, Metric::Map50, Metric::Map75, Metric::AvgIou];
        const COUNT_POINT: &[Metric] = &[
            Metric::CountMae,
            Metric::CountMse,
            Metric::PointMae,
            Metric::PointRmse,
            Metric::MatchingAccuracy,
            Metric::ZeroCasePoints,
        ];
        const COUNT_BOX: &[Metric] = &[
            Metric::CountMae,
            Metric::CountMse,
            Metric::Map,
            Metric::Map50,
            Metric::Map75,
            Metric::AvgIou,
        ];
        match task {
            TaskKind::CountOnly => COUNT,
            TaskKind::PointOnly => POINT,
            TaskKind::BoxOnly => BOX,
            TaskKind::CountPoint => COUNT_POINT,
            TaskKind::CountBox => COUNT_BOX,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Option<TaskKind>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count_mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matching_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_case_points: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map75: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_iou: Option<f64>,
}

impl TaskReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::CountMae => self.count_mae,
            Metric::CountMse => self.count_mse,
            Metric::PointMae => self.point_mae,
            Metric::PointRmse => self.point_rmse,
            Metric::MatchingAccuracy => self.matching_accuracy,
            Metric::ZeroCasePoints => self.zero_case_points.map(|v| v as f64),
            Metric::Map => self.map,
            Metric::Map50 => self.map50,
            Metric::Map75 => self.map75,
            Metric::AvgIou => self.avg_iou,
        }
    }

    pub fn set(&mut self, m: Metric, v: Option<f64>) {
        match m {
            Metric::CountMae => self.count_mae = v,
            Metric::CountMse => self.count_mse = v,
            Metric::PointMae => self.point_mae = v,
            Metric::PointRmse => self.point_rmse = v,
            Metric::MatchingAccuracy => self.matching_accuracy = v,
            Metric::ZeroCasePoints => self.zero_case_points = v.map(|x| x.round() as u64),
            Metric::Map => self.map = v,
            Metric::Map50 => self.map50 = v,
            Metric::Map75 => self.map75 = v,
            Metric::AvgIou => self.avg_iou = v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub match_threshold: f64,
    pub averaging: Averaging,
    pub map_sweep: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            averaging: Averaging::Micro,
            map_sweep: coco_thresholds(),
        }
    }
}

pub fn evaluate_task(
    task: TaskKind,
    pairs: &[SamplePair],
    opts: &EvalOptions,
) -> Result<TaskReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("evaluation over zero samples"));
    }
    if let Some(other) = pairs.iter().find(|p| p.task != task) {
        return Err(Error::MixedTasks {
            expected: task,
            found: other.task,
        });
    }
    let mut r = TaskReport {
        task: Some(task),
        n: pairs.len(),
        ..TaskReport::default()
    };
    if task.needs_count() {
        let c = count_metrics(pairs)?;
        r.count_mae = Some(c.mae);
        r.count_mse = Some(c.mse);
    }
    if task.needs_points() {
        let p = point_metrics(pairs, opts.match_threshold, opts.averaging)?;
        r.point_mae = p.mae;
        r.point_rmse = p.rmse;
        r.matching_accuracy = Some(p.matching_accuracy);
        r.zero_case_points = Some(p.zero_case_points);
    }
    if task.needs_boxes() {
        let d = detection_metrics(pairs, &opts.map_sweep)?;
        r.map = Some(d.map);
        r.map50 = Some(d.map50);
        r.map75 = Some(d.map75);
        r.avg_iou = d.avg_iou;
    }
    Ok(r)
}
