//! Domain types shared by every stage of the harness.
//!
//! All geometry lives in the *evaluation* coordinate space: the pixel grid of
//! the image after it has been proportionally shrunk to at most
//! [`MAX_EVAL_WIDTH`] pixels wide. Coordinates are kept as `f64` and only
//! rounded (half-up) when they are serialized.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, RejectReason, Result};

pub const MAX_EVAL_WIDTH: u32 = 700;

/// Round half-up (towards positive infinity on ties).
pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Polyp,
    Instrument,
    SpermNormal,
    SpermCluster,
    SpermPinhead,
}

impl SourceKind {
    pub const ALL: [SourceKind; 5] = [
        SourceKind::Polyp,
        SourceKind::Instrument,
        SourceKind::SpermNormal,
        SourceKind::SpermCluster,
        SourceKind::SpermPinhead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Polyp => "polyp",
            SourceKind::Instrument => "instrument",
            SourceKind::SpermNormal => "sperm-normal",
            SourceKind::SpermCluster => "sperm-cluster",
            SourceKind::SpermPinhead => "sperm-pinhead",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SourceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown source kind '{s}'"))
    }
}

/// Output of [`compute_resize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resize {
    pub eval_width: u32,
    pub eval_height: u32,
    pub scale: f64,
}

/// Proportional shrink to at most 700 px wide. Images that already fit are
/// left untouched; nothing is ever upscaled.
pub fn compute_resize(orig_width: i64, orig_height: i64) -> Result<Resize> {
    if orig_width < 1 || orig_height < 1 {
        return Err(Error::InvalidImage {
            width: orig_width,
            height: orig_height,
        });
    }
    let scale = (f64::from(MAX_EVAL_WIDTH) / orig_width as f64).min(1.0);
    let dim = |v: i64| -> u32 {
        if scale == 1.0 {
            v as u32
        } else {
            (round_half_up(v as f64 * scale) as u32).max(1)
        }
    };
    Ok(Resize {
        eval_width: dim(orig_width).min(MAX_EVAL_WIDTH),
        eval_height: dim(orig_height),
        scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub source: SourceKind,
    pub orig_width: u32,
    pub orig_height: u32,
    pub scale: f64,
    pub eval_width: u32,
    pub eval_height: u32,
    pub uri: String,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        source: SourceKind,
        orig_width: u32,
        orig_height: u32,
        uri: impl Into<String>,
    ) -> Result<Self> {
        let r = compute_resize(i64::from(orig_width), i64::from(orig_height))?;
        Ok(ImageRecord {
            id: id.into(),
            source,
            orig_width,
            orig_height,
            scale: r.scale,
            eval_width: r.eval_width,
            eval_height: r.eval_height,
            uri: uri.into(),
        })
    }
}

/// Axis-aligned box `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 < self.x2 && self.y1 < self.y2)
    }

    pub fn is_finite(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn rounded(&self) -> Self {
        BBox::new(
            round_half_up(self.x1),
            round_half_up(self.y1),
            round_half_up(self.x2),
            round_half_up(self.y2),
        )
    }

    /// Clamp into `[0, width] x [0, height]`. The flag reports whether any
    /// coordinate moved.
    pub fn clamped(&self, width: f64, height: f64) -> (Self, bool) {
        let c = BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        );
        (c, c != *self)
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// A single `[x, y]` location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Point::new(self.x * s, self.y * s)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Point::new(self.x + dx, self.y + dy)
    }

    pub fn rounded(&self) -> Self {
        Point::new(round_half_up(self.x), round_half_up(self.y))
    }

    pub fn clamped(&self, width: f64, height: f64) -> (Self, bool) {
        let c = Point::new(self.x.clamp(0.0, width), self.y.clamp(0.0, height));
        (c, c != *self)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Ground truth for one label class on one image.
///
/// `has_boxes` / `has_points` record which geometry the source annotated,
/// so that an image with zero findings (`"bbox_2d": []`) can be told apart
/// from a source that never provides boxes at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub label: String,
    pub boxes: Vec<BBox>,
    pub points: Vec<Point>,
    pub count: u64,
    pub has_boxes: bool,
    pub has_points: bool,
}

impl AnnotationSet {
    pub fn with_boxes(label: impl Into<String>, boxes: Vec<BBox>) -> Self {
        AnnotationSet {
            label: label.into(),
            count: boxes.len() as u64,
            boxes,
            points: Vec::new(),
            has_boxes: true,
            has_points: false,
        }
    }

    pub fn with_points(label: impl Into<String>, points: Vec<Point>) -> Self {
        AnnotationSet {
            label: label.into(),
            count: points.len() as u64,
            boxes: Vec::new(),
            points,
            has_boxes: false,
            has_points: true,
        }
    }

    pub fn count_only(label: impl Into<String>, count: u64) -> Self {
        AnnotationSet {
            label: label.into(),
            boxes: Vec::new(),
            points: Vec::new(),
            count,
            has_boxes: false,
            has_points: false,
        }
    }

    /// Count implied by the annotated geometry, if any geometry was annotated.
    pub fn geometric_count(&self) -> Option<u64> {
        if self.has_boxes {
            Some(self.boxes.len() as u64)
        } else if self.has_points {
            Some(self.points.len() as u64)
        } else {
            None
        }
    }

    pub fn supports(&self, task: TaskKind) -> bool {
        (!task.needs_boxes() || self.has_boxes) && (!task.needs_points() || self.has_points)
    }
}

/// The five instruction/response task formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CountOnly,
    PointOnly,
    BoxOnly,
    CountPoint,
    CountBox,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::CountOnly,
        TaskKind::PointOnly,
        TaskKind::BoxOnly,
        TaskKind::CountPoint,
        TaskKind::CountBox,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::CountOnly => "count_only",
            TaskKind::PointOnly => "point_only",
            TaskKind::BoxOnly => "box_only",
            TaskKind::CountPoint => "count_point",
            TaskKind::CountBox => "count_box",
        }
    }

    /// Row-group heading used in comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            TaskKind::CountOnly => "Counting Only",
            TaskKind::PointOnly => "Pointing Only",
            TaskKind::BoxOnly => "Bounding Box Detection",
            TaskKind::CountPoint => "Counting + Pointing",
            TaskKind::CountBox => "Counting + Bounding",
        }
    }

    pub fn needs_count(self) -> bool {
        matches!(
            self,
            TaskKind::CountOnly | TaskKind::CountPoint | TaskKind::CountBox
        )
    }

    pub fn needs_points(self) -> bool {
        matches!(self, TaskKind::PointOnly | TaskKind::CountPoint)
    }

    pub fn needs_boxes(self) -> bool {
        matches!(self, TaskKind::BoxOnly | TaskKind::CountBox)
    }

    /// JSON keys of the canonical response, in serialization order.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            TaskKind::CountOnly => &[KEY_COUNTS, KEY_LABEL],
            TaskKind::PointOnly => &[KEY_POINTS, KEY_LABEL],
            TaskKind::BoxOnly => &[KEY_BOXES, KEY_LABEL],
            TaskKind::CountPoint => &[KEY_POINTS, KEY_COUNTS, KEY_LABEL],
            TaskKind::CountBox => &[KEY_BOXES, KEY_COUNTS, KEY_LABEL],
        }
    }
}

pub const KEY_BOXES: &str = "bbox_2d";
pub const KEY_POINTS: &str = "point_2d";
pub const KEY_COUNTS: &str = "counts";
pub const KEY_LABEL: &str = "label";

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| format!("unknown task '{s}'"))
    }
}

/// Multiply every coordinate by `scale`. Counts and ordering are untouched.
pub fn rescale_annotations(ann: &AnnotationSet, scale: f64) -> AnnotationSet {
    AnnotationSet {
        boxes: ann.boxes.iter().map(|b| b.scaled(scale)).collect(),
        points: ann.points.iter().map(|p| p.scaled(scale)).collect(),
        ..ann.clone()
    }
}

/// Lowercases and trims labels, then applies an alias table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelNormalizer {
    pub aliases: BTreeMap<String, String>,
}

impl Default for LabelNormalizer {
    fn default() -> Self {
        let mut aliases = BTreeMap::new();
        aliases.insert("polpy".to_string(), "polyp".to_string());
        LabelNormalizer { aliases }
    }
}

impl LabelNormalizer {
    pub fn normalize(&self, label: &str) -> String {
        let l = label.trim().to_lowercase();
        match self.aliases.get(&l) {
            Some(target) => target.clone(),
            None => l,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    CountMismatch { declared: u64, actual: u64 },
    BoxClamped { index: usize },
    PointClamped { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationOutcome {
    pub annotation: AnnotationSet,
    pub violations: Vec<Violation>,
}

impl ValidationOutcome {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check an annotation against its image and repair what can be repaired:
/// out-of-bounds coordinates are clamped and a declared count that disagrees
/// with the geometry is replaced by the geometric cardinality. Boxes that
/// collapse to zero area reject the whole record.
pub fn validate_annotation(
    ann: &AnnotationSet,
    rec: &ImageRecord,
) -> Result<ValidationOutcome, RejectReason> {
    if ann.label.trim().is_empty() {
        return Err(RejectReason::EmptyLabel);
    }
    let w = f64::from(rec.eval_width);
    let h = f64::from(rec.eval_height);
    let mut violations = Vec::new();
    let mut out = ann.clone();

    for (index, b) in out.boxes.iter_mut().enumerate() {
        if !b.is_finite() {
            return Err(RejectReason::NonFinite);
        }
        let (c, moved) = b.clamped(w, h);
        if c.is_degenerate() {
            return Err(RejectReason::DegenerateBox { index });
        }
        if moved {
            violations.push(Violation::BoxClamped { index });
        }
        *b = c;
    }
    for (index, p) in out.points.iter_mut().enumerate() {
        if !p.is_finite() {
            return Err(RejectReason::NonFinite);
        }
        let (c, moved) = p.clamped(w, h);
        if moved {
            violations.push(Violation::PointClamped { index });
        }
        *p = c;
    }

    if out.has_boxes && out.has_points && out.boxes.len() != out.points.len() {
        return Err(RejectReason::GeometryConflict {
            boxes: out.boxes.len(),
            points: out.points.len(),
        });
    }
    if let Some(actual) = out.geometric_count() {
        if actual != out.count {
            violations.push(Violation::CountMismatch {
                declared: out.count,
                actual,
            });
            out.count = actual;
        }
    }
    for v in &violations {
        tracing::debug!(image = %rec.id, label = %out.label, ?v, "annotation repaired");
    }
    Ok(ValidationOutcome {
        annotation: out,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(w: u32, h: u32) -> ImageRecord {
        ImageRecord::new("img", SourceKind::Polyp, w, h, "img.jpg").unwrap()
    }

    #[test]
    fn resize_examples() {
        let r = compute_resize(1400, 1000).unwrap();
        assert_eq!((r.eval_width, r.eval_height, r.scale), (700, 500, 0.5));
        let r = compute_resize(640, 480).unwrap();
        assert_eq!((r.eval_width, r.eval_height, r.scale), (640, 480, 1.0));
        // 333 * 0.7 = 233.1
        let r = compute_resize(1000, 333).unwrap();
        assert_eq!((r.eval_width, r.eval_height), (700, 233));
        assert!((r.scale - 0.7).abs() < 1e-12);
    }

    #[test]
    fn resize_rejects_non_positive() {
        assert!(matches!(
            compute_resize(0, 10),
            Err(Error::InvalidImage { .. })
        ));
        assert!(compute_resize(10, -1).is_err());
    }

    #[test]
    fn resize_is_idempotent() {
        let r = compute_resize(3000, 2000).unwrap();
        let again = compute_resize(r.eval_width.into(), r.eval_height.into()).unwrap();
        assert_eq!(again.scale, 1.0);
        assert_eq!(again.eval_width, r.eval_width);
    }

    #[test]
    fn rescale_examples() {
        let a = AnnotationSet::with_boxes("polyp", vec![BBox::new(0.0, 0.0, 100.0, 100.0)]);
        assert_eq!(
            rescale_annotations(&a, 0.5).boxes[0],
            BBox::new(0.0, 0.0, 50.0, 50.0)
        );

        let p = AnnotationSet::with_points("sperm", vec![Point::new(700.0, 233.0)]);
        assert_eq!(rescale_annotations(&p, 1.0), p);

        let a = AnnotationSet::with_boxes(
            "polyp",
            vec![
                BBox::new(10.0, 20.0, 30.0, 40.0),
                BBox::new(50.0, 60.0, 70.0, 80.0),
            ],
        );
        let s = rescale_annotations(&a, 0.7);
        let want = [[7.0, 14.0, 21.0, 28.0], [35.0, 42.0, 49.0, 56.0]];
        for (b, w) in s.boxes.iter().zip(want) {
            let got: [f64; 4] = (*b).into();
            for (g, e) in got.iter().zip(w) {
                assert!((g - e).abs() < 1e-9);
            }
        }
        assert_eq!(s.count, 2);
    }

    #[test]
    fn validate_consistent_is_ok() {
        let a = AnnotationSet::with_boxes("polyp", vec![BBox::new(0.0, 0.0, 10.0, 10.0)]);
        let out = validate_annotation(&a, &rec(700, 500)).unwrap();
        assert!(out.is_clean());
        assert_eq!(out.annotation, a);
    }

    #[test]
    fn validate_repairs_count() {
        let mut a = AnnotationSet::with_boxes("polyp", vec![BBox::new(0.0, 0.0, 10.0, 10.0)]);
        a.count = 3;
        let out = validate_annotation(&a, &rec(700, 500)).unwrap();
        assert_eq!(out.annotation.count, 1);
        assert_eq!(
            out.violations,
            vec![Violation::CountMismatch {
                declared: 3,
                actual: 1
            }]
        );
    }

    #[test]
    fn validate_clamps_boxes() {
        let a = AnnotationSet::with_boxes("polyp", vec![BBox::new(-5.0, 0.0, 710.0, 10.0)]);
        let out = validate_annotation(&a, &rec(700, 500)).unwrap();
        assert_eq!(out.annotation.boxes[0], BBox::new(0.0, 0.0, 700.0, 10.0));
        assert_eq!(out.violations, vec![Violation::BoxClamped { index: 0 }]);
    }

    #[test]
    fn validate_rejects_degenerate() {
        let a = AnnotationSet::with_boxes("polyp", vec![BBox::new(710.0, 0.0, 720.0, 10.0)]);
        assert_eq!(
            validate_annotation(&a, &rec(700, 500)),
            Err(RejectReason::DegenerateBox { index: 0 })
        );
        let a = AnnotationSet::with_boxes("polyp", vec![BBox::new(5.0, 5.0, 5.0, 10.0)]);
        assert!(validate_annotation(&a, &rec(700, 500)).is_err());
    }

    #[test]
    fn validate_rejects_geometry_conflict_and_empty_label() {
        let mut a = AnnotationSet::with_boxes("polyp", vec![BBox::new(0.0, 0.0, 10.0, 10.0)]);
        a.has_points = true;
        assert!(matches!(
            validate_annotation(&a, &rec(700, 500)),
            Err(RejectReason::GeometryConflict { .. })
        ));
        let e = AnnotationSet::count_only("  ", 2);
        assert_eq!(
            validate_annotation(&e, &rec(700, 500)),
            Err(RejectReason::EmptyLabel)
        );
    }

    #[test]
    fn labels_normalize_with_alias() {
        let n = LabelNormalizer::default();
        assert_eq!(n.normalize("  Polpy "), "polyp");
        assert_eq!(n.normalize("SPERM"), "sperm");
    }

    #[test]
    fn task_names_round_trip() {
        for t in TaskKind::ALL {
            assert_eq!(t.as_str().parse::<TaskKind>().unwrap(), t);
        }
        assert_eq!("count-box".parse::<TaskKind>().unwrap(), TaskKind::CountBox);
        assert!("bogus".parse::<TaskKind>().is_err());
    }
}
