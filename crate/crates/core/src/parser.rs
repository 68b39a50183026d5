//! Turns free-form model output into a [`Prediction`].
//!
//! Extraction walks a fixed recovery ladder and stops at the first stage that
//! yields a JSON object:
//!
//! 1. parse the trimmed text as-is
//! 2. strip markdown code fences
//! 3. cut out the first balanced `{...}` region
//! 4. rewrite single-quoted strings and drop trailing commas
//! 5. parse the first `[...]` region and take its first object
//!
//! Every stage past the first is recorded, so the recorded ladder steps are
//! always a prefix of stages 2..=5. Value-level coercions performed while
//! normalizing the object are recorded after the ladder steps.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::model::{
    BBox, ImageRecord, LabelNormalizer, Point, TaskKind, KEY_BOXES, KEY_COUNTS, KEY_LABEL,
    KEY_POINTS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Clean,
    Recovered,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryStep {
    StripCodeFence,
    ExtractObject,
    RepairSyntax,
    ArrayFirstObject,
    /// More JSON followed the object that was used.
    ExtraContentIgnored,
    /// A flat `[x1, y1, x2, y2]` or `[x, y]` was wrapped into a one-element list.
    FlatGeometryCoerced,
    NumericStringCoerced,
    /// A geometry element of the wrong arity, a degenerate box or an unusable
    /// value was discarded.
    InvalidValueDropped,
    /// A negative or fractional count was floored / clamped at zero.
    CountCoerced,
}

impl RecoveryStep {
    pub const LADDER: [RecoveryStep; 4] = [
        RecoveryStep::StripCodeFence,
        RecoveryStep::ExtractObject,
        RecoveryStep::RepairSyntax,
        RecoveryStep::ArrayFirstObject,
    ];

    pub fn is_ladder(self) -> bool {
        RecoveryStep::LADDER.contains(&self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyFlag {
    CountGeometryMismatch,
    MissingRequiredKey,
    ExtraKey,
    CoordinateClamped,
    DuplicateGeometry,
    LabelMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub boxes: Vec<BBox>,
    pub points: Vec<Point>,
    pub count: Option<u64>,
    pub label: Option<String>,
    pub parse_status: ParseStatus,
    pub recovery_steps: Vec<RecoveryStep>,
    pub flags: Vec<ConsistencyFlag>,
}

impl Prediction {
    pub fn failed(recovery_steps: Vec<RecoveryStep>) -> Self {
        Prediction {
            boxes: Vec::new(),
            points: Vec::new(),
            count: None,
            label: None,
            parse_status: ParseStatus::Failed,
            recovery_steps,
            flags: Vec::new(),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.parse_status == ParseStatus::Failed
    }
}

/// Extraction succeeded: the object plus the ladder steps it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub object: Map<String, Value>,
    pub steps: Vec<RecoveryStep>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailure {
    /// Last ladder stage that was attempted.
    pub stage: RecoveryStep,
    pub steps: Vec<RecoveryStep>,
}

pub fn extract_structured(text: &str) -> Result<Extracted, ParseFailure> {
    let trimmed = text.trim();
    if let Some(object) = parse_object(trimmed) {
        return Ok(Extracted {
            object,
            steps: Vec::new(),
        });
    }

    let mut steps = vec![RecoveryStep::StripCodeFence];
    let unfenced = strip_code_fences(trimmed);
    if let Some(object) = parse_object(unfenced.trim()) {
        return Ok(Extracted { object, steps });
    }

    steps.push(RecoveryStep::ExtractObject);
    let region = first_balanced(&unfenced, b'{', b'}');
    if let Some((start, end)) = region {
        if let Some(object) = parse_object(&unfenced[start..end]) {
            if first_balanced(&unfenced[end..], b'{', b'}').is_some() {
                steps.push(RecoveryStep::ExtraContentIgnored);
            }
            return Ok(Extracted { object, steps });
        }
    }

    steps.push(RecoveryStep::RepairSyntax);
    let repaired_full = repair_syntax(&unfenced);
    let candidate = match region {
        Some((start, end)) => repair_syntax(&unfenced[start..end]),
        None => repaired_full.clone(),
    };
    if let Some(object) = parse_object(candidate.trim()) {
        return Ok(Extracted { object, steps });
    }
    if let Some((start, end)) = first_balanced(&repaired_full, b'{', b'}') {
        if let Some(object) = parse_object(&repaired_full[start..end]) {
            return Ok(Extracted { object, steps });
        }
    }

    steps.push(RecoveryStep::ArrayFirstObject);
    if let Some((start, end)) = first_balanced(&repaired_full, b'[', b']') {
        if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(&repaired_full[start..end]) {
            if let Some(object) = items.into_iter().find_map(|v| match v {
                Value::Object(m) => Some(m),
                _ => None,
            }) {
                return Ok(Extracted { object, steps });
            }
        }
    }

    Err(ParseFailure {
        stage: RecoveryStep::ArrayFirstObject,
        steps,
    })
}

fn parse_object(s: &str) -> Option<Map<String, Value>> {
    match serde_json::from_str::<Value>(s) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

/// Keep only the body of the first fenced block (an unterminated fence runs
/// to the end of the text). Text without fences is returned unchanged.
fn strip_code_fences(s: &str) -> String {
    let Some(open) = s.find("```") else {
        return s.to_string();
    };
    let after = &s[open + 3..];
    // Skip the info string (`json`, `JSON`, ...) up to the end of the line.
    let body = match after.find('\n') {
        Some(nl) if !after[..nl].contains('{') && !after[..nl].contains('[') => &after[nl + 1..],
        _ => after.trim_start_matches(|c: char| c.is_ascii_alphabetic()),
    };
    match body.find("```") {
        Some(close) => body[..close].to_string(),
        None => body.to_string(),
    }
}

/// Byte range of the first `open ... close` region that balances, ignoring
/// delimiters inside single- or double-quoted strings.
fn first_balanced(s: &str, open: u8, close: u8) -> Option<(usize, usize)> {
    let bytes = s.as_bytes();
    let mut from = 0;
    while let Some(rel) = bytes[from..].iter().position(|&b| b == open) {
        let start = from + rel;
        if let Some(end) = balance_from(bytes, start, open, close) {
            return Some((start, end));
        }
        from = start + 1;
    }
    None
}

fn balance_from(bytes: &[u8], start: usize, open: u8, close: u8) -> Option<usize> {
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut i = start;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) => {
                if b == b'\\' {
                    i += 1;
                } else if b == q {
                    quote = None;
                }
            }
            None => {
                if b == b'"' || b == b'\'' {
                    quote = Some(b);
                } else if b == open {
                    depth += 1;
                } else if b == close {
                    depth -= 1;
                    if depth == 0 {
                        return Some(i + 1);
                    }
                }
            }
        }
        i += 1;
    }
    None
}

/// Convert single-quoted strings to double-quoted ones and drop commas that
/// directly precede `}` or `]`.
fn repair_syntax(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut quote: Option<char> = None;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match quote {
            Some('"') => {
                out.push(c);
                if c == '\\' {
                    if let Some(&n) = chars.get(i + 1) {
                        out.push(n);
                        i += 1;
                    }
                } else if c == '"' {
                    quote = None;
                }
            }
            Some(_) => match c {
                '\\' => match chars.get(i + 1) {
                    Some('\'') => {
                        out.push('\'');
                        i += 1;
                    }
                    Some(&n) => {
                        out.push('\\');
                        out.push(n);
                        i += 1;
                    }
                    None => out.push('\\'),
                },
                '"' => out.push_str("\\\""),
                '\'' => {
                    out.push('"');
                    quote = None;
                }
                _ => out.push(c),
            },
            None => match c {
                '\'' => {
                    out.push('"');
                    quote = Some('\'');
                }
                '"' => {
                    out.push('"');
                    quote = Some('"');
                }
                ',' => {
                    let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                    if !matches!(next, Some('}') | Some(']')) {
                        out.push(',');
                    }
                }
                _ => out.push(c),
            },
        }
        i += 1;
    }
    out
}

/// What the parser needs to know about the sample a response belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseContext {
    pub task: TaskKind,
    pub width: f64,
    pub height: f64,
    /// The label that was asked for; a different answered label is flagged.
    pub label: Option<String>,
}

impl ParseContext {
    pub fn new(task: TaskKind, rec: &ImageRecord) -> Self {
        ParseContext {
            task,
            width: f64::from(rec.eval_width),
            height: f64::from(rec.eval_height),
            label: None,
        }
    }

    /// No image bounds known; only negative coordinates are clamped.
    pub fn unbounded(task: TaskKind) -> Self {
        ParseContext {
            task,
            width: f64::INFINITY,
            height: f64::INFINITY,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }
}

/// Parse raw model text end to end.
pub fn parse_response(text: &str, ctx: &ParseContext) -> Prediction {
    match extract_structured(text) {
        Ok(ex) => {
            let mut pred = normalize_prediction(&Value::Object(ex.object), ctx);
            let mut steps = ex.steps;
            steps.append(&mut pred.recovery_steps);
            pred.recovery_steps = steps;
            if !pred.recovery_steps.is_empty() {
                pred.parse_status = ParseStatus::Recovered;
            }
            pred
        }
        Err(f) => Prediction::failed(f.steps),
    }
}

struct Coercer<'a> {
    steps: Vec<RecoveryStep>,
    ctx: &'a ParseContext,
    clamped: bool,
}

impl Coercer<'_> {
    fn step(&mut self, s: RecoveryStep) {
        if !self.steps.contains(&s) {
            self.steps.push(s);
        }
    }

    fn number(&mut self, v: &Value) -> Option<f64> {
        let n = match v {
            Value::Number(n) => n.as_f64(),
            Value::String(s) => {
                let n = s.trim().parse::<f64>().ok();
                if n.is_some() {
                    self.step(RecoveryStep::NumericStringCoerced);
                }
                n
            }
            _ => None,
        };
        n.filter(|x| x.is_finite())
    }

    fn tuple<const N: usize>(&mut self, v: &Value) -> Option<[f64; N]> {
        let items = v.as_array()?;
        if items.len() != N {
            return None;
        }
        let mut out = [0.0; N];
        for (slot, item) in out.iter_mut().zip(items) {
            *slot = self.number(item)?;
        }
        Some(out)
    }

    /// A list of N-tuples, or a single flat N-tuple.
    fn geometry<const N: usize>(&mut self, v: &Value) -> Vec<[f64; N]> {
        let Some(items) = v.as_array() else {
            if !v.is_null() {
                self.step(RecoveryStep::InvalidValueDropped);
            }
            return Vec::new();
        };
        if items.len() == N && items.iter().all(|i| !i.is_array()) {
            if let Some(t) = self.tuple::<N>(v) {
                self.step(RecoveryStep::FlatGeometryCoerced);
                return vec![t];
            }
        }
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            match self.tuple::<N>(item) {
                Some(t) => out.push(t),
                None => self.step(RecoveryStep::InvalidValueDropped),
            }
        }
        out
    }

    fn boxes(&mut self, v: &Value) -> Vec<BBox> {
        let raw = self.geometry::<4>(v);
        let mut out = Vec::with_capacity(raw.len());
        for t in raw {
            let (b, moved) = BBox::from(t).clamped(self.ctx.width, self.ctx.height);
            if b.is_degenerate() {
                self.step(RecoveryStep::InvalidValueDropped);
                continue;
            }
            self.clamped |= moved;
            out.push(b);
        }
        out
    }

    fn points(&mut self, v: &Value) -> Vec<Point> {
        let raw = self.geometry::<2>(v);
        raw.into_iter()
            .map(|t| {
                let (p, moved) = Point::from(t).clamped(self.ctx.width, self.ctx.height);
                self.clamped |= moved;
                p
            })
            .collect()
    }

    fn count(&mut self, v: &Value) -> Option<u64> {
        let Some(n) = self.number(v) else {
            if !v.is_null() {
                self.step(RecoveryStep::InvalidValueDropped);
            }
            return None;
        };
        let c = n.floor().max(0.0);
        if c != n {
            self.step(RecoveryStep::CountCoerced);
        }
        Some(c.min(u64::MAX as f64) as u64)
    }
}

/// Map a raw JSON object onto a [`Prediction`] for `ctx.task`.
///
/// Non-object input yields an empty prediction flagged with every required
/// key missing.
pub fn normalize_prediction(raw: &Value, ctx: &ParseContext) -> Prediction {
    let empty = Map::new();
    let obj = raw.as_object().unwrap_or(&empty);
    let task = ctx.task;
    let mut c = Coercer {
        steps: Vec::new(),
        ctx,
        clamped: false,
    };
    let mut flags = Vec::new();

    let boxes = obj.get(KEY_BOXES).map(|v| c.boxes(v)).unwrap_or_default();
    let points = obj.get(KEY_POINTS).map(|v| c.points(v)).unwrap_or_default();
    let count = obj.get(KEY_COUNTS).and_then(|v| c.count(v));
    let label = match obj.get(KEY_LABEL) {
        Some(Value::String(s)) => Some(s.trim().to_string()),
        Some(Value::Null) | None => None,
        Some(other) => Some(other.to_string()),
    };

    for key in task.keys() {
        if obj.get(*key).is_none_or(Value::is_null) {
            flags.push(ConsistencyFlag::MissingRequiredKey);
        }
    }
    if obj.keys().any(|k| !task.keys().contains(&k.as_str())) {
        flags.push(ConsistencyFlag::ExtraKey);
    }
    if c.clamped {
        flags.push(ConsistencyFlag::CoordinateClamped);
    }
    if let (Some(want), Some(got)) = (&ctx.label, &label) {
        let norm = LabelNormalizer::default();
        if norm.normalize(want) != norm.normalize(got) {
            flags.push(ConsistencyFlag::LabelMismatch);
        }
    }

    let steps = c.steps;
    let mut pred = Prediction {
        boxes,
        points,
        count,
        label,
        parse_status: if steps.is_empty() {
            ParseStatus::Clean
        } else {
            ParseStatus::Recovered
        },
        recovery_steps: steps,
        flags,
    };
    pred.flags.extend(consistency_check(&pred, task));
    pred.flags.sort();
    pred.flags.dedup();
    pred
}

/// Internal-consistency flags for a parsed prediction.
pub fn consistency_check(pred: &Prediction, task: TaskKind) -> Vec<ConsistencyFlag> {
    let mut flags = Vec::new();
    if let Some(count) = pred.count {
        let geometric = if task.needs_boxes() {
            Some(pred.boxes.len())
        } else if task.needs_points() {
            Some(pred.points.len())
        } else {
            None
        };
        if geometric.is_some_and(|g| g as u64 != count) {
            flags.push(ConsistencyFlag::CountGeometryMismatch);
        }
    }
    let dup_boxes = has_duplicates(pred.boxes.iter().map(|b| <[f64; 4]>::from(b.rounded())));
    let dup_points = has_duplicates(pred.points.iter().map(|p| <[f64; 2]>::from(p.rounded())));
    if dup_boxes || dup_points {
        flags.push(ConsistencyFlag::DuplicateGeometry);
    }
    flags
}

fn has_duplicates<const N: usize>(items: impl Iterator<Item = [f64; N]>) -> bool {
    let mut keys: Vec<[i64; N]> = items.map(|a| a.map(|v| v as i64)).collect();
    keys.sort_unstable();
    keys.windows(2).any(|w| w[0] == w[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ctx(task: TaskKind) -> ParseContext {
        ParseContext {
            task,
            width: 700.0,
            height: 500.0,
            label: Some("polyp".into()),
        }
    }

    #[test]
    fn clean_parse() {
        let p = parse_response(
            r#"{"counts": 3, "label": "polyp"}"#,
            &ctx(TaskKind::CountOnly),
        );
        assert_eq!(p.parse_status, ParseStatus::Clean);
        assert_eq!(p.count, Some(3));
        assert!(p.recovery_steps.is_empty());
        assert!(p.flags.is_empty());
    }

    #[test]
    fn fenced_parse() {
        let p = parse_response(
            "```json\n{\"counts\": 2, \"label\": \"polyp\"}\n```",
            &ctx(TaskKind::CountOnly),
        );
        assert_eq!(p.parse_status, ParseStatus::Recovered);
        assert_eq!(p.count, Some(2));
        assert_eq!(p.recovery_steps, vec![RecoveryStep::StripCodeFence]);
    }

    #[test]
    fn prose_fails() {
        let e = extract_structured("There are no polyps here.").unwrap_err();
        assert_eq!(e.stage, RecoveryStep::ArrayFirstObject);
        let p = parse_response("There are no polyps here.", &ctx(TaskKind::CountOnly));
        assert!(p.is_failed());
        assert_eq!(p.count, None);
        assert!(p.boxes.is_empty() && p.points.is_empty());
    }

    #[test]
    fn empty_input_fails() {
        assert!(parse_response("", &ctx(TaskKind::PointOnly)).is_failed());
    }

    #[test]
    fn embedded_object_and_extra_objects() {
        let e = extract_structured(r#"Sure! {"counts": 1} and also {"counts": 2}"#).unwrap();
        assert_eq!(e.object["counts"], json!(1));
        assert_eq!(
            e.steps,
            vec![
                RecoveryStep::StripCodeFence,
                RecoveryStep::ExtractObject,
                RecoveryStep::ExtraContentIgnored
            ]
        );
    }

    #[test]
    fn single_quotes_and_trailing_commas() {
        let e = extract_structured("{'counts': 4, 'label': 'polyp',}").unwrap();
        assert_eq!(e.object["counts"], json!(4));
        assert_eq!(e.object["label"], json!("polyp"));
        assert_eq!(e.steps.last(), Some(&RecoveryStep::RepairSyntax));

        let e = extract_structured("{'label': 'it\\'s \"x\"'}").unwrap();
        assert_eq!(e.object["label"], json!("it's \"x\""));
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_balancing() {
        let e = extract_structured(r#"note: {"label": "a}b", "counts": 1} trailing"#).unwrap();
        assert_eq!(e.object["label"], json!("a}b"));
    }

    #[test]
    fn array_of_objects_takes_first() {
        let e = extract_structured(r#"[{"counts": 1}, {"counts": 2}]"#).unwrap();
        assert_eq!(e.object["counts"], json!(1));
        // Only reachable when no object region parses on its own.
        let e = extract_structured("{ broken [{'counts': 5,}]").unwrap();
        assert_eq!(e.object["counts"], json!(5));
    }

    #[test]
    fn normalize_exact_schema() {
        let raw = json!({"bbox_2d": [[0, 0, 10, 10]], "counts": 1, "label": "polyp"});
        let p = normalize_prediction(&raw, &ctx(TaskKind::CountBox));
        assert_eq!(p.boxes, vec![BBox::new(0.0, 0.0, 10.0, 10.0)]);
        assert_eq!(p.count, Some(1));
        assert!(p.flags.is_empty());
        assert_eq!(p.parse_status, ParseStatus::Clean);
    }

    #[test]
    fn flat_box_is_wrapped() {
        let raw = json!({"bbox_2d": [5, 5, 20, 20], "label": "polyp"});
        let p = normalize_prediction(&raw, &ctx(TaskKind::BoxOnly));
        assert_eq!(p.boxes, vec![BBox::new(5.0, 5.0, 20.0, 20.0)]);
        assert_eq!(p.recovery_steps, vec![RecoveryStep::FlatGeometryCoerced]);
    }

    #[test]
    fn count_geometry_mismatch_keeps_both() {
        let raw = json!({"point_2d": [[10, 10], [20, 20]], "counts": 5});
        let p = normalize_prediction(&raw, &ctx(TaskKind::CountPoint));
        assert_eq!(p.points.len(), 2);
        assert_eq!(p.count, Some(5));
        assert!(p.flags.contains(&ConsistencyFlag::CountGeometryMismatch));
        assert!(p.flags.contains(&ConsistencyFlag::MissingRequiredKey));
    }

    #[test]
    fn wrong_arity_dropped_and_clamped() {
        let raw = json!({"bbox_2d": [[0, 0, 10], [-3, 0, 800, 10]], "label": "polyp"});
        let p = normalize_prediction(&raw, &ctx(TaskKind::BoxOnly));
        assert_eq!(p.boxes, vec![BBox::new(0.0, 0.0, 700.0, 10.0)]);
        assert!(p
            .recovery_steps
            .contains(&RecoveryStep::InvalidValueDropped));
        assert_eq!(p.flags, vec![ConsistencyFlag::CoordinateClamped]);
    }

    #[test]
    fn coercions() {
        let raw = json!({"counts": "-2.5", "label": "polyp", "extra": 1});
        let p = normalize_prediction(&raw, &ctx(TaskKind::CountOnly));
        assert_eq!(p.count, Some(0));
        assert!(p
            .recovery_steps
            .contains(&RecoveryStep::NumericStringCoerced));
        assert!(p.recovery_steps.contains(&RecoveryStep::CountCoerced));
        assert_eq!(p.flags, vec![ConsistencyFlag::ExtraKey]);

        let raw = json!({"counts": 3.7, "label": "polpy"});
        let p = normalize_prediction(&raw, &ctx(TaskKind::CountOnly));
        assert_eq!(p.count, Some(3));
        assert!(p.flags.is_empty(), "alias matches queried label");

        let raw = json!({"counts": 1, "label": "instrument"});
        let p = normalize_prediction(&raw, &ctx(TaskKind::CountOnly));
        assert_eq!(p.flags, vec![ConsistencyFlag::LabelMismatch]);
    }

    #[test]
    fn empty_geometry_is_clean() {
        let p = parse_response(
            r#"{"point_2d": [], "label": "polyp"}"#,
            &ctx(TaskKind::PointOnly),
        );
        assert_eq!(p.parse_status, ParseStatus::Clean);
        assert!(p.points.is_empty());
    }

    #[test]
    fn consistency_examples() {
        let mut p = Prediction::failed(vec![]);
        p.parse_status = ParseStatus::Clean;
        p.points = vec![Point::new(1.0, 1.0), Point::new(2.0, 2.0)];
        p.count = Some(2);
        assert!(consistency_check(&p, TaskKind::CountPoint).is_empty());
        p.count = Some(3);
        assert_eq!(
            consistency_check(&p, TaskKind::CountPoint),
            vec![ConsistencyFlag::CountGeometryMismatch]
        );
        p.count = None;
        p.points = vec![Point::new(5.0, 5.0), Point::new(5.0, 5.0)];
        assert_eq!(
            consistency_check(&p, TaskKind::PointOnly),
            vec![ConsistencyFlag::DuplicateGeometry]
        );
        p.points = vec![Point::new(5.2, 5.0), Point::new(4.9, 5.0)];
        assert_eq!(
            consistency_check(&p, TaskKind::PointOnly),
            vec![ConsistencyFlag::DuplicateGeometry]
        );
    }
}
