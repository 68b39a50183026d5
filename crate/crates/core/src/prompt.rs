//! Instruction rendering and canonical target responses.
//!
//! An instruction is three lines: a task description, one question drawn from
//! the [`QuestionBank`], and an output-format directive naming the JSON keys
//! the answer must contain. Training and evaluation prompts both go through
//! [`render_instruction`], so a zero-shot baseline sees exactly the prompt the
//! fine-tuned model was trained on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    round_half_up, AnnotationSet, TaskKind, KEY_BOXES, KEY_COUNTS, KEY_LABEL, KEY_POINTS,
};

pub const LABEL_PLACEHOLDER: &str = "{label}";

const DEFAULT_VERSION: &str = "default-en-1";

const COUNT_ONLY: [&str; 5] = [
    "How many {label} instances can you see in this image?",
    "Count the {label} objects present in the image.",
    "What is the total number of {label} findings in this picture?",
    "Tell me how many {label} objects appear here.",
    "Give the number of visible {label} instances.",
];

const POINT_ONLY: [&str; 5] = [
    "Point to each {label} in the image.",
    "Mark the center of every {label} you can find.",
    "Where is each {label} located? Give one point per instance.",
    "Provide a center point for every {label} visible in this image.",
    "Identify the location of each {label} with a single point.",
];

const BOX_ONLY: [&str; 5] = [
    "Return bounding boxes for each {label} in the image.",
    "Draw a bounding box around every {label} you can see.",
    "Detect each {label} and give its bounding box.",
    "Where are the {label} objects? Answer with one bounding box per instance.",
    "Localize every {label} in this image with a bounding box.",
];

const COUNT_POINT: [&str; 5] = [
    "Return a point for each {label} in the image and the total count.",
    "Mark the center of every {label} and tell me how many there are.",
    "Point to each {label} and count them.",
    "Give one point per {label} instance along with the number of instances.",
    "Locate every {label} with a center point and report how many you found.",
];

const COUNT_BOX: [&str; 5] = [
    "Return bounding boxes for each {label} in the image and the total count.",
    "Draw a bounding box around every {label} and tell me how many there are.",
    "Detect each {label} with a bounding box and count them.",
    "Give one bounding box per {label} instance along with the number of instances.",
    "Localize every {label} with a bounding box and report how many you found.",
];

/// Per-task question templates, each carrying exactly one `{label}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionBank {
    pub version: String,
    pub questions: BTreeMap<TaskKind, Vec<String>>,
    /// Optional replacements for the built-in task descriptions.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub descriptions: BTreeMap<TaskKind, String>,
}

impl Default for QuestionBank {
    fn default() -> Self {
        let own = |qs: [&str; 5]| qs.iter().map(|q| q.to_string()).collect::<Vec<_>>();
        let questions = BTreeMap::from([
            (TaskKind::CountOnly, own(COUNT_ONLY)),
            (TaskKind::PointOnly, own(POINT_ONLY)),
            (TaskKind::BoxOnly, own(BOX_ONLY)),
            (TaskKind::CountPoint, own(COUNT_POINT)),
            (TaskKind::CountBox, own(COUNT_BOX)),
        ]);
        QuestionBank {
            version: DEFAULT_VERSION.to_string(),
            questions,
            descriptions: BTreeMap::new(),
        }
    }
}

impl QuestionBank {
    /// Load a bank from a `.toml` or `.json` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading question bank {}", path.display()), e))?;
        let bank: QuestionBank = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::InvalidBank(e.to_string()))?
        } else {
            serde_json::from_str(&text)?
        };
        bank.check()?;
        Ok(bank)
    }

    pub fn check(&self) -> Result<()> {
        let all = self
            .questions
            .values()
            .flatten()
            .chain(self.descriptions.values());
        for t in all {
            if t.matches(LABEL_PLACEHOLDER).count() != 1 {
                return Err(Error::InvalidBank(format!(
                    "template must contain {LABEL_PLACEHOLDER} exactly once: {t:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self, task: TaskKind) -> usize {
        self.questions.get(&task).map_or(0, Vec::len)
    }

    pub fn is_empty(&self, task: TaskKind) -> bool {
        self.len(task) == 0
    }

    /// Deterministic question choice for one (seed, image, task) triple.
    pub fn pick(&self, seed: u64, image_id: &str, task: TaskKind) -> Result<usize> {
        let n = self.len(task);
        if n == 0 {
            return Err(Error::EmptyQuestionBank(task));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, image_id, task.as_str()));
        Ok(rng.random_range(0..n))
    }

    fn description(&self, task: TaskKind) -> &str {
        self.descriptions
            .get(&task)
            .map(String::as_str)
            .unwrap_or_else(|| PromptTemplate::builtin_description(task))
    }
}

/// Mix a top-level seed with string context into a fresh 64-bit seed.
pub fn derive_seed(seed: u64, a: &str, b: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((a.len() as u64).to_le_bytes());
    h.update(a.as_bytes());
    h.update(b.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Task description plus output-format directive for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub task: TaskKind,
    pub description: String,
    pub directive: String,
}

impl PromptTemplate {
    pub fn new(bank: &QuestionBank, task: TaskKind) -> Self {
        PromptTemplate {
            task,
            description: bank.description(task).to_string(),
            directive: directive(task),
        }
    }

    fn builtin_description(task: TaskKind) -> &'static str {
        match task {
            TaskKind::CountOnly => "Task: count every {label} visible in the image.",
            TaskKind::PointOnly => "Task: locate every {label} in the image by its center point.",
            TaskKind::BoxOnly => "Task: detect every {label} in the image with a bounding box.",
            TaskKind::CountPoint => {
                "Task: locate every {label} in the image by its center point and report the total count."
            }
            TaskKind::CountBox => {
                "Task: detect every {label} in the image with a bounding box and report the total count."
            }
        }
    }
}

fn directive(task: TaskKind) -> String {
    let parts: Vec<String> = task
        .keys()
        .iter()
        .map(|k| match *k {
            KEY_BOXES => format!("\"{KEY_BOXES}\" (a list of [x1, y1, x2, y2] pixel boxes)"),
            KEY_POINTS => format!("\"{KEY_POINTS}\" (a list of [x, y] pixel points)"),
            KEY_COUNTS => format!("\"{KEY_COUNTS}\" (an integer)"),
            _ => format!("\"{KEY_LABEL}\" (the string \"{LABEL_PLACEHOLDER}\")"),
        })
        .collect();
    format!(
        "Respond with only a JSON object with exactly these keys: {}.",
        parts.join(", ")
    )
}

pub fn render_instruction(
    bank: &QuestionBank,
    task: TaskKind,
    label: &str,
    question_index: usize,
) -> Result<String> {
    let questions = bank
        .questions
        .get(&task)
        .filter(|q| !q.is_empty())
        .ok_or(Error::EmptyQuestionBank(task))?;
    let question = questions.get(question_index).ok_or(Error::QuestionIndex {
        task,
        index: question_index,
        len: questions.len(),
    })?;
    let tpl = PromptTemplate::new(bank, task);
    let text = format!("{}\n{}\n{}", tpl.description, question, tpl.directive);
    Ok(text.replace(LABEL_PLACEHOLDER, label))
}

fn int(v: f64) -> i64 {
    round_half_up(v) as i64
}

/// Serialize the ground truth for `task` with fixed key order, single spaces
/// after separators and integer coordinates.
pub fn canonical_response(ann: &AnnotationSet, task: TaskKind) -> Result<String> {
    if task.needs_boxes() && !ann.has_boxes {
        return Err(Error::UnsupportedTask {
            task,
            label: ann.label.clone(),
            missing: "box",
        });
    }
    if task.needs_points() && !ann.has_points {
        return Err(Error::UnsupportedTask {
            task,
            label: ann.label.clone(),
            missing: "point",
        });
    }
    let count = if task.needs_boxes() {
        ann.boxes.len() as u64
    } else if task.needs_points() {
        ann.points.len() as u64
    } else {
        ann.count
    };

    let mut out = String::from("{");
    for (i, key) in task.keys().iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "\"{key}\": ");
        match *key {
            KEY_BOXES => {
                let items: Vec<String> = ann
                    .boxes
                    .iter()
                    .map(|b| {
                        format!(
                            "[{}, {}, {}, {}]",
                            int(b.x1),
                            int(b.y1),
                            int(b.x2),
                            int(b.y2)
                        )
                    })
                    .collect();
                let _ = write!(out, "[{}]", items.join(", "));
            }
            KEY_POINTS => {
                let items: Vec<String> = ann
                    .points
                    .iter()
                    .map(|p| format!("[{}, {}]", int(p.x), int(p.y)))
                    .collect();
                let _ = write!(out, "[{}]", items.join(", "));
            }
            KEY_COUNTS => {
                let _ = write!(out, "{count}");
            }
            _ => out.push_str(&serde_json::to_string(&ann.label)?),
        }
    }
    out.push('}');
    Ok(out)
}
