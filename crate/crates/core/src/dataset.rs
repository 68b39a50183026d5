//! Annotation ingestion, instruction-sample construction, splitting and
//! JSONL emission.
//!
//! Annotation files are JSONL. Each line describes one label class on one
//! image:
//!
//! ```json
//! {"image": "a.jpg", "width": 1280, "height": 1024,
//!  "bbox_2d": [[10, 10, 50, 50]], "point_2d": [[30, 30]], "counts": 1, "label": "polyp"}
//! ```
//!
//! `width`/`height` are optional; when missing they are read from the image
//! header. Coordinates are in original pixel space and are rescaled into the
//! evaluation space on ingestion.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::Provenance;
use crate::error::{Error, Result};
use crate::model::{
    rescale_annotations, validate_annotation, AnnotationSet, BBox, ImageRecord, LabelNormalizer,
    Point, SourceKind, TaskKind,
};
use crate::parser::{parse_response, ParseContext, ParseStatus};
use crate::prompt::{canonical_response, derive_seed, render_instruction, QuestionBank};

/// One annotation source: a set of JSONL files plus the directory holding
/// the images they reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub kind: SourceKind,
    pub annotations: Vec<PathBuf>,
    pub images: PathBuf,
    /// Used for records that carry no `label` of their own.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub sources: Vec<SourceManifest>,
}

impl BuildManifest {
    /// Load a `.toml` or `.json` manifest. Relative paths resolve against the
    /// manifest's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let mut m: BuildManifest = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?
        } else {
            serde_json::from_str(&text)?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.sources {
            s.images = base.join(&s.images);
            for a in &mut s.annotations {
                *a = base.join(&*a);
            }
        }
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<()> {
        for s in &self.sources {
            if s.label.trim().is_empty() {
                return Err(Error::Manifest(format!(
                    "source {} has an empty label",
                    s.kind
                )));
            }
            if s.annotations.is_empty() {
                return Err(Error::Manifest(format!(
                    "source {} lists no annotation files",
                    s.kind
                )));
            }
            for a in &s.annotations {
                if !a.is_file() {
                    return Err(Error::Manifest(format!(
                        "annotation file {} does not exist",
                        a.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedLine {
    pub path: PathBuf,
    pub line: usize,
    pub reason: String,
}

/// Everything one source produced.
#[derive(Debug, Default)]
pub struct Ingested {
    pub items: Vec<(ImageRecord, AnnotationSet)>,
    /// Lines that could not be read as an annotation record.
    pub malformed: Vec<SkippedLine>,
    /// Records that parsed but failed validation.
    pub rejected: Vec<SkippedLine>,
    /// Records whose annotation needed repair (clamping, count fix).
    pub repaired: usize,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    image: String,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
    #[serde(default, rename = "bbox_2d")]
    boxes: Option<Vec<[f64; 4]>>,
    #[serde(default, rename = "point_2d")]
    points: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    counts: Option<u64>,
    #[serde(default)]
    label: Option<String>,
}

pub fn ingest_source(manifest: &SourceManifest, labels: &LabelNormalizer) -> Result<Ingested> {
    let mut out = Ingested::default();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut dims_cache: BTreeMap<String, (u32, u32)> = BTreeMap::new();

    for path in &manifest.annotations {
        let file = fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let skip = |reason: String| SkippedLine {
                path: path.clone(),
                line: line_no,
                reason,
            };
            let raw: RawRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(path = %path.display(), line = line_no, "malformed record: {e}");
                    out.malformed.push(skip(e.to_string()));
                    continue;
                }
            };
            let label = labels.normalize(raw.label.as_deref().unwrap_or(&manifest.label));

            let image_path = manifest.images.join(&raw.image);
            let dims = match (raw.width, raw.height) {
                (Some(w), Some(h)) => Ok((w, h)),
                _ => match dims_cache.get(&raw.image) {
                    Some(d) => Ok(*d),
                    None => image::image_dimensions(&image_path).map_err(|e| e.to_string()),
                },
            };
            let (w, h) = match dims {
                Ok(d) => d,
                Err(e) => {
                    tracing::warn!(path = %path.display(), line = line_no, "no image dimensions: {e}");
                    out.malformed.push(skip(format!("image dimensions: {e}")));
                    continue;
                }
            };
            dims_cache.insert(raw.image.clone(), (w, h));

            let id = format!("{}/{}", manifest.kind, raw.image);
            if !seen.insert((id.clone(), label.clone())) {
                out.malformed
                    .push(skip(format!("duplicate record for {id} / {label}")));
                continue;
            }
            let rec = match ImageRecord::new(
                id,
                manifest.kind,
                w,
                h,
                image_path.to_string_lossy().into_owned(),
            ) {
                Ok(r) => r,
                Err(e) => {
                    out.malformed.push(skip(e.to_string()));
                    continue;
                }
            };

            let ann = annotation_from_raw(&raw, label);
            let scaled = rescale_annotations(&ann, rec.scale);
            match validate_annotation(&scaled, &rec) {
                Ok(v) => {
                    if !v.is_clean() {
                        out.repaired += 1;
                    }
                    out.items.push((rec, v.annotation));
                }
                Err(reason) => {
                    tracing::warn!(path = %path.display(), line = line_no, code = reason.code(), "record rejected: {reason}");
                    out.rejected.push(skip(reason.code().to_string()));
                }
            }
        }
    }
    Ok(out)
}

fn annotation_from_raw(raw: &RawRecord, label: String) -> AnnotationSet {
    let boxes: Vec<BBox> = raw.boxes.iter().flatten().map(|b| BBox::from(*b)).collect();
    let points: Vec<Point> = raw
        .points
        .iter()
        .flatten()
        .map(|p| Point::from(*p))
        .collect();
    let has_boxes = raw.boxes.is_some();
    let has_points = raw.points.is_some();
    let geometric = if has_boxes {
        Some(boxes.len() as u64)
    } else if has_points {
        Some(points.len() as u64)
    } else {
        None
    };
    AnnotationSet {
        label,
        count: raw.counts.or(geometric).unwrap_or(0),
        boxes,
        points,
        has_boxes,
        has_points,
    }
}

/// One instruction/response unit.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionSample {
    pub sample_id: String,
    pub image: ImageRecord,
    pub task: TaskKind,
    pub instruction: String,
    pub target: String,
    pub label: String,
}

impl InstructionSample {
    pub fn sample_id_for(image_id: &str, label: &str, task: TaskKind) -> String {
        format!("{image_id}#{label}#{task}")
    }

    pub fn parse_context(&self) -> ParseContext {
        ParseContext::new(self.task, &self.image).with_label(self.label.clone())
    }

    /// Recover the ground truth encoded in `target`.
    pub fn truth(&self) -> Result<AnnotationSet> {
        let p = parse_response(&self.target, &self.parse_context());
        if p.parse_status != ParseStatus::Clean {
            return Err(Error::Format {
                path: PathBuf::new(),
                line: 0,
                message: format!(
                    "target of {} is not a clean canonical response",
                    self.sample_id
                ),
            });
        }
        let count = p.count.unwrap_or(if self.task.needs_boxes() {
            p.boxes.len() as u64
        } else {
            p.points.len() as u64
        });
        Ok(AnnotationSet {
            label: self.label.clone(),
            boxes: p.boxes,
            points: p.points,
            count,
            has_boxes: self.task.needs_boxes(),
            has_points: self.task.needs_points(),
        })
    }
}

/// Build the instruction samples for one (image, label) annotation: one per
/// task the annotation supports. Unsupported tasks are logged and skipped.
pub fn build_samples(
    rec: &ImageRecord,
    ann: &AnnotationSet,
    bank: &QuestionBank,
    rng_seed: u64,
) -> Result<Vec<InstructionSample>> {
    let mut out = Vec::with_capacity(TaskKind::ALL.len());
    for task in TaskKind::ALL {
        if bank.is_empty(task) {
            return Err(Error::EmptyQuestionBank(task));
        }
        let target = match canonical_response(ann, task) {
            Ok(t) => t,
            Err(e @ Error::UnsupportedTask { .. }) => {
                tracing::debug!(image = %rec.id, "{e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let q = bank.pick(rng_seed, &rec.id, task)?;
        out.push(InstructionSample {
            sample_id: InstructionSample::sample_id_for(&rec.id, &ann.label, task),
            image: rec.clone(),
            task,
            instruction: render_instruction(bank, task, &ann.label, q)?,
            target,
            label: ann.label.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestUnit {
    /// `test_size` counts images; all their samples go to the test split.
    #[default]
    Image,
    /// `test_size` counts samples; whole images are added until it is reached.
    Sample,
}

impl std::str::FromStr for TestUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "image" => Ok(TestUnit::Image),
            "sample" => Ok(TestUnit::Sample),
            _ => Err(format!("unknown test unit '{s}' (image|sample)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub test_size: usize,
    pub stratify: bool,
    pub unit: TestUnit,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            seed: 0,
            test_size: 500,
            stratify: false,
            unit: TestUnit::Image,
        }
    }
}

/// Choose which image ids form the test split. Depends only on the set of
/// ids (with their source and weight) and the seed.
pub fn choose_test_images(
    images: &BTreeMap<String, (SourceKind, usize)>,
    spec: &SplitSpec,
) -> Result<BTreeSet<String>> {
    let weight = |w: usize| match spec.unit {
        TestUnit::Image => 1,
        TestUnit::Sample => w,
    };
    let total: usize = images.values().map(|(_, w)| weight(*w)).sum();
    if spec.test_size > total {
        return Err(Error::SplitTooLarge {
            requested: spec.test_size,
            available: total,
            unit: match spec.unit {
                TestUnit::Image => "image",
                TestUnit::Sample => "sample",
            },
        });
    }

    let mut strata: BTreeMap<Option<SourceKind>, Vec<(&str, usize)>> = BTreeMap::new();
    for (id, (src, w)) in images {
        let key = spec.stratify.then_some(*src);
        strata
            .entry(key)
            .or_default()
            .push((id.as_str(), weight(*w)));
    }

    // Largest-remainder allocation of the test budget across strata.
    let mut quotas: Vec<(usize, f64)> = strata
        .values()
        .map(|members| {
            let size: usize = members.iter().map(|m| m.1).sum();
            let exact = spec.test_size as f64 * size as f64 / total.max(1) as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &i in order.iter().take(spec.test_size.saturating_sub(assigned)) {
        quotas[i].0 += 1;
    }

    let mut test = BTreeSet::new();
    for ((key, mut members), (quota, _)) in strata.into_iter().zip(quotas) {
        let stratum = key.map_or("all", SourceKind::as_str);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stratum, "split"));
        members.shuffle(&mut rng);
        let mut acc = 0usize;
        for (id, w) in members {
            if acc >= quota {
                break;
            }
            acc += w;
            test.insert(id.to_string());
        }
    }
    Ok(test)
}

/// Split by image so that no image contributes samples to both sides.
/// Returns `(train, test)`, each sorted by (image id, task, label).
pub fn split_dataset(
    samples: Vec<InstructionSample>,
    spec: &SplitSpec,
) -> Result<(Vec<InstructionSample>, Vec<InstructionSample>)> {
    let mut images: BTreeMap<String, (SourceKind, usize)> = BTreeMap::new();
    for s in &samples {
        images
            .entry(s.image.id.clone())
            .or_insert((s.image.source, 0))
            .1 += 1;
    }
    let test_ids = choose_test_images(&images, spec)?;
    let (mut test, mut train): (Vec<_>, Vec<_>) = samples
        .into_iter()
        .partition(|s| test_ids.contains(&s.image.id));
    sort_samples(&mut train);
    sort_samples(&mut test);
    Ok((train, test))
}

pub fn sort_samples(samples: &mut [InstructionSample]) {
    samples.sort_by(|a, b| {
        (&a.image.id, a.task, &a.label, &a.sample_id).cmp(&(
            &b.image.id,
            b.task,
            &b.label,
            &b.sample_id,
        ))
    });
}

/// Ingest every source (in parallel), then build and sort all samples.
pub fn build_dataset(
    manifest: &BuildManifest,
    bank: &QuestionBank,
    labels: &LabelNormalizer,
    seed: u64,
) -> Result<(Vec<InstructionSample>, BuildStats)> {
    let ingested: Vec<Result<Ingested>> = std::thread::scope(|s| {
        let handles: Vec<_> = manifest
            .sources
            .iter()
            .map(|src| s.spawn(move || ingest_source(src, labels)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ingest thread panicked"))
            .collect()
    });

    let mut stats = BuildStats::default();
    let mut samples = Vec::new();
    let mut images = BTreeSet::new();
    for ing in ingested {
        let ing = ing?;
        stats.malformed += ing.malformed.len();
        stats.rejected += ing.rejected.len();
        stats.repaired += ing.repaired;
        for (rec, ann) in &ing.items {
            images.insert(rec.id.clone());
            let built = build_samples(rec, ann, bank, seed)?;
            stats.unsupported += TaskKind::ALL.len() - built.len();
            samples.extend(built);
        }
    }
    stats.images = images.len();
    stats.samples = samples.len();
    sort_samples(&mut samples);
    Ok((samples, stats))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub images: usize,
    pub samples: usize,
    pub malformed: usize,
    pub rejected: usize,
    pub repaired: usize,
    /// (image, label, task) combinations skipped for lack of geometry.
    pub unsupported: usize,
}

/// On-disk form of an [`InstructionSample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleLine {
    sample_id: String,
    image_uri: String,
    task: TaskKind,
    instruction: String,
    target: String,
    label: String,
    eval_width: u32,
    eval_height: u32,
    image_id: String,
    source: SourceKind,
    orig_width: u32,
    orig_height: u32,
    scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl From<&InstructionSample> for SampleLine {
    fn from(s: &InstructionSample) -> Self {
        SampleLine {
            sample_id: s.sample_id.clone(),
            image_uri: s.image.uri.clone(),
            task: s.task,
            instruction: s.instruction.clone(),
            target: s.target.clone(),
            label: s.label.clone(),
            eval_width: s.image.eval_width,
            eval_height: s.image.eval_height,
            image_id: s.image.id.clone(),
            source: s.image.source,
            orig_width: s.image.orig_width,
            orig_height: s.image.orig_height,
            scale: s.image.scale,
            config_digest: None,
            seed: None,
        }
    }
}

impl From<SampleLine> for InstructionSample {
    fn from(l: SampleLine) -> Self {
        InstructionSample {
            sample_id: l.sample_id,
            image: ImageRecord {
                id: l.image_id,
                source: l.source,
                orig_width: l.orig_width,
                orig_height: l.orig_height,
                scale: l.scale,
                eval_width: l.eval_width,
                eval_height: l.eval_height,
                uri: l.image_uri,
            },
            task: l.task,
            instruction: l.instruction,
            target: l.target,
            label: l.label,
        }
    }
}

/// Write any serializable records as JSONL, atomically: the data goes to a
/// sibling temporary file that is renamed into place once complete.
pub fn write_jsonl_atomic<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let tmp = path.with_extension("jsonl.partial");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("writing {}", path.display()), e)
    })
}

/// Emit samples as JSONL, sorted by (image id, task, label). With
/// `provenance`, every line also carries the config digest and seed.
pub fn emit_jsonl(
    samples: &[InstructionSample],
    path: &Path,
    provenance: Option<&Provenance>,
) -> Result<()> {
    let mut sorted: Vec<&InstructionSample> = samples.iter().collect();
    sorted.sort_by(|a, b| (&a.image.id, a.task, &a.label).cmp(&(&b.image.id, b.task, &b.label)));
    let lines: Vec<SampleLine> = sorted
        .into_iter()
        .map(|s| SampleLine {
            config_digest: provenance.map(|p| p.config_digest.clone()),
            seed: provenance.map(|p| p.seed),
            ..SampleLine::from(s)
        })
        .collect();
    write_jsonl_atomic(&lines, path)
}

/// Read JSONL records, reporting the line number of the first bad line.
pub fn read_jsonl_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file =
        fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<InstructionSample>> {
    Ok(read_jsonl_with_provenance(path)?.0)
}

/// Samples plus the provenance stamped on the first line, if any.
pub fn read_jsonl_with_provenance(
    path: &Path,
) -> Result<(Vec<InstructionSample>, Option<Provenance>)> {
    let lines = read_jsonl_records::<SampleLine>(path)?;
    let provenance = lines.first().and_then(|l| {
        Some(Provenance {
            config_digest: l.config_digest.clone()?,
            seed: l.seed?,
        })
    });
    Ok((
        lines.into_iter().map(InstructionSample::from).collect(),
        provenance,
    ))
}

/// True when a JSON value looks like an instruction-sample line.
pub fn is_sample_line(v: &Value) -> bool {
    v.get("sample_id").is_some() && v.get("target").is_some() && v.get("instruction").is_some()
}
