use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use medbench_core::dataset::{
    build_dataset, emit_jsonl, read_jsonl_records, read_jsonl_with_provenance, split_dataset,
    write_jsonl_atomic, BuildManifest, BuildStats, InstructionSample, SplitSpec,
};
use medbench_core::digest::{bytes_digest, config_digest, Provenance};
use medbench_core::eval::{evaluate_all, join_predictions, parse_responses, PredictionRecord};
use medbench_core::manifest::{training_manifest, TrainingConfig};
use medbench_core::metrics::{threshold_sweep, EvalOptions};
use medbench_core::model::{LabelNormalizer, TaskKind};
use medbench_core::parser::{parse_response, ParseContext};
use medbench_core::prompt::QuestionBank;
use medbench_core::report::{render_report, EvalReport, ReportFormat};
use medbench_infer::{replay_log, run_inference, EndpointConfig, RunOptions};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{BuildArgs, EvalArgs, InferArgs, ManifestArgs, ParseArgs, ReportArgs};
use crate::error::{CliError, Result};

fn file_digest(path: &Path) -> Result<String> {
    fs::read(path)
        .map(|b| bytes_digest(&b))
        .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Data(format!("creating {}: {e}", dir.display())))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, text)
        .and_then(|()| fs::rename(&tmp, path))
        .map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

// ---------------------------------------------------------------- build

#[derive(Serialize)]
struct BuildConfig<'a> {
    manifest: &'a BuildManifest,
    question_bank: &'a QuestionBank,
    labels: &'a LabelNormalizer,
    split: &'a SplitSpec,
}

#[derive(Serialize)]
struct SplitSummary {
    path: PathBuf,
    images: usize,
    samples: usize,
    per_task: BTreeMap<TaskKind, usize>,
    sha256: String,
}

fn summarize(samples: &[InstructionSample], path: &Path) -> Result<SplitSummary> {
    let mut per_task = BTreeMap::new();
    let mut images = std::collections::BTreeSet::new();
    for s in samples {
        *per_task.entry(s.task).or_insert(0) += 1;
        images.insert(&s.image.id);
    }
    Ok(SplitSummary {
        path: path.to_path_buf(),
        images: images.len(),
        samples: samples.len(),
        per_task,
        sha256: file_digest(path)?,
    })
}

pub fn build(a: &BuildArgs) -> Result<()> {
    let manifest = BuildManifest::load(&a.manifest)?;
    let bank = match &a.question_bank {
        Some(p) => QuestionBank::load(p)?,
        None => QuestionBank::default(),
    };
    bank.check()?;
    let mut labels = LabelNormalizer::default();
    for alias in &a.label_alias {
        let (from, to) = alias.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("--label-alias expects FROM=TO, got '{alias}'"))
        })?;
        labels
            .aliases
            .insert(from.trim().to_lowercase(), to.trim().to_lowercase());
    }
    let split = SplitSpec {
        seed: a.seed,
        test_size: a.test_size,
        stratify: a.stratify,
        unit: a.test_unit,
    };
    let digest = config_digest(&BuildConfig {
        manifest: &manifest,
        question_bank: &bank,
        labels: &labels,
        split: &split,
    });
    let prov = Provenance {
        config_digest: digest.clone(),
        seed: a.seed,
    };

    let (samples, stats): (_, BuildStats) = build_dataset(&manifest, &bank, &labels, a.seed)?;
    let (train, test) = split_dataset(samples, &split)?;

    fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Data(format!("creating {}: {e}", a.out_dir.display())))?;
    let train_path = a.out_dir.join("train.jsonl");
    let test_path = a.out_dir.join("test.jsonl");
    emit_jsonl(&train, &train_path, Some(&prov))?;
    emit_jsonl(&test, &test_path, Some(&prov))?;

    let meta = json!({
        "format": "medbench-build/1",
        "config_digest": digest,
        "seed": a.seed,
        "question_bank": bank.version,
        "split": split,
        "stats": stats,
        "train": summarize(&train, &train_path)?,
        "test": summarize(&test, &test_path)?,
    });
    let text = pretty(&meta)?;
    write_text(&a.out_dir.join("build.json"), &text)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------- infer

pub fn infer(a: &InferArgs) -> Result<()> {
    let (mut samples, prov) = read_jsonl_with_provenance(&a.dataset)?;
    if let Some(t) = a.task {
        samples.retain(|s| s.task == t);
    }
    let cfg = EndpointConfig {
        base_url: a.endpoint.clone(),
        model: a.model.clone(),
        api_key_env: a.api_key_env.clone(),
        timeout_secs: a.timeout,
        max_retries: a.max_retries,
        backoff_base_secs: a.backoff_base,
        max_in_flight: a.concurrency,
        temperature: a.temperature,
        max_tokens: a.max_tokens,
        resize_images: !a.no_resize,
    };
    cfg.check()?;
    let digest = config_digest(&json!({
        "endpoint": cfg,
        "dataset": file_digest(&a.dataset)?,
        "task": a.task,
        "seed": prov.as_ref().map(|p| p.seed),
    }));
    let opts = RunOptions {
        retry_failed: a.retry_failed,
        config_digest: Some(digest.clone()),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Data(format!("starting runtime: {e}")))?;
    let summary = runtime.block_on(run_inference(&samples, &cfg, &a.out, &opts))?;
    if summary.failed > 0 {
        tracing::warn!(failed = summary.failed, "some samples failed; see the log");
    }
    print!(
        "{}",
        pretty(&json!({
            "config_digest": digest,
            "log": a.out,
            "total": summary.total,
            "skipped": summary.skipped,
            "succeeded": summary.succeeded,
            "failed": summary.failed,
            "http_requests": summary.http_requests,
        }))?
    );
    Ok(())
}

// ---------------------------------------------------------------- parse

/// `(sample_id, text)` pairs from a responses file. Failed log entries
/// become empty text.
fn read_responses(path: &Path) -> Result<Vec<(String, String)>> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Data(format!("opening {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{}:{}", path.display(), i + 1);
        let v: Value =
            serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}: {e}", at())))?;
        let id = v
            .get("sample_id")
            .and_then(Value::as_str)
            .ok_or_else(|| CliError::Data(format!("{}: missing sample_id", at())))?;
        let failed = v.get("status").and_then(Value::as_str) == Some("failed");
        let text = if failed {
            ""
        } else {
            v.get("response")
                .or_else(|| v.get("text"))
                .and_then(Value::as_str)
                .ok_or_else(|| CliError::Data(format!("{}: missing response text", at())))?
        };
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

fn stamp(records: &mut [PredictionRecord], prov: &Provenance) {
    for r in records {
        r.config_digest = Some(prov.config_digest.clone());
        r.seed = Some(prov.seed);
    }
}

pub fn parse(a: &ParseArgs) -> Result<()> {
    let responses = read_responses(&a.input)?;
    let mut records = match &a.dataset {
        Some(ds) => {
            let mut samples = medbench_core::dataset::read_jsonl(ds)?;
            if let Some(t) = a.task {
                samples.retain(|s| s.task == t);
                let keep: std::collections::HashSet<&str> =
                    samples.iter().map(|s| s.sample_id.as_str()).collect();
                let filtered: Vec<(&str, &str)> = responses
                    .iter()
                    .filter(|(id, _)| keep.contains(id.as_str()))
                    .map(|(id, t)| (id.as_str(), t.as_str()))
                    .collect();
                parse_responses(&samples, filtered)?
            } else {
                parse_responses(
                    &samples,
                    responses.iter().map(|(id, t)| (id.as_str(), t.as_str())),
                )?
            }
        }
        None => {
            let task = a.task.ok_or_else(|| {
                CliError::Usage("parse needs --task when --dataset is not given".into())
            })?;
            let ctx = ParseContext::unbounded(task);
            responses
                .iter()
                .map(|(id, text)| PredictionRecord {
                    sample_id: id.clone(),
                    task,
                    prediction: parse_response(text, &ctx),
                    config_digest: None,
                    seed: None,
                })
                .collect()
        }
    };
    let seed = match &a.dataset {
        Some(ds) => read_jsonl_with_provenance(ds)?.1.map_or(0, |p| p.seed),
        None => 0,
    };
    let digest = config_digest(&json!({
        "input": file_digest(&a.input)?,
        "dataset": a.dataset.as_deref().map(file_digest).transpose()?,
        "task": a.task,
    }));
    stamp(
        &mut records,
        &Provenance {
            config_digest: digest,
            seed,
        },
    );
    write_jsonl_atomic(&records, &a.out)?;
    let failed = records.iter().filter(|r| r.prediction.is_failed()).count();
    tracing::info!(parsed = records.len(), failed, "wrote {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------- eval

fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let bad = || CliError::Usage(format!("--map-sweep expects start:step:stop, got '{s}'"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [start, step, stop] = parts[..] else {
        return Err(bad());
    };
    let sweep = threshold_sweep(start, step, stop);
    if sweep.is_empty() || sweep.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(bad());
    }
    Ok(sweep)
}

fn is_response_log(path: &Path) -> Result<bool> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Data(format!("opening {}: {e}", path.display())))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)?;
        return Ok(v.get("fingerprint").is_some() && v.get("response").is_some());
    }
    Ok(false)
}

/// Rendered comparison plus a provenance stamp in a form each format
/// tolerates. The stamp depends on the reports only, not on the format.
pub fn render_with_provenance(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    let digest = config_digest(
        &reports
            .iter()
            .map(|r| json!({"system": r.system, "config_digest": r.config_digest, "inputs": r.inputs}))
            .collect::<Vec<_>>(),
    );
    let table = render_report(reports, format)?;
    Ok(match format {
        ReportFormat::Markdown => format!("{table}\n<!-- config_digest: {digest} -->\n"),
        ReportFormat::Csv => format!("# config_digest: {digest}\n{table}"),
        ReportFormat::Json => {
            let mut v: Value = serde_json::from_str(&table)?;
            v["config_digest"] = Value::String(digest);
            pretty(&v)?
        }
    })
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let only: Option<TaskKind> = match a.task.as_str() {
        "all" => None,
        t => Some(t.parse().map_err(CliError::Usage)?),
    };
    let opts = EvalOptions {
        match_threshold: a.match_threshold,
        averaging: a.averaging,
        map_sweep: parse_sweep(&a.map_sweep)?,
    };
    if !(a.match_threshold.is_finite() && a.match_threshold >= 0.0) {
        return Err(CliError::Usage(
            "--match-threshold must be a non-negative number".into(),
        ));
    }

    let (mut truth, prov) = read_jsonl_with_provenance(&a.truth)?;
    if let Some(t) = only {
        truth.retain(|s| s.task == t);
    }
    let preds: Vec<PredictionRecord> = if is_response_log(&a.pred)? {
        let texts = replay_log(&a.pred, &truth)?;
        parse_responses(
            &truth,
            texts.iter().map(|(id, t)| (id.as_str(), t.as_str())),
        )?
    } else {
        let mut p: Vec<PredictionRecord> = read_jsonl_records(&a.pred)?;
        if let Some(t) = only {
            p.retain(|r| r.task == t);
        }
        p
    };
    let pairs = join_predictions(&truth, &preds)?;
    let tasks = evaluate_all(pairs, only, &opts)?;

    let system = a.system.clone().unwrap_or_else(|| {
        a.pred.file_stem().map_or_else(
            || "system".to_string(),
            |s| s.to_string_lossy().into_owned(),
        )
    });
    let mut report = EvalReport::new(system, opts, tasks).with_seed(prov.map(|p| p.seed));
    report.inputs = HashMap::from([
        ("truth".to_string(), file_digest(&a.truth)?),
        ("pred".to_string(), file_digest(&a.pred)?),
    ])
    .into_iter()
    .collect();
    write_text(&a.out, &pretty(&report)?)?;
    if let Some(fmt) = a.render {
        print!(
            "{}",
            render_with_provenance(std::slice::from_ref(&report), fmt)?
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- report

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(a.system.len());
    for spec in &a.system {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) if !n.is_empty() => (Some(n.to_string()), PathBuf::from(p)),
            _ => (None, PathBuf::from(spec)),
        };
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        let mut r: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if let Some(n) = name {
            r.system = n;
        }
        reports.push(r);
    }
    emit(
        a.out.as_deref(),
        &render_with_provenance(&reports, a.format)?,
    )
}

// ---------------------------------------------------------------- manifest

pub fn manifest(a: &ManifestArgs) -> Result<()> {
    if !a.dataset.is_file() {
        return Err(CliError::Data(format!(
            "dataset {} does not exist",
            a.dataset.display()
        )));
    }
    let mut cfg = TrainingConfig::default();
    if let Some(v) = a.rank {
        cfg.adapter_rank = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.micro_batch_size {
        cfg.micro_batch_size = v;
    }
    if let Some(v) = a.gradient_accumulation_steps {
        cfg.gradient_accumulation_steps = v;
    }
    if let Some(v) = a.eval_interval_steps {
        cfg.eval_interval_steps = v;
    }
    if let Some(v) = &a.optimizer {
        cfg.optimizer = v.clone();
    }
    if a.unfreeze_vision_encoder {
        cfg.freeze_vision_encoder = false;
    }
    cfg.seed = match a.seed {
        Some(s) => s,
        None => read_jsonl_with_provenance(&a.dataset)?
            .1
            .map_or(0, |p| p.seed),
    };
    let m = training_manifest(&cfg, &a.dataset)?;
    emit(a.out.as_deref(), &m.to_json())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_syntax() {
        assert_eq!(parse_sweep("0.5:0.05:0.95").unwrap().len(), 10);
        assert_eq!(parse_sweep("0.5:0.25:1").unwrap(), vec![0.5, 0.75, 1.0]);
        assert!(parse_sweep("0.5:0.05").is_err());
        assert!(parse_sweep("0.5:0.5:1.5").is_err());
    }

    #[test]
    fn responses_from_logs_and_plain_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        fs::write(
            &path,
            "{\"sample_id\":\"a\",\"status\":\"ok\",\"response\":\"{}\"}\n\n\
             {\"sample_id\":\"b\",\"status\":\"failed\",\"response\":\"\"}\n\
             {\"sample_id\":\"c\",\"text\":\"hi\"}\n",
        )
        .unwrap();
        let got = read_responses(&path).unwrap();
        let want = [("a", "{}"), ("b", ""), ("c", "hi")];
        assert_eq!(got.len(), 3);
        for ((id, text), (wid, wtext)) in got.iter().zip(want) {
            assert_eq!((id.as_str(), text.as_str()), (wid, wtext));
        }
        fs::write(&path, "{\"text\":\"x\"}\n").unwrap();
        assert!(matches!(read_responses(&path), Err(CliError::Data(_))));
    }
}
