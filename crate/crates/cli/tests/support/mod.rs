//! Synthetic datasets, a mock endpoint and a runner for the `bench` binary.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use medbench_core::dataset::{read_jsonl, InstructionSample};
use medbench_infer::mock::{request_parts, MockReply, MockServer};
use medbench_infer::{encode_request, EndpointConfig};
use serde_json::Value;

pub const BIN: &str = env!("CARGO_BIN_EXE_bench");

pub fn bench(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("MEDBENCH_API_KEY")
        .output()
        .expect("bench binary runs")
}

/// Run `bench`, panicking with its stderr unless it exits 0.
pub fn bench_ok(args: &[&str]) -> String {
    let out = bench(args);
    assert!(
        out.status.success(),
        "bench {} failed ({:?}): {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Layout of a synthetic three-source collection.
pub struct Synthetic {
    pub images: usize,
    /// Every `zero_every`-th image has no findings.
    pub zero_every: usize,
    /// Every `large_every`-th endoscopy image is 1400 px wide and gets shrunk.
    pub large_every: usize,
}

impl Default for Synthetic {
    fn default() -> Self {
        Synthetic {
            images: 50,
            zero_every: 7,
            large_every: 5,
        }
    }
}

impl Synthetic {
    /// Write images, annotation files and `manifest.toml` under `dir`.
    /// Images cycle through polyp, instrument and sperm sources; endoscopy
    /// records carry boxes plus their centers, sperm records points only.
    pub fn write(&self, dir: &Path) -> PathBuf {
        let kinds = [
            ("polyp", "polyp"),
            ("instrument", "instrument"),
            ("sperm-normal", "sperm"),
        ];
        let mut lines: HashMap<&str, String> = HashMap::new();
        for (kind, _) in kinds {
            fs::create_dir_all(dir.join(kind)).unwrap();
        }
        for i in 0..self.images {
            let (kind, _) = kinds[i % 3];
            let findings = if i % self.zero_every == 0 {
                0
            } else {
                1 + i % 3
            };
            let scale = if kind != "sperm-normal" && i % self.large_every == 1 {
                2
            } else {
                1
            };
            let (w, h) = (640 * scale, 480 * scale);
            let name = format!("img{i:03}.png");
            let px = [(i * 37 % 256) as u8, (i * 91 % 256) as u8, (i / 256) as u8];
            image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb(px))
                .save(dir.join(kind).join(&name))
                .unwrap();

            let mut boxes = Vec::new();
            let mut points = Vec::new();
            for j in 0..findings {
                let x = 40 + j * 150;
                let y = 60 + (i % 5) * 30;
                boxes.push(format!(
                    "[{}, {}, {}, {}]",
                    x * scale,
                    y * scale,
                    (x + 80) * scale,
                    (y + 60) * scale
                ));
                points.push(format!("[{}, {}]", (x + 40) * scale, (y + 30) * scale));
            }
            let line = lines.entry(kind).or_default();
            if kind == "sperm-normal" {
                let _ = writeln!(
                    line,
                    "{{\"image\": \"{name}\", \"point_2d\": [{}]}}",
                    points.join(", ")
                );
            } else {
                let _ = writeln!(
                    line,
                    "{{\"image\": \"{name}\", \"bbox_2d\": [{}], \"point_2d\": [{}]}}",
                    boxes.join(", "),
                    points.join(", ")
                );
            }
        }
        let mut manifest = String::new();
        for (kind, label) in kinds {
            let ann = format!("{kind}.jsonl");
            fs::write(dir.join(&ann), lines.get(kind).map_or("", String::as_str)).unwrap();
            let _ = writeln!(
                manifest,
                "[[sources]]\nkind = \"{kind}\"\nannotations = [\"{ann}\"]\nimages = \"{kind}\"\nlabel = \"{label}\"\n"
            );
        }
        let path = dir.join("manifest.toml");
        fs::write(&path, manifest).unwrap();
        path
    }
}

/// Build a dataset whose test split holds `test_images` images. Returns the
/// test split path.
pub fn build(dir: &Path, spec: &Synthetic, test_images: usize) -> PathBuf {
    let manifest = spec.write(&dir.join("raw"));
    let out = dir.join("data");
    bench_ok(&[
        "build",
        "--manifest",
        p(&manifest),
        "--out-dir",
        p(&out),
        "--test-size",
        &test_images.to_string(),
        "--seed",
        "7",
    ]);
    out.join("test.jsonl")
}

/// Request content (instruction, image data URI) to the canonical target of
/// the sample it came from. Assumes the CLI's default upload settings.
pub fn target_map(samples: &[InstructionSample]) -> HashMap<(String, String), String> {
    let cfg = EndpointConfig::default();
    samples
        .iter()
        .map(|s| {
            let body = encode_request(s, &cfg).body.expect("readable image");
            (request_parts(&body).expect("chat body"), s.target.clone())
        })
        .collect()
}

/// Shift every `point_2d` entry of a canonical target by `(dx, dy)`.
pub fn jitter(target: &str, dx: f64, dy: f64) -> String {
    let mut v: Value = serde_json::from_str(target).expect("canonical target is JSON");
    if let Some(points) = v.get_mut("point_2d").and_then(Value::as_array_mut) {
        for pt in points {
            let x = pt[0].as_f64().unwrap() + dx;
            let y = pt[1].as_f64().unwrap() + dy;
            *pt = serde_json::json!([x, y]);
        }
    }
    v.to_string()
}

/// Mock endpoint answering each request with `reply(target)`.
pub async fn echo_server<F>(dataset: &Path, reply: F) -> MockServer
where
    F: Fn(&str) -> MockReply + Send + Sync + 'static,
{
    let map = target_map(&read_jsonl(dataset).unwrap());
    MockServer::start(move |body| {
        let key = request_parts(body).expect("chat body");
        match map.get(&key) {
            Some(t) => reply(t),
            None => MockReply::error(400),
        }
    })
    .await
    .unwrap()
}

pub fn infer_args<'a>(
    dataset: &'a str,
    url: &'a str,
    log: &'a str,
    concurrency: &'a str,
) -> Vec<&'a str> {
    vec![
        "infer",
        "--dataset",
        dataset,
        "--endpoint",
        url,
        "--model",
        "mock",
        "--out",
        log,
        "--concurrency",
        concurrency,
        "--backoff-base",
        "0.01",
        "-q",
    ]
}

/// Read an eval report written by `bench eval`.
pub fn read_report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

pub fn task_metric(report: &Value, task: &str, metric: &str) -> Option<f64> {
    report["tasks"]
        .as_array()?
        .iter()
        .find(|t| t["task"] == task)?
        .get(metric)?
        .as_f64()
}
