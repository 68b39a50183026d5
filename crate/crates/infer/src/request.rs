//! Chat-completions payloads and request fingerprints.

use std::io::Cursor;
use std::path::Path;

use base64::Engine as _;
use image::imageops::FilterType;
use image::ImageFormat;
use medbench_core::dataset::InstructionSample;
use medbench_core::digest::{bytes_digest, config_digest};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::EndpointConfig;

/// A ready-to-send request, or the reason none could be built.
#[derive(Debug, Clone)]
pub struct EncodedRequest {
    pub sample_id: String,
    pub fingerprint: String,
    pub body: Result<Value, String>,
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    instruction: &'a str,
    image: &'a str,
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    resize: Option<(u32, u32)>,
}

/// Hash of everything that determines the model's answer: instruction text,
/// image bytes, model name and decoding parameters.
pub fn fingerprint(sample: &InstructionSample, image_digest: &str, cfg: &EndpointConfig) -> String {
    let resize = (cfg.resize_images && sample.image.scale < 1.0)
        .then_some((sample.image.eval_width, sample.image.eval_height));
    config_digest(&FingerprintInput {
        instruction: &sample.instruction,
        image: image_digest,
        model: &cfg.model,
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        resize,
    })
}

fn mime_for(path: &Path) -> &'static str {
    ImageFormat::from_path(path)
        .map(|f| f.to_mime_type())
        .unwrap_or("application/octet-stream")
}

/// Bytes and MIME type to upload. Images that need downscaling are decoded,
/// resized to the evaluation size and re-encoded as PNG.
fn upload_image(
    sample: &InstructionSample,
    bytes: Vec<u8>,
    cfg: &EndpointConfig,
) -> Result<(Vec<u8>, &'static str), String> {
    let path = Path::new(&sample.image.uri);
    if !(cfg.resize_images && sample.image.scale < 1.0) {
        return Ok((bytes, mime_for(path)));
    }
    let img =
        image::load_from_memory(&bytes).map_err(|e| format!("decoding {}: {e}", path.display()))?;
    let small = img.resize_exact(
        sample.image.eval_width,
        sample.image.eval_height,
        FilterType::Triangle,
    );
    let mut out = Cursor::new(Vec::new());
    small
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| format!("encoding {}: {e}", path.display()))?;
    Ok((out.into_inner(), "image/png"))
}

pub fn chat_body(instruction: &str, data_uri: &str, cfg: &EndpointConfig) -> Value {
    json!({
        "model": cfg.model,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "image_url", "image_url": {"url": data_uri}},
                {"type": "text", "text": instruction},
            ],
        }],
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
    })
}

/// Build the request for one sample. An unreadable image yields a request
/// whose body is an error; it is logged as failed without any HTTP call.
pub fn encode_request(sample: &InstructionSample, cfg: &EndpointConfig) -> EncodedRequest {
    let (fingerprint, body) = match std::fs::read(&sample.image.uri) {
        Ok(bytes) => {
            let fp = fingerprint(sample, &bytes_digest(&bytes), cfg);
            let body = upload_image(sample, bytes, cfg).map(|(data, mime)| {
                let b64 = base64::engine::general_purpose::STANDARD.encode(data);
                chat_body(
                    &sample.instruction,
                    &format!("data:{mime};base64,{b64}"),
                    cfg,
                )
            });
            (fp, body)
        }
        Err(e) => (
            fingerprint(sample, &format!("unreadable:{}", sample.image.uri), cfg),
            Err(format!("reading image {}: {e}", sample.image.uri)),
        ),
    };
    EncodedRequest {
        sample_id: sample.sample_id.clone(),
        fingerprint,
        body,
    }
}

/// Text of the first choice of a chat-completions response.
pub fn response_text(body: &Value) -> Option<String> {
    let content = body.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        Value::Null => Some(String::new()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use medbench_core::model::{ImageRecord, SourceKind, TaskKind};

    fn sample(uri: &str, instruction: &str, width: u32) -> InstructionSample {
        InstructionSample {
            sample_id: "s1".into(),
            image: ImageRecord::new("polyp/a.png", SourceKind::Polyp, width, width / 2, uri)
                .unwrap(),
            task: TaskKind::CountOnly,
            instruction: instruction.into(),
            target: r#"{"counts": 1, "label": "polyp"}"#.into(),
            label: "polyp".into(),
        }
    }

    fn png(dir: &Path, w: u32, h: u32) -> String {
        let path = dir.join(format!("img_{w}x{h}.png"));
        image::RgbImage::from_pixel(w, h, image::Rgb([10, 200, 30]))
            .save(&path)
            .unwrap();
        path.to_string_lossy().into_owned()
    }

    #[test]
    fn text_part_is_the_instruction_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let instruction = "How many polyps?\n  Respond with \"JSON\" only. ünïcode";
        let s = sample(&png(dir.path(), 20, 10), instruction, 20);
        let req = encode_request(&s, &EndpointConfig::default());
        let body = req.body.unwrap();
        assert_eq!(
            body.pointer("/messages/0/content/1/text").unwrap(),
            instruction
        );
        let url = body
            .pointer("/messages/0/content/0/image_url/url")
            .unwrap()
            .as_str()
            .unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
        assert_eq!(body["temperature"], 0.0);
    }

    #[test]
    fn fingerprint_is_deterministic_and_covers_instruction() {
        let dir = tempfile::tempdir().unwrap();
        let uri = png(dir.path(), 20, 10);
        let cfg = EndpointConfig::default();
        let a = encode_request(&sample(&uri, "Count the polyps.", 20), &cfg);
        let b = encode_request(&sample(&uri, "Count the polyps.", 20), &cfg);
        let c = encode_request(&sample(&uri, "How many polyps are there?", 20), &cfg);
        assert_eq!(a.fingerprint, b.fingerprint);
        assert_ne!(a.fingerprint, c.fingerprint);
        let other_model = EndpointConfig {
            model: "other".into(),
            ..cfg
        };
        assert_ne!(
            encode_request(&sample(&uri, "Count the polyps.", 20), &other_model).fingerprint,
            a.fingerprint
        );
    }

    #[test]
    fn wide_images_are_downscaled_for_upload() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(&png(dir.path(), 1400, 700), "q", 1400);
        let body = encode_request(&s, &EndpointConfig::default()).body.unwrap();
        let url = body
            .pointer("/messages/0/content/0/image_url/url")
            .unwrap()
            .as_str()
            .unwrap();
        let b64 = url.split_once(',').unwrap().1;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64)
            .unwrap();
        let img = image::load_from_memory(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (700, 350));
    }

    #[test]
    fn unreadable_image_has_no_body() {
        let req = encode_request(
            &sample("/nonexistent/a.png", "q", 20),
            &EndpointConfig::default(),
        );
        assert!(req.body.unwrap_err().contains("reading image"));
    }

    #[test]
    fn response_text_variants() {
        let s = json!({"choices": [{"message": {"content": "{\"counts\": 2}"}}]});
        assert_eq!(response_text(&s).unwrap(), "{\"counts\": 2}");
        let parts = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(response_text(&parts).unwrap(), "ab");
        assert!(response_text(&json!({"error": "x"})).is_none());
    }
}
