//! Prompt-guided post-reconstruction boosting: describe a reconstruction,
//! compose the refinement prompt, refine through image-to-image diffusion.
//!
//! The describer is pluggable. The mock variant is deterministic and uses the
//! semantic decoder's predicted class for the source trial; the remote
//! variant speaks a small HTTP contract so a real multimodal model can be
//! plugged in without this crate bundling one. Boosting reads only the
//! reconstructed image, the prompts, loaded weights, and a seed; it never
//! touches EEG data or training state.

use base64::Engine as _;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionError, Engine};

/// System prompt sent to the describer, byte-exact golden fixture.
pub const SYSTEM_PROMPT: &str = include_str!("../fixtures/prompts/system_prompt.txt");
/// User prompt sent to the describer, byte-exact golden fixture.
pub const USER_PROMPT: &str = include_str!("../fixtures/prompts/user_prompt.txt");
/// Refinement prompt template; `[d]` is replaced by the description.
pub const REFINE_TEMPLATE: &str = include_str!("../fixtures/prompts/refine_template.txt");

#[derive(Debug, thiserror::Error)]
pub enum BoostError {
    #[error("remote describer timed out after {attempts} attempt(s)")]
    RemoteTimeout { attempts: u32 },
    #[error("remote describer returned a malformed response: {0}")]
    RemoteMalformedResponse(String),
    #[error("describer unavailable: {0}")]
    DescriberUnavailable(String),
    #[error("description must be a single non-empty line")]
    EmptyDescription,
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Remote describer wire settings. The endpoint receives
/// `POST {system, user, image_base64_png}` and must answer
/// `200 {"description": "..."}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub url: String,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            url: "http://127.0.0.1:8677/describe".into(),
            timeout_secs: 30,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Describer {
    /// Deterministic: "a <predicted class>", needs the decoder's prediction.
    Mock,
    Remote(RemoteConfig),
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    system: &'a str,
    user: &'a str,
    image_base64_png: String,
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    description: String,
}

/// The composed refinement prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinementPrompt {
    pub description: String,
    pub text: String,
}

/// Validates a describer answer: one non-empty line, no banned opener, at
/// most one sentence (periods inside common abbreviations and decimals are
/// not counted).
pub fn validate_sentence(raw: &str) -> Result<String, BoostError> {
    let s = raw.trim();
    if s.is_empty() {
        return Err(BoostError::RemoteMalformedResponse("empty".into()));
    }
    if s.contains('\n') {
        return Err(BoostError::RemoteMalformedResponse(
            "multiple paragraphs".into(),
        ));
    }
    let lower = s.to_lowercase();
    for banned in ["the image shows", "the image depicts"] {
        if lower.starts_with(banned) {
            return Err(BoostError::RemoteMalformedResponse(format!(
                "banned opener '{banned}'"
            )));
        }
    }
    if sentence_period_count(s) > 1 {
        return Err(BoostError::RemoteMalformedResponse(
            "more than one sentence".into(),
        ));
    }
    Ok(s.to_string())
}

const ABBREVIATIONS: [&str; 7] = ["e.g", "i.e", "etc", "vs", "mr", "dr", "no"];

fn sentence_period_count(s: &str) -> usize {
    let bytes = s.as_bytes();
    let mut count = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if b != b'.' {
            continue;
        }
        // decimal point
        let prev_digit = i > 0 && bytes[i - 1].is_ascii_digit();
        let next_digit = i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit();
        if prev_digit && next_digit {
            continue;
        }
        // known abbreviation directly before the period
        let prefix = &s[..i].to_lowercase();
        if ABBREVIATIONS.iter().any(|a| prefix.ends_with(a)) {
            continue;
        }
        count += 1;
    }
    count
}

/// Extracts a one-sentence description of a reconstruction.
///
/// `semantic_hint` carries the semantic decoder's predicted class name for
/// the source trial; the mock describer requires it, the remote one ignores
/// it and sends the golden system/user prompts with the PNG image.
pub fn describe(
    image: &RgbImage,
    describer: &Describer,
    semantic_hint: Option<&str>,
) -> Result<String, BoostError> {
    match describer {
        Describer::Mock => {
            let hint = semantic_hint.ok_or_else(|| {
                BoostError::DescriberUnavailable(
                    "mock describer needs the decoder's predicted class".into(),
                )
            })?;
            Ok(format!("a {hint}"))
        }
        Describer::Remote(cfg) => describe_remote(image, cfg),
    }
}

fn encode_png_base64(image: &RgbImage) -> String {
    let mut bytes = Vec::new();
    image
        .write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .expect("in-memory png encode");
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn describe_remote(image: &RgbImage, cfg: &RemoteConfig) -> Result<String, BoostError> {
    let body = RemoteRequest {
        system: SYSTEM_PROMPT,
        user: USER_PROMPT,
        image_base64_png: encode_png_base64(image),
    };
    let agent = ureq::AgentBuilder::new()
        .timeout(std::time::Duration::from_secs(cfg.timeout_secs))
        .build();
    let attempts = cfg.retries + 1;
    let mut last_err = String::new();
    for _ in 0..attempts {
        match agent.post(&cfg.url).send_json(&body) {
            Ok(resp) => {
                let parsed: RemoteResponse = resp.into_json().map_err(|e| {
                    BoostError::RemoteMalformedResponse(format!("bad json: {e}"))
                })?;
                return validate_sentence(&parsed.description);
            }
            Err(ureq::Error::Status(code, _)) => {
                last_err = format!("status {code}");
            }
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") || msg.contains("timeout") {
                    return Err(BoostError::RemoteTimeout { attempts });
                }
                last_err = msg;
            }
        }
    }
    Err(BoostError::DescriberUnavailable(format!(
        "{} after {attempts} attempt(s): {last_err}",
        cfg.url
    )))
}

/// Substitutes the description into the refinement template, byte-exact
/// elsewhere.
pub fn compose_prompt(description: &str) -> Result<RefinementPrompt, BoostError> {
    let d = description.trim();
    if d.is_empty() || d.contains('\n') {
        return Err(BoostError::EmptyDescription);
    }
    Ok(RefinementPrompt {
        description: d.to_string(),
        text: REFINE_TEMPLATE.replace("[d]", d),
    })
}

/// Everything a boosted sample records in its sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct BoostOutcome {
    #[serde(skip)]
    pub image: RgbImage,
    pub description: String,
    pub prompt: String,
    pub strength: f64,
    pub gamma: f64,
    pub steps: usize,
    pub seed: u64,
}

/// Describe, compose, refine. Output dimensions equal the input's.
#[allow(clippy::too_many_arguments)]
pub fn boost(
    image: &RgbImage,
    describer: &Describer,
    engine: &Engine,
    strength: f64,
    gamma: f64,
    steps: usize,
    seed: u64,
    semantic_hint: Option<&str>,
) -> Result<BoostOutcome, BoostError> {
    let description = describe(image, describer, semantic_hint)?;
    let prompt = compose_prompt(&description)?;
    let emb = engine.text.embed(&prompt.text);
    let refined = engine.img2img(image, &emb, strength, gamma, steps, seed)?;
    debug_assert_eq!(refined.dimensions(), image.dimensions());
    Ok(BoostOutcome {
        image: refined,
        description: prompt.description,
        prompt: prompt.text,
        strength,
        gamma,
        steps,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn sha(s: &str) -> String {
        format!("{:x}", Sha256::digest(s.as_bytes()))
    }

    #[test]
    fn prompt_fixtures_match_frozen_hashes() {
        assert_eq!(
            sha(SYSTEM_PROMPT),
            "d428ff011a6316f2f8c3444d70988561f57805a24c6e2de4f9fa87ef791d5567"
        );
        assert_eq!(
            sha(USER_PROMPT),
            "1c37bd4a46e9e1e441cab24bfec3fc6ddb7f0334a930fe81273cfc66794c1cff"
        );
        assert_eq!(
            sha(REFINE_TEMPLATE),
            "c873f115885f19c584325da14c808d07ac846975c1760c1ce5c3debcb995820f"
        );
    }

    #[test]
    fn compose_substitutes_byte_exactly() {
        let p = compose_prompt("red sports car").unwrap();
        assert!(p.text.starts_with("A realistic, high-quality photo of a red sports car, with clean and correct geometry"));
        assert!(p.text.ends_with("logically and realistically aligned."));
        assert_eq!(p.text, REFINE_TEMPLATE.replace("[d]", "red sports car"));
        assert!(matches!(compose_prompt(""), Err(BoostError::EmptyDescription)));
        assert!(matches!(
            compose_prompt("two\nlines"),
            Err(BoostError::EmptyDescription)
        ));
    }

    #[test]
    fn mock_describer_is_deterministic_and_needs_a_hint() {
        let img = RgbImage::new(4, 4);
        let d = describe(&img, &Describer::Mock, Some("panda")).unwrap();
        assert_eq!(d, "a panda");
        assert_eq!(describe(&img, &Describer::Mock, Some("panda")).unwrap(), d);
        assert!(matches!(
            describe(&img, &Describer::Mock, None),
            Err(BoostError::DescriberUnavailable(_))
        ));
    }

    #[test]
    fn sentence_validation_heuristics() {
        assert_eq!(validate_sentence(" a cat. ").unwrap(), "a cat.");
        assert!(validate_sentence("a cat, e.g. a tabby, sitting").is_ok());
        assert!(validate_sentence("a price of 3.5 dollars").is_ok());
        assert!(matches!(
            validate_sentence(""),
            Err(BoostError::RemoteMalformedResponse(_))
        ));
        assert!(matches!(
            validate_sentence("The image shows a cat"),
            Err(BoostError::RemoteMalformedResponse(_))
        ));
        assert!(matches!(
            validate_sentence("the image depicts a dog"),
            Err(BoostError::RemoteMalformedResponse(_))
        ));
        assert!(matches!(
            validate_sentence("One sentence. And another."),
            Err(BoostError::RemoteMalformedResponse(_))
        ));
        assert!(matches!(
            validate_sentence("para one\n\npara two"),
            Err(BoostError::RemoteMalformedResponse(_))
        ));
    }

    /// Minimal single-request HTTP server for exercising the wire contract.
    fn one_shot_server(
        response_body: String,
    ) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut tmp = [0u8; 4096];
            let body_start;
            loop {
                let n = stream.read(&mut tmp).unwrap();
                buf.extend_from_slice(&tmp[..n]);
                if let Some(pos) = find_subslice(&buf, b"\r\n\r\n") {
                    body_start = pos + 4;
                    break;
                }
            }
            let header = String::from_utf8_lossy(&buf[..body_start]).to_string();
            let content_length: usize = header
                .lines()
                .find(|l| l.to_lowercase().starts_with("content-length"))
                .and_then(|l| l.split(':').nth(1))
                .and_then(|v| v.trim().parse().ok())
                .unwrap();
            while buf.len() < body_start + content_length {
                let n = stream.read(&mut tmp).unwrap();
                buf.extend_from_slice(&tmp[..n]);
            }
            let request_body =
                String::from_utf8_lossy(&buf[body_start..body_start + content_length]).to_string();
            let resp = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                response_body.len(),
                response_body
            );
            stream.write_all(resp.as_bytes()).unwrap();
            request_body
        });
        (format!("http://{addr}/describe"), handle)
    }

    fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
        haystack.windows(needle.len()).position(|w| w == needle)
    }

    #[test]
    fn remote_request_carries_the_golden_prompts_byte_exactly() {
        let (url, handle) =
            one_shot_server(r#"{"description": "a red circle on a light background"}"#.into());
        let cfg = RemoteConfig {
            url,
            timeout_secs: 5,
            retries: 0,
        };
        let img = RgbImage::from_pixel(8, 8, image::Rgb([200, 30, 40]));
        let d = describe(&img, &Describer::Remote(cfg), None).unwrap();
        assert_eq!(d, "a red circle on a light background");
        let request_body = handle.join().unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&request_body).unwrap();
        assert_eq!(parsed["system"].as_str().unwrap(), SYSTEM_PROMPT);
        assert_eq!(parsed["user"].as_str().unwrap(), USER_PROMPT);
        let png = base64::engine::general_purpose::STANDARD
            .decode(parsed["image_base64_png"].as_str().unwrap())
            .unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }

    #[test]
    fn remote_empty_description_is_malformed() {
        let (url, handle) = one_shot_server(r#"{"description": ""}"#.into());
        let cfg = RemoteConfig {
            url,
            timeout_secs: 5,
            retries: 0,
        };
        let img = RgbImage::new(4, 4);
        assert!(matches!(
            describe(&img, &Describer::Remote(cfg), None),
            Err(BoostError::RemoteMalformedResponse(_))
        ));
        handle.join().unwrap();
    }

    #[test]
    fn unreachable_remote_reports_unavailable_after_retries() {
        let cfg = RemoteConfig {
            // reserved port with nothing listening
            url: "http://127.0.0.1:9/describe".into(),
            timeout_secs: 1,
            retries: 1,
        };
        let img = RgbImage::new(4, 4);
        match describe(&img, &Describer::Remote(cfg), None) {
            Err(BoostError::DescriberUnavailable(_)) | Err(BoostError::RemoteTimeout { .. }) => {}
            other => panic!("expected unavailable/timeout, got {other:?}"),
        }
    }
}
