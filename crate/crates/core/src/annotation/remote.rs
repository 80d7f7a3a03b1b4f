//! Client for a chat-completions style vision-language endpoint.
//!
//! Requests carry the system prompt, the motion text and the four image
//! groups as base64 PNG data URLs. Transient failures (transport errors,
//! HTTP 429 and 5xx) are retried with exponential backoff. Successful
//! annotations are cached on disk under `<cache_dir>/<id>-<prompt hash>.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{build_prompt, parse_annotation, prompt_hash, LongTailAnnotation, ParseError, PromptBundle};
use crate::scenario::ScenarioRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub credential_env: String,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_initial_ms: u64,
    pub parallelism: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "vlm".into(),
            credential_env: "VLM_API_KEY".into(),
            timeout_secs: 120,
            max_attempts: 3,
            backoff_initial_ms: 500,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal blocking HTTP surface so tests can stub the network.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpResponse, String>;
}

/// Real transport backed by `ureq`.
#[derive(Debug, Default, Clone, Copy)]
pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpResponse, String> {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .http_status_as_error(false)
                .build(),
        );
        let mut resp = agent
            .post(url)
            .header("Authorization", format!("Bearer {bearer}"))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("network error: {0}")]
    Network(String),
    #[error("authentication error: {0}")]
    Auth(String),
    #[error("unparseable annotation ({error}); raw response preserved")]
    Parse { raw: String, error: String },
    #[error("gave up after {attempts} attempts; last error: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("cache io error at {path}: {reason}")]
    Cache { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteAnnotation {
    pub annotation: LongTailAnnotation,
    pub prompt_hash: String,
    /// Transport calls made for this result (0 on a cache hit).
    pub attempts: u32,
    pub from_cache: bool,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    id: String,
    prompt_hash: String,
    raw: String,
}

pub struct RemoteAnnotator<T: HttpTransport> {
    config: EndpointConfig,
    transport: T,
    cache_dir: PathBuf,
}

fn png_data_url(img: &crate::scenario::RgbImage) -> String {
    let b64 = base64::engine::general_purpose::STANDARD.encode(img.encode_png());
    format!("data:image/png;base64,{b64}")
}

pub(crate) fn request_body(model: &str, bundle: &PromptBundle) -> serde_json::Value {
    let mut content = vec![json!({ "type": "text", "text": bundle.motion_text })];
    for img in &bundle.image_groups {
        content.push(json!({ "type": "image_url", "image_url": { "url": png_data_url(img) } }));
    }
    json!({
        "model": model,
        "temperature": 0,
        "messages": [
            { "role": "system", "content": bundle.system_text },
            { "role": "user", "content": content },
        ],
    })
}

fn extract_content(body: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    v.pointer("/choices/0/message/content")?.as_str().map(str::to_string)
}

impl<T: HttpTransport> RemoteAnnotator<T> {
    pub fn new(config: EndpointConfig, transport: T, cache_dir: impl Into<PathBuf>) -> Self {
        RemoteAnnotator {
            config,
            transport,
            cache_dir: cache_dir.into(),
        }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn cache_path(&self, id: &str, hash: &str) -> PathBuf {
        self.cache_dir.join(format!("{id}-{}.json", &hash[..16]))
    }

    fn read_cache(&self, path: &Path, hash: &str) -> Option<LongTailAnnotation> {
        let text = fs::read_to_string(path).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        if entry.prompt_hash != hash {
            return None;
        }
        parse_annotation(&entry.raw).ok()
    }

    fn write_cache(&self, path: &Path, entry: &CacheEntry) -> Result<(), RemoteError> {
        let err = |e: &dyn std::fmt::Display| RemoteError::Cache {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        fs::create_dir_all(&self.cache_dir).map_err(|e| err(&e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.cache_dir).map_err(|e| err(&e))?;
        serde_json::to_writer(&mut tmp, entry).map_err(|e| err(&e))?;
        tmp.flush().map_err(|e| err(&e))?;
        tmp.persist(path).map_err(|e| err(&e.error))?;
        Ok(())
    }

    pub fn annotate(&self, record: &ScenarioRecord) -> Result<RemoteAnnotation, RemoteError> {
        let bundle = build_prompt(record);
        let hash = prompt_hash(&bundle);
        let cache_path = self.cache_path(&record.id, &hash);
        if let Some(annotation) = self.read_cache(&cache_path, &hash) {
            return Ok(RemoteAnnotation {
                annotation,
                prompt_hash: hash,
                attempts: 0,
                from_cache: true,
            });
        }

        let key = std::env::var(&self.config.credential_env).map_err(|_| {
            RemoteError::Auth(format!(
                "credential environment variable {} is not set",
                self.config.credential_env
            ))
        })?;
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = request_body(&self.config.model, &bundle);
        let timeout = Duration::from_secs(self.config.timeout_secs);
        let max_attempts = self.config.max_attempts.max(1);

        let mut last = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let wait = self.config.backoff_initial_ms.saturating_mul(1 << (attempt - 2).min(16));
                log::warn!(
                    "annotate {}: retry {}/{} in {wait} ms after: {last}",
                    record.id,
                    attempt - 1,
                    max_attempts - 1
                );
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.transport.post_json(&url, &key, &body, timeout) {
                Err(e) => last = format!("transport: {e}"),
                Ok(resp) if resp.status == 401 || resp.status == 403 => {
                    return Err(RemoteError::Auth(format!("HTTP {}: {}", resp.status, resp.body)));
                }
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    last = format!("HTTP {}", resp.status);
                }
                Ok(resp) if !(200..300).contains(&resp.status) => {
                    return Err(RemoteError::Network(format!("HTTP {}: {}", resp.status, resp.body)));
                }
                Ok(resp) => {
                    let raw = extract_content(&resp.body).ok_or_else(|| RemoteError::Parse {
                        raw: resp.body.clone(),
                        error: "response has no choices[0].message.content".into(),
                    })?;
                    let annotation = parse_annotation(&raw).map_err(|e: ParseError| RemoteError::Parse {
                        raw: raw.clone(),
                        error: e.to_string(),
                    })?;
                    self.write_cache(
                        &cache_path,
                        &CacheEntry {
                            id: record.id.clone(),
                            prompt_hash: hash.clone(),
                            raw,
                        },
                    )?;
                    return Ok(RemoteAnnotation {
                        annotation,
                        prompt_hash: hash,
                        attempts: attempt,
                        from_cache: false,
                    });
                }
            }
        }
        Err(RemoteError::RetriesExhausted {
            attempts: max_attempts,
            last,
        })
    }
}

/// Annotates records with at most `config.parallelism` requests in flight.
/// Results come back in input order.
pub fn annotate_remote_batch<T: HttpTransport>(
    annotator: &RemoteAnnotator<T>,
    records: &[ScenarioRecord],
) -> Vec<Result<RemoteAnnotation, RemoteError>> {
    let workers = annotator.config.parallelism.clamp(1, records.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RemoteAnnotation, RemoteError>>>> =
        Mutex::new((0..records.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= records.len() {
                    break;
                }
                let r = annotator.annotate(&records[i]);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every record processed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::annotate_mock;
    use crate::scenario::{generate_scenario, ManeuverKind, RiskTier};
    use std::sync::atomic::AtomicU32;

    struct Scripted {
        statuses: Vec<u16>,
        calls: AtomicU32,
        content: String,
    }

    impl HttpTransport for Scripted {
        fn post_json(&self, url: &str, bearer: &str, body: &serde_json::Value, _: Duration) -> Result<HttpResponse, String> {
            assert!(url.ends_with("/chat/completions"));
            assert_eq!(bearer, "test-key");
            assert_eq!(body["messages"][1]["content"].as_array().unwrap().len(), 5);
            let i = self.calls.fetch_add(1, Ordering::SeqCst) as usize;
            let status = *self.statuses.get(i).unwrap_or(&200);
            let body = if status == 200 {
                json!({ "choices": [{ "message": { "content": self.content } }] }).to_string()
            } else {
                "upstream error".into()
            };
            Ok(HttpResponse { status, body })
        }
    }

    fn setup(statuses: Vec<u16>, content: String) -> (RemoteAnnotator<Scripted>, tempfile::TempDir) {
        std::env::set_var("RISKPLAN_TEST_KEY", "test-key");
        let dir = tempfile::tempdir().unwrap();
        let cfg = EndpointConfig {
            credential_env: "RISKPLAN_TEST_KEY".into(),
            backoff_initial_ms: 0,
            ..EndpointConfig::default()
        };
        let t = Scripted {
            statuses,
            calls: AtomicU32::new(0),
            content,
        };
        (RemoteAnnotator::new(cfg, t, dir.path().join("cache")), dir)
    }

    #[test]
    fn well_formed_body_parses_and_caches() {
        let rec = generate_scenario(4, ManeuverKind::TurnRight, RiskTier::Medium);
        let expected = annotate_mock(&rec);
        let (ann, _dir) = setup(vec![200], expected.serialize());
        let first = ann.annotate(&rec).unwrap();
        assert_eq!(first.annotation, expected);
        assert_eq!(first.attempts, 1);
        let second = ann.annotate(&rec).unwrap();
        assert!(second.from_cache);
        assert_eq!(second.attempts, 0);
        assert_eq!(ann.transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn retries_transient_errors() {
        let rec = generate_scenario(4, ManeuverKind::GoStraight, RiskTier::Low);
        let (ann, _dir) = setup(vec![500, 500, 200], annotate_mock(&rec).serialize());
        let out = ann.annotate(&rec).unwrap();
        assert_eq!(out.attempts, 3);
        assert_eq!(ann.transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausts_retries() {
        let rec = generate_scenario(4, ManeuverKind::GoStraight, RiskTier::Low);
        let (ann, _dir) = setup(vec![503, 503, 503], String::new());
        assert!(matches!(
            ann.annotate(&rec),
            Err(RemoteError::RetriesExhausted { attempts: 3, .. })
        ));
    }

    #[test]
    fn auth_and_parse_errors() {
        let rec = generate_scenario(4, ManeuverKind::GoStraight, RiskTier::Low);
        let (ann, _dir) = setup(vec![401], String::new());
        assert!(matches!(ann.annotate(&rec), Err(RemoteError::Auth(_))));
        assert_eq!(ann.transport.calls.load(Ordering::SeqCst), 1);

        let (ann, _dir) = setup(vec![200], "I think the scene is fine.".into());
        match ann.annotate(&rec) {
            Err(RemoteError::Parse { raw, .. }) => assert_eq!(raw, "I think the scene is fine."),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_preserves_order() {
        let recs: Vec<_> = (0..6u64)
            .map(|s| generate_scenario(s, ManeuverKind::Stop, RiskTier::High))
            .collect();
        // every record gets the same canned body; order is what matters here
        let (ann, _dir) = setup(vec![], annotate_mock(&recs[0]).serialize());
        let out = annotate_remote_batch(&ann, &recs);
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|r| r.is_ok()));
        assert_eq!(ann.transport.calls.load(Ordering::SeqCst), 6);
    }
}
