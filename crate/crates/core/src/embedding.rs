//! Fixed-width, unit-norm text embeddings of annotation contexts.
//!
//! Two encoders share the [`TextEncoder`] contract: [`HashingEncoder`], a
//! deterministic signed feature-hashing encoder over unigrams and bigrams,
//! and [`RemoteEncoder`], which calls an `/embeddings` HTTP endpoint.
//!
//! Embedding files (`<id>.hemb`) are `"HEMB"`, `u32` version, `u32` width,
//! then `2 * width` little-endian `f32` values: scene first, planning second.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::annotation::{HttpTransport, LongTailAnnotation};

pub const DEFAULT_TEXT_DIM: usize = 1024;
pub const EMBEDDING_MAGIC: &[u8; 4] = b"HEMB";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("encoder failure: {0}")]
    Encoder(String),
    #[error("embedding width {found} does not match expected {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("{path}: not an embedding file")]
    BadMagic { path: String },
    #[error("{path}: embedding file version {found}, expected {expected}")]
    Version { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated embedding file ({len} bytes)")]
    Truncated { path: String, len: usize },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Unit-L2 vector of fixed width.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    values: Vec<f32>,
}

impl TextEmbedding {
    /// Normalizes `raw` to unit length. Fails on zero or non-finite input.
    pub fn normalized(raw: &[f64]) -> Result<Self, EmbeddingError> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(EmbeddingError::Encoder(format!("cannot normalize vector with norm {norm}")));
        }
        Ok(TextEmbedding {
            values: raw.iter().map(|v| (v / norm) as f32).collect(),
        })
    }

    /// Wraps stored values as-is (used when reading embedding files).
    pub fn from_raw(values: Vec<f32>) -> Self {
        TextEmbedding { values }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(&a, &b)| a as f64 * b as f64).sum();
        dot / (self.l2_norm() * other.l2_norm())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionEmbeddings {
    pub scene_emb: TextEmbedding,
    pub risk_plan_emb: TextEmbedding,
}

impl InstructionEmbeddings {
    pub fn new(scene_emb: TextEmbedding, risk_plan_emb: TextEmbedding) -> Result<Self, EmbeddingError> {
        if scene_emb.dim() != risk_plan_emb.dim() {
            return Err(EmbeddingError::DimensionMismatch {
                found: risk_plan_emb.dim(),
                expected: scene_emb.dim(),
            });
        }
        Ok(InstructionEmbeddings { scene_emb, risk_plan_emb })
    }

    pub fn dim(&self) -> usize {
        self.scene_emb.dim()
    }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<TextEmbedding, EmbeddingError>;
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed feature hashing over lowercase alphanumeric unigrams and bigrams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEncoder {
    dim: usize,
}

impl Default for HashingEncoder {
    fn default() -> Self {
        HashingEncoder { dim: DEFAULT_TEXT_DIM }
    }
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding width must be positive");
        HashingEncoder { dim }
    }

    fn add(&self, acc: &mut [f64], feature: &str) {
        let h = fnv1a64(feature.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        acc[bucket] += sign;
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<TextEmbedding, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let tokens = tokenize(text);
        let mut acc = vec![0.0f64; self.dim];
        if tokens.is_empty() {
            // punctuation-only text still gets a stable vector
            self.add(&mut acc, &format!("raw:{}", text.trim()));
        }
        for t in &tokens {
            self.add(&mut acc, &format!("u:{t}"));
        }
        for w in tokens.windows(2) {
            self.add(&mut acc, &format!("b:{} {}", w[0], w[1]));
        }
        if acc.iter().all(|v| *v == 0.0) {
            // features cancelled out exactly; fall back to the raw text
            self.add(&mut acc, &format!("raw:{}", text.trim()));
        }
        TextEmbedding::normalized(&acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEncoderConfig {
    pub base_url: String,
    pub model: String,
    pub credential_env: String,
    pub timeout_secs: u64,
    pub dim: usize,
}

impl Default for RemoteEncoderConfig {
    fn default() -> Self {
        RemoteEncoderConfig {
            base_url: "http://localhost:8001/v1".into(),
            model: "text-encoder".into(),
            credential_env: "EMBEDDING_API_KEY".into(),
            timeout_secs: 60,
            dim: DEFAULT_TEXT_DIM,
        }
    }
}

/// OpenAI-style `/embeddings` client. Returned vectors are re-normalized.
pub struct RemoteEncoder<T: HttpTransport> {
    config: RemoteEncoderConfig,
    transport: T,
}

impl<T: HttpTransport> RemoteEncoder<T> {
    pub fn new(config: RemoteEncoderConfig, transport: T) -> Self {
        RemoteEncoder { config, transport }
    }
}

impl<T: HttpTransport> TextEncoder for RemoteEncoder<T> {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed_text(&self, text: &str) -> Result<TextEmbedding, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let key = std::env::var(&self.config.credential_env)
            .map_err(|_| EmbeddingError::Encoder(format!("{} is not set", self.config.credential_env)))?;
        let url = format!("{}/embeddings", self.config.base_url.trim_end_matches('/'));
        let body = json!({ "model": self.config.model, "input": text });
        let resp = self
            .transport
            .post_json(&url, &key, &body, Duration::from_secs(self.config.timeout_secs))
            .map_err(EmbeddingError::Encoder)?;
        if resp.status != 200 {
            return Err(EmbeddingError::Encoder(format!("HTTP {}: {}", resp.status, resp.body)));
        }
        let v: serde_json::Value =
            serde_json::from_str(&resp.body).map_err(|e| EmbeddingError::Encoder(e.to_string()))?;
        let raw: Vec<f64> = v
            .pointer("/data/0/embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| EmbeddingError::Encoder("response has no data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| EmbeddingError::Encoder("non-numeric embedding value".into())))
            .collect::<Result<_, _>>()?;
        if raw.len() != self.config.dim {
            return Err(EmbeddingError::DimensionMismatch {
                found: raw.len(),
                expected: self.config.dim,
            });
        }
        TextEmbedding::normalized(&raw)
    }
}

/// Scene embedding from the scene description; planning embedding from the
/// serialized planning fields.
pub fn embed_annotation(
    encoder: &dyn TextEncoder,
    annotation: &LongTailAnnotation,
) -> Result<InstructionEmbeddings, EmbeddingError> {
    let scene = encoder.embed_text(&annotation.scene_description)?;
    let plan = encoder.embed_text(&annotation.planning_text())?;
    InstructionEmbeddings::new(scene, plan)
}

pub fn embedding_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.hemb"))
}

pub fn encode_embeddings(e: &InstructionEmbeddings) -> Vec<u8> {
    let d = e.dim();
    let mut out = Vec::with_capacity(12 + 8 * d);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in e.scene_emb.values().iter().chain(e.risk_plan_emb.values()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8], origin: &str) -> Result<InstructionEmbeddings, EmbeddingError> {
    let truncated = || EmbeddingError::Truncated {
        path: origin.to_string(),
        len: bytes.len(),
    };
    if bytes.len() < 12 {
        return Err(truncated());
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(EmbeddingError::BadMagic { path: origin.to_string() });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != EMBEDDING_VERSION {
        return Err(EmbeddingError::Version {
            path: origin.to_string(),
            found: version,
            expected: EMBEDDING_VERSION,
        });
    }
    let d = u32_at(8) as usize;
    if bytes.len() != 12 + 8 * d {
        return Err(truncated());
    }
    let floats: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (scene, plan) = floats.split_at(d);
    InstructionEmbeddings::new(TextEmbedding::from_raw(scene.to_vec()), TextEmbedding::from_raw(plan.to_vec()))
}

pub fn save_embeddings(dir: &Path, id: &str, e: &InstructionEmbeddings) -> Result<PathBuf, EmbeddingError> {
    fs::create_dir_all(dir).map_err(|source| EmbeddingError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let path = embedding_path(dir, id);
    fs::write(&path, encode_embeddings(e)).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

pub fn load_embeddings(dir: &Path, id: &str) -> Result<InstructionEmbeddings, EmbeddingError> {
    let path = embedding_path(dir, id);
    let bytes = fs::read(&path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_embeddings(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{PlanIntention, RiskLevel};
    use proptest::prelude::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let enc = HashingEncoder::default();
        let a = enc.embed_text("pedestrian crossing ahead in fog").unwrap();
        let b = enc.embed_text("pedestrian crossing ahead in fog").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), DEFAULT_TEXT_DIM);
        assert!((a.l2_norm() - 1.0).abs() < 1e-6);
        assert!(matches!(enc.embed_text("   "), Err(EmbeddingError::EmptyText)));
        let p = enc.embed_text("?!").unwrap();
        assert!((p.l2_norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn planning_channel_ignores_scene_text() {
        let enc = HashingEncoder::default();
        let a = LongTailAnnotation::new("front: clear", RiskLevel::Low, PlanIntention::GoStraight, "maintain lane", "clear road").unwrap();
        let mut b = a.clone();
        b.scene_description = "front: a cyclist swerving".into();
        let (ea, eb) = (embed_annotation(&enc, &a).unwrap(), embed_annotation(&enc, &b).unwrap());
        assert_eq!(ea.risk_plan_emb, eb.risk_plan_emb);
        assert_ne!(ea.scene_emb, eb.scene_emb);
        assert_eq!(ea, embed_annotation(&enc, &a).unwrap());
    }

    #[test]
    fn file_errors_are_distinct() {
        let enc = HashingEncoder::new(8);
        let a = LongTailAnnotation::new("x", RiskLevel::Low, PlanIntention::Stop, "y", "z").unwrap();
        let e = embed_annotation(&enc, &a).unwrap();
        let bytes = encode_embeddings(&e);
        assert_eq!(bytes.len(), 12 + 64);
        assert!(matches!(decode_embeddings(&bytes[..20], "f"), Err(EmbeddingError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_embeddings(&bad, "f"), Err(EmbeddingError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_embeddings(&bad, "f"), Err(EmbeddingError::Version { found: 2, .. })));
    }

    proptest! {
        #[test]
        fn file_round_trip_bit_exact(scene in proptest::collection::vec(-1.0e3f32..1.0e3, 1..40), seed in any::<u32>()) {
            let plan: Vec<f32> = scene.iter().map(|v| v * (seed as f32 + 1.0).recip()).collect();
            let e = InstructionEmbeddings::new(TextEmbedding::from_raw(scene.clone()), TextEmbedding::from_raw(plan)).unwrap();
            let back = decode_embeddings(&encode_embeddings(&e), "mem").unwrap();
            prop_assert_eq!(encode_embeddings(&back), encode_embeddings(&e));
            prop_assert_eq!(back, e);
        }
    }
}
