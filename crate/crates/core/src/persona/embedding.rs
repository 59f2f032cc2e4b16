//! Embedding providers and the chunked context matrix.
//!
//! Documents are split into fixed windows of 64 whitespace-delimited tokens
//! (stride 64, no overlap); each window becomes one matrix row. Rows carry
//! metadata tracing them back to their source document and token offset.
//!
//! Two providers are available: a live HTTP endpoint, and a deterministic
//! hash-based provider (`d_h = 16`) that makes every persona test offline
//! and reproducible.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::GroupId;

/// Whitespace tokens per chunk window.
pub const CHUNK_TOKENS: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding provider failure: {0}")]
    Provider(String),
    #[error("embedding configuration error: {0}")]
    Config(String),
}

/// Traces one matrix row back to its source span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub doc_index: usize,
    /// Offset of the first token of this chunk within its document.
    pub token_index: usize,
    /// The chunk's source text.
    pub source_span: String,
}

/// Row-major `T x d_h` context matrix with per-row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f64>,
    dim: usize,
    meta: Vec<RowMeta>,
}

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.meta.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }
}

/// Boundary to whatever turns text into vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    /// Embeds a batch of texts, one vector per text, each of length `dim`.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError>;
}

/// Splits `text` into windows of [`CHUNK_TOKENS`] whitespace tokens.
pub fn chunk_text(text: &str) -> Vec<(usize, String)> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    tokens
        .chunks(CHUNK_TOKENS)
        .enumerate()
        .map(|(i, window)| (i * CHUNK_TOKENS, window.join(" ")))
        .collect()
}

/// Embeds a list of document texts into one concatenated context matrix.
pub fn embed_texts(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
) -> Result<EmbeddingMatrix, EmbeddingError> {
    if texts.is_empty() {
        return Err(EmbeddingError::Config("no texts to embed".into()));
    }
    let mut meta = Vec::new();
    let mut chunks = Vec::new();
    for (doc_index, text) in texts.iter().enumerate() {
        for (token_index, span) in chunk_text(text) {
            meta.push(RowMeta {
                doc_index,
                token_index,
                source_span: span.clone(),
            });
            chunks.push(span);
        }
    }
    if chunks.is_empty() {
        return Err(EmbeddingError::Config("all texts were empty".into()));
    }

    let dim = provider.dim();
    let vectors = provider.embed(&chunks)?;
    if vectors.len() != chunks.len() {
        return Err(EmbeddingError::Provider(format!(
            "provider returned {} vectors for {} chunks",
            vectors.len(),
            chunks.len()
        )));
    }
    let mut data = Vec::with_capacity(vectors.len() * dim);
    for v in &vectors {
        if v.len() != dim {
            return Err(EmbeddingError::Config(format!(
                "provider returned a {}-dimensional vector, expected {dim}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::Provider("non-finite embedding entry".into()));
        }
        data.extend_from_slice(v);
    }
    Ok(EmbeddingMatrix { data, dim, meta })
}

/// The group query vector `q_g`: the embedding of a fixed perspective
/// prompt for the group, mean-pooled to one row.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupQueryEmbedding {
    pub vector: Vec<f64>,
    pub group: GroupId,
}

/// Renders the fixed query phrase embedded for a group.
pub fn group_query_phrase(group: &GroupId) -> String {
    format!(
        "Perspective of the {} community on hate speech, stereotypes, and discrimination",
        group.display_name()
    )
}

pub fn group_query_embedding(
    provider: &dyn EmbeddingProvider,
    group: &GroupId,
) -> Result<GroupQueryEmbedding, EmbeddingError> {
    let matrix = embed_texts(provider, &[group_query_phrase(group)])?;
    let dim = matrix.dim();
    let rows = matrix.rows();
    let mut vector = vec![0.0; dim];
    for r in 0..rows {
        for (i, x) in matrix.row(r).iter().enumerate() {
            vector[i] += x / rows as f64;
        }
    }
    Ok(GroupQueryEmbedding {
        vector,
        group: group.clone(),
    })
}

/// Offline provider: 16 lanes of hash-derived pseudo-embeddings in [-1, 1].
/// Identical input always yields the identical vector, on any platform.
#[derive(Debug, Clone, Default)]
pub struct DeterministicProvider;

impl DeterministicProvider {
    pub const DIM: usize = 16;
}

impl EmbeddingProvider for DeterministicProvider {
    fn dim(&self) -> usize {
        Self::DIM
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(texts
            .iter()
            .map(|text| {
                (0..Self::DIM)
                    .map(|lane| {
                        let mut hasher = Sha256::new();
                        hasher.update(lane.to_le_bytes());
                        hasher.update(text.as_bytes());
                        let digest = hasher.finalize();
                        let mut bytes = [0u8; 8];
                        bytes.copy_from_slice(&digest[..8]);
                        let raw = u64::from_le_bytes(bytes);
                        (raw as f64 / u64::MAX as f64) * 2.0 - 1.0
                    })
                    .collect()
            })
            .collect())
    }
}

/// Live provider speaking the common `/embeddings` wire schema.
#[derive(Debug)]
pub struct HttpEmbeddingProvider {
    base_url: String,
    model: String,
    api_key: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingProvider {
    pub fn new(base_url: &str, model: &str, dim: usize, timeout_s: u64) -> Result<Self, EmbeddingError> {
        let api_key = std::env::var(crate::gateway::http::API_KEY_ENV).map_err(|_| {
            EmbeddingError::Config(format!(
                "live embedding provider requires {}",
                crate::gateway::http::API_KEY_ENV
            ))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(timeout_s))
            .build()
            .map_err(|e| EmbeddingError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            dim,
            client,
        })
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let url = format!("{}/embeddings", self.base_url);
        let response = self
            .client
            .post(&url)
            .bearer_auth(&self.api_key)
            .json(&EmbedRequest {
                model: &self.model,
                input: texts,
            })
            .send()
            .map_err(|e| EmbeddingError::Provider(format!("transport error: {e}")))?;
        if !response.status().is_success() {
            return Err(EmbeddingError::Provider(format!(
                "embedding endpoint returned HTTP {}",
                response.status()
            )));
        }
        let parsed: EmbedResponse = response
            .json()
            .map_err(|e| EmbeddingError::Provider(format!("malformed embedding body: {e}")))?;
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn deterministic_provider_repeats_exactly() {
        let p = DeterministicProvider;
        let texts = vec!["some chunk of text".to_string()];
        assert_eq!(p.embed(&texts).unwrap(), p.embed(&texts).unwrap());
    }

    #[test]
    fn sixty_four_tokens_is_one_chunk() {
        let p = DeterministicProvider;
        let m = embed_texts(&p, &[words(64)]).unwrap();
        assert_eq!(m.rows(), 1);
        assert_eq!(m.dim(), 16);
    }

    #[test]
    fn chunk_counts_and_doc_indices() {
        // 100 tokens -> 2 chunks, 10 tokens -> 1 chunk.
        let p = DeterministicProvider;
        let m = embed_texts(&p, &[words(100), words(10)]).unwrap();
        assert_eq!(m.rows(), 3);
        let docs: Vec<usize> = m.meta().iter().map(|r| r.doc_index).collect();
        assert_eq!(docs, vec![0, 0, 1]);
        assert_eq!(m.meta()[1].token_index, 64);
        assert_eq!(m.meta()[2].token_index, 0);
    }

    #[test]
    fn group_queries_are_stable_and_distinct() {
        let p = DeterministicProvider;
        for g in GroupId::BUILTIN {
            let a = group_query_embedding(&p, &g).unwrap();
            let b = group_query_embedding(&p, &g).unwrap();
            assert_eq!(a.vector, b.vector);
        }
        // No collisions across the six built-ins.
        let vectors: Vec<Vec<f64>> = GroupId::BUILTIN
            .iter()
            .map(|g| group_query_embedding(&p, g).unwrap().vector)
            .collect();
        for i in 0..vectors.len() {
            for j in (i + 1)..vectors.len() {
                assert_ne!(vectors[i], vectors[j], "groups {i} and {j} collided");
            }
        }
    }

    #[test]
    fn empty_input_is_a_config_error() {
        let p = DeterministicProvider;
        assert!(matches!(
            embed_texts(&p, &[]),
            Err(EmbeddingError::Config(_))
        ));
        assert!(matches!(
            embed_texts(&p, &["   ".to_string()]),
            Err(EmbeddingError::Config(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_a_config_error() {
        struct Lying;
        impl EmbeddingProvider for Lying {
            fn dim(&self) -> usize {
                4
            }
            fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
                Ok(texts.iter().map(|_| vec![0.0; 3]).collect())
            }
        }
        assert!(matches!(
            embed_texts(&Lying, &["hello world".to_string()]),
            Err(EmbeddingError::Config(_))
        ));
    }
}
