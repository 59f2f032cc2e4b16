//! Community persona construction.
//!
//! Retrieved documents are embedded into a context matrix, pooled against
//! the group query vector with scaled dot-product attention, and the
//! highest-attention source spans become the passages that ground the
//! Community Agent's system prompt. The pooled vector and weights ride
//! along as the persona's retrieval signature.

pub mod attention;
pub mod embedding;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::GroupId;
use crate::gateway::sha256_hex;
use crate::knowledge::DocumentSet;
use crate::prompts::{render, TemplateSet};
use attention::{cross_attention, AttentionError};
use embedding::{embed_texts, group_query_embedding, EmbeddingError, EmbeddingProvider};

/// Passages selected into the system prompt.
pub const DEFAULT_SELECTED_PASSAGES: usize = 8;
/// Per-passage character cap.
pub const PASSAGE_CAP_CHARS: usize = 500;

#[derive(Debug, Error)]
pub enum PersonaError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("persona cache error at {path}: {reason}")]
    Cache { path: String, reason: String },
    #[error("cannot build a persona from an empty document set")]
    EmptyDocumentSet,
}

/// The pooled community embedding and its attention weights over the
/// context rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaEmbedding {
    pub vector: Vec<f64>,
    pub attention_weights: Vec<f64>,
}

/// A selected source span with its aggregated attention mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedPassage {
    pub text: String,
    pub weight: f64,
    pub doc_index: usize,
    pub token_index: usize,
}

/// Everything the Community Agent needs: the grounding passages, the
/// rendered system prompt, and the retrieval signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityPersona {
    /// Content hash of the inputs; identical inputs yield identical ids.
    pub persona_id: String,
    pub group: GroupId,
    pub embedding: PersonaEmbedding,
    pub selected_passages: Vec<SelectedPassage>,
    pub system_prompt: String,
    /// (title, revision) of each source document.
    pub source_revisions: Vec<(String, String)>,
}

/// Content address for a persona: group, document identities and bodies,
/// provider dimensionality, and the selection budget.
pub fn persona_id(group: &GroupId, docs: &DocumentSet, dim: usize, top_m: usize) -> String {
    let mut preimage = format!("group:{}\ndim:{dim}\ntop_m:{top_m}\n", group.canonical());
    for doc in &docs.docs {
        preimage.push_str(&format!(
            "doc:{}\nrev:{}\nbody_sha:{}\n",
            doc.title,
            doc.revision_id,
            sha256_hex(&doc.body)
        ));
    }
    sha256_hex(&preimage)
}

/// Builds the persona for `group` from its retrieved document set.
pub fn build_persona(
    provider: &dyn EmbeddingProvider,
    templates: &TemplateSet,
    group: &GroupId,
    docs: &DocumentSet,
    top_m: usize,
) -> Result<CommunityPersona, PersonaError> {
    if docs.docs.is_empty() {
        return Err(PersonaError::EmptyDocumentSet);
    }
    let bodies: Vec<String> = docs.docs.iter().map(|d| d.body.clone()).collect();
    let context = embed_texts(provider, &bodies)?;
    let query = group_query_embedding(provider, group)?;
    let (vector, weights) = cross_attention(
        &query.vector,
        context.data(),
        context.data(),
        context.dim(),
        context.dim(),
    )?;

    // Aggregate attention mass per source span, then keep the heaviest.
    let mut spans: Vec<SelectedPassage> = Vec::new();
    for (row, meta) in context.meta().iter().enumerate() {
        let w = weights[row];
        match spans
            .iter_mut()
            .find(|s| s.doc_index == meta.doc_index && s.token_index == meta.token_index)
        {
            Some(existing) => existing.weight += w,
            None => spans.push(SelectedPassage {
                text: meta.source_span.chars().take(PASSAGE_CAP_CHARS).collect(),
                weight: w,
                doc_index: meta.doc_index,
                token_index: meta.token_index,
            }),
        }
    }
    spans.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.doc_index.cmp(&b.doc_index))
            .then(a.token_index.cmp(&b.token_index))
    });
    spans.truncate(top_m.max(1));

    let passage_text = spans
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}", i + 1, p.text))
        .collect::<Vec<_>>()
        .join("\n\n");
    let system_prompt = render(
        &templates.community_system,
        &[
            ("group", &group.display_name()),
            ("passages", &passage_text),
            ("format", &templates.verdict_format),
        ],
    );

    Ok(CommunityPersona {
        persona_id: persona_id(group, docs, provider.dim(), top_m),
        group: group.clone(),
        embedding: PersonaEmbedding {
            vector,
            attention_weights: weights,
        },
        selected_passages: spans,
        system_prompt,
        source_revisions: docs
            .docs
            .iter()
            .map(|d| (d.title.clone(), d.revision_id.clone()))
            .collect(),
    })
}

/// Disk cache at `{root}/personas/{group}/{persona_id}.json`.
#[derive(Debug, Clone)]
pub struct PersonaCache {
    root: PathBuf,
}

impl PersonaCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn path(&self, group: &GroupId, persona_id: &str) -> PathBuf {
        self.root
            .join("personas")
            .join(group.canonical())
            .join(format!("{persona_id}.json"))
    }

    pub fn load(&self, group: &GroupId, persona_id: &str) -> Option<CommunityPersona> {
        let raw = std::fs::read_to_string(self.path(group, persona_id)).ok()?;
        serde_json::from_str(&raw).ok()
    }

    pub fn store(&self, persona: &CommunityPersona) -> Result<(), PersonaError> {
        let path = self.path(&persona.group, &persona.persona_id);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| PersonaError::Cache {
                path: parent.display().to_string(),
                reason: e.to_string(),
            })?;
        }
        let json = serde_json::to_string_pretty(persona).expect("persona serializes");
        std::fs::write(&path, json).map_err(|e| PersonaError::Cache {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Cache-first persona construction keyed by content address.
pub fn build_persona_cached(
    provider: &dyn EmbeddingProvider,
    templates: &TemplateSet,
    group: &GroupId,
    docs: &DocumentSet,
    top_m: usize,
    cache: Option<&PersonaCache>,
) -> Result<CommunityPersona, PersonaError> {
    if docs.docs.is_empty() {
        return Err(PersonaError::EmptyDocumentSet);
    }
    let id = persona_id(group, docs, provider.dim(), top_m);
    if let Some(cache) = cache {
        if let Some(found) = cache.load(group, &id) {
            return Ok(found);
        }
    }
    let persona = build_persona(provider, templates, group, docs, top_m)?;
    if let Some(cache) = cache {
        cache.store(&persona)?;
    }
    Ok(persona)
}

/// Verifies the cached-file path exists for a persona id; used by CLI
/// inspection commands.
pub fn persona_cache_path(root: &Path, group: &GroupId, persona_id: &str) -> PathBuf {
    PersonaCache::new(root).path(group, persona_id)
}
