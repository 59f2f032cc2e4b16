//! Grounding pipeline: generate search queries for a group, retrieve
//! encyclopedia pages, and cache the resulting document set.
//!
//! Query generation asks the model first and falls back to deterministic
//! templates, so corpus retrieval degrades gracefully instead of failing.
//! Retrieval results are cached on disk keyed by `(group, k, epoch)`;
//! concurrent builders for the same key are single-flighted.

pub mod wiki;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::GroupId;
use crate::gateway::{ChatRequest, Gateway, GatewayError, Tag};
use crate::prompts::{render, TemplateSet};
use wiki::WikiClient;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("retrieval failed for {request:?}: {reason}")]
    Retrieval { request: String, reason: String },
    #[error("offline fixture miss for {request:?} (digest {digest})")]
    FixtureMiss { request: String, digest: String },
    #[error("no source documents could be retrieved for group {0}")]
    PersonaSourceUnavailable(GroupId),
    #[error("knowledge configuration error: {0}")]
    Config(String),
    #[error("cache I/O error at {path}: {reason}")]
    Cache { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOrigin {
    LlmGenerated,
    TemplateFallback,
}

/// Maximum length of a single search query.
pub const QUERY_CAP_CHARS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub text: String,
    pub origin: QueryOrigin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    pub body: String,
    pub source_url: String,
    pub revision_id: String,
    pub retrieved_at: String,
}

/// The retrieved corpus for one group: at most `k` documents, deduplicated
/// by title, never empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentSet {
    pub group: GroupId,
    pub docs: Vec<Document>,
    pub queries: Vec<SearchQuery>,
}

/// The five fallback query templates, cycled with a numeric suffix when
/// more than five queries are requested.
fn template_queries(group: &GroupId, k: usize) -> Vec<SearchQuery> {
    let g = group.display_name();
    let base = [
        format!("History of {g}"),
        format!("Discrimination against {g}"),
        format!("Stereotypes about {g}"),
        format!("{g} civil rights"),
        format!("Hate speech targeting {g}"),
    ];
    (0..k)
        .map(|i| {
            let round = i / base.len();
            let text = if round == 0 {
                base[i].clone()
            } else {
                format!("{} ({})", base[i % base.len()], round + 1)
            };
            SearchQuery {
                text,
                origin: QueryOrigin::TemplateFallback,
            }
        })
        .collect()
}

/// Corpus cache rooted at `{dir}/corpus/{group}/{k}/{epoch}/`.
#[derive(Debug, Clone)]
pub struct CorpusCache {
    root: PathBuf,
    epoch: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    group: GroupId,
    k: usize,
    epoch: u64,
    queries: Vec<SearchQuery>,
    revisions: Vec<(String, String)>,
    created_at: String,
}

impl CorpusCache {
    pub fn new(root: impl Into<PathBuf>, epoch: u64) -> Self {
        Self {
            root: root.into(),
            epoch,
        }
    }

    fn dir(&self, group: &GroupId, k: usize) -> PathBuf {
        self.root
            .join("corpus")
            .join(group.canonical())
            .join(k.to_string())
            .join(self.epoch.to_string())
    }

    fn load(&self, group: &GroupId, k: usize) -> Option<DocumentSet> {
        let dir = self.dir(group, k);
        let docs_path = dir.join("docs.jsonl");
        let meta_path = dir.join("meta.json");
        let meta: CorpusMeta = serde_json::from_str(&std::fs::read_to_string(meta_path).ok()?).ok()?;
        let raw = std::fs::read_to_string(docs_path).ok()?;
        let docs: Vec<Document> = raw
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .ok()?;
        if docs.is_empty() {
            return None;
        }
        Some(DocumentSet {
            group: group.clone(),
            docs,
            queries: meta.queries,
        })
    }

    fn store(&self, set: &DocumentSet, k: usize) -> Result<(), KnowledgeError> {
        let dir = self.dir(&set.group, k);
        std::fs::create_dir_all(&dir).map_err(|e| KnowledgeError::Cache {
            path: dir.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut lines = String::new();
        for doc in &set.docs {
            lines.push_str(&serde_json::to_string(doc).expect("document serializes"));
            lines.push('\n');
        }
        let meta = CorpusMeta {
            group: set.group.clone(),
            k,
            epoch: self.epoch,
            queries: set.queries.clone(),
            revisions: set
                .docs
                .iter()
                .map(|d| (d.title.clone(), d.revision_id.clone()))
                .collect(),
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let write = |name: &str, content: String| -> Result<(), KnowledgeError> {
            let path = dir.join(name);
            std::fs::write(&path, content).map_err(|e| KnowledgeError::Cache {
                path: path.display().to_string(),
                reason: e.to_string(),
            })
        };
        write("docs.jsonl", lines)?;
        write(
            "meta.json",
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
    }
}

/// Process-wide single-flight locks, one per cache key.
fn build_lock(key: &str) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<String, Arc<Mutex<()>>>>> = OnceLock::new();
    let map = LOCKS.get_or_init(|| Mutex::new(HashMap::new()));
    map.lock()
        .expect("single-flight registry poisoned")
        .entry(key.to_string())
        .or_default()
        .clone()
}

/// Retrieval front end wiring the gateway, the encyclopedia client, and the
/// cache together.
pub struct Retriever<'a> {
    pub gateway: &'a Gateway,
    pub wiki: &'a WikiClient,
    pub templates: &'a TemplateSet,
    pub model_id: String,
    pub query_temperature: f64,
    pub cache: Option<CorpusCache>,
    /// Pages fetched per query (top-N search hits).
    pub titles_per_query: usize,
    /// Concurrent page fetches within one corpus build.
    pub fetch_parallelism: usize,
}

impl<'a> Retriever<'a> {
    pub fn new(
        gateway: &'a Gateway,
        wiki: &'a WikiClient,
        templates: &'a TemplateSet,
        model_id: impl Into<String>,
    ) -> Self {
        Self {
            gateway,
            wiki,
            templates,
            model_id: model_id.into(),
            query_temperature: 0.7,
            cache: None,
            titles_per_query: 1,
            fetch_parallelism: 3,
        }
    }

    pub fn with_cache(mut self, cache: CorpusCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Asks the model for `k` search queries (one per line); falls back to
    /// deterministic templates on any gateway or shape failure, so this
    /// never fails.
    pub fn generate_queries(&self, group: &GroupId, k: usize) -> Vec<SearchQuery> {
        let k = k.max(1);
        match self.llm_queries(group, k) {
            Ok(queries) => queries,
            Err(e) => {
                log::warn!(
                    "query generation fell back to templates for {}: {e}",
                    group.canonical()
                );
                template_queries(group, k)
            }
        }
    }

    fn llm_queries(&self, group: &GroupId, k: usize) -> Result<Vec<SearchQuery>, GatewayError> {
        let user = render(
            &self.templates.query_gen_user,
            &[("k", &k.to_string()), ("group", &group.display_name())],
        );
        let req = ChatRequest::new(
            self.templates.query_gen_system.clone(),
            user,
            self.query_temperature,
            self.model_id.clone(),
            Tag::QueryGen,
        );
        let response = self.gateway.complete(&req)?;
        let mut seen = Vec::new();
        for line in response.text.lines() {
            let text = line.trim().trim_start_matches(['-', '*', '•']).trim();
            let text = text
                .trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == ')')
                .trim();
            if text.is_empty() {
                continue;
            }
            let text: String = text.chars().take(QUERY_CAP_CHARS).collect();
            if seen.iter().any(|q: &SearchQuery| q.text == text) {
                continue;
            }
            seen.push(SearchQuery {
                text,
                origin: QueryOrigin::LlmGenerated,
            });
        }
        if seen.len() < k {
            return Err(GatewayError::InvalidRequest(format!(
                "model produced {} usable queries, need {k}",
                seen.len()
            )));
        }
        seen.truncate(k);
        Ok(seen)
    }

    /// Cache-first corpus retrieval. Partial fetch failures are tolerated
    /// while at least one document survives.
    pub fn retrieve_corpus(&self, group: &GroupId, k: usize) -> Result<DocumentSet, KnowledgeError> {
        if k == 0 {
            return Err(KnowledgeError::Config("k must be at least 1".into()));
        }
        if let Some(cache) = &self.cache {
            if let Some(set) = cache.load(group, k) {
                return Ok(set);
            }
            let key = format!("{}/{}/{}", group.canonical(), k, cache.epoch);
            let lock = build_lock(&key);
            let _guard = lock.lock().expect("corpus build lock poisoned");
            // Another caller may have built it while this one waited.
            if let Some(set) = cache.load(group, k) {
                return Ok(set);
            }
            let set = self.build_corpus(group, k)?;
            cache.store(&set, k)?;
            Ok(set)
        } else {
            self.build_corpus(group, k)
        }
    }

    fn build_corpus(&self, group: &GroupId, k: usize) -> Result<DocumentSet, KnowledgeError> {
        let queries = self.generate_queries(group, k);
        let mut docs: Vec<Document> = Vec::new();

        let stride = self.fetch_parallelism.max(1);
        for batch in queries.chunks(stride) {
            let fetched: Vec<Option<Document>> = std::thread::scope(|scope| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|query| {
                        scope.spawn(move || match self.fetch_one(query) {
                            Ok(doc) => Some(doc),
                            Err(e) => {
                                log::warn!("dropping query {:?}: {e}", query.text);
                                None
                            }
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("fetch thread panicked")).collect()
            });
            docs.extend(fetched.into_iter().flatten());
        }

        // Dedup by title, first occurrence wins.
        let mut unique: Vec<Document> = Vec::new();
        for doc in docs {
            if !unique.iter().any(|d| d.title == doc.title) {
                unique.push(doc);
            }
        }
        unique.truncate(k);
        if unique.is_empty() {
            return Err(KnowledgeError::PersonaSourceUnavailable(group.clone()));
        }
        Ok(DocumentSet {
            group: group.clone(),
            docs: unique,
            queries,
        })
    }

    fn fetch_one(&self, query: &SearchQuery) -> Result<Document, KnowledgeError> {
        let refs = self.wiki.search_pages(&query.text, self.titles_per_query)?;
        let page = refs.first().ok_or_else(|| KnowledgeError::Retrieval {
            request: query.text.clone(),
            reason: "empty search result".to_string(),
        })?;
        self.wiki.fetch_page(page)
    }
}

/// Clears every cached corpus and persona under `root`.
pub fn clear_cache(root: &Path) -> std::io::Result<()> {
    for sub in ["corpus", "personas"] {
        let dir = root.join(sub);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
    }
    Ok(())
}

/// Reads the cache epoch marker, defaulting to 0.
pub fn read_epoch(root: &Path) -> u64 {
    std::fs::read_to_string(root.join("epoch"))
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0)
}

/// Bumps the cache epoch marker and returns the new value.
pub fn bump_epoch(root: &Path) -> std::io::Result<u64> {
    let next = read_epoch(root) + 1;
    std::fs::create_dir_all(root)?;
    std::fs::write(root.join("epoch"), next.to_string())?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FixtureBuilder;
    use wiki::{PageFixture, SearchFixture};

    fn write_wiki_fixture(dir: &Path, query: &str, title: &str, body: &str) {
        let page = wiki::PageRef {
            title: title.to_string(),
            url: format!("https://example.org/{title}"),
        };
        std::fs::write(
            dir.join(format!("{}.json", wiki::search_digest(query))),
            serde_json::to_string(&SearchFixture {
                query: query.to_string(),
                results: vec![page.clone()],
            })
            .unwrap(),
        )
        .unwrap();
        std::fs::write(
            dir.join(format!("{}.json", wiki::page_digest(title))),
            serde_json::to_string(&PageFixture {
                title: title.to_string(),
                url: page.url,
                revision_id: "r1".to_string(),
                body: body.to_string(),
            })
            .unwrap(),
        )
        .unwrap();
    }

    fn empty_gateway() -> Gateway {
        Gateway::replay(crate::gateway::fixtures::FixtureStore::from_entries(vec![]))
    }

    #[test]
    fn fallback_templates_when_gateway_is_down() {
        let gateway = empty_gateway();
        let templates = TemplateSet::default();
        let wiki = WikiClient::fixture_dir("/nonexistent");
        let retriever = Retriever::new(&gateway, &wiki, &templates, "m");
        let queries = retriever.generate_queries(&GroupId::Women, 5);
        assert_eq!(queries.len(), 5);
        assert!(queries.iter().all(|q| q.origin == QueryOrigin::TemplateFallback));
        assert_eq!(queries[0].text, "History of Women");
        assert_eq!(queries[4].text, "Hate speech targeting Women");
    }

    #[test]
    fn fallback_cycles_with_suffix_beyond_five() {
        let queries = template_queries(&GroupId::Muslim, 7);
        assert_eq!(queries.len(), 7);
        assert_eq!(queries[5].text, "History of Muslim (2)");
        assert_eq!(queries[6].text, "Discrimination against Muslim (2)");
        // Exactly-k contract holds with no duplicate texts.
        let mut texts: Vec<_> = queries.iter().map(|q| q.text.clone()).collect();
        texts.sort();
        texts.dedup();
        assert_eq!(texts.len(), 7);
    }

    #[test]
    fn llm_queries_pass_through_fixtures() {
        let templates = TemplateSet::default();
        let user = render(
            &templates.query_gen_user,
            &[("k", "2"), ("group", "Black")],
        );
        let req = ChatRequest::new(
            templates.query_gen_system.clone(),
            user,
            0.7,
            "m",
            Tag::QueryGen,
        );
        let mut builder = FixtureBuilder::new();
        builder.add(&req, "History of African Americans\nJim Crow laws");
        let gateway = Gateway::replay(builder.build());
        let wiki = WikiClient::fixture_dir("/nonexistent");
        let retriever = Retriever::new(&gateway, &wiki, &templates, "m");

        let queries = retriever.generate_queries(&GroupId::Black, 2);
        assert_eq!(queries.len(), 2);
        assert_eq!(queries[0].text, "History of African Americans");
        assert_eq!(queries[1].text, "Jim Crow laws");
        assert!(queries.iter().all(|q| q.origin == QueryOrigin::LlmGenerated));
    }

    #[test]
    fn corpus_tolerates_partial_failures() {
        let dir = tempfile::tempdir().unwrap();
        // Wiki fixtures for only 3 of the 5 fallback queries.
        write_wiki_fixture(dir.path(), "History of Asian", "Asian history", "Body one.");
        write_wiki_fixture(
            dir.path(),
            "Discrimination against Asian",
            "Anti-Asian discrimination",
            "Body two.",
        );
        write_wiki_fixture(dir.path(), "Asian civil rights", "Asian civil rights", "Body three.");

        let gateway = empty_gateway();
        let templates = TemplateSet::default();
        let wiki = WikiClient::fixture_dir(dir.path());
        let retriever = Retriever::new(&gateway, &wiki, &templates, "m");
        let set = retriever.retrieve_corpus(&GroupId::Asian, 5).unwrap();
        assert_eq!(set.docs.len(), 3);
        let mut titles: Vec<_> = set.docs.iter().map(|d| d.title.clone()).collect();
        titles.sort();
        titles.dedup();
        assert_eq!(titles.len(), 3, "titles must be unique");
    }

    #[test]
    fn all_failures_is_persona_source_unavailable() {
        let gateway = empty_gateway();
        let templates = TemplateSet::default();
        let wiki = WikiClient::fixture_dir("/nonexistent");
        let retriever = Retriever::new(&gateway, &wiki, &templates, "m");
        let err = retriever.retrieve_corpus(&GroupId::Jewish, 3).unwrap_err();
        assert!(matches!(err, KnowledgeError::PersonaSourceUnavailable(_)));
    }

    #[test]
    fn cache_serves_second_call_without_network() {
        let wiki_dir = tempfile::tempdir().unwrap();
        let cache_dir = tempfile::tempdir().unwrap();
        write_wiki_fixture(wiki_dir.path(), "History of Women", "Women's history", "Body.");

        let gateway = empty_gateway();
        let templates = TemplateSet::default();
        let wiki = WikiClient::fixture_dir(wiki_dir.path());
        let retriever = Retriever::new(&gateway, &wiki, &templates, "m")
            .with_cache(CorpusCache::new(cache_dir.path(), 0));

        let first = retriever.retrieve_corpus(&GroupId::Women, 5).unwrap();
        assert_eq!(first.docs.len(), 1);

        // Remove the wiki fixtures entirely: the cache must answer alone.
        drop(wiki_dir);
        let second = retriever.retrieve_corpus(&GroupId::Women, 5).unwrap();
        assert_eq!(second.docs.len(), 1);
        assert_eq!(second.docs[0].title, first.docs[0].title);
    }

    #[test]
    fn epoch_bump_and_clear() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(read_epoch(dir.path()), 0);
        assert_eq!(bump_epoch(dir.path()).unwrap(), 1);
        assert_eq!(bump_epoch(dir.path()).unwrap(), 2);
        assert_eq!(read_epoch(dir.path()), 2);
        std::fs::create_dir_all(dir.path().join("corpus/x")).unwrap();
        clear_cache(dir.path()).unwrap();
        assert!(!dir.path().join("corpus").exists());
    }
}
