//! Encyclopedia access: live MediaWiki endpoints or an offline fixture
//! directory that mirrors responses as files keyed by request digest.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{Document, KnowledgeError};
use crate::gateway::sha256_hex;

/// Default body cap; bodies are truncated at a paragraph boundary.
pub const BODY_CAP_CHARS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRef {
    pub title: String,
    pub url: String,
}

/// Search response mirrored into the fixture directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct SearchFixture {
    pub query: String,
    pub results: Vec<PageRef>,
}

/// Page response mirrored into the fixture directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct PageFixture {
    pub title: String,
    pub url: String,
    pub revision_id: String,
    pub body: String,
}

#[derive(Debug, Clone)]
pub enum WikiClient {
    /// Live MediaWiki API (search + plain-text extracts).
    Http {
        api_url: String,
        client: reqwest::blocking::Client,
    },
    /// Offline directory of mirrored responses.
    FixtureDir(PathBuf),
}

pub fn search_digest(query: &str) -> String {
    sha256_hex(&format!("search:{query}"))
}

pub fn page_digest(title: &str) -> String {
    sha256_hex(&format!("fetch:{title}"))
}

impl WikiClient {
    pub fn http(api_url: &str, timeout_s: u64) -> Result<Self, KnowledgeError> {
        let client = reqwest::blocking::Client::builder()
            .user_agent("modagent/0.1 (content moderation research tool)")
            .timeout(std::time::Duration::from_secs(timeout_s))
            .build()
            .map_err(|e| KnowledgeError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(WikiClient::Http {
            api_url: api_url.to_string(),
            client,
        })
    }

    pub fn fixture_dir(path: impl Into<PathBuf>) -> Self {
        WikiClient::FixtureDir(path.into())
    }

    /// Top-`limit` page titles matching a search query.
    pub fn search_pages(&self, query: &str, limit: usize) -> Result<Vec<PageRef>, KnowledgeError> {
        let results = match self {
            WikiClient::FixtureDir(dir) => {
                let digest = search_digest(query);
                let path = dir.join(format!("{digest}.json"));
                let raw = std::fs::read_to_string(&path).map_err(|_| {
                    KnowledgeError::FixtureMiss {
                        request: format!("search:{query}"),
                        digest,
                    }
                })?;
                let fixture: SearchFixture = serde_json::from_str(&raw).map_err(|e| {
                    KnowledgeError::Retrieval {
                        request: query.to_string(),
                        reason: format!("malformed search fixture: {e}"),
                    }
                })?;
                fixture.results
            }
            WikiClient::Http { api_url, client } => {
                let response = with_retries(query, || {
                    client
                        .get(api_url)
                        .query(&[
                            ("action", "query"),
                            ("list", "search"),
                            ("srsearch", query),
                            ("format", "json"),
                            ("srlimit", &limit.to_string()),
                        ])
                        .send()
                })?;
                let body: serde_json::Value =
                    response.json().map_err(|e| KnowledgeError::Retrieval {
                        request: query.to_string(),
                        reason: format!("malformed search response: {e}"),
                    })?;
                body["query"]["search"]
                    .as_array()
                    .map(|hits| {
                        hits.iter()
                            .filter_map(|hit| hit["title"].as_str())
                            .map(|title| PageRef {
                                title: title.to_string(),
                                url: page_url(title),
                            })
                            .collect()
                    })
                    .unwrap_or_default()
            }
        };
        let results: Vec<PageRef> = results.into_iter().take(limit.max(1)).collect();
        if results.is_empty() {
            return Err(KnowledgeError::Retrieval {
                request: query.to_string(),
                reason: "search returned no results".to_string(),
            });
        }
        Ok(results)
    }

    /// Plain-text page content, truncated at a paragraph boundary.
    pub fn fetch_page(&self, page: &PageRef) -> Result<Document, KnowledgeError> {
        let (body, revision_id, url) = match self {
            WikiClient::FixtureDir(dir) => {
                let digest = page_digest(&page.title);
                let path = dir.join(format!("{digest}.json"));
                let raw = std::fs::read_to_string(&path).map_err(|_| {
                    KnowledgeError::FixtureMiss {
                        request: format!("fetch:{}", page.title),
                        digest,
                    }
                })?;
                let fixture: PageFixture = serde_json::from_str(&raw).map_err(|e| {
                    KnowledgeError::Retrieval {
                        request: page.title.clone(),
                        reason: format!("malformed page fixture: {e}"),
                    }
                })?;
                (fixture.body, fixture.revision_id, fixture.url)
            }
            WikiClient::Http { api_url, client } => {
                let response = with_retries(&page.title, || {
                    client
                        .get(api_url)
                        .query(&[
                            ("action", "query"),
                            ("prop", "extracts|revisions"),
                            ("titles", page.title.as_str()),
                            ("explaintext", "1"),
                            ("rvprop", "ids"),
                            ("format", "json"),
                        ])
                        .send()
                })?;
                let body: serde_json::Value =
                    response.json().map_err(|e| KnowledgeError::Retrieval {
                        request: page.title.clone(),
                        reason: format!("malformed page response: {e}"),
                    })?;
                let pages = body["query"]["pages"]
                    .as_object()
                    .ok_or_else(|| KnowledgeError::Retrieval {
                        request: page.title.clone(),
                        reason: "no pages object in response".to_string(),
                    })?;
                let first = pages.values().next().ok_or_else(|| KnowledgeError::Retrieval {
                    request: page.title.clone(),
                    reason: "page is gone".to_string(),
                })?;
                let extract = first["extract"].as_str().unwrap_or_default().to_string();
                let revid = first["revisions"][0]["revid"]
                    .as_u64()
                    .map(|r| r.to_string())
                    .unwrap_or_default();
                (extract, revid, page.url.clone())
            }
        };

        let body = truncate_at_paragraph(&body, BODY_CAP_CHARS);
        if body.trim().is_empty() {
            return Err(KnowledgeError::Retrieval {
                request: page.title.clone(),
                reason: "extraction yielded an empty body".to_string(),
            });
        }
        Ok(Document {
            title: page.title.clone(),
            body,
            source_url: url,
            revision_id,
            retrieved_at: chrono::Utc::now().to_rfc3339(),
        })
    }
}

fn page_url(title: &str) -> String {
    format!(
        "https://en.wikipedia.org/wiki/{}",
        title.replace(' ', "_")
    )
}

fn with_retries(
    request: &str,
    mut attempt: impl FnMut() -> Result<reqwest::blocking::Response, reqwest::Error>,
) -> Result<reqwest::blocking::Response, KnowledgeError> {
    const ATTEMPTS: u32 = 3;
    let mut last = String::new();
    for i in 0..ATTEMPTS {
        match attempt() {
            Ok(resp) if resp.status().is_success() => return Ok(resp),
            Ok(resp) => last = format!("HTTP {}", resp.status()),
            Err(e) => last = e.to_string(),
        }
        if i + 1 < ATTEMPTS {
            std::thread::sleep(std::time::Duration::from_millis(250 << i));
        }
    }
    Err(KnowledgeError::Retrieval {
        request: request.to_string(),
        reason: format!("gave up after {ATTEMPTS} attempts: {last}"),
    })
}

/// Cuts `body` to at most `cap` characters, preferring a blank-line
/// boundary, then a line boundary, then a plain character cut.
pub fn truncate_at_paragraph(body: &str, cap: usize) -> String {
    if body.chars().count() <= cap {
        return body.to_string();
    }
    let prefix: String = body.chars().take(cap).collect();
    if let Some(cut) = prefix.rfind("\n\n") {
        return prefix[..cut].to_string();
    }
    if let Some(cut) = prefix.rfind('\n') {
        return prefix[..cut].to_string();
    }
    prefix
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &std::path::Path, digest: &str, value: &impl Serialize) {
        std::fs::write(
            dir.join(format!("{digest}.json")),
            serde_json::to_string_pretty(value).unwrap(),
        )
        .unwrap();
    }

    #[test]
    fn fixture_search_and_fetch() {
        let dir = tempfile::tempdir().unwrap();
        let page = PageRef {
            title: "Jim Crow laws".to_string(),
            url: page_url("Jim Crow laws"),
        };
        write_fixture(
            dir.path(),
            &search_digest("Jim Crow laws"),
            &SearchFixture {
                query: "Jim Crow laws".to_string(),
                results: vec![page.clone()],
            },
        );
        write_fixture(
            dir.path(),
            &page_digest("Jim Crow laws"),
            &PageFixture {
                title: page.title.clone(),
                url: page.url.clone(),
                revision_id: "12345".to_string(),
                body: "State and local laws enforcing racial segregation.\n\nMore detail."
                    .to_string(),
            },
        );

        let client = WikiClient::fixture_dir(dir.path());
        let refs = client.search_pages("Jim Crow laws", 1).unwrap();
        assert_eq!(refs[0].title, "Jim Crow laws");
        let doc = client.fetch_page(&refs[0]).unwrap();
        assert_eq!(doc.title, "Jim Crow laws");
        assert_eq!(doc.revision_id, "12345");
    }

    #[test]
    fn missing_fixture_is_a_fixture_miss() {
        let dir = tempfile::tempdir().unwrap();
        let client = WikiClient::fixture_dir(dir.path());
        let err = client.search_pages("unknown", 1).unwrap_err();
        assert!(matches!(err, KnowledgeError::FixtureMiss { .. }));
    }

    #[test]
    fn empty_body_is_a_retrieval_error() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(
            dir.path(),
            &page_digest("Empty"),
            &PageFixture {
                title: "Empty".to_string(),
                url: page_url("Empty"),
                revision_id: String::new(),
                body: "   ".to_string(),
            },
        );
        let client = WikiClient::fixture_dir(dir.path());
        let err = client
            .fetch_page(&PageRef {
                title: "Empty".to_string(),
                url: page_url("Empty"),
            })
            .unwrap_err();
        assert!(matches!(err, KnowledgeError::Retrieval { .. }));
    }

    #[test]
    fn truncation_ends_at_paragraph_boundary() {
        let para = "x".repeat(120);
        let body = format!("{para}\n\n{para}\n\n{para}");
        let out = truncate_at_paragraph(&body, 300);
        assert!(out.chars().count() <= 300);
        assert!(out.ends_with('x'));
        assert_eq!(out, format!("{para}\n\n{para}"));
    }

    #[test]
    fn short_bodies_pass_through() {
        assert_eq!(truncate_at_paragraph("short", 100), "short");
    }
}
