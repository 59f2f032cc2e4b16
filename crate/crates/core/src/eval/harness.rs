//! Runs one or more approaches over a sampled dataset and writes the
//! evaluation artifacts: results.csv, report.md, failures.jsonl,
//! run-metadata.json, plus per-approach decision and transcript files.
//!
//! Each approach gets a freshly built gateway so replay ordinal counters
//! start from zero, letting several approaches share the same recorded
//! fixture file.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::report::{render_report_md, render_results_csv, Approach, CellOutcome, ReportInput};
use super::stats::{paired_ttest, TTestResult};
use super::{
    compute_metrics, confusion, load_dataset, sample_per_group, DatasetMapping, DatasetRecord,
    EvalError,
};
use crate::baselines::{BaselineError, BaselineRunner, ExemplarSet};
use crate::domain::{FinalDecision, GroupId, Post};
use crate::gateway::scripted::{ScriptedBackend, ScriptedRule};
use crate::gateway::{Gateway, GatewayError, GatewayLimits, TranscriptRecord};
use crate::knowledge::wiki::WikiClient;
use crate::knowledge::{CorpusCache, KnowledgeError};
use crate::persona::embedding::{
    DeterministicProvider, EmbeddingError, EmbeddingProvider, HttpEmbeddingProvider,
};
use crate::persona::PersonaCache;
use crate::pipeline::{Pipeline, PipelineConfig, RunRecord};
use crate::prompts::TemplateSet;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("harness I/O error at {path}: {reason}")]
    Io { path: String, reason: String },
}

/// How to reach the chat model.
#[derive(Debug, Clone)]
pub enum BackendSpec {
    /// Replay a fixture file; any miss is fatal.
    Replay { fixtures: PathBuf },
    /// Live HTTP backend.
    Live { base_url: String, timeout_s: u64 },
    /// Live HTTP backend, recording every exchange.
    RecordLive {
        base_url: String,
        timeout_s: u64,
        fixtures: PathBuf,
    },
    /// Replay with live fill-in for misses, recording what was filled.
    Hybrid {
        base_url: String,
        timeout_s: u64,
        fixtures: PathBuf,
    },
    /// Deterministic scripted responder (tests, demos).
    Scripted { rules: Vec<ScriptedRule> },
    /// Scripted responder, recording every exchange; this is how bundled
    /// fixture packs are produced.
    RecordScripted {
        rules: Vec<ScriptedRule>,
        fixtures: PathBuf,
    },
}

impl BackendSpec {
    pub fn build(&self, limits: &GatewayLimits) -> Result<Gateway, GatewayError> {
        match self {
            BackendSpec::Replay { fixtures } => Gateway::replay_file(fixtures),
            BackendSpec::Live { base_url, timeout_s } => {
                Gateway::live(base_url, *timeout_s, limits.clone())
            }
            BackendSpec::RecordLive {
                base_url,
                timeout_s,
                fixtures,
            } => Gateway::record_live(base_url, *timeout_s, limits.clone(), fixtures),
            BackendSpec::Hybrid {
                base_url,
                timeout_s,
                fixtures,
            } => {
                let store = crate::gateway::fixtures::FixtureStore::load(fixtures)?;
                Gateway::hybrid(store, base_url, *timeout_s, limits.clone(), fixtures)
            }
            BackendSpec::Scripted { rules } => {
                Ok(Gateway::scripted(Box::new(ScriptedBackend::new(rules.clone()))))
            }
            BackendSpec::RecordScripted { rules, fixtures } => {
                Gateway::record_scripted(Box::new(ScriptedBackend::new(rules.clone())), fixtures)
            }
        }
    }

    pub fn fixture_path(&self) -> Option<&Path> {
        match self {
            BackendSpec::Replay { fixtures }
            | BackendSpec::RecordLive { fixtures, .. }
            | BackendSpec::Hybrid { fixtures, .. }
            | BackendSpec::RecordScripted { fixtures, .. } => Some(fixtures),
            _ => None,
        }
    }
}

/// How to reach the encyclopedia.
#[derive(Debug, Clone)]
pub enum WikiSpec {
    Http { api_url: String, timeout_s: u64 },
    FixtureDir(PathBuf),
}

impl WikiSpec {
    fn build(&self) -> Result<WikiClient, KnowledgeError> {
        match self {
            WikiSpec::Http { api_url, timeout_s } => WikiClient::http(api_url, *timeout_s),
            WikiSpec::FixtureDir(dir) => Ok(WikiClient::fixture_dir(dir.clone())),
        }
    }
}

/// How to embed text.
#[derive(Debug, Clone)]
pub enum ProviderSpec {
    Deterministic,
    Http {
        base_url: String,
        model: String,
        dim: usize,
        timeout_s: u64,
    },
}

impl ProviderSpec {
    fn build(&self) -> Result<Box<dyn EmbeddingProvider>, EmbeddingError> {
        match self {
            ProviderSpec::Deterministic => Ok(Box::new(DeterministicProvider)),
            ProviderSpec::Http {
                base_url,
                model,
                dim,
                timeout_s,
            } => Ok(Box::new(HttpEmbeddingProvider::new(
                base_url, model, *dim, *timeout_s,
            )?)),
        }
    }
}

/// The wiring shared by every approach in one evaluation run.
pub struct EvalEnv {
    pub backend: BackendSpec,
    pub wiki: WikiSpec,
    pub provider: ProviderSpec,
    pub templates: TemplateSet,
    pub model_id: String,
    pub limits: GatewayLimits,
    pub cache_dir: Option<PathBuf>,
    pub cache_epoch: u64,
    pub temperature: f64,
    pub query_temperature: f64,
}

/// What to evaluate.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub dataset: PathBuf,
    pub mapping: DatasetMapping,
    pub groups: Vec<GroupId>,
    pub approaches: Vec<Approach>,
    pub sample_n: usize,
    pub seed: u64,
    pub shots: usize,
    pub pipeline: PipelineConfig,
    pub out_dir: PathBuf,
}

/// One item that failed and was excluded from the confusion counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemFailure {
    pub approach: Approach,
    pub id: String,
    pub group: GroupId,
    pub error: String,
}

/// Everything one approach produced.
pub struct ApproachOutcome {
    pub approach: Approach,
    pub decisions: Vec<FinalDecision>,
    /// Full run records, present for the agentic and ablation approaches.
    pub records: Option<Vec<RunRecord>>,
    pub failures: Vec<ItemFailure>,
    pub transcript: Vec<TranscriptRecord>,
}

pub struct EvalSummary {
    pub sampled: Vec<DatasetRecord>,
    pub outcomes: Vec<ApproachOutcome>,
    pub report: ReportInput,
    pub results_csv: String,
    pub report_md: String,
}

impl EvalSummary {
    pub fn total_failures(&self) -> usize {
        self.outcomes.iter().map(|o| o.failures.len()).sum()
    }

    pub fn outcome(&self, approach: Approach) -> Option<&ApproachOutcome> {
        self.outcomes.iter().find(|o| o.approach == approach)
    }
}

fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let queue: std::sync::Mutex<std::collections::VecDeque<usize>> =
        std::sync::Mutex::new((0..items.len()).collect());
    let slots: std::sync::Mutex<Vec<Option<R>>> =
        std::sync::Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue poisoned").pop_front();
                let Some(i) = next else { break };
                let out = f(&items[i]);
                slots.lock().expect("slots poisoned")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("slots poisoned")
        .into_iter()
        .map(|s| s.expect("all items processed"))
        .collect()
}

/// Runs every requested approach and writes the report files into
/// `request.out_dir`.
pub fn run_eval(env: &EvalEnv, request: &EvalRequest) -> Result<EvalSummary, HarnessError> {
    let ingest = load_dataset(&request.dataset, &request.mapping)?;
    let sampled = sample_per_group(&ingest.records, &request.groups, request.sample_n, request.seed)?;
    let test_ids: HashSet<String> = sampled.iter().map(|r| r.id.clone()).collect();

    // The non-test partition feeds the few-shot exemplar draw.
    let exemplars = if request.approaches.contains(&Approach::FewShot) {
        let pool: Vec<(String, String, crate::domain::Label)> = ingest
            .records
            .iter()
            .filter(|r| !test_ids.contains(&r.id))
            .map(|r| (r.id.clone(), r.text.clone(), r.gold))
            .collect();
        let set = ExemplarSet::draw(&pool, request.seed, request.shots)?;
        set.assert_disjoint(&test_ids)?;
        Some(set)
    } else {
        None
    };

    let posts: Vec<Post> = sampled
        .iter()
        .map(|r| Post {
            id: r.id.clone(),
            text: r.text.clone(),
            group_hint: Some(r.group.clone()),
        })
        .collect();

    // Canonical execution order keeps outputs deterministic regardless of
    // how the approaches were listed.
    let mut approaches: Vec<Approach> = Approach::ALL
        .into_iter()
        .filter(|a| request.approaches.contains(a))
        .collect();
    if approaches.is_empty() {
        approaches = vec![Approach::Agentic];
    }

    let wiki = env.wiki.build()?;
    let provider = env.provider.build()?;

    let mut outcomes = Vec::new();
    for &approach in &approaches {
        let gateway = env.backend.build(&env.limits)?;
        let outcome = run_approach(
            env,
            request,
            approach,
            &gateway,
            &wiki,
            provider.as_ref(),
            &posts,
            &sampled,
            exemplars.as_ref(),
        )?;
        outcomes.push(outcome);
    }

    let report = build_report(&sampled, &request.groups, &outcomes);
    let results_csv = render_results_csv(&report);
    let report_md = render_report_md(&report);
    write_outputs(request, env, &sampled, &outcomes, &results_csv, &report_md)?;

    Ok(EvalSummary {
        sampled,
        outcomes,
        report,
        results_csv,
        report_md,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_approach(
    env: &EvalEnv,
    request: &EvalRequest,
    approach: Approach,
    gateway: &Gateway,
    wiki: &WikiClient,
    provider: &dyn EmbeddingProvider,
    posts: &[Post],
    sampled: &[DatasetRecord],
    exemplars: Option<&ExemplarSet>,
) -> Result<ApproachOutcome, HarnessError> {
    let group_of: BTreeMap<&str, GroupId> = sampled
        .iter()
        .map(|r| (r.id.as_str(), r.group.clone()))
        .collect();
    let mut decisions = Vec::new();
    let mut records = None;
    let mut failures = Vec::new();

    match approach {
        Approach::Agentic | Approach::Ablation => {
            let config = PipelineConfig {
                ablation_no_consult: approach == Approach::Ablation,
                ..request.pipeline.clone()
            };
            let mut pipeline = Pipeline::new(
                gateway,
                wiki,
                provider,
                &env.templates,
                env.model_id.clone(),
                config,
            );
            pipeline.temperature = env.temperature;
            pipeline.query_temperature = env.query_temperature;
            if let Some(dir) = &env.cache_dir {
                pipeline.corpus_cache = Some(CorpusCache::new(dir, env.cache_epoch));
                pipeline.persona_cache = Some(PersonaCache::new(dir));
            }
            let mut kept = Vec::new();
            for result in pipeline.moderate_batch(posts) {
                match result {
                    Ok(record) => {
                        decisions.push(record.decision.clone());
                        kept.push(record);
                    }
                    Err((id, e)) => failures.push(ItemFailure {
                        approach,
                        group: group_of.get(id.as_str()).cloned().unwrap_or_else(|| {
                            GroupId::Other("unknown".to_string())
                        }),
                        id,
                        error: e.to_string(),
                    }),
                }
            }
            records = Some(kept);
        }
        Approach::ZeroShot | Approach::FewShot | Approach::Cot => {
            let mut runner = BaselineRunner::new(gateway, &env.templates, env.model_id.clone());
            runner.temperature = env.temperature;
            runner.cut = request.pipeline.cut;
            let results = parallel_map(posts, request.pipeline.parallelism, |post| {
                let group = post
                    .group_hint
                    .clone()
                    .unwrap_or_else(|| GroupId::Other("unknown".to_string()));
                let run = match approach {
                    Approach::ZeroShot => runner.run_zero_shot(post, &group),
                    Approach::FewShot => runner.run_few_shot(
                        post,
                        &group,
                        exemplars.expect("few-shot requires exemplars"),
                    ),
                    Approach::Cot => runner.run_cot(post, &group),
                    _ => unreachable!(),
                };
                (post.id.clone(), group, run)
            });
            for (id, group, result) in results {
                match result {
                    Ok(decision) => decisions.push(decision),
                    Err(e) => failures.push(ItemFailure {
                        approach,
                        id,
                        group,
                        error: e.to_string(),
                    }),
                }
            }
        }
    }

    Ok(ApproachOutcome {
        approach,
        decisions,
        records,
        failures,
        transcript: gateway.transcript_snapshot(),
    })
}

fn build_report(
    sampled: &[DatasetRecord],
    groups: &[GroupId],
    outcomes: &[ApproachOutcome],
) -> ReportInput {
    let mut cells = BTreeMap::new();
    for outcome in outcomes {
        for group in groups {
            let golds: Vec<DatasetRecord> = sampled
                .iter()
                .filter(|r| &r.group == group)
                .cloned()
                .collect();
            let preds: Vec<(String, crate::domain::Label)> = outcome
                .decisions
                .iter()
                .filter(|d| &d.group == group)
                .map(|d| (d.post_id.clone(), d.final_label))
                .collect();
            let cm = match confusion(&preds, &golds) {
                Ok(cm) => cm,
                Err(e) => {
                    log::error!(
                        "confusion join failed for {}/{}: {e}",
                        outcome.approach,
                        group.canonical()
                    );
                    continue;
                }
            };
            let metrics = match compute_metrics(&cm) {
                Ok(m) => Some(m),
                Err(e) => {
                    log::warn!(
                        "metrics undefined for {}/{}: {e}",
                        outcome.approach,
                        group.canonical()
                    );
                    None
                }
            };
            let failures = outcome
                .failures
                .iter()
                .filter(|f| &f.group == group)
                .count() as u64;
            cells.insert(
                (outcome.approach, group.canonical().to_string()),
                CellOutcome {
                    cm,
                    metrics,
                    failures,
                },
            );
        }
    }

    // Paired t-tests on per-group bACC: agentic against everything else.
    let mut tests: Vec<(String, TTestResult)> = Vec::new();
    let bacc_vector = |approach: Approach| -> Option<Vec<f64>> {
        let values: Vec<f64> = groups
            .iter()
            .filter_map(|g| cells.get(&(approach, g.canonical().to_string())))
            .filter_map(|c| c.metrics.map(|m| m.bacc))
            .collect();
        (values.len() == groups.len() && values.len() >= 2).then_some(values)
    };
    if let Some(agentic) = bacc_vector(Approach::Agentic) {
        for other in [Approach::ZeroShot, Approach::FewShot, Approach::Cot, Approach::Ablation] {
            if let Some(values) = bacc_vector(other) {
                if let Ok(result) = paired_ttest(&agentic, &values) {
                    tests.push((
                        format!("Agentic vs {}", other.display_name()),
                        result,
                    ));
                }
            }
        }
    }

    ReportInput {
        groups: groups.to_vec(),
        approaches: outcomes.iter().map(|o| o.approach).collect(),
        cells,
        tests,
    }
}

fn write_outputs(
    request: &EvalRequest,
    env: &EvalEnv,
    sampled: &[DatasetRecord],
    outcomes: &[ApproachOutcome],
    results_csv: &str,
    report_md: &str,
) -> Result<(), HarnessError> {
    let out = &request.out_dir;
    let io_err = |path: &Path, e: std::io::Error| HarnessError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;

    std::fs::write(out.join("results.csv"), results_csv)
        .map_err(|e| io_err(&out.join("results.csv"), e))?;
    std::fs::write(out.join("report.md"), report_md)
        .map_err(|e| io_err(&out.join("report.md"), e))?;

    // Failures, in canonical (approach, dataset) order.
    let order: BTreeMap<&str, usize> = sampled
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let mut failure_lines = String::new();
    for outcome in outcomes {
        let mut failures = outcome.failures.clone();
        failures.sort_by_key(|f| order.get(f.id.as_str()).copied().unwrap_or(usize::MAX));
        for f in &failures {
            failure_lines.push_str(&serde_json::to_string(f).expect("failure serializes"));
            failure_lines.push('\n');
        }
    }
    std::fs::write(out.join("failures.jsonl"), failure_lines)
        .map_err(|e| io_err(&out.join("failures.jsonl"), e))?;

    // Per-approach transcripts, decisions, and run records.
    for outcome in outcomes {
        let slug = outcome.approach.slug();
        let transcripts_dir = out.join("transcripts");
        std::fs::create_dir_all(&transcripts_dir).map_err(|e| io_err(&transcripts_dir, e))?;
        let mut lines = String::new();
        for record in &outcome.transcript {
            lines.push_str(&serde_json::to_string(record).expect("transcript serializes"));
            lines.push('\n');
        }
        let t_path = transcripts_dir.join(format!("{slug}.jsonl"));
        std::fs::write(&t_path, lines).map_err(|e| io_err(&t_path, e))?;

        let decisions_dir = out.join("decisions");
        std::fs::create_dir_all(&decisions_dir).map_err(|e| io_err(&decisions_dir, e))?;
        let mut decisions = outcome.decisions.clone();
        decisions.sort_by_key(|d| order.get(d.post_id.as_str()).copied().unwrap_or(usize::MAX));
        let mut lines = String::new();
        for d in &decisions {
            lines.push_str(&serde_json::to_string(d).expect("decision serializes"));
            lines.push('\n');
        }
        let d_path = decisions_dir.join(format!("{slug}.jsonl"));
        std::fs::write(&d_path, lines).map_err(|e| io_err(&d_path, e))?;

        if let Some(records) = &outcome.records {
            let runs_dir = out.join("runs");
            std::fs::create_dir_all(&runs_dir).map_err(|e| io_err(&runs_dir, e))?;
            let mut records = records.clone();
            records
                .sort_by_key(|r| order.get(r.post.id.as_str()).copied().unwrap_or(usize::MAX));
            let mut lines = String::new();
            for r in &records {
                lines.push_str(&serde_json::to_string(r).expect("run record serializes"));
                lines.push('\n');
            }
            let r_path = runs_dir.join(format!("{slug}.jsonl"));
            std::fs::write(&r_path, lines).map_err(|e| io_err(&r_path, e))?;
        }
    }

    // Self-describing run metadata.
    let dataset_sha = std::fs::read(&request.dataset)
        .map(|bytes| {
            use sha2::{Digest, Sha256};
            let mut h = Sha256::new();
            h.update(&bytes);
            hex::encode(h.finalize())
        })
        .unwrap_or_default();
    let fixture_sha = env.backend.fixture_path().and_then(|p| {
        std::fs::read(p).ok().map(|bytes| {
            use sha2::{Digest, Sha256};
            let mut h = Sha256::new();
            h.update(&bytes);
            hex::encode(h.finalize())
        })
    });
    let metadata = serde_json::json!({
        "created_at": chrono::Utc::now().to_rfc3339(),
        "seed": request.seed,
        "sample_n": request.sample_n,
        "shots": request.shots,
        "dataset": request.dataset.display().to_string(),
        "dataset_sha256": dataset_sha,
        "fixture_sha256": fixture_sha,
        "groups": request.groups.iter().map(|g| g.canonical().to_string()).collect::<Vec<_>>(),
        "approaches": outcomes.iter().map(|o| o.approach.slug()).collect::<Vec<_>>(),
        "pipeline": &request.pipeline,
        "model_id": env.model_id,
        "template_digest": env.templates.digests().values().cloned().collect::<Vec<_>>().join(","),
        "sampled_items": sampled.len(),
        "item_failures": outcomes.iter().map(|o| o.failures.len()).sum::<usize>(),
    });
    let m_path = out.join("run-metadata.json");
    std::fs::write(
        &m_path,
        serde_json::to_string_pretty(&metadata).expect("metadata serializes"),
    )
    .map_err(|e| io_err(&m_path, e))?;
    Ok(())
}
