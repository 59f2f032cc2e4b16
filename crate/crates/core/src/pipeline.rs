//! The consultative moderation pipeline.
//!
//! One post flows through: target extraction, the moderator's initial
//! assessment, the uncertainty gate, optional persona construction and
//! community consultation, and decision fusion. When the gate does not
//! fire, the initial score passes through bit-exactly.

use std::collections::VecDeque;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    label_to_score, score_to_label, Assessment, CommunityOpinion, DecisionScore, DomainError,
    FinalDecision, FusionMode, GroupId, Label, Post, Thresholds,
};
use crate::gateway::verdict::{parse_verdict, AgentVerdict};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Role, Tag};
use crate::knowledge::{CorpusCache, KnowledgeError, Retriever};
use crate::knowledge::wiki::WikiClient;
use crate::persona::embedding::EmbeddingProvider;
use crate::persona::{build_persona_cached, CommunityPersona, PersonaCache, PersonaError};
use crate::prompts::{render, TemplateSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("target group extraction failed: {0}")]
    GroupExtraction(String),
    #[error("moderator did not produce a parsable verdict: {0}")]
    ModeratorProtocol(String),
    #[error("community agent did not produce a parsable verdict: {0}")]
    CommunityProtocol(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Persona(#[from] PersonaError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// How moderator and community scores are combined after a consultation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// A fusion call asks the moderator to synthesise both verdicts;
    /// falls back to averaging when that call cannot be parsed.
    Adjudicate,
    /// Plain arithmetic mean of the two scores.
    Average,
}

/// Which signals open the consultation gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRule {
    /// Score inside the uncertainty band OR an explicit moderator request.
    IntervalOrFlag,
    /// Score inside the uncertainty band only.
    IntervalOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub thresholds: Thresholds,
    /// Number of encyclopedia queries per persona build.
    pub k_d: usize,
    pub fusion: FusionStrategy,
    /// Ablation: the moderator classifies alone, the gate never opens.
    pub ablation_no_consult: bool,
    /// Binarization cut for the final label.
    pub cut: DecisionScore,
    pub gate: GateRule,
    /// Passages selected into a persona prompt.
    pub top_m_passages: usize,
    /// Bounded parallelism for batch moderation.
    pub parallelism: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            k_d: 5,
            fusion: FusionStrategy::Adjudicate,
            ablation_no_consult: false,
            cut: DecisionScore::new(0.5).expect("0.5 is a valid score"),
            gate: GateRule::IntervalOrFlag,
            top_m_passages: crate::persona::DEFAULT_SELECTED_PASSAGES,
            parallelism: 4,
        }
    }
}

/// One moderated post with its decision and the digests of every agent
/// call made for it, in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub post: Post,
    pub decision: FinalDecision,
    pub transcript_refs: Vec<String>,
}

/// The gate: consult iff the score falls inside the uncertainty band, or
/// (under [`GateRule::IntervalOrFlag`]) the moderator asked explicitly.
/// Ablation mode never consults.
pub fn should_consult(assessment: &Assessment, cfg: &PipelineConfig) -> bool {
    if cfg.ablation_no_consult {
        return false;
    }
    let in_band = cfg.thresholds.contains(assessment.score);
    match cfg.gate {
        GateRule::IntervalOrFlag => in_band || assessment.consult_flag,
        GateRule::IntervalOnly => in_band,
    }
}

/// Everything `moderate` needs besides the post itself.
pub struct Pipeline<'a> {
    pub gateway: &'a Gateway,
    pub wiki: &'a WikiClient,
    pub provider: &'a dyn EmbeddingProvider,
    pub templates: &'a TemplateSet,
    pub model_id: String,
    pub temperature: f64,
    pub query_temperature: f64,
    pub config: PipelineConfig,
    pub corpus_cache: Option<CorpusCache>,
    pub persona_cache: Option<PersonaCache>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        gateway: &'a Gateway,
        wiki: &'a WikiClient,
        provider: &'a dyn EmbeddingProvider,
        templates: &'a TemplateSet,
        model_id: impl Into<String>,
        config: PipelineConfig,
    ) -> Self {
        Self {
            gateway,
            wiki,
            provider,
            templates,
            model_id: model_id.into(),
            temperature: 0.0,
            query_temperature: 0.7,
            config,
            corpus_cache: None,
            persona_cache: None,
        }
    }

    fn post_turn(&self, post: &Post) -> String {
        render(&self.templates.post_user, &[("post", &post.text)])
    }

    /// Resolves the post's target group: metadata wins, otherwise one
    /// extraction call against the known taxonomy.
    pub fn extract_target_group(&self, post: &Post) -> Result<GroupId, PipelineError> {
        if let Some(hint) = &post.group_hint {
            return Ok(hint.clone());
        }
        let taxonomy = GroupId::BUILTIN
            .iter()
            .map(|g| g.display_name())
            .collect::<Vec<_>>()
            .join(", ");
        let system = render(&self.templates.extract_system, &[("taxonomy", &taxonomy)]);
        let req = ChatRequest::new(
            system,
            self.post_turn(post),
            self.temperature,
            self.model_id.clone(),
            Tag::Moderator,
        );
        let response = self
            .gateway
            .complete(&req)
            .map_err(|e| PipelineError::GroupExtraction(e.to_string()))?;
        let answer = response
            .text
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .ok_or_else(|| PipelineError::GroupExtraction("empty extraction reply".into()))?;
        Ok(GroupId::parse(answer))
    }

    /// One agent exchange with a single reprompt when the verdict block is
    /// missing or malformed.
    fn verdict_exchange(
        &self,
        mut req: ChatRequest,
        refs: &mut Vec<String>,
    ) -> Result<AgentVerdict, PipelineError> {
        let first = self.gateway.complete(&req)?;
        refs.push(first.prompt_sha256.clone());
        match parse_verdict(&first.text) {
            Ok(v) => Ok(v),
            Err(first_err) => {
                req.push_turn(Role::Assistant, first.text);
                req.push_turn(
                    Role::User,
                    "Your previous reply did not contain a valid verdict block. \
                     Respond ONLY with the verdict block.",
                );
                let second = self.gateway.complete(&req)?;
                refs.push(second.prompt_sha256.clone());
                parse_verdict(&second.text).map_err(|second_err| {
                    PipelineError::ModeratorProtocol(format!(
                        "first attempt: {first_err}; reprompt: {second_err}"
                    ))
                })
            }
        }
    }

    /// The moderator's preliminary assessment of a post.
    pub fn moderator_assess(
        &self,
        post: &Post,
        group: &GroupId,
        refs: &mut Vec<String>,
    ) -> Result<Assessment, PipelineError> {
        let system = render(
            &self.templates.moderator_system,
            &[
                ("group", &group.display_name()),
                ("format", &self.templates.verdict_format),
            ],
        );
        let req = ChatRequest::new(
            system,
            self.post_turn(post),
            self.temperature,
            self.model_id.clone(),
            Tag::Moderator,
        );
        let verdict = self.verdict_exchange(req, refs)?;
        Ok(assessment_from_verdict(&verdict)?)
    }

    /// Builds (or loads) the community persona for a group.
    pub fn build_persona(&self, group: &GroupId) -> Result<CommunityPersona, PipelineError> {
        let mut retriever = Retriever::new(self.gateway, self.wiki, self.templates, &self.model_id);
        retriever.query_temperature = self.query_temperature;
        retriever.cache = self.corpus_cache.clone();
        let corpus = retriever.retrieve_corpus(group, self.config.k_d)?;
        Ok(build_persona_cached(
            self.provider,
            self.templates,
            group,
            &corpus,
            self.config.top_m_passages,
            self.persona_cache.as_ref(),
        )?)
    }

    /// Asks the community agent for its opinion on the post.
    pub fn community_consult(
        &self,
        post: &Post,
        persona: &CommunityPersona,
        refs: &mut Vec<String>,
    ) -> Result<CommunityOpinion, PipelineError> {
        let req = ChatRequest::new(
            persona.system_prompt.clone(),
            self.post_turn(post),
            self.temperature,
            self.model_id.clone(),
            Tag::Community,
        );
        let verdict = self.verdict_exchange(req, refs).map_err(|e| match e {
            PipelineError::ModeratorProtocol(msg) => PipelineError::CommunityProtocol(msg),
            other => other,
        })?;
        let score = label_to_score(verdict.label, verdict.confidence)?;
        Ok(CommunityOpinion {
            score,
            rationale: verdict.justification,
            persona_id: persona.persona_id.clone(),
        })
    }

    /// Combines both verdicts into the final score. Adjudication asks the
    /// moderator to synthesise; any failure there falls back to the
    /// arithmetic mean, so this operation is total.
    pub fn combine_scores(
        &self,
        post: &Post,
        group: &GroupId,
        initial: &Assessment,
        opinion: &CommunityOpinion,
        refs: &mut Vec<String>,
    ) -> (DecisionScore, FusionMode) {
        if self.config.fusion == FusionStrategy::Adjudicate {
            match self.adjudicate(post, group, initial, opinion, refs) {
                Ok(score) => return (score, FusionMode::Adjudicated),
                Err(e) => log::warn!("fusion call failed, averaging instead: {e}"),
            }
        }
        (
            DecisionScore::midpoint(initial.score, opinion.score),
            FusionMode::FallbackAverage,
        )
    }

    fn adjudicate(
        &self,
        post: &Post,
        group: &GroupId,
        initial: &Assessment,
        opinion: &CommunityOpinion,
        refs: &mut Vec<String>,
    ) -> Result<DecisionScore, PipelineError> {
        let system = render(
            &self.templates.fusion_system,
            &[
                ("group", &group.display_name()),
                ("format", &self.templates.verdict_format),
            ],
        );
        let user = render(
            &self.templates.fusion_user,
            &[
                ("post", &post.text),
                ("group", &group.display_name()),
                ("p_m", &format!("{:.3}", initial.score.value())),
                ("r_m", &initial.justification),
                ("p_c", &format!("{:.3}", opinion.score.value())),
                ("r_c", &opinion.rationale),
            ],
        );
        let req = ChatRequest::new(
            system,
            user,
            self.temperature,
            self.model_id.clone(),
            Tag::Fusion,
        );
        let response = self.gateway.complete(&req)?;
        refs.push(response.prompt_sha256.clone());
        let verdict = parse_verdict(&response.text).map_err(GatewayError::Parse)?;
        if verdict.label == Label::Unsure {
            return Err(PipelineError::ModeratorProtocol(
                "fusion verdict must be binary".into(),
            ));
        }
        Ok(label_to_score(verdict.label, verdict.confidence)?)
    }

    /// The full per-post flow.
    pub fn moderate(&self, post: &Post) -> Result<RunRecord, PipelineError> {
        let mut refs = Vec::new();
        let group = self.extract_target_group(post)?;
        let initial = self.moderator_assess(post, &group, &mut refs)?;

        let decision = if should_consult(&initial, &self.config) {
            let persona = self.build_persona(&group)?;
            let opinion = self.community_consult(post, &persona, &mut refs)?;
            let (p_final, fusion_mode) =
                self.combine_scores(post, &group, &initial, &opinion, &mut refs);
            FinalDecision {
                post_id: post.id.clone(),
                group: group.clone(),
                p_final,
                final_label: score_to_label(p_final, self.config.cut)?,
                consulted: true,
                initial,
                opinion: Some(opinion),
                fusion_mode,
            }
        } else {
            FinalDecision {
                post_id: post.id.clone(),
                group: group.clone(),
                p_final: initial.score,
                final_label: score_to_label(initial.score, self.config.cut)?,
                consulted: false,
                initial,
                opinion: None,
                fusion_mode: FusionMode::Passthrough,
            }
        };

        debug_assert!(decision.passthrough_consistent());
        Ok(RunRecord {
            post: post.clone(),
            decision,
            transcript_refs: refs,
        })
    }

    /// Moderates a batch with bounded parallelism. One post's failure never
    /// aborts the batch; results come back in input order.
    pub fn moderate_batch(
        &self,
        posts: &[Post],
    ) -> Vec<Result<RunRecord, (String, PipelineError)>> {
        let workers = self.config.parallelism.clamp(1, posts.len().max(1));
        if workers == 1 {
            return posts
                .iter()
                .map(|p| self.moderate(p).map_err(|e| (p.id.clone(), e)))
                .collect();
        }

        let queue: Mutex<VecDeque<usize>> = Mutex::new((0..posts.len()).collect());
        let results: Mutex<Vec<Option<Result<RunRecord, (String, PipelineError)>>>> =
            Mutex::new((0..posts.len()).map(|_| None).collect());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let next = queue.lock().expect("work queue poisoned").pop_front();
                    let Some(index) = next else { break };
                    let post = &posts[index];
                    let outcome = self.moderate(post).map_err(|e| (post.id.clone(), e));
                    results.lock().expect("results poisoned")[index] = Some(outcome);
                });
            }
        });

        results
            .into_inner()
            .expect("results poisoned")
            .into_iter()
            .map(|slot| slot.expect("every post processed"))
            .collect()
    }
}

/// Converts a parsed verdict into an assessment, bridging the categorical
/// label to a score and enforcing that Unsure always requests consultation.
pub fn assessment_from_verdict(verdict: &AgentVerdict) -> Result<Assessment, DomainError> {
    let score = label_to_score(verdict.label, verdict.confidence)?;
    Ok(Assessment {
        label: verdict.label,
        score,
        justification: verdict.justification.clone(),
        consult_flag: verdict.consultation_needed || verdict.label == Label::Unsure,
    })
}
