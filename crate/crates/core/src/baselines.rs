//! Prompting baselines: zero-shot, few-shot, and chain-of-thought.
//!
//! All three share the gateway, the verdict wire format, and the reprompt
//! rule with the agentic pipeline, so comparisons isolate the consultation
//! mechanism rather than parsing luck.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::domain::{
    label_to_score, score_to_label, DecisionScore, DomainError, FinalDecision, FusionMode,
    GroupId, Label, Post,
};
use crate::gateway::verdict::{parse_verdict, render_verdict, AgentVerdict};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Role, Tag};
use crate::pipeline::assessment_from_verdict;
use crate::prompts::{render, TemplateSet};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("baseline did not produce a parsable verdict: {0}")]
    Protocol(String),
    #[error("exemplar set is invalid: {0}")]
    Validation(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Demonstration pairs for few-shot prompting: balanced between classes and
/// disjoint from the evaluation sample by id.
#[derive(Debug, Clone)]
pub struct ExemplarSet {
    pub items: Vec<(String, Label)>,
    pub seed: u64,
    source_ids: Vec<String>,
}

impl ExemplarSet {
    /// Seeded draw of `shots` exemplars (half hate, half benign) from the
    /// candidate pool. Candidates are `(id, text, gold)` triples.
    pub fn draw(
        candidates: &[(String, String, Label)],
        seed: u64,
        shots: usize,
    ) -> Result<Self, BaselineError> {
        if shots == 0 || shots % 2 != 0 {
            return Err(BaselineError::Validation(format!(
                "shot count must be a positive even number, got {shots}"
            )));
        }
        let per_class = shots / 2;
        let hate: Vec<_> = candidates
            .iter()
            .filter(|(_, _, l)| *l == Label::HateSpeech)
            .collect();
        let benign: Vec<_> = candidates
            .iter()
            .filter(|(_, _, l)| *l == Label::NotHateSpeech)
            .collect();
        if hate.len() < per_class || benign.len() < per_class {
            return Err(BaselineError::Validation(format!(
                "need {per_class} exemplars per class, pool has {} hate / {} benign",
                hate.len(),
                benign.len()
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |pool: &[&(String, String, Label)]| -> Vec<(String, String, Label)> {
            let mut shuffled: Vec<_> = pool.to_vec();
            shuffled.shuffle(&mut rng);
            shuffled.into_iter().take(per_class).cloned().collect()
        };
        let chosen_hate = pick(&hate);
        let chosen_benign = pick(&benign);

        // Interleave hate/benign so neither class anchors the prompt.
        let mut items = Vec::with_capacity(shots);
        let mut source_ids = Vec::with_capacity(shots);
        for i in 0..per_class {
            for pool in [&chosen_hate, &chosen_benign] {
                let (id, text, label) = &pool[i];
                items.push((text.clone(), *label));
                source_ids.push(id.clone());
            }
        }
        Ok(Self {
            items,
            seed,
            source_ids,
        })
    }

    /// Fails when any exemplar id appears in the evaluation sample.
    pub fn assert_disjoint(&self, test_ids: &HashSet<String>) -> Result<(), BaselineError> {
        for id in &self.source_ids {
            if test_ids.contains(id) {
                return Err(BaselineError::Validation(format!(
                    "exemplar {id} overlaps the evaluation sample"
                )));
            }
        }
        Ok(())
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }
}

/// Runs the three prompting baselines against a shared gateway.
pub struct BaselineRunner<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub model_id: String,
    pub temperature: f64,
    pub cut: DecisionScore,
}

impl<'a> BaselineRunner<'a> {
    pub fn new(gateway: &'a Gateway, templates: &'a TemplateSet, model_id: impl Into<String>) -> Self {
        Self {
            gateway,
            templates,
            model_id: model_id.into(),
            temperature: 0.0,
            cut: DecisionScore::new(0.5).expect("0.5 is a valid score"),
        }
    }

    fn post_turn(&self, post: &Post) -> String {
        render(&self.templates.post_user, &[("post", &post.text)])
    }

    fn run(&self, req: ChatRequest, post: &Post, group: &GroupId) -> Result<FinalDecision, BaselineError> {
        let verdict = self.exchange(req)?;
        decision_from_verdict(&verdict, post, group, self.cut)
    }

    fn exchange(&self, mut req: ChatRequest) -> Result<AgentVerdict, BaselineError> {
        let first = self.gateway.complete(&req)?;
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
                parse_verdict(&second.text).map_err(|second_err| {
                    BaselineError::Protocol(format!(
                        "first attempt: {first_err}; reprompt: {second_err}"
                    ))
                })
            }
        }
    }

    /// Task definition + post, nothing else.
    pub fn run_zero_shot(&self, post: &Post, group: &GroupId) -> Result<FinalDecision, BaselineError> {
        let system = render(
            &self.templates.zero_shot_system,
            &[("format", &self.templates.verdict_format)],
        );
        let req = ChatRequest::new(
            system,
            self.post_turn(post),
            self.temperature,
            self.model_id.clone(),
            Tag::Baseline,
        );
        self.run(req, post, group)
    }

    /// Zero-shot plus balanced demonstration turns.
    pub fn run_few_shot(
        &self,
        post: &Post,
        group: &GroupId,
        exemplars: &ExemplarSet,
    ) -> Result<FinalDecision, BaselineError> {
        let system = render(
            &self.templates.few_shot_system,
            &[("format", &self.templates.verdict_format)],
        );
        let mut req = ChatRequest {
            system_prompt: system,
            turns: Vec::with_capacity(exemplars.items.len() * 2 + 1),
            temperature: self.temperature,
            model_id: self.model_id.clone(),
            tag: Tag::Baseline,
        };
        for (text, gold) in &exemplars.items {
            req.push_turn(
                Role::User,
                render(&self.templates.post_user, &[("post", text)]),
            );
            req.push_turn(
                Role::Assistant,
                render_verdict(&AgentVerdict {
                    label: *gold,
                    confidence: 0.9,
                    justification: "worked example".to_string(),
                    consultation_needed: false,
                }),
            );
        }
        req.push_turn(Role::User, self.post_turn(post));
        self.run(req, post, group)
    }

    /// Step-by-step reasoning, then the verdict block; last-block parsing
    /// absorbs the reasoning prose.
    pub fn run_cot(&self, post: &Post, group: &GroupId) -> Result<FinalDecision, BaselineError> {
        let system = render(
            &self.templates.cot_system,
            &[("format", &self.templates.verdict_format)],
        );
        let req = ChatRequest::new(
            system,
            self.post_turn(post),
            self.temperature,
            self.model_id.clone(),
            Tag::Baseline,
        );
        self.run(req, post, group)
    }
}

/// Baseline decisions never consult: passthrough of the bridged score.
fn decision_from_verdict(
    verdict: &AgentVerdict,
    post: &Post,
    group: &GroupId,
    cut: DecisionScore,
) -> Result<FinalDecision, BaselineError> {
    let initial = assessment_from_verdict(verdict)?;
    let p_final = label_to_score(verdict.label, verdict.confidence)?;
    Ok(FinalDecision {
        post_id: post.id.clone(),
        group: group.clone(),
        p_final,
        final_label: score_to_label(p_final, cut)?,
        consulted: false,
        initial,
        opinion: None,
        fusion_mode: FusionMode::Passthrough,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{fixture_entry_for, fixtures::FixtureStore, FixtureBuilder};

    fn post(id: &str, text: &str) -> Post {
        Post::new(id, text, Some(GroupId::Muslim)).unwrap()
    }

    fn candidates() -> Vec<(String, String, Label)> {
        (0..10)
            .map(|i| {
                let label = if i % 2 == 0 {
                    Label::HateSpeech
                } else {
                    Label::NotHateSpeech
                };
                (format!("ex-{i}"), format!("exemplar text {i}"), label)
            })
            .collect()
    }

    #[test]
    fn exemplar_draw_is_balanced_and_seeded() {
        let pool = candidates();
        let a = ExemplarSet::draw(&pool, 7, 6).unwrap();
        let b = ExemplarSet::draw(&pool, 7, 6).unwrap();
        assert_eq!(a.items, b.items, "same seed, same draw");
        let hate = a.items.iter().filter(|(_, l)| *l == Label::HateSpeech).count();
        assert_eq!(hate, 3);
        assert_eq!(a.items.len(), 6);

        let c = ExemplarSet::draw(&pool, 8, 6).unwrap();
        assert_ne!(a.source_ids(), c.source_ids(), "different seed, different draw");
    }

    #[test]
    fn exemplar_overlap_with_test_ids_is_rejected() {
        let pool = candidates();
        let set = ExemplarSet::draw(&pool, 7, 6).unwrap();
        let mut test_ids: HashSet<String> = HashSet::new();
        test_ids.insert(set.source_ids()[0].clone());
        assert!(matches!(
            set.assert_disjoint(&test_ids),
            Err(BaselineError::Validation(_))
        ));
        assert!(set.assert_disjoint(&HashSet::new()).is_ok());
    }

    #[test]
    fn unbalanced_pool_is_rejected() {
        let pool: Vec<_> = (0..4)
            .map(|i| (format!("h{i}"), "text".to_string(), Label::HateSpeech))
            .collect();
        assert!(matches!(
            ExemplarSet::draw(&pool, 7, 6),
            Err(BaselineError::Validation(_))
        ));
    }

    #[test]
    fn zero_shot_bridges_the_verdict() {
        let templates = TemplateSet::default();
        let p = post("p1", "a post to classify");
        let gateway_probe = BaselineRunner::new(
            &Gateway::replay(FixtureStore::from_entries(vec![])),
            &templates,
            "m",
        );
        // Build the exact request the runner will send, then fixture it.
        let system = render(
            &templates.zero_shot_system,
            &[("format", &templates.verdict_format)],
        );
        let req = ChatRequest::new(system, gateway_probe.post_turn(&p), 0.0, "m", Tag::Baseline);
        let entry = fixture_entry_for(
            &req,
            0,
            "```verdict\nlabel: Hate Speech\nconfidence: 0.9\njustification: direct attack\nconsultation_needed: no\n```",
        );
        let gateway = Gateway::replay(FixtureStore::from_entries(vec![entry]));
        let runner = BaselineRunner::new(&gateway, &templates, "m");

        let decision = runner.run_zero_shot(&p, &GroupId::Muslim).unwrap();
        assert_eq!(decision.final_label, Label::HateSpeech);
        assert!((decision.p_final.value() - 0.95).abs() < 1e-12);
        assert!(!decision.consulted);
        assert_eq!(decision.fusion_mode, FusionMode::Passthrough);
    }

    #[test]
    fn unsure_ties_to_not_hate_at_the_default_cut() {
        let templates = TemplateSet::default();
        let p = post("p2", "ambiguous post");
        let system = render(
            &templates.zero_shot_system,
            &[("format", &templates.verdict_format)],
        );
        let user = render(&templates.post_user, &[("post", &p.text)]);
        let req = ChatRequest::new(system, user, 0.0, "m", Tag::Baseline);
        let mut builder = FixtureBuilder::new();
        builder.add(
            &req,
            "```verdict\nlabel: unsure\nconfidence: 0.5\njustification: unclear\nconsultation_needed: yes\n```",
        );
        let gateway = Gateway::replay(builder.build());
        let runner = BaselineRunner::new(&gateway, &templates, "m");

        let decision = runner.run_zero_shot(&p, &GroupId::Muslim).unwrap();
        assert_eq!(decision.p_final.value(), 0.5);
        assert_eq!(decision.final_label, Label::NotHateSpeech);
    }

    #[test]
    fn malformed_twice_is_a_protocol_error() {
        let templates = TemplateSet::default();
        let p = post("p3", "post with a rambling model");
        let system = render(
            &templates.zero_shot_system,
            &[("format", &templates.verdict_format)],
        );
        let user = render(&templates.post_user, &[("post", &p.text)]);
        let first = ChatRequest::new(system, user, 0.0, "m", Tag::Baseline);
        let mut reprompt = first.clone();
        reprompt.push_turn(Role::Assistant, "no block here");
        reprompt.push_turn(
            Role::User,
            "Your previous reply did not contain a valid verdict block. \
             Respond ONLY with the verdict block.",
        );
        let mut builder = FixtureBuilder::new();
        builder.add(&first, "no block here");
        builder.add(&reprompt, "still no block");
        let gateway = Gateway::replay(builder.build());
        let runner = BaselineRunner::new(&gateway, &templates, "m");

        assert!(matches!(
            runner.run_zero_shot(&p, &GroupId::Muslim),
            Err(BaselineError::Protocol(_))
        ));
    }

    #[test]
    fn few_shot_prompt_contains_exemplar_turns() {
        let templates = TemplateSet::default();
        let pool = candidates();
        let exemplars = ExemplarSet::draw(&pool, 7, 6).unwrap();
        let p = post("p4", "the target post");

        // Reconstruct the few-shot request exactly as the runner builds it.
        let system = render(
            &templates.few_shot_system,
            &[("format", &templates.verdict_format)],
        );
        let mut req = ChatRequest {
            system_prompt: system,
            turns: vec![],
            temperature: 0.0,
            model_id: "m".to_string(),
            tag: Tag::Baseline,
        };
        for (text, gold) in &exemplars.items {
            req.push_turn(Role::User, render(&templates.post_user, &[("post", text)]));
            req.push_turn(
                Role::Assistant,
                render_verdict(&AgentVerdict {
                    label: *gold,
                    confidence: 0.9,
                    justification: "worked example".to_string(),
                    consultation_needed: false,
                }),
            );
        }
        req.push_turn(Role::User, render(&templates.post_user, &[("post", &p.text)]));
        assert_eq!(req.turns.len(), 13);

        let mut builder = FixtureBuilder::new();
        builder.add(
            &req,
            "```verdict\nlabel: not hate speech\nconfidence: 0.8\njustification: benign\nconsultation_needed: no\n```",
        );
        let gateway = Gateway::replay(builder.build());
        let runner = BaselineRunner::new(&gateway, &templates, "m");
        let decision = runner.run_few_shot(&p, &GroupId::Muslim, &exemplars).unwrap();
        assert!((decision.p_final.value() - 0.1).abs() < 1e-12);
    }
}
