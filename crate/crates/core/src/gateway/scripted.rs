//! A deterministic stand-in for the generative model.
//!
//! Each rule pairs a post text with a scenario describing how the simulated
//! model behaves toward that post (confident, uncertain, wrong, ...). The
//! responder recognizes the post inside an incoming prompt, then answers in
//! the role the request's tag asks for. Running the evaluation harness over
//! a scripted gateway in record mode is how the bundled offline fixture
//! pack is produced.

use crate::domain::{GroupId, Label};

use super::verdict::{render_verdict, AgentVerdict};
use super::{ChatRequest, GatewayError, ScriptedResponder, Tag};

/// How the simulated model behaves toward one post.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Hateful post the moderator flags outright.
    HateConfident,
    /// Hateful post the moderator flags but still asks for consultation.
    HateFlagged,
    /// Hateful post the moderator is unsure about; the difficulty level
    /// (1..=3) controls which prompting baselines catch it.
    HateUncertain(u8),
    /// Hateful post every agent reads as benign (a shared false negative).
    HateMissed,
    /// Hateful post scored just above the midpoint, inside the default
    /// uncertainty band but without an explicit consultation request.
    HateLeaning,
    /// Benign post everyone passes.
    BenignConfident,
    /// Benign post the moderator is unsure about (and zero-shot over-flags).
    BenignUncertain,
    /// Benign post scored just below the midpoint.
    BenignLeaning,
}

impl Scenario {
    pub fn parse(raw: &str) -> Option<Scenario> {
        match raw.trim() {
            "hate-confident" => Some(Scenario::HateConfident),
            "hate-flagged" => Some(Scenario::HateFlagged),
            "hate-uncertain-1" => Some(Scenario::HateUncertain(1)),
            "hate-uncertain-2" => Some(Scenario::HateUncertain(2)),
            "hate-uncertain-3" => Some(Scenario::HateUncertain(3)),
            "hate-missed" => Some(Scenario::HateMissed),
            "hate-leaning" => Some(Scenario::HateLeaning),
            "benign-confident" => Some(Scenario::BenignConfident),
            "benign-uncertain" => Some(Scenario::BenignUncertain),
            "benign-leaning" => Some(Scenario::BenignLeaning),
            _ => None,
        }
    }

    fn is_hate(self) -> bool {
        matches!(
            self,
            Scenario::HateConfident
                | Scenario::HateFlagged
                | Scenario::HateUncertain(_)
                | Scenario::HateMissed
                | Scenario::HateLeaning
        )
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedRule {
    /// The post text to recognize inside prompts.
    pub needle: String,
    pub scenario: Scenario,
}

#[derive(Debug, Default)]
pub struct ScriptedBackend {
    rules: Vec<ScriptedRule>,
    groups: Vec<GroupId>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptedRule>) -> Self {
        Self {
            rules,
            groups: GroupId::BUILTIN.to_vec(),
        }
    }

    fn match_scenario(&self, haystack: &str) -> Option<Scenario> {
        // Longest matching needle wins, so posts that quote each other do
        // not confuse the lookup.
        self.rules
            .iter()
            .filter(|r| haystack.contains(&r.needle))
            .max_by_key(|r| r.needle.len())
            .map(|r| r.scenario)
    }

    fn match_group(&self, haystack: &str) -> Option<&GroupId> {
        self.groups
            .iter()
            .find(|g| haystack.contains(&g.display_name()))
    }

    fn moderator_reply(scenario: Scenario) -> String {
        let (label, confidence, justification, flag) = match scenario {
            Scenario::HateConfident => (
                Label::HateSpeech,
                0.9,
                "direct demeaning generalization about the group",
                false,
            ),
            Scenario::HateFlagged => (
                Label::HateSpeech,
                0.9,
                "hostile generalization, though in-group context could matter",
                true,
            ),
            Scenario::HateUncertain(_) => (
                Label::Unsure,
                0.4,
                "the phrasing is coded and depends on context I may be missing",
                true,
            ),
            Scenario::HateMissed => (
                Label::NotHateSpeech,
                0.8,
                "reads as a neutral observation without hostile framing",
                false,
            ),
            Scenario::HateLeaning => (
                Label::HateSpeech,
                0.1,
                "mildly derogatory generalization, but low certainty",
                false,
            ),
            Scenario::BenignConfident => (
                Label::NotHateSpeech,
                0.9,
                "ordinary statement with no derogatory content",
                false,
            ),
            Scenario::BenignUncertain => (
                Label::Unsure,
                0.4,
                "could be in-group reclaimed usage; context needed",
                true,
            ),
            Scenario::BenignLeaning => (
                Label::NotHateSpeech,
                0.2,
                "blunt phrasing but likely benign intent",
                false,
            ),
        };
        let block = render_verdict(&AgentVerdict {
            label,
            confidence,
            justification: justification.to_string(),
            consultation_needed: flag,
        });
        format!("Assessment of the reported post follows.\n\n{block}")
    }

    fn community_reply(scenario: Scenario) -> String {
        if scenario == Scenario::BenignUncertain {
            // Deliberate draft-then-final shape: downstream parsing must
            // take the last block.
            let draft = render_verdict(&AgentVerdict {
                label: Label::Unsure,
                confidence: 0.5,
                justification: "first reading is ambiguous".to_string(),
                consultation_needed: false,
            });
            let fin = render_verdict(&AgentVerdict {
                label: Label::NotHateSpeech,
                confidence: 0.8,
                justification: "this is common in-group phrasing without derogatory intent"
                    .to_string(),
                consultation_needed: false,
            });
            return format!(
                "Initial reading:\n{draft}\n\nOn closer review of how members of this community use the phrase:\n{fin}"
            );
        }
        let (label, confidence, justification) = if scenario.is_hate() {
            let conf = if scenario == Scenario::HateMissed { 0.6 } else { 0.8 };
            (
                Label::HateSpeech,
                conf,
                "echoes a familiar coded stereotype used against this community",
            )
        } else {
            (
                Label::NotHateSpeech,
                0.8,
                "members of this community would not read this as an attack",
            )
        };
        let block = render_verdict(&AgentVerdict {
            label,
            confidence,
            justification: justification.to_string(),
            consultation_needed: false,
        });
        format!("Speaking from the community perspective described in my briefing:\n\n{block}")
    }

    fn fusion_reply(scenario: Scenario) -> String {
        let (label, confidence, justification) = if scenario.is_hate() {
            let conf = if scenario == Scenario::HateMissed { 0.6 } else { 0.8 };
            (
                Label::HateSpeech,
                conf,
                "community context confirms the coded hostility of the phrasing",
            )
        } else {
            (
                Label::NotHateSpeech,
                0.8,
                "community input indicates the phrasing is benign in context",
            )
        };
        let block = render_verdict(&AgentVerdict {
            label,
            confidence,
            justification: justification.to_string(),
            consultation_needed: false,
        });
        format!("Weighing both assessments together:\n\n{block}")
    }

    fn baseline_reply(scenario: Scenario, style: BaselineStyle) -> String {
        let caught = match style {
            BaselineStyle::ZeroShot => {
                matches!(scenario, Scenario::HateConfident | Scenario::HateFlagged)
            }
            BaselineStyle::FewShot => matches!(
                scenario,
                Scenario::HateConfident | Scenario::HateFlagged | Scenario::HateUncertain(1)
            ),
            BaselineStyle::ChainOfThought => matches!(
                scenario,
                Scenario::HateConfident
                    | Scenario::HateFlagged
                    | Scenario::HateUncertain(1)
                    | Scenario::HateUncertain(2)
                    | Scenario::HateLeaning
            ),
        };
        let false_positive =
            style == BaselineStyle::ZeroShot && scenario == Scenario::BenignUncertain;

        let verdict = if scenario.is_hate() {
            if caught {
                AgentVerdict {
                    label: Label::HateSpeech,
                    confidence: 0.8,
                    justification: "the statement disparages the group as a whole".to_string(),
                    consultation_needed: false,
                }
            } else {
                AgentVerdict {
                    label: Label::NotHateSpeech,
                    confidence: 0.7,
                    justification: "no explicit slur or threat is present".to_string(),
                    consultation_needed: false,
                }
            }
        } else if false_positive {
            AgentVerdict {
                label: Label::HateSpeech,
                confidence: 0.6,
                justification: "mentions the group in a blunt, possibly mocking way".to_string(),
                consultation_needed: false,
            }
        } else {
            AgentVerdict {
                label: Label::NotHateSpeech,
                confidence: 0.9,
                justification: "plainly non-hostile content".to_string(),
                consultation_needed: false,
            }
        };
        let block = render_verdict(&verdict);
        match style {
            BaselineStyle::ChainOfThought => format!(
                "Step 1: the post references a demographic group, so I check for coded language.\n\
                 Step 2: I weigh intent, tone, and whether a stereotype is being invoked.\n\
                 Step 3: I settle on a final classification.\n\n{block}"
            ),
            _ => block,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BaselineStyle {
    ZeroShot,
    FewShot,
    ChainOfThought,
}

impl ScriptedResponder for ScriptedBackend {
    fn respond(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let last_user = req
            .turns
            .iter()
            .rev()
            .find(|t| t.role == super::Role::User)
            .map(|t| t.content.as_str())
            .unwrap_or_default();

        if req.tag == Tag::QueryGen {
            let group = self
                .match_group(last_user)
                .or_else(|| self.match_group(&req.system_prompt))
                .ok_or_else(|| {
                    GatewayError::Config("scripted backend: no known group in query prompt".into())
                })?;
            let g = group.display_name();
            return Ok(format!(
                "History of the {g} community\nDiscrimination against {g} people\nStereotypes about {g} people\n{g} civil rights history\nHate speech targeting the {g} community"
            ));
        }

        let scenario = self.match_scenario(last_user).ok_or_else(|| {
            GatewayError::Config(format!(
                "scripted backend: no rule matches prompt for tag {}",
                req.tag
            ))
        })?;

        let text = match req.tag {
            Tag::Moderator => Self::moderator_reply(scenario),
            Tag::Community => Self::community_reply(scenario),
            Tag::Fusion => Self::fusion_reply(scenario),
            Tag::Baseline => {
                let style = if req.turns.len() > 1 {
                    BaselineStyle::FewShot
                } else if req.system_prompt.contains("step by step") {
                    BaselineStyle::ChainOfThought
                } else {
                    BaselineStyle::ZeroShot
                };
                Self::baseline_reply(scenario, style)
            }
            Tag::QueryGen => unreachable!("handled above"),
        };
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::verdict::parse_verdict;

    fn backend() -> ScriptedBackend {
        ScriptedBackend::new(vec![
            ScriptedRule {
                needle: "they always take over".to_string(),
                scenario: Scenario::HateUncertain(1),
            },
            ScriptedRule {
                needle: "the festival was lovely".to_string(),
                scenario: Scenario::BenignConfident,
            },
        ])
    }

    #[test]
    fn moderator_is_unsure_for_uncertain_hate() {
        let req = ChatRequest::new(
            "sys",
            "Post: they always take over",
            0.0,
            "m",
            Tag::Moderator,
        );
        let v = parse_verdict(&backend().respond(&req).unwrap()).unwrap();
        assert_eq!(v.label, Label::Unsure);
        assert!(v.consultation_needed);
    }

    #[test]
    fn community_flags_what_the_moderator_missed() {
        let req = ChatRequest::new(
            "sys",
            "Post: they always take over",
            0.0,
            "m",
            Tag::Community,
        );
        let v = parse_verdict(&backend().respond(&req).unwrap()).unwrap();
        assert_eq!(v.label, Label::HateSpeech);
    }

    #[test]
    fn query_gen_names_the_group() {
        let req = ChatRequest::new(
            "sys",
            "Generate search queries about the Muslim community",
            0.7,
            "m",
            Tag::QueryGen,
        );
        let out = backend().respond(&req).unwrap();
        assert_eq!(out.lines().count(), 5);
        assert!(out.contains("Muslim"));
    }

    #[test]
    fn unknown_post_is_an_error_not_a_panic() {
        let req = ChatRequest::new("sys", "never seen before", 0.0, "m", Tag::Moderator);
        assert!(backend().respond(&req).is_err());
    }
}
