//! Core vocabulary shared by every stage of the moderation pipeline: posts,
//! target groups, verdict labels, decision scores, and final decisions.
//!
//! All types here are immutable value objects and safe to share across
//! threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Validation failures for domain values.
#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("decision score must be a finite value in [0, 1], got {0}")]
    ScoreOutOfRange(f64),
    #[error("confidence must be in [0, 1], got {0}")]
    ConfidenceOutOfRange(f64),
    #[error("thresholds must satisfy 0 <= low <= high <= 1, got [{low}, {high}]")]
    BadThresholds { low: f64, high: f64 },
    #[error("post text is empty after trimming")]
    EmptyPostText,
    #[error("cut point must lie strictly inside (0, 1), got {0}")]
    BadCut(f64),
}

/// A short social-media text to moderate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Post {
    /// Opaque identifier, unique within one run.
    pub id: String,
    /// The text under moderation.
    pub text: String,
    /// Target group supplied by dataset metadata, when available.
    pub group_hint: Option<GroupId>,
}

impl Post {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        group_hint: Option<GroupId>,
    ) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyPostText);
        }
        Ok(Self {
            id: id.into(),
            text,
            group_hint,
        })
    }
}

/// A demographic group that hate speech may target.
///
/// Six groups are built in; anything else is carried as `Other` so that the
/// taxonomy stays open-world.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupId {
    Black,
    Asian,
    Jewish,
    Muslim,
    Women,
    Lgbtq,
    Other(String),
}

impl GroupId {
    /// The six built-in groups, in fixed report order.
    pub const BUILTIN: [GroupId; 6] = [
        GroupId::Black,
        GroupId::Asian,
        GroupId::Jewish,
        GroupId::Muslim,
        GroupId::Women,
        GroupId::Lgbtq,
    ];

    /// Canonical lowercase name, stable across runs (used in cache paths and
    /// report keys).
    pub fn canonical(&self) -> &str {
        match self {
            GroupId::Black => "black",
            GroupId::Asian => "asian",
            GroupId::Jewish => "jewish",
            GroupId::Muslim => "muslim",
            GroupId::Women => "women",
            GroupId::Lgbtq => "lgbtq",
            GroupId::Other(name) => name,
        }
    }

    /// Human-readable name used in prompts and reports.
    pub fn display_name(&self) -> String {
        match self {
            GroupId::Black => "Black".to_string(),
            GroupId::Asian => "Asian".to_string(),
            GroupId::Jewish => "Jewish".to_string(),
            GroupId::Muslim => "Muslim".to_string(),
            GroupId::Women => "Women".to_string(),
            GroupId::Lgbtq => "LGBTQ".to_string(),
            GroupId::Other(name) => name.clone(),
        }
    }

    /// Case-insensitive parse accepting common synonyms; anything
    /// unrecognized becomes `Other` with a normalized lowercase name.
    pub fn parse(raw: &str) -> GroupId {
        let norm = raw.trim().trim_matches(['.', ',', '"', '\'']).to_lowercase();
        match norm.as_str() {
            "black" | "black people" | "african american" | "african americans"
            | "african-american" => GroupId::Black,
            "asian" | "asians" | "asian people" => GroupId::Asian,
            "jewish" | "jews" | "jewish people" | "jewish_folks" => GroupId::Jewish,
            "muslim" | "muslims" | "muslim people" | "middle_east" => GroupId::Muslim,
            "women" | "woman" | "female" | "females" => GroupId::Women,
            "lgbtq" | "lgbt" | "lgbtq+" | "lgbtq people" | "queer" => GroupId::Lgbtq,
            "" => GroupId::Other("unknown".to_string()),
            other => GroupId::Other(other.to_string()),
        }
    }
}

impl Serialize for GroupId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.canonical())
    }
}

impl<'de> Deserialize<'de> for GroupId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Ok(GroupId::parse(&raw))
    }
}

impl std::fmt::Display for GroupId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.canonical())
    }
}

/// Verdict vocabulary. `Unsure` only occurs as an intermediate moderator
/// state; final decisions and dataset gold labels are binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    HateSpeech,
    NotHateSpeech,
    Unsure,
}

impl Label {
    pub fn is_binary(self) -> bool {
        self != Label::Unsure
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Label::HateSpeech => "Hate Speech",
            Label::NotHateSpeech => "Not Hate Speech",
            Label::Unsure => "Unsure",
        };
        f.write_str(s)
    }
}

/// A decision score in [0, 1], where 1 means certainly hateful.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecisionScore(f64);

impl DecisionScore {
    pub fn new(value: f64) -> Result<Self, DomainError> {
        if !value.is_finite() || !(0.0..=1.0).contains(&value) {
            return Err(DomainError::ScoreOutOfRange(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Midpoint of two valid scores; stays in [0, 1] by construction.
    pub fn midpoint(a: DecisionScore, b: DecisionScore) -> DecisionScore {
        DecisionScore((a.0 + b.0) / 2.0)
    }
}

/// Moderator uncertainty band `[tau_low, tau_high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_low: DecisionScore,
    pub tau_high: DecisionScore,
}

impl Thresholds {
    pub fn new(tau_low: f64, tau_high: f64) -> Result<Self, DomainError> {
        let low = DecisionScore::new(tau_low)
            .map_err(|_| DomainError::BadThresholds { low: tau_low, high: tau_high })?;
        let high = DecisionScore::new(tau_high)
            .map_err(|_| DomainError::BadThresholds { low: tau_low, high: tau_high })?;
        if low > high {
            return Err(DomainError::BadThresholds { low: tau_low, high: tau_high });
        }
        Ok(Self { tau_low: low, tau_high: high })
    }

    pub fn contains(&self, score: DecisionScore) -> bool {
        self.tau_low <= score && score <= self.tau_high
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::new(0.4, 0.6).expect("default band is valid")
    }
}

/// The moderator's initial assessment of a post.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Assessment {
    pub label: Label,
    /// The moderator score `p_m`.
    pub score: DecisionScore,
    /// The moderator rationale `r_m`.
    pub justification: String,
    /// Explicit request for community consultation.
    pub consult_flag: bool,
}

/// A community agent's verdict on a post.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CommunityOpinion {
    /// The community score `p_c`.
    pub score: DecisionScore,
    /// The community rationale `r_c`.
    pub rationale: String,
    /// Content hash of the persona that produced this opinion.
    pub persona_id: String,
}

/// How the final score was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// No consultation; the initial score stands.
    Passthrough,
    /// The moderator synthesized both verdicts in a fusion call.
    Adjudicated,
    /// Fusion call failed to parse; arithmetic mean of the two scores.
    FallbackAverage,
}

/// The pipeline's final, binary decision for one post.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FinalDecision {
    pub post_id: String,
    pub group: GroupId,
    pub p_final: DecisionScore,
    pub final_label: Label,
    pub consulted: bool,
    pub initial: Assessment,
    pub opinion: Option<CommunityOpinion>,
    pub fusion_mode: FusionMode,
}

impl FinalDecision {
    /// Checks the structural invariant: no consultation implies the initial
    /// score passed through untouched.
    pub fn passthrough_consistent(&self) -> bool {
        if self.consulted {
            true
        } else {
            self.opinion.is_none()
                && self.p_final == self.initial.score
                && self.fusion_mode == FusionMode::Passthrough
        }
    }
}

/// Bridges a categorical verdict plus confidence to a decision score.
///
/// HateSpeech maps above the midpoint, NotHateSpeech below it, and Unsure
/// pins 0.5 regardless of confidence.
pub fn label_to_score(label: Label, confidence: f64) -> Result<DecisionScore, DomainError> {
    if !confidence.is_finite() || !(0.0..=1.0).contains(&confidence) {
        return Err(DomainError::ConfidenceOutOfRange(confidence));
    }
    let value = match label {
        Label::HateSpeech => 0.5 + confidence / 2.0,
        Label::NotHateSpeech => 0.5 - confidence / 2.0,
        Label::Unsure => 0.5,
    };
    DecisionScore::new(value)
}

/// Binarizes a score at `cut`. Ties go to `NotHateSpeech`: only scores
/// strictly above the cut are flagged.
pub fn score_to_label(p: DecisionScore, cut: DecisionScore) -> Result<Label, DomainError> {
    let c = cut.value();
    if c <= 0.0 || c >= 1.0 {
        return Err(DomainError::BadCut(c));
    }
    Ok(if p.value() > c {
        Label::HateSpeech
    } else {
        Label::NotHateSpeech
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bridge_endpoints() {
        assert_eq!(
            label_to_score(Label::HateSpeech, 1.0).unwrap().value(),
            1.0
        );
        assert_eq!(label_to_score(Label::Unsure, 0.9).unwrap().value(), 0.5);
        let v = label_to_score(Label::NotHateSpeech, 0.8).unwrap().value();
        assert!((v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn bridge_rejects_out_of_range_confidence() {
        assert!(label_to_score(Label::HateSpeech, 1.5).is_err());
        assert!(label_to_score(Label::HateSpeech, -0.1).is_err());
        assert!(label_to_score(Label::HateSpeech, f64::NAN).is_err());
    }

    #[test]
    fn score_to_label_tie_rule() {
        let cut = DecisionScore::new(0.5).unwrap();
        let s = |v: f64| DecisionScore::new(v).unwrap();
        assert_eq!(score_to_label(s(0.9), cut).unwrap(), Label::HateSpeech);
        assert_eq!(score_to_label(s(0.5), cut).unwrap(), Label::NotHateSpeech);
        assert_eq!(score_to_label(s(0.49999), cut).unwrap(), Label::NotHateSpeech);
    }

    #[test]
    fn score_rejects_nan_and_out_of_range() {
        assert!(DecisionScore::new(f64::NAN).is_err());
        assert!(DecisionScore::new(1.01).is_err());
        assert!(DecisionScore::new(-0.01).is_err());
    }

    #[test]
    fn thresholds_reject_inverted_band() {
        assert!(Thresholds::new(0.7, 0.3).is_err());
        assert!(Thresholds::new(0.4, 0.6).is_ok());
        assert!(Thresholds::new(0.5, 0.5).is_ok());
    }

    #[test]
    fn group_parse_synonyms() {
        assert_eq!(GroupId::parse("Jewish people"), GroupId::Jewish);
        assert_eq!(GroupId::parse("BLACK"), GroupId::Black);
        assert_eq!(GroupId::parse("lgbtq+"), GroupId::Lgbtq);
        assert_eq!(GroupId::parse("Roma"), GroupId::Other("roma".to_string()));
    }

    #[test]
    fn group_serde_round_trip() {
        for g in GroupId::BUILTIN {
            let json = serde_json::to_string(&g).unwrap();
            let back: GroupId = serde_json::from_str(&json).unwrap();
            assert_eq!(g, back);
        }
    }

    #[test]
    fn post_rejects_blank_text() {
        assert!(Post::new("p1", "   \t\n", None).is_err());
        assert!(Post::new("p1", "hello", None).is_ok());
    }

    proptest! {
        #[test]
        fn bridge_monotone_in_confidence(c1 in 0.0f64..=1.0, c2 in 0.0f64..=1.0) {
            let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            let h_lo = label_to_score(Label::HateSpeech, lo).unwrap();
            let h_hi = label_to_score(Label::HateSpeech, hi).unwrap();
            prop_assert!(h_lo <= h_hi);
            let n_lo = label_to_score(Label::NotHateSpeech, lo).unwrap();
            let n_hi = label_to_score(Label::NotHateSpeech, hi).unwrap();
            prop_assert!(n_lo >= n_hi);
        }

        #[test]
        fn confident_hate_round_trips(c in 0.001f64..=1.0) {
            let p = label_to_score(Label::HateSpeech, c).unwrap();
            let cut = DecisionScore::new(0.5).unwrap();
            prop_assert_eq!(score_to_label(p, cut).unwrap(), Label::HateSpeech);
        }
    }
}
