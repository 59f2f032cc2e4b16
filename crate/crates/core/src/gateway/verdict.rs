//! The fenced verdict block: the wire format every agent answers in.
//!
//! Agents are instructed to end their reply with a block like
//!
//! ```text
//! ```verdict
//! label: Hate Speech
//! confidence: 0.9
//! justification: coded reference to segregation-era policy
//! consultation_needed: no
//! ```
//! ```
//!
//! Parsing is tolerant of key order, casing, label synonyms, and
//! surrounding prose. When a response contains several blocks (drafts from
//! chain-of-thought reasoning), the last one wins.

use thiserror::Error;

use crate::domain::Label;

/// A parsed agent verdict, before it is bridged to a decision score.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentVerdict {
    pub label: Label,
    pub confidence: f64,
    pub justification: String,
    pub consultation_needed: bool,
}

/// Typed parse failures; `parse_verdict` never panics.
#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("no ```verdict block found in response")]
    NoBlock,
    #[error("verdict block is missing required key: {0}")]
    MissingKey(&'static str),
    #[error("unrecognized label token: {0:?}")]
    BadLabel(String),
    #[error("invalid value for {key}: {value:?}")]
    BadValue { key: &'static str, value: String },
}

/// Locates the last ```verdict fenced block and parses its key/value lines.
///
/// Keys are case-insensitive; labels accept common synonyms; yes/no and
/// true/false are both accepted for the consultation flag; confidence is
/// clamped into [0, 1].
pub fn parse_verdict(text: &str) -> Result<AgentVerdict, ParseError> {
    let body = last_verdict_block(text).ok_or(ParseError::NoBlock)?;

    let mut label: Option<Label> = None;
    let mut confidence: Option<f64> = None;
    let mut justification: Option<String> = None;
    let mut flag: Option<bool> = None;

    for line in body.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        let Some((raw_key, raw_value)) = line.split_once(':') else {
            continue;
        };
        let key = raw_key.trim().trim_matches('*').trim().to_lowercase();
        let value = raw_value.trim();
        match key.as_str() {
            "label" => label = Some(parse_label(value)?),
            "confidence" => confidence = Some(parse_confidence(value)?),
            "justification" | "reason" | "rationale" => {
                if !value.is_empty() {
                    justification = Some(value.to_string());
                }
            }
            "consultation_needed" | "consultation needed" | "consultation-needed"
            | "consult" => flag = Some(parse_flag(value)?),
            _ => {}
        }
    }

    Ok(AgentVerdict {
        label: label.ok_or(ParseError::MissingKey("label"))?,
        confidence: confidence.ok_or(ParseError::MissingKey("confidence"))?,
        justification: justification.ok_or(ParseError::MissingKey("justification"))?,
        consultation_needed: flag.ok_or(ParseError::MissingKey("consultation_needed"))?,
    })
}

/// Renders a verdict in the canonical block form that `parse_verdict`
/// accepts. Newlines inside the justification are flattened so the block
/// stays line-oriented.
pub fn render_verdict(v: &AgentVerdict) -> String {
    let justification = v.justification.replace(['\n', '\r'], " ");
    format!(
        "```verdict\nlabel: {}\nconfidence: {}\njustification: {}\nconsultation_needed: {}\n```",
        v.label,
        v.confidence,
        justification,
        if v.consultation_needed { "yes" } else { "no" }
    )
}

/// Returns the body of the last ```verdict fence, tolerating a missing
/// closing fence on a truncated response.
fn last_verdict_block(text: &str) -> Option<&str> {
    let lower = text.to_lowercase();
    let marker = "```verdict";
    let start = lower.rfind(marker)?;
    let body_start = start + marker.len();
    let rest = &text[body_start..];
    let body = match rest.find("```") {
        Some(end) => &rest[..end],
        None => rest,
    };
    Some(body)
}

fn parse_label(value: &str) -> Result<Label, ParseError> {
    let norm: String = value
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let norm = norm.split_whitespace().collect::<Vec<_>>().join(" ");
    match norm.as_str() {
        "hate speech" | "hatespeech" | "hate" | "hateful" => Ok(Label::HateSpeech),
        "not hate speech" | "nothatespeech" | "not hate" | "benign" | "not hateful"
        | "non hateful" => Ok(Label::NotHateSpeech),
        "unsure" | "uncertain" | "unclear" => Ok(Label::Unsure),
        _ => Err(ParseError::BadLabel(value.to_string())),
    }
}

fn parse_confidence(value: &str) -> Result<f64, ParseError> {
    let trimmed = value.trim();
    let (num, percent) = match trimmed.strip_suffix('%') {
        Some(rest) => (rest.trim(), true),
        None => (trimmed, false),
    };
    let parsed: f64 = num.parse().map_err(|_| ParseError::BadValue {
        key: "confidence",
        value: value.to_string(),
    })?;
    let parsed = if percent { parsed / 100.0 } else { parsed };
    if !parsed.is_finite() {
        return Err(ParseError::BadValue {
            key: "confidence",
            value: value.to_string(),
        });
    }
    if !(0.0..=1.0).contains(&parsed) {
        log::warn!("clamping out-of-range confidence {parsed} into [0, 1]");
    }
    Ok(parsed.clamp(0.0, 1.0))
}

fn parse_flag(value: &str) -> Result<bool, ParseError> {
    match value.trim_matches(['.', '!']).to_lowercase().as_str() {
        "yes" | "y" | "true" => Ok(true),
        "no" | "n" | "false" => Ok(false),
        _ => Err(ParseError::BadValue {
            key: "consultation_needed",
            value: value.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_direct_format() {
        let text = "the phrase evokes segregation-era policy\n\n```verdict\nlabel: Hate Speech\nconfidence: 0.9\njustification: coded slur\nconsultation_needed: no\n```";
        let v = parse_verdict(text).unwrap();
        assert_eq!(v.label, Label::HateSpeech);
        assert_eq!(v.confidence, 0.9);
        assert_eq!(v.justification, "coded slur");
        assert!(!v.consultation_needed);
    }

    #[test]
    fn last_block_wins() {
        let text = "draft:\n```verdict\nlabel: Hate Speech\nconfidence: 0.6\njustification: first pass\nconsultation_needed: yes\n```\nOn reflection:\n```verdict\nlabel: Not Hate Speech\nconfidence: 0.8\njustification: reclaimed usage\nconsultation_needed: no\n```";
        let v = parse_verdict(text).unwrap();
        assert_eq!(v.label, Label::NotHateSpeech);
    }

    #[test]
    fn missing_block_is_typed_error() {
        assert_eq!(parse_verdict("the answer is yes"), Err(ParseError::NoBlock));
    }

    #[test]
    fn missing_key_is_typed_error() {
        let text = "```verdict\nlabel: unsure\nconfidence: 0.5\nconsultation_needed: yes\n```";
        assert_eq!(
            parse_verdict(text),
            Err(ParseError::MissingKey("justification"))
        );
    }

    #[test]
    fn bad_label_is_typed_error() {
        let text = "```verdict\nlabel: maybe\nconfidence: 0.5\njustification: x\nconsultation_needed: yes\n```";
        assert!(matches!(parse_verdict(text), Err(ParseError::BadLabel(_))));
    }

    #[test]
    fn synonyms_and_casing() {
        let text = "```VERDICT\nLabel: BENIGN\nConfidence: 70%\nJustification: fine\nConsultation Needed: FALSE\n```";
        let v = parse_verdict(text).unwrap();
        assert_eq!(v.label, Label::NotHateSpeech);
        assert!((v.confidence - 0.7).abs() < 1e-12);
        assert!(!v.consultation_needed);
    }

    #[test]
    fn out_of_range_confidence_is_clamped() {
        let text = "```verdict\nlabel: hate speech\nconfidence: 1.2\njustification: x\nconsultation_needed: no\n```";
        assert_eq!(parse_verdict(text).unwrap().confidence, 1.0);
        let text = "```verdict\nlabel: hate speech\nconfidence: -0.1\njustification: x\nconsultation_needed: no\n```";
        assert_eq!(parse_verdict(text).unwrap().confidence, 0.0);
    }

    #[test]
    fn unterminated_final_block_still_parses() {
        let text = "```verdict\nlabel: unsure\nconfidence: 0.5\njustification: truncated response\nconsultation_needed: yes";
        assert!(parse_verdict(text).is_ok());
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(
            label_idx in 0usize..3,
            confidence in 0.0f64..=1.0,
            justification in "[a-zA-Z0-9 ,.]{1,60}",
            flag in any::<bool>(),
        ) {
            let label = [Label::HateSpeech, Label::NotHateSpeech, Label::Unsure][label_idx];
            // The source verdict must satisfy the same invariant the parser
            // enforces: a non-blank justification.
            prop_assume!(!justification.trim().is_empty());
            let v = AgentVerdict {
                label,
                confidence,
                justification: justification.trim().to_string(),
                consultation_needed: flag,
            };
            let back = parse_verdict(&render_verdict(&v)).unwrap();
            prop_assert_eq!(back.label, v.label);
            prop_assert!((back.confidence - v.confidence).abs() < 1e-9);
            prop_assert_eq!(back.justification, v.justification);
            prop_assert_eq!(back.consultation_needed, v.consultation_needed);
        }
    }
}
