//! Community-consultative content moderation engine.
//!
//! A Moderator Agent classifies short social-media posts; when uncertain,
//! it builds an identity-grounded Community Agent from retrieved
//! encyclopedia content, consults it, and fuses both verdicts. The crate
//! also ships the prompting baselines (zero-shot, few-shot,
//! chain-of-thought) and a fairness-oriented evaluation harness built
//! around balanced accuracy.
//!
//! Everything that talks to a model goes through [`gateway::Gateway`],
//! which supports live HTTP backends and deterministic record/replay, so
//! the whole pipeline runs offline against recorded fixtures.

pub mod baselines;
pub mod config;
pub mod domain;
pub mod eval;
pub mod gateway;
pub mod knowledge;
pub mod persona;
pub mod pipeline;
pub mod prompts;

pub use domain::{
    label_to_score, score_to_label, Assessment, CommunityOpinion, DecisionScore, FinalDecision,
    FusionMode, GroupId, Label, Post, Thresholds,
};
pub use gateway::{ChatRequest, ChatResponse, Gateway, GatewayError, Tag};
pub use pipeline::{PipelineConfig, RunRecord};
