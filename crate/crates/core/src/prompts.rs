//! Prompt templates, shipped as versioned text resources under
//! `templates/` and overridable from a directory at runtime.
//!
//! Substitution is plain `{name}` replacement; templates carry no other
//! syntax. Template digests are snapshot-tested so accidental edits that
//! would invalidate recorded fixture packs are caught immediately.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read template {name} from {path}: {source}")]
    Read {
        name: &'static str,
        path: String,
        source: std::io::Error,
    },
}

/// All prompt text used by the agents and baselines.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub verdict_format: String,
    pub moderator_system: String,
    pub post_user: String,
    pub community_system: String,
    pub fusion_system: String,
    pub fusion_user: String,
    pub zero_shot_system: String,
    pub few_shot_system: String,
    pub cot_system: String,
    pub query_gen_system: String,
    pub query_gen_user: String,
    pub extract_system: String,
}

const TEMPLATE_NAMES: [&str; 12] = [
    "verdict_format",
    "moderator_system",
    "post_user",
    "community_system",
    "fusion_system",
    "fusion_user",
    "zero_shot_system",
    "few_shot_system",
    "cot_system",
    "query_gen_system",
    "query_gen_user",
    "extract_system",
];

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            verdict_format: include_str!("../templates/verdict_format.txt").to_string(),
            moderator_system: include_str!("../templates/moderator_system.txt").to_string(),
            post_user: include_str!("../templates/post_user.txt").to_string(),
            community_system: include_str!("../templates/community_system.txt").to_string(),
            fusion_system: include_str!("../templates/fusion_system.txt").to_string(),
            fusion_user: include_str!("../templates/fusion_user.txt").to_string(),
            zero_shot_system: include_str!("../templates/zero_shot_system.txt").to_string(),
            few_shot_system: include_str!("../templates/few_shot_system.txt").to_string(),
            cot_system: include_str!("../templates/cot_system.txt").to_string(),
            query_gen_system: include_str!("../templates/query_gen_system.txt").to_string(),
            query_gen_user: include_str!("../templates/query_gen_user.txt").to_string(),
            extract_system: include_str!("../templates/extract_system.txt").to_string(),
        }
    }
}

impl TemplateSet {
    /// Loads `{name}.txt` for every template from `dir`, replacing the
    /// built-in text wholesale.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = TemplateSet::default();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Read {
                name: Box::leak(name.to_string().into_boxed_str()),
                path: path.display().to_string(),
                source,
            })?;
            *set.slot_mut(name) = text;
        }
        Ok(set)
    }

    fn slot_mut(&mut self, name: &str) -> &mut String {
        match name {
            "verdict_format" => &mut self.verdict_format,
            "moderator_system" => &mut self.moderator_system,
            "post_user" => &mut self.post_user,
            "community_system" => &mut self.community_system,
            "fusion_system" => &mut self.fusion_system,
            "fusion_user" => &mut self.fusion_user,
            "zero_shot_system" => &mut self.zero_shot_system,
            "few_shot_system" => &mut self.few_shot_system,
            "cot_system" => &mut self.cot_system,
            "query_gen_system" => &mut self.query_gen_system,
            "query_gen_user" => &mut self.query_gen_user,
            "extract_system" => &mut self.extract_system,
        _ => unreachable!("unknown template {name}"),
        }
    }

    fn slot(&self, name: &str) -> &str {
        match name {
            "verdict_format" => &self.verdict_format,
            "moderator_system" => &self.moderator_system,
            "post_user" => &self.post_user,
            "community_system" => &self.community_system,
            "fusion_system" => &self.fusion_system,
            "fusion_user" => &self.fusion_user,
            "zero_shot_system" => &self.zero_shot_system,
            "few_shot_system" => &self.few_shot_system,
            "cot_system" => &self.cot_system,
            "query_gen_system" => &self.query_gen_system,
            "query_gen_user" => &self.query_gen_user,
            "extract_system" => &self.extract_system,
            _ => unreachable!("unknown template {name}"),
        }
    }

    /// Per-template SHA-256 digests, stable across runs for the same text.
    pub fn digests(&self) -> BTreeMap<&'static str, String> {
        TEMPLATE_NAMES
            .iter()
            .map(|&name| (name, crate::gateway::sha256_hex(self.slot(name))))
            .collect()
    }
}

/// Replaces every `{key}` placeholder with its value.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}
