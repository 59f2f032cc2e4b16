//! Evaluation: dataset ingestion, stratified sampling, confusion-matrix
//! metrics, significance tests, and report rendering.
//!
//! Balanced accuracy is the headline metric: `(TPR + TNR) / 2`, computed
//! before any rounding. "F1 overall" is the macro mean of the per-class F1
//! scores.

pub mod harness;
pub mod report;
pub mod stats;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GroupId, Label};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot ingest dataset {path}: {reason}")]
    Ingest { path: String, reason: String },
    #[error("dataset {path} contains no valid rows")]
    IngestEmpty { path: String },
    #[error("configured group {0} is absent from the dataset")]
    Sampling(GroupId),
    #[error("prediction id {0} has no gold record")]
    IdMismatch(String),
    #[error("prediction for {0} is not binary")]
    NonBinaryPrediction(String),
    #[error("metric undefined: no {0} examples in the scored set")]
    MetricUndefined(&'static str),
    #[error("paired t-test needs equal-length vectors with n >= 2, got {a} and {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("toxicity score {0} outside the 1-5 scale")]
    ScoreOutOfScale(f64),
    #[error("I/O error at {path}: {reason}")]
    Io { path: String, reason: String },
}

/// One evaluation example with its binary gold label.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub text: String,
    pub group: GroupId,
    pub gold: Label,
    /// Source toxicity score on the 1-5 human scale, when present.
    pub raw_score: Option<f64>,
}

/// Column/key mapping for dataset files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMapping {
    pub id_key: String,
    pub text_key: String,
    pub group_key: String,
    pub label_key: String,
    pub score_key: String,
    /// Binarization cut on the 1-5 scale.
    pub score_cut: f64,
    /// Delimiter for delimited-text files.
    pub delimiter: char,
}

impl Default for DatasetMapping {
    fn default() -> Self {
        Self {
            id_key: "id".to_string(),
            text_key: "text".to_string(),
            group_key: "target_group".to_string(),
            label_key: "label".to_string(),
            score_key: "score".to_string(),
            score_cut: 3.0,
            delimiter: ',',
        }
    }
}

/// Maps a 1-5 human toxicity score to a binary label: strictly above the
/// cut is hate, at or below is benign.
pub fn binarize(raw_score: f64, cut: f64) -> Result<Label, EvalError> {
    if !raw_score.is_finite() || !(1.0..=5.0).contains(&raw_score) {
        return Err(EvalError::ScoreOutOfScale(raw_score));
    }
    Ok(if raw_score > cut {
        Label::HateSpeech
    } else {
        Label::NotHateSpeech
    })
}

/// Outcome of an ingest: the valid records plus a count of skipped rows.
#[derive(Debug)]
pub struct Ingest {
    pub records: Vec<DatasetRecord>,
    pub skipped: usize,
}

/// Loads a dataset from JSONL or delimited text, mapping columns through
/// `mapping`. Malformed rows are counted and skipped.
pub fn load_dataset(path: &Path, mapping: &DatasetMapping) -> Result<Ingest, EvalError> {
    let raw = std::fs::read_to_string(path).map_err(|e| EvalError::Ingest {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let is_jsonl = path
        .extension()
        .map(|e| e == "jsonl" || e == "ndjson" || e == "json")
        .unwrap_or(false)
        || raw.trim_start().starts_with('{');

    let ingest = if is_jsonl {
        load_jsonl(&raw, mapping)
    } else {
        load_delimited(&raw, mapping)?
    };

    if ingest.records.is_empty() {
        return Err(EvalError::IngestEmpty {
            path: path.display().to_string(),
        });
    }
    if ingest.skipped > 0 {
        log::warn!(
            "skipped {} malformed rows while loading {}",
            ingest.skipped,
            path.display()
        );
    }
    // Duplicate ids break prediction/gold joins later; reject them here.
    let mut seen = HashMap::new();
    for r in &ingest.records {
        if seen.insert(r.id.clone(), ()).is_some() {
            return Err(EvalError::Ingest {
                path: path.display().to_string(),
                reason: format!("duplicate record id {}", r.id),
            });
        }
    }
    Ok(ingest)
}

fn load_jsonl(raw: &str, mapping: &DatasetMapping) -> Ingest {
    let mut records = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Ok(value) = serde_json::from_str::<serde_json::Value>(line) else {
            skipped += 1;
            continue;
        };
        let get = |key: &str| -> Option<String> {
            value.get(key).and_then(|v| match v {
                serde_json::Value::String(s) => Some(s.clone()),
                serde_json::Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
        };
        match build_record(
            get(&mapping.id_key),
            get(&mapping.text_key),
            get(&mapping.group_key),
            get(&mapping.label_key),
            get(&mapping.score_key),
            mapping.score_cut,
            lineno,
        ) {
            Some(r) => records.push(r),
            None => skipped += 1,
        }
    }
    Ingest { records, skipped }
}

fn load_delimited(raw: &str, mapping: &DatasetMapping) -> Result<Ingest, EvalError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter as u8)
        .flexible(true)
        .from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| EvalError::Ingest {
            path: "<delimited>".to_string(),
            reason: e.to_string(),
        })?
        .clone();
    let col = |key: &str| headers.iter().position(|h| h == key);
    let (id_col, text_col, group_col, label_col, score_col) = (
        col(&mapping.id_key),
        col(&mapping.text_key),
        col(&mapping.group_key),
        col(&mapping.label_key),
        col(&mapping.score_key),
    );

    let mut records = Vec::new();
    let mut skipped = 0;
    for (lineno, row) in reader.records().enumerate() {
        let Ok(row) = row else {
            skipped += 1;
            continue;
        };
        let field = |c: Option<usize>| c.and_then(|i| row.get(i)).map(str::to_string);
        match build_record(
            field(id_col),
            field(text_col),
            field(group_col),
            field(label_col),
            field(score_col),
            mapping.score_cut,
            lineno,
        ) {
            Some(r) => records.push(r),
            None => skipped += 1,
        }
    }
    Ok(Ingest { records, skipped })
}

fn build_record(
    id: Option<String>,
    text: Option<String>,
    group: Option<String>,
    label: Option<String>,
    score: Option<String>,
    score_cut: f64,
    lineno: usize,
) -> Option<DatasetRecord> {
    let text = text?.trim().to_string();
    if text.is_empty() {
        return None;
    }
    let group = GroupId::parse(&group?);
    let raw_score: Option<f64> = score.as_deref().and_then(|s| s.trim().parse().ok());
    let gold = match label.as_deref().map(str::trim) {
        Some(l) if !l.is_empty() => parse_gold_label(l)?,
        _ => binarize(raw_score?, score_cut).ok()?,
    };
    Some(DatasetRecord {
        id: id.unwrap_or_else(|| format!("row-{lineno}")),
        text,
        group,
        gold,
        raw_score,
    })
}

fn parse_gold_label(raw: &str) -> Option<Label> {
    match raw.to_lowercase().replace(['-', ' '], "_").as_str() {
        "hate" | "hate_speech" | "hateful" | "toxic" | "1" => Some(Label::HateSpeech),
        "benign" | "not_hate" | "not_hate_speech" | "neutral" | "0" => Some(Label::NotHateSpeech),
        _ => None,
    }
}

/// Per-group seeded sampling without replacement: `min(n, available)`
/// records per configured group, concatenated in the given group order.
/// The draw for each group depends only on `(seed, group)`, not on the
/// other groups.
pub fn sample_per_group(
    records: &[DatasetRecord],
    groups: &[GroupId],
    n: usize,
    seed: u64,
) -> Result<Vec<DatasetRecord>, EvalError> {
    let mut sampled = Vec::new();
    for group in groups {
        let members: Vec<&DatasetRecord> =
            records.iter().filter(|r| &r.group == group).collect();
        if members.is_empty() {
            return Err(EvalError::Sampling(group.clone()));
        }
        let take = n.min(members.len());
        if take < n {
            log::warn!(
                "group {} has only {} records, sampling all of them (requested {n})",
                group.canonical(),
                members.len()
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(group_seed(seed, group));
        let mut chosen = rand::seq::index::sample(&mut rng, members.len(), take).into_vec();
        chosen.sort_unstable();
        sampled.extend(chosen.into_iter().map(|i| members[i].clone()));
    }
    Ok(sampled)
}

fn group_seed(seed: u64, group: &GroupId) -> u64 {
    let digest = crate::gateway::sha256_hex(&format!("{seed}:{}", group.canonical()));
    u64::from_str_radix(&digest[..16], 16).expect("hex prefix parses")
}

/// Binary confusion counts with hate as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub true_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
    pub false_pos: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_neg + self.true_neg + self.false_pos
    }
}

/// Counts the four cells from (id, predicted) pairs joined against gold
/// records. Items that failed upstream are simply not in `preds`; they are
/// reported separately, never counted.
pub fn confusion(
    preds: &[(String, Label)],
    golds: &[DatasetRecord],
) -> Result<ConfusionMatrix, EvalError> {
    let by_id: BTreeMap<&str, Label> = golds.iter().map(|r| (r.id.as_str(), r.gold)).collect();
    let mut cm = ConfusionMatrix {
        true_pos: 0,
        false_neg: 0,
        true_neg: 0,
        false_pos: 0,
    };
    for (id, pred) in preds {
        let gold = by_id
            .get(id.as_str())
            .ok_or_else(|| EvalError::IdMismatch(id.clone()))?;
        if !pred.is_binary() {
            return Err(EvalError::NonBinaryPrediction(id.clone()));
        }
        match (gold, pred) {
            (Label::HateSpeech, Label::HateSpeech) => cm.true_pos += 1,
            (Label::HateSpeech, _) => cm.false_neg += 1,
            (Label::NotHateSpeech, Label::NotHateSpeech) => cm.true_neg += 1,
            (Label::NotHateSpeech, _) => cm.false_pos += 1,
            (Label::Unsure, _) => unreachable!("gold labels are binary by construction"),
        }
    }
    Ok(cm)
}

/// The rate metrics for one cell of the report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub tpr: f64,
    pub tnr: f64,
    pub bacc: f64,
    pub f1_overall: f64,
    pub f1_hate: f64,
}

/// Computes TPR/TNR/bACC and both F1 views. Requires at least one example
/// of each class, otherwise the affected rate is undefined.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricSet, EvalError> {
    let positives = cm.true_pos + cm.false_neg;
    let negatives = cm.true_neg + cm.false_pos;
    if positives == 0 {
        return Err(EvalError::MetricUndefined("positive (hate)"));
    }
    if negatives == 0 {
        return Err(EvalError::MetricUndefined("negative (benign)"));
    }
    let tpr = cm.true_pos as f64 / positives as f64;
    let tnr = cm.true_neg as f64 / negatives as f64;
    let f1_hate = 2.0 * cm.true_pos as f64
        / (2.0 * cm.true_pos as f64 + cm.false_pos as f64 + cm.false_neg as f64);
    let f1_benign = 2.0 * cm.true_neg as f64
        / (2.0 * cm.true_neg as f64 + cm.false_neg as f64 + cm.false_pos as f64);
    Ok(MetricSet {
        tpr,
        tnr,
        bacc: (tpr + tnr) / 2.0,
        f1_overall: (f1_hate + f1_benign) / 2.0,
        f1_hate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn binarize_cuts_at_the_midpoint() {
        assert_eq!(binarize(5.0, 3.0).unwrap(), Label::HateSpeech);
        assert_eq!(binarize(4.2, 3.0).unwrap(), Label::HateSpeech);
        assert_eq!(binarize(1.0, 3.0).unwrap(), Label::NotHateSpeech);
        assert_eq!(binarize(3.0, 3.0).unwrap(), Label::NotHateSpeech);
        assert!(binarize(0.5, 3.0).is_err());
        assert!(binarize(5.1, 3.0).is_err());
    }

    #[test]
    fn jsonl_ingest_with_scores_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"id":"a","text":"post one","target_group":"black","score":4.2}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","text":"post two","target_group":"asian","score":1.0}}"#).unwrap();
        writeln!(f, r#"{{"id":"c","text":"post three","target_group":"women","label":"hate"}}"#).unwrap();
        writeln!(f, r#"{{"id":"d","target_group":"women","label":"hate"}}"#).unwrap(); // no text
        drop(f);

        let ingest = load_dataset(&path, &DatasetMapping::default()).unwrap();
        assert_eq!(ingest.records.len(), 3);
        assert_eq!(ingest.skipped, 1);
        assert_eq!(ingest.records[0].gold, Label::HateSpeech);
        assert_eq!(ingest.records[1].gold, Label::NotHateSpeech);
        assert_eq!(ingest.records[2].gold, Label::HateSpeech);
    }

    #[test]
    fn csv_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(
            &path,
            "id,text,target_group,score\n1,some post,muslim,4.5\n2,another,jewish,2.0\n",
        )
        .unwrap();
        let ingest = load_dataset(&path, &DatasetMapping::default()).unwrap();
        assert_eq!(ingest.records.len(), 2);
        assert_eq!(ingest.records[0].group, GroupId::Muslim);
        assert_eq!(ingest.records[0].gold, Label::HateSpeech);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "\n").unwrap();
        assert!(matches!(
            load_dataset(&path, &DatasetMapping::default()),
            Err(EvalError::IngestEmpty { .. })
        ));
    }

    fn make_records(group: GroupId, count: usize) -> Vec<DatasetRecord> {
        (0..count)
            .map(|i| DatasetRecord {
                id: format!("{}-{i}", group.canonical()),
                text: format!("text {i}"),
                group: group.clone(),
                gold: if i % 2 == 0 { Label::HateSpeech } else { Label::NotHateSpeech },
                raw_score: None,
            })
            .collect()
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let mut records = make_records(GroupId::Black, 200);
        records.extend(make_records(GroupId::Asian, 40));
        let groups = [GroupId::Black, GroupId::Asian];

        let a = sample_per_group(&records, &groups, 100, 7).unwrap();
        let b = sample_per_group(&records, &groups, 100, 7).unwrap();
        let ids = |v: &[DatasetRecord]| v.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        // min(n, available): 100 from black, all 40 from asian.
        assert_eq!(a.iter().filter(|r| r.group == GroupId::Black).count(), 100);
        assert_eq!(a.iter().filter(|r| r.group == GroupId::Asian).count(), 40);

        let c = sample_per_group(&records, &groups, 100, 8).unwrap();
        assert_ne!(ids(&a), ids(&c), "different seed draws differently");
    }

    #[test]
    fn six_groups_of_hundred() {
        let mut records = Vec::new();
        for g in GroupId::BUILTIN {
            records.extend(make_records(g, 150));
        }
        let sampled = sample_per_group(&records, &GroupId::BUILTIN, 100, 1).unwrap();
        assert_eq!(sampled.len(), 600);
    }

    #[test]
    fn absent_group_is_a_sampling_error() {
        let records = make_records(GroupId::Black, 10);
        let err = sample_per_group(&records, &[GroupId::Lgbtq], 5, 1).unwrap_err();
        assert!(matches!(err, EvalError::Sampling(GroupId::Lgbtq)));
    }

    #[test]
    fn confusion_counts_by_hand() {
        // 7 items: gold h,h,h,h,b,b,b; pred h,h,b,b,b,h,b.
        let golds: Vec<DatasetRecord> = (0..7)
            .map(|i| DatasetRecord {
                id: format!("i{i}"),
                text: "t".to_string(),
                group: GroupId::Black,
                gold: if i < 4 { Label::HateSpeech } else { Label::NotHateSpeech },
                raw_score: None,
            })
            .collect();
        let preds = vec![
            ("i0".to_string(), Label::HateSpeech),
            ("i1".to_string(), Label::HateSpeech),
            ("i2".to_string(), Label::NotHateSpeech),
            ("i3".to_string(), Label::NotHateSpeech),
            ("i4".to_string(), Label::NotHateSpeech),
            ("i5".to_string(), Label::HateSpeech),
            ("i6".to_string(), Label::NotHateSpeech),
        ];
        let cm = confusion(&preds, &golds).unwrap();
        assert_eq!(
            cm,
            ConfusionMatrix { true_pos: 2, false_neg: 2, true_neg: 2, false_pos: 1 }
        );
        assert_eq!(cm.total(), 7);
    }

    #[test]
    fn confusion_rejects_unknown_ids() {
        let golds = make_records(GroupId::Black, 2);
        let preds = vec![("ghost".to_string(), Label::HateSpeech)];
        assert!(matches!(
            confusion(&preds, &golds),
            Err(EvalError::IdMismatch(_))
        ));
    }

    #[test]
    fn all_correct_and_all_benign_cases() {
        let golds: Vec<DatasetRecord> = (0..20)
            .map(|i| DatasetRecord {
                id: format!("i{i}"),
                text: "t".to_string(),
                group: GroupId::Asian,
                gold: if i < 10 { Label::HateSpeech } else { Label::NotHateSpeech },
                raw_score: None,
            })
            .collect();
        let all_right: Vec<_> = golds.iter().map(|r| (r.id.clone(), r.gold)).collect();
        let cm = confusion(&all_right, &golds).unwrap();
        assert_eq!(
            cm,
            ConfusionMatrix { true_pos: 10, false_neg: 0, true_neg: 10, false_pos: 0 }
        );
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.tpr, 1.0);
        assert_eq!(m.tnr, 1.0);
        assert_eq!(m.bacc, 1.0);
        assert_eq!(m.f1_hate, 1.0);
        assert_eq!(m.f1_overall, 1.0);

        let all_benign: Vec<_> = golds
            .iter()
            .map(|r| (r.id.clone(), Label::NotHateSpeech))
            .collect();
        let cm = confusion(&all_benign, &golds).unwrap();
        assert_eq!(
            cm,
            ConfusionMatrix { true_pos: 0, false_neg: 10, true_neg: 10, false_pos: 0 }
        );
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.tpr, 0.0);
        assert_eq!(m.bacc, 0.5);
    }

    #[test]
    fn bacc_is_the_mean_of_the_rates() {
        // TPR 75.0 / TNR 90.0 -> bACC 82.5.
        let cm = ConfusionMatrix { true_pos: 7500, false_neg: 2500, true_neg: 9000, false_pos: 1000 };
        let m = compute_metrics(&cm).unwrap();
        assert!((m.tpr - 0.75).abs() < 1e-12);
        assert!((m.tnr - 0.90).abs() < 1e-12);
        assert!((m.bacc - 0.825).abs() < 1e-12);
        assert_eq!(m.bacc, (m.tpr + m.tnr) / 2.0);
    }

    #[test]
    fn empty_class_is_undefined() {
        let cm = ConfusionMatrix { true_pos: 0, false_neg: 0, true_neg: 5, false_pos: 0 };
        assert!(matches!(
            compute_metrics(&cm),
            Err(EvalError::MetricUndefined(_))
        ));
    }
}
