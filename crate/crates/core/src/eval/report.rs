//! Report rendering: a machine-readable CSV and a human-readable markdown
//! table shaped like the per-group / Average layout used throughout the
//! evaluation, with ablation values in parentheses on the agentic row.
//!
//! Rates are percentages rounded half-up to one decimal; F1 values carry
//! three decimals. Rounding is locale-independent and snapshot-tested.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stats::TTestResult;
use super::{ConfusionMatrix, MetricSet};
use crate::domain::GroupId;

/// The evaluated approaches, in display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    ZeroShot,
    FewShot,
    Cot,
    Agentic,
    /// The agentic pipeline with consultation disabled.
    Ablation,
}

impl Approach {
    pub const ALL: [Approach; 5] = [
        Approach::ZeroShot,
        Approach::FewShot,
        Approach::Cot,
        Approach::Agentic,
        Approach::Ablation,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Approach::ZeroShot => "zero_shot",
            Approach::FewShot => "few_shot",
            Approach::Cot => "cot",
            Approach::Agentic => "agentic",
            Approach::Ablation => "ablation",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Approach::ZeroShot => "Z-S prompting",
            Approach::FewShot => "F-S prompting",
            Approach::Cot => "CoT prompting",
            Approach::Agentic => "Agentic",
            Approach::Ablation => "Agentic (no consultation)",
        }
    }

    pub fn parse(raw: &str) -> Option<Approach> {
        match raw.to_lowercase().replace('-', "_").as_str() {
            "zero_shot" | "zs" | "z_s" => Some(Approach::ZeroShot),
            "few_shot" | "fs" | "f_s" => Some(Approach::FewShot),
            "cot" | "chain_of_thought" => Some(Approach::Cot),
            "agentic" => Some(Approach::Agentic),
            "ablation" | "no_consult" => Some(Approach::Ablation),
            _ => None,
        }
    }
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

/// One (approach, group) cell of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cm: ConfusionMatrix,
    /// Absent when a class was empty and the rates are undefined.
    pub metrics: Option<MetricSet>,
    /// Items that failed upstream and were excluded from the counts.
    pub failures: u64,
}

/// Everything the renderer needs.
#[derive(Debug, Clone)]
pub struct ReportInput {
    pub groups: Vec<GroupId>,
    pub approaches: Vec<Approach>,
    pub cells: BTreeMap<(Approach, String), CellOutcome>,
    /// Named comparisons on per-group bACC vectors.
    pub tests: Vec<(String, TTestResult)>,
}

/// Half-up rounding to `decimals` places, with a tiny epsilon so values
/// that are exactly representable midpoints in decimal (e.g. 88.65) do not
/// fall the wrong way after binary floating-point arithmetic.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let factor = 10f64.powi(decimals as i32);
    ((x * factor + 0.5) + 1e-9).floor() / factor
}

/// A fraction in [0, 1] rendered as a percentage with one decimal.
pub fn format_rate_pct(rate: f64) -> String {
    format!("{:.1}", round_half_up(rate * 100.0, 1))
}

pub fn format_f1(x: f64) -> String {
    format!("{:.3}", round_half_up(x, 3))
}

/// The Average row arithmetic: unweighted mean of per-group rates, rounded
/// to display precision, with bACC recomputed from the rounded averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AverageRow {
    pub tpr_pct: f64,
    pub tnr_pct: f64,
    pub bacc_pct: f64,
    pub f1_overall: f64,
    pub f1_hate: f64,
}

pub fn average_row(cells: &[&MetricSet]) -> Option<AverageRow> {
    if cells.is_empty() {
        return None;
    }
    let n = cells.len() as f64;
    let mean = |f: fn(&MetricSet) -> f64| cells.iter().map(|m| f(m)).sum::<f64>() / n;
    let tpr_pct = round_half_up(mean(|m| m.tpr) * 100.0, 1);
    let tnr_pct = round_half_up(mean(|m| m.tnr) * 100.0, 1);
    Some(AverageRow {
        tpr_pct,
        tnr_pct,
        bacc_pct: round_half_up((tpr_pct + tnr_pct) / 2.0, 1),
        f1_overall: round_half_up(mean(|m| m.f1_overall), 3),
        f1_hate: round_half_up(mean(|m| m.f1_hate), 3),
    })
}

fn approach_average(input: &ReportInput, approach: Approach) -> Option<AverageRow> {
    let cells: Vec<&MetricSet> = input
        .groups
        .iter()
        .filter_map(|g| input.cells.get(&(approach, g.canonical().to_string())))
        .filter_map(|c| c.metrics.as_ref())
        .collect();
    average_row(&cells)
}

/// Machine-readable results: one row per (approach, group) plus per-
/// approach average rows.
pub fn render_results_csv(input: &ReportInput) -> String {
    let mut out = String::from(
        "approach,group,tp,fn,tn,fp,tpr,tnr,bacc,f1_overall,f1_hate,failures\n",
    );
    for &approach in &input.approaches {
        for group in &input.groups {
            let key = (approach, group.canonical().to_string());
            let Some(cell) = input.cells.get(&key) else {
                continue;
            };
            let rates = match &cell.metrics {
                Some(m) => format!(
                    "{:.6},{:.6},{:.6},{:.6},{:.6}",
                    m.tpr, m.tnr, m.bacc, m.f1_overall, m.f1_hate
                ),
                None => ",,,,".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                approach.slug(),
                group.canonical(),
                cell.cm.true_pos,
                cell.cm.false_neg,
                cell.cm.true_neg,
                cell.cm.false_pos,
                rates,
                cell.failures
            ));
        }
        if let Some(avg) = approach_average(input, approach) {
            out.push_str(&format!(
                "{},average,,,,,{:.6},{:.6},{:.6},{:.6},{:.6},\n",
                approach.slug(),
                avg.tpr_pct / 100.0,
                avg.tnr_pct / 100.0,
                avg.bacc_pct / 100.0,
                avg.f1_overall,
                avg.f1_hate
            ));
        }
    }
    out
}

fn row_values(m: &MetricSet) -> [String; 5] {
    [
        format_rate_pct(m.tpr),
        format_rate_pct(m.tnr),
        format_rate_pct(m.bacc),
        format_f1(m.f1_overall),
        format_f1(m.f1_hate),
    ]
}

fn paired_row(main: &MetricSet, ablation: Option<&MetricSet>) -> [String; 5] {
    let mut cells = row_values(main);
    if let Some(ab) = ablation {
        let ab_cells = row_values(ab);
        for (c, a) in cells.iter_mut().zip(ab_cells) {
            *c = format!("{c} ({a})");
        }
    }
    cells
}

/// The markdown report: one block per group, then the Average block, then
/// significance tests and failure counts.
pub fn render_report_md(input: &ReportInput) -> String {
    let mut out = String::from("# Moderation evaluation report\n");
    out.push_str(
        "\nRates are percentages rounded half-up to one decimal; F1 scores carry three \
         decimals. Values in parentheses are the no-consultation ablation of the agentic \
         pipeline.\n",
    );

    let display_order: Vec<Approach> = [
        Approach::ZeroShot,
        Approach::FewShot,
        Approach::Cot,
        Approach::Agentic,
        Approach::Ablation,
    ]
    .into_iter()
    .filter(|a| input.approaches.contains(a))
    .collect();
    let fold_ablation = display_order.contains(&Approach::Agentic)
        && display_order.contains(&Approach::Ablation);

    let mut blocks: Vec<(String, BTreeMap<Approach, (Option<MetricSet>, Option<MetricSet>)>)> =
        Vec::new();
    for group in &input.groups {
        let mut rows = BTreeMap::new();
        for &approach in &display_order {
            if fold_ablation && approach == Approach::Ablation {
                continue;
            }
            let key = (approach, group.canonical().to_string());
            let Some(cell) = input.cells.get(&key) else {
                continue;
            };
            let ablation = if fold_ablation && approach == Approach::Agentic {
                input
                    .cells
                    .get(&(Approach::Ablation, group.canonical().to_string()))
                    .and_then(|c| c.metrics)
            } else {
                None
            };
            rows.insert(approach, (cell.metrics, ablation));
        }
        blocks.push((group.display_name(), rows));
    }

    // Average block mirrors the per-group blocks.
    let mut average_rows: BTreeMap<Approach, (Option<AverageRow>, Option<AverageRow>)> =
        BTreeMap::new();
    for &approach in &display_order {
        if fold_ablation && approach == Approach::Ablation {
            continue;
        }
        let ablation = if fold_ablation && approach == Approach::Agentic {
            approach_average(input, Approach::Ablation)
        } else {
            None
        };
        average_rows.insert(approach, (approach_average(input, approach), ablation));
    }

    for (title, rows) in &blocks {
        out.push_str(&format!("\n## {title}\n\n"));
        out.push_str("| Approach | TPR | TNR | bACC | F1 overall | F1 hate |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for &approach in &display_order {
            let Some((metrics, ablation)) = rows.get(&approach) else {
                continue;
            };
            let cells = match metrics {
                Some(m) => paired_row(m, ablation.as_ref()),
                None => std::array::from_fn(|_| "n/a".to_string()),
            };
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                approach.display_name(),
                cells[0],
                cells[1],
                cells[2],
                cells[3],
                cells[4]
            ));
        }
    }

    out.push_str("\n## Average\n\n");
    out.push_str("| Approach | TPR | TNR | bACC | F1 overall | F1 hate |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for &approach in &display_order {
        let Some((avg, ablation)) = average_rows.get(&approach) else {
            continue;
        };
        let Some(avg) = avg else { continue };
        let fmt = |row: &AverageRow| -> [String; 5] {
            [
                format!("{:.1}", row.tpr_pct),
                format!("{:.1}", row.tnr_pct),
                format!("{:.1}", row.bacc_pct),
                format!("{:.3}", row.f1_overall),
                format!("{:.3}", row.f1_hate),
            ]
        };
        let mut cells = fmt(avg);
        if let Some(ab) = ablation {
            for (c, a) in cells.iter_mut().zip(fmt(ab)) {
                *c = format!("{c} ({a})");
            }
        }
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            approach.display_name(),
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            cells[4]
        ));
    }

    if !input.tests.is_empty() {
        out.push_str("\n## Paired t-tests on per-group bACC\n\n");
        out.push_str("| Comparison | t | p (two-sided) | note |\n");
        out.push_str("|---|---|---|---|\n");
        for (name, result) in &input.tests {
            let note = if result.degenerate_variance {
                "zero-variance differences; p is a limit convention"
            } else {
                ""
            };
            out.push_str(&format!(
                "| {} | {:.3} | {:.4} | {} |\n",
                name, result.t, result.p_two_sided, note
            ));
        }
        out.push_str(
            "\np-values are reported as computed; no significance threshold is asserted.\n",
        );
    }

    let total_failures: u64 = input.cells.values().map(|c| c.failures).sum();
    if total_failures > 0 {
        out.push_str(&format!(
            "\n## Failures\n\n{total_failures} item(s) failed and were excluded from the \
             confusion counts; see failures.jsonl.\n"
        ));
    }
    out
}
