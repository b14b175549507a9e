//! Segment-to-recording aggregation (hard and soft voting), item-to-depression
//! combination, and per-class F scores.
//!
//! Ties go to "present" in both voting schemes: a segment whose two probabilities
//! are equal votes present, an even vote count decides present, and a mean
//! present-probability of exactly 0.5 decides present.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::GridGeometry;

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentProbabilityGrid {
    pub recording_id: String,
    pub item_index: usize,
    /// `(absent, present)` per segment.
    pub probs: Vec<(f64, f64)>,
    pub geometry: GridGeometry,
}

impl SegmentProbabilityGrid {
    pub fn new(
        recording_id: impl Into<String>,
        item_index: usize,
        probs: Vec<(f64, f64)>,
        geometry: GridGeometry,
    ) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if probs.len() != geometry.n_segments {
            return Err(Error::ShapeMismatch(format!(
                "{} probability rows for {} segments",
                probs.len(),
                geometry.n_segments
            )));
        }
        for (i, &(a, p)) in probs.iter().enumerate() {
            if !(a.is_finite() && p.is_finite())
                || a < 0.0
                || p < 0.0
                || (a + p - 1.0).abs() > ROW_SUM_TOL
            {
                return Err(Error::ShapeMismatch(format!(
                    "segment {i}: ({a}, {p}) is not a distribution"
                )));
            }
        }
        Ok(Self {
            recording_id: recording_id.into(),
            item_index,
            probs,
            geometry,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.probs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteMethod {
    Hard,
    Soft,
}

impl VoteMethod {
    pub const ALL: [VoteMethod; 2] = [VoteMethod::Hard, VoteMethod::Soft];
}

impl fmt::Display for VoteMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoteMethod::Hard => "hard",
            VoteMethod::Soft => "soft",
        })
    }
}

impl FromStr for VoteMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(VoteMethod::Hard),
            "soft" => Ok(VoteMethod::Soft),
            other => Err(Error::InvalidConfig(format!(
                "unknown voting method `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemDecision {
    pub item_index: usize,
    pub method: VoteMethod,
    pub present: bool,
    /// Fraction of present votes (hard) or mean present probability (soft).
    pub aggregate_present_prob: f64,
}

/// Per-segment argmax votes; present wins ties.
pub fn hard_vote(grid: &SegmentProbabilityGrid) -> Result<ItemDecision> {
    if grid.probs.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let present_votes = grid.probs.iter().filter(|&&(a, p)| p >= a).count();
    let absent_votes = grid.probs.len() - present_votes;
    Ok(ItemDecision {
        item_index: grid.item_index,
        method: VoteMethod::Hard,
        present: present_votes >= absent_votes,
        aggregate_present_prob: present_votes as f64 / grid.probs.len() as f64,
    })
}

/// Mean probability vector; present iff the mean present-probability is at least 0.5.
pub fn soft_vote(grid: &SegmentProbabilityGrid) -> Result<ItemDecision> {
    if grid.probs.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mean = grid.probs.iter().map(|p| p.1).sum::<f64>() / grid.probs.len() as f64;
    Ok(ItemDecision {
        item_index: grid.item_index,
        method: VoteMethod::Soft,
        present: mean >= 0.5,
        aggregate_present_prob: mean,
    })
}

pub fn vote(grid: &SegmentProbabilityGrid, method: VoteMethod) -> Result<ItemDecision> {
    match method {
        VoteMethod::Hard => hard_vote(grid),
        VoteMethod::Soft => soft_vote(grid),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "k")]
pub enum CombinationRule {
    /// Depressed iff at least `k` items are present.
    CountThreshold(usize),
    /// Depressed iff the mean aggregate present-probability is at least 0.5.
    #[default]
    MeanProb,
}

impl fmt::Display for CombinationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CombinationRule::CountThreshold(k) => write!(f, "count_threshold:{k}"),
            CombinationRule::MeanProb => f.write_str("mean_prob"),
        }
    }
}

impl FromStr for CombinationRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "mean_prob" {
            return Ok(CombinationRule::MeanProb);
        }
        s.strip_prefix("count_threshold:")
            .and_then(|k| k.parse().ok())
            .map(CombinationRule::CountThreshold)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown combination rule `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepressionDecision {
    pub depressed: bool,
    pub present_count: usize,
    pub mean_present_prob: f64,
}

/// Combines one decision per item (items `1..=n_items`) into a depression decision.
pub fn combine_items(
    decisions: &[ItemDecision],
    n_items: usize,
    rule: CombinationRule,
) -> Result<DepressionDecision> {
    let mut seen = vec![false; n_items];
    for d in decisions {
        if d.item_index == 0 || d.item_index > n_items || seen[d.item_index - 1] {
            return Err(Error::IncompleteDecisions {
                expected: n_items,
                actual: decisions.len(),
            });
        }
        seen[d.item_index - 1] = true;
    }
    if decisions.len() != n_items || n_items == 0 {
        return Err(Error::IncompleteDecisions {
            expected: n_items,
            actual: decisions.len(),
        });
    }
    let present_count = decisions.iter().filter(|d| d.present).count();
    let mean_present_prob = decisions
        .iter()
        .map(|d| d.aggregate_present_prob)
        .sum::<f64>()
        / n_items as f64;
    let depressed = match rule {
        CombinationRule::CountThreshold(k) => present_count >= k,
        CombinationRule::MeanProb => mean_present_prob >= 0.5,
    };
    Ok(DepressionDecision {
        depressed,
        present_count,
        mean_present_prob,
    })
}

/// Picks the rule with the best weighted F on labelled validation recordings.
/// Candidates in order `mean_prob`, `count_threshold(1..=n_items)`; the first best wins.
pub fn choose_rule(
    validation: &[(Vec<ItemDecision>, bool)],
    n_items: usize,
) -> Result<(CombinationRule, FScores)> {
    let candidates = std::iter::once(CombinationRule::MeanProb)
        .chain((1..=n_items).map(CombinationRule::CountThreshold));
    let labels: Vec<bool> = validation.iter().map(|v| v.1).collect();
    let mut best: Option<(CombinationRule, FScores)> = None;
    for rule in candidates {
        let preds = validation
            .iter()
            .map(|(d, _)| combine_items(d, n_items, rule).map(|c| c.depressed))
            .collect::<Result<Vec<_>>>()?;
        let f = f_scores(&preds, &labels)?;
        if best.as_ref().is_none_or(|(_, b)| f.weighted > b.weighted) {
            best = Some((rule, f));
        }
    }
    best.ok_or(Error::EmptyGrid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScores {
    pub weighted: f64,
    pub absent: f64,
    pub present: f64,
    pub support_absent: usize,
    pub support_present: usize,
}

impl FScores {
    /// `"W/A/P"` with two decimals, e.g. `0.70/0.74/0.53`.
    pub fn cell(&self) -> String {
        format!(
            "{:.2}/{:.2}/{:.2}",
            self.weighted, self.absent, self.present
        )
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    // 2PR/(P+R) = 2tp/(2tp+fp+fn); zero when the class is never predicted correctly.
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Per-class F1 and the support-weighted mean. A class without support scores 0 with weight 0.
pub fn f_scores(predictions: &[bool], labels: &[bool]) -> Result<FScores> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let present = if tp + fn_ == 0 { 0.0 } else { f1(tp, fp, fn_) };
    let absent = if tn + fp == 0 { 0.0 } else { f1(tn, fn_, fp) };
    let (sp, sa) = (tp + fn_, tn + fp);
    Ok(FScores {
        weighted: (sa as f64 * absent + sp as f64 * present) / (sa + sp) as f64,
        absent,
        present,
        support_absent: sa,
        support_present: sp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `(n) Item name`, or `Depression Detection (total score >= 10)`.
    pub label: String,
    /// `None` for the depression row.
    pub item_index: Option<usize>,
    pub hard: FScores,
    pub soft: FScores,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: [&str; 11] = [
    "row",
    "hard",
    "soft",
    "hard_weighted",
    "hard_absent",
    "hard_present",
    "soft_weighted",
    "soft_absent",
    "soft_present",
    "support_absent",
    "support_present",
];

impl EvalReport {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            let num = |v: f64| format!("{v:.6}");
            w.write_record([
                r.label.clone(),
                r.hard.cell(),
                r.soft.cell(),
                num(r.hard.weighted),
                num(r.hard.absent),
                num(r.hard.present),
                num(r.soft.weighted),
                num(r.soft.absent),
                num(r.soft.present),
                r.hard.support_absent.to_string(),
                r.hard.support_present.to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidCsv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }
}
