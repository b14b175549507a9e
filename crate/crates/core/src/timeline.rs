//! Timeline export of a probability grid: JSON document and a two-row SVG heat strip.
//!
//! Cell colours interpolate linearly in RGB from `#2a0a4a` (p = 0) to `#f5e642` (p = 1).
//! The top row shows p(present), the bottom row p(absent); one column per segment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::vote::{hard_vote, soft_vote, SegmentProbabilityGrid};

pub const RAMP_LOW: [u8; 3] = [0x2a, 0x0a, 0x4a];
pub const RAMP_HIGH: [u8; 3] = [0xf5, 0xe6, 0x42];
const CELL: usize = 24;
const GAP: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSegment {
    pub index: usize,
    pub start_s: f64,
    pub p_absent: f64,
    pub p_present: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineDecision {
    pub hard: bool,
    pub soft: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineDocument {
    pub recording_id: String,
    pub item_index: usize,
    pub item_name: String,
    pub hop_s: f64,
    pub span_s: f64,
    pub segments: Vec<TimelineSegment>,
    pub decision: TimelineDecision,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label_present: Option<bool>,
}

pub fn export_timeline(
    grid: &SegmentProbabilityGrid,
    item_name: &str,
    label_present: Option<bool>,
) -> Result<TimelineDocument> {
    Ok(TimelineDocument {
        recording_id: grid.recording_id.clone(),
        item_index: grid.item_index,
        item_name: item_name.to_string(),
        hop_s: grid.geometry.hop_s,
        span_s: grid.geometry.segment_span_s,
        segments: grid
            .probs
            .iter()
            .enumerate()
            .map(|(index, &(p_absent, p_present))| TimelineSegment {
                index,
                start_s: grid.geometry.segment_start_s(index),
                p_absent,
                p_present,
            })
            .collect(),
        decision: TimelineDecision {
            hard: hard_vote(grid)?.present,
            soft: soft_vote(grid)?.present,
        },
        label_present,
    })
}

/// Colour at ramp position `p` (clamped to `[0, 1]`).
pub fn ramp(p: f64) -> [u8; 3] {
    let t = p.clamp(0.0, 1.0);
    let mut out = [0u8; 3];
    for c in 0..3 {
        let (lo, hi) = (RAMP_LOW[c] as f64, RAMP_HIGH[c] as f64);
        out[c] = (lo + t * (hi - lo)).round() as u8;
    }
    out
}

pub fn hex(rgb: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

impl TimelineDocument {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Two rows by `segments.len()` columns of `<rect class="cell">` elements.
    pub fn to_svg(&self) -> String {
        let n = self.segments.len();
        let width = n * (CELL + GAP) + GAP;
        let height = 2 * (CELL + GAP) + GAP;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" data-columns="{n}">"#
        );
        let _ = writeln!(
            s,
            "  <title>{} item {} ({})</title>",
            escape(&self.recording_id),
            self.item_index,
            escape(&self.item_name)
        );
        for seg in &self.segments {
            let x = GAP + seg.index * (CELL + GAP);
            for (row, (name, p)) in [("present", seg.p_present), ("absent", seg.p_absent)]
                .into_iter()
                .enumerate()
            {
                let y = GAP + row * (CELL + GAP);
                let _ = writeln!(
                    s,
                    r#"  <rect class="cell" data-row="{name}" data-col="{}" data-p="{p:.6}" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                    seg.index,
                    hex(ramp(p))
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
