//! Evaluation metrics: CTR, ΔGSB, offline accuracy, Spearman correlation and
//! latency percentiles.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AnnotationRecord, ClickEvent};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("turn count is zero")]
    NoTurns,
    #[error("{clicked} clicked turns exceed {turns} total turns")]
    TooManyClicks { clicked: usize, turns: usize },
    #[error("GSB counts are all zero")]
    EmptyGsb,
    #[error("no annotation records")]
    NoAnnotations,
    #[error("series lengths differ or are shorter than 2")]
    SeriesLength,
    #[error("series is constant; rank correlation undefined")]
    ConstantSeries,
}

/// Fraction of turns with at least one click. Clicks are deduplicated by
/// `(session_id, turn_index)`.
pub fn ctr(events: &[ClickEvent], total_turns: usize) -> Result<f64, MetricError> {
    if total_turns == 0 {
        return Err(MetricError::NoTurns);
    }
    let clicked: HashSet<(&str, usize)> = events
        .iter()
        .map(|e| (e.session_id.as_str(), e.turn_index))
        .collect();
    if clicked.len() > total_turns {
        return Err(MetricError::TooManyClicks {
            clicked: clicked.len(),
            turns: total_turns,
        });
    }
    Ok(clicked.len() as f64 / total_turns as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsbCounts {
    pub good: u64,
    pub same: u64,
    pub bad: u64,
}

/// `(good - bad) / (good + same + bad)`.
pub fn delta_gsb(counts: GsbCounts) -> Result<f64, MetricError> {
    let total = counts.good + counts.same + counts.bad;
    if total == 0 {
        return Err(MetricError::EmptyGsb);
    }
    Ok((counts.good as f64 - counts.bad as f64) / total as f64)
}

/// Fraction of annotated turns that are relevant, applicable, diverse and
/// free of redline violations.
pub fn accuracy(annotations: &[AnnotationRecord]) -> Result<f64, MetricError> {
    if annotations.is_empty() {
        return Err(MetricError::NoAnnotations);
    }
    let ok = annotations.iter().filter(|a| a.meets_offline_criteria()).count();
    Ok(ok as f64 / annotations.len() as f64)
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(MetricError::SeriesLength);
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ConstantSeries);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gaa,
    Answer,
    Decode,
    Ce,
    Total,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Gaa => "gaa",
            Stage::Answer => "answer",
            Stage::Decode => "decode",
            Stage::Ce => "ce",
            Stage::Total => "total",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub stage: Stage,
    /// Milliseconds, non-negative.
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
}

/// Nearest-rank percentile of an ascending slice: element `ceil(p/100 * n)`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Per-stage percentiles; stages without samples are omitted. Negative
/// durations are dropped.
pub fn latency_report(samples: &[LatencySample]) -> BTreeMap<Stage, StageLatency> {
    let mut by_stage: BTreeMap<Stage, Vec<f64>> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.duration_ms >= 0.0) {
        by_stage.entry(s.stage).or_default().push(s.duration_ms);
    }
    by_stage
        .into_iter()
        .map(|(stage, mut v)| {
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (
                stage,
                StageLatency {
                    count: v.len(),
                    mean_ms: mean,
                    p50_ms: nearest_rank(&v, 50.0),
                    p90_ms: nearest_rank(&v, 90.0),
                    p99_ms: nearest_rank(&v, 99.0),
                },
            )
        })
        .collect()
}

/// Aligned plain-text table of a latency report.
pub fn latency_table(report: &BTreeMap<Stage, StageLatency>) -> String {
    let mut out = format!(
        "{:<8} {:>6} {:>10} {:>10} {:>10} {:>10}\n",
        "stage", "n", "mean_ms", "p50_ms", "p90_ms", "p99_ms"
    );
    for (stage, l) in report {
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>10.3} {:>10.3} {:>10.3} {:>10.3}",
            stage.to_string(),
            l.count,
            l.mean_ms,
            l.p50_ms,
            l.p90_ms,
            l.p99_ms
        );
    }
    out
}
