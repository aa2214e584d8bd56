use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Credit given to a (negative, positive) pair with equal scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieMode {
    /// Strict inequality: tied pairs earn nothing.
    #[default]
    Literal,
    /// Tied pairs earn one half.
    Conventional,
}

impl fmt::Display for TieMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TieMode::Literal => "literal",
            TieMode::Conventional => "conventional",
        })
    }
}

fn split_scores(scores: &[f64], labels: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Argument(format!("score {s} is not comparable")));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        match l {
            0 => neg.push(s),
            1 => pos.push(s),
            other => return Err(Error::Argument(format!("label {other} is not binary"))),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedAuc {
            class: String::new(),
            present: if pos.is_empty() { "negative" } else { "positive" },
        });
    }
    Ok((pos, neg))
}

/// Fraction of (negative, positive) pairs ranked correctly.
///
/// Counts are accumulated as integers (in half-units for the conventional
/// mode), so the result is the exact ratio rounded once.
pub fn auc_pairwise(scores: &[f64], labels: &[u8], mode: TieMode) -> Result<f64> {
    let (pos, mut neg) = split_scores(scores, labels)?;
    neg.sort_by(f64::total_cmp);
    let mut halves: u64 = 0;
    for &s in &pos {
        let below = neg.partition_point(|&n| n < s) as u64;
        halves += 2 * below;
        if mode == TieMode::Conventional {
            let not_above = neg.partition_point(|&n| n <= s) as u64;
            halves += not_above - below;
        }
    }
    let pairs = pos.len() as u64 * neg.len() as u64;
    Ok(halves as f64 / (2 * pairs) as f64)
}

/// Operating points from sweeping every distinct score as a threshold
/// (predict positive when `score >= threshold`), bracketed by `+inf` and
/// `-inf` sentinels.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)`
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (pos, neg) = split_scores(scores, labels)?;
    let (n_pos, n_neg) = (pos.len() as f64, neg.len() as f64);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg, tp as f64 / n_pos));
        thresholds.push(t);
    }
    points.push((1.0, 1.0));
    thresholds.push(f64::NEG_INFINITY);
    Ok(RocCurve { points, thresholds })
}

pub fn trapezoid_area(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Writes `threshold,fpr,tpr` rows.
pub fn write_roc_csv<W: Write>(writer: W, curve: &RocCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["threshold", "fpr", "tpr"])?;
    for (t, (x, y)) in curve.thresholds.iter().zip(&curve.points) {
        w.write_record([t.to_string(), x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
