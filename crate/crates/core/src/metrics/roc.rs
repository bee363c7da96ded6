use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};

use super::Fraction;

/// One operating point: predict positive when `score >= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Points from `(0,0)` at threshold `+∞` to `(1,1)` at the lowest score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: u64,
    pub negatives: u64,
}

/// Sweep the distinct scores from high to low; tied scores move together.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(CctError::Usage(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(CctError::Numeric(format!("non-finite score {bad} in ROC input")));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(CctError::DegenerateInput(format!("ROC needs both categories; got {positives} positive and {negatives} negative")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let point = |threshold: f64, tp: u64, fp: u64| RocPoint {
        threshold,
        tp,
        fp,
        fpr: fp as f64 / negatives as f64,
        tpr: tp as f64 / positives as f64,
    };
    let mut points = vec![point(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(point(t, tp, fp));
    }
    Ok(RocCurve { points, positives, negatives })
}

/// Trapezoidal area, exact: Σ Δfp·(tp_prev + tp) / (2·P·N).
pub fn auc_exact(curve: &RocCurve) -> Fraction {
    let twice_area: u64 = curve.points.windows(2).map(|w| (w[1].fp - w[0].fp) * (w[1].tp + w[0].tp)).sum();
    Fraction::new(twice_area, 2 * curve.positives * curve.negatives)
}

pub fn auc(curve: &RocCurve) -> f64 {
    auc_exact(curve).as_f64()
}
