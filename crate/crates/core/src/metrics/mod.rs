//! Binary-classification metrics: confusion matrix, the usual rates, ROC
//! curve and AUC, and k-fold averaging.
//!
//! Scalars are kept as exact rationals until they are rendered; `as_f64` and
//! the `_pct` strings are views. A zero denominator yields 0 and records the
//! metric name in `undefined`.

mod report;
mod roc;


use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};

pub use report::{parse_report_confusion, parse_roc_csv, render_report_json, roc_csv, RocRow, METRICS_SCHEMA, REPORT_FORMAT};
pub use roc::{auc, auc_exact, roc_curve, RocCurve, RocPoint};

/// Counts laid out as positive/negative predictions against positive/negative truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    /// The same counts with the roles of the two categories swapped.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix { tp: self.tn, fp: self.fn_, fn_: self.fp, tn: self.tp }
    }

    fn add(&self, o: &Self) -> Self {
        ConfusionMatrix { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

/// Count outcomes with `positive` as the positive category. Every other
/// category value counts as negative.
pub fn confusion(predictions: &[usize], labels: &[usize], positive: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(CctError::Usage(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if predictions.is_empty() {
        return Err(CctError::Usage("confusion matrix of an empty sample".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Exact non-negative rational.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Fraction(pub BigRational);

impl Fraction {
    pub fn new(num: u64, den: u64) -> Self {
        Fraction(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn zero() -> Self {
        Fraction(BigRational::zero())
    }

    pub fn one() -> Self {
        Fraction(BigRational::one())
    }

    /// Parse a decimal like `99.16` exactly.
    pub fn from_decimal(s: &str) -> Option<Self> {
        let s = s.trim();
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() {
            return None;
        }
        let digits: BigInt = format!("{int}{frac}").parse().ok()?;
        let scale = BigInt::from(10u32).pow(frac.len() as u32);
        Some(Fraction(BigRational::new(digits, scale)))
    }

    pub fn as_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    /// `self × 100`, rounded half-even to two decimals, e.g. `"99.00"`.
    pub fn pct(&self) -> String {
        let scaled = &self.0 * BigRational::from_integer(BigInt::from(10_000));
        let floor = scaled.floor();
        let rem = &scaled - &floor;
        let half = BigRational::new(BigInt::one(), BigInt::from(2));
        let mut n = floor.to_integer();
        if rem > half || (rem == half && (&n % 2u32) == BigInt::one()) {
            n += 1;
        }
        let neg = n.is_negative();
        let a = n.abs();
        let (whole, cents) = (&a / 100u32, &a % 100u32);
        format!("{}{whole}.{:02}", if neg { "-" } else { "" }, cents.to_u64().unwrap_or(0))
    }

    /// `num/den` in lowest terms.
    pub fn exact(&self) -> String {
        format!("{}/{}", self.0.numer(), self.0.denom())
    }

    pub fn parse_exact(s: &str) -> Option<Self> {
        let (n, d) = s.split_once('/')?;
        let d: BigInt = d.parse().ok()?;
        if d.is_zero() {
            return None;
        }
        Some(Fraction(BigRational::new(n.parse().ok()?, d)))
    }

    fn ratio(num: u64, den: u64, name: &'static str, undefined: &mut Vec<&'static str>) -> Self {
        if den == 0 {
            undefined.push(name);
            Fraction::zero()
        } else {
            Fraction::new(num, den)
        }
    }

    /// Arithmetic mean; `items` must be non-empty.
    pub fn mean(items: &[&Fraction]) -> Fraction {
        let sum = items.iter().fold(BigRational::zero(), |acc, f| acc + &f.0);
        Fraction(sum / BigRational::from_integer(BigInt::from(items.len())))
    }
}

/// Precision, recall, F1 averaged over both categories.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroMetrics {
    pub precision: Fraction,
    pub recall: Fraction,
    pub f1: Fraction,
}

/// The scalar part of a report, exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMetrics {
    pub accuracy: Fraction,
    pub precision: Fraction,
    pub recall: Fraction,
    pub f1: Fraction,
    pub tpr: Fraction,
    pub fpr: Fraction,
    pub fnr: Fraction,
    pub tnr: Fraction,
    /// Names of metrics whose denominator was zero (reported as 0).
    pub undefined: Vec<&'static str>,
}

struct Positive {
    precision: Fraction,
    recall: Fraction,
    f1: Fraction,
}

fn positive_class(cm: &ConfusionMatrix, undefined: &mut Vec<&'static str>) -> Positive {
    let precision = Fraction::ratio(cm.tp, cm.tp + cm.fp, "precision", undefined);
    let recall = Fraction::ratio(cm.tp, cm.tp + cm.fn_, "recall", undefined);
    // 2PR/(P+R) = 2tp/(2tp+fp+fn); zero when tp = 0.
    let f1 = Fraction::ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_, "f1", undefined);
    Positive { precision, recall, f1 }
}

/// Accuracy, precision, recall, F1, and the four rates of `cm`.
pub fn scalar_metrics(cm: &ConfusionMatrix) -> Result<ScalarMetrics> {
    if cm.total() == 0 {
        return Err(CctError::Usage("metrics of an empty confusion matrix".into()));
    }
    let mut undefined = Vec::new();
    let accuracy = Fraction::new(cm.tp + cm.tn, cm.total());
    let pos = positive_class(cm, &mut undefined);
    let tpr = pos.recall.clone();
    let fnr = Fraction::ratio(cm.fn_, cm.positives(), "fnr", &mut undefined);
    let fpr = Fraction::ratio(cm.fp, cm.negatives(), "fpr", &mut undefined);
    let tnr = Fraction::ratio(cm.tn, cm.negatives(), "tnr", &mut undefined);
    if undefined.contains(&"recall") {
        undefined.push("tpr");
    }
    Ok(ScalarMetrics { accuracy, precision: pos.precision, recall: pos.recall, f1: pos.f1, tpr, fpr, fnr, tnr, undefined })
}

/// Per-category precision/recall/F1 averaged with equal weight.
pub fn macro_metrics(cm: &ConfusionMatrix) -> MacroMetrics {
    let mut scratch = Vec::new();
    let p = positive_class(cm, &mut scratch);
    let n = positive_class(&cm.swapped(), &mut scratch);
    MacroMetrics {
        precision: Fraction::mean(&[&p.precision, &n.precision]),
        recall: Fraction::mean(&[&p.recall, &n.recall]),
        f1: Fraction::mean(&[&p.f1, &n.f1]),
    }
}

/// One evaluation, or the average of several.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub scalars: ScalarMetrics,
    pub auc_roc: Option<Fraction>,
    pub roc: Option<RocCurve>,
    pub macro_avg: Option<MacroMetrics>,
    /// Number of fold reports averaged into this one; `None` for a single evaluation.
    pub folds: Option<usize>,
}

impl MetricsReport {
    /// Report from a confusion matrix and, if available, a ROC curve.
    pub fn new(cm: ConfusionMatrix, roc: Option<RocCurve>) -> Result<Self> {
        let scalars = scalar_metrics(&cm)?;
        Ok(MetricsReport {
            confusion: cm,
            scalars,
            auc_roc: roc.as_ref().map(auc_exact),
            roc,
            macro_avg: Some(macro_metrics(&cm)),
            folds: None,
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.scalars.accuracy.as_f64()
    }
}

/// Unweighted mean of every scalar; confusion matrices summed; no ROC.
/// AUC is averaged only when every fold has one.
pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(CctError::Usage("cannot aggregate zero fold reports".into()));
    }
    if reports.len() == 1 {
        return Ok(reports[0].clone());
    }
    let mean = |f: fn(&ScalarMetrics) -> &Fraction| Fraction::mean(&reports.iter().map(|r| f(&r.scalars)).collect::<Vec<_>>());
    let mut undefined: Vec<&'static str> = Vec::new();
    for r in reports {
        for u in &r.scalars.undefined {
            if !undefined.contains(u) {
                undefined.push(u);
            }
        }
    }
    let scalars = ScalarMetrics {
        accuracy: mean(|s| &s.accuracy),
        precision: mean(|s| &s.precision),
        recall: mean(|s| &s.recall),
        f1: mean(|s| &s.f1),
        tpr: mean(|s| &s.tpr),
        fpr: mean(|s| &s.fpr),
        fnr: mean(|s| &s.fnr),
        tnr: mean(|s| &s.tnr),
        undefined,
    };
    let auc_roc =
        reports.iter().map(|r| r.auc_roc.clone()).collect::<Option<Vec<_>>>().map(|v| Fraction::mean(&v.iter().collect::<Vec<_>>()));
    let macro_avg = reports.iter().map(|r| r.macro_avg.clone()).collect::<Option<Vec<_>>>().map(|v| MacroMetrics {
        precision: Fraction::mean(&v.iter().map(|m| &m.precision).collect::<Vec<_>>()),
        recall: Fraction::mean(&v.iter().map(|m| &m.recall).collect::<Vec<_>>()),
        f1: Fraction::mean(&v.iter().map(|m| &m.f1).collect::<Vec<_>>()),
    });
    let confusion = reports.iter().fold(ConfusionMatrix::default(), |acc, r| acc.add(&r.confusion));
    Ok(MetricsReport { confusion, scalars, auc_roc, roc: None, macro_avg, folds: Some(reports.len()) })
}
