use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;
use serde_json::value::RawValue;

use crate::error::{CctError, Result};
use crate::manifest::RunManifest;

use super::{ConfusionMatrix, Fraction, MetricsReport, RocCurve};

/// JSON Schema the rendered report conforms to.
pub const METRICS_SCHEMA: &str = include_str!("../../../../schemas/metrics_report.schema.json");

pub const REPORT_FORMAT: &str = "cct-metrics-report/1";

fn pct_number(f: &Fraction) -> Result<Box<RawValue>> {
    Ok(RawValue::from_string(f.pct())?)
}

fn put_metric<M: SerializeMap>(map: &mut M, name: &str, value: Option<&Fraction>) -> Result<(), M::Error> {
    match value {
        Some(f) => {
            let raw = pct_number(f).map_err(serde::ser::Error::custom)?;
            map.serialize_entry(name, &f.as_f64())?;
            map.serialize_entry(&format!("{name}_pct"), &raw)?;
            map.serialize_entry(&format!("{name}_exact"), &f.exact())
        }
        None => {
            map.serialize_entry(name, &())?;
            map.serialize_entry(&format!("{name}_pct"), &())?;
            map.serialize_entry(&format!("{name}_exact"), &())
        }
    }
}

/// Flat JSON object: counts, then each metric as a 0–1 float, a 0–100
/// number with two decimals (`_pct`), and an exact `n/d` string (`_exact`).
/// Macro-averaged metrics carry a `macro_` prefix.
pub fn render_report_json(report: &MetricsReport, manifest: &RunManifest) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, serde_json::ser::PrettyFormatter::with_indent(b"  "));
    let s = &report.scalars;
    let cm = &report.confusion;
    let write = |ser: &mut serde_json::Serializer<&mut Vec<u8>, _>| -> Result<(), serde_json::Error> {
        let mut map = ser.serialize_map(None)?;
        map.serialize_entry("format", REPORT_FORMAT)?;
        map.serialize_entry("run", &manifest.entries)?;
        map.serialize_entry("averaging", "positive_class")?;
        map.serialize_entry("folds", &report.folds)?;
        map.serialize_entry("samples", &cm.total())?;
        map.serialize_entry("positives", &cm.positives())?;
        map.serialize_entry("negatives", &cm.negatives())?;
        map.serialize_entry("tp", &cm.tp)?;
        map.serialize_entry("fp", &cm.fp)?;
        map.serialize_entry("fn", &cm.fn_)?;
        map.serialize_entry("tn", &cm.tn)?;
        put_metric(&mut map, "accuracy", Some(&s.accuracy))?;
        put_metric(&mut map, "precision", Some(&s.precision))?;
        put_metric(&mut map, "recall", Some(&s.recall))?;
        put_metric(&mut map, "f1", Some(&s.f1))?;
        put_metric(&mut map, "auc_roc", report.auc_roc.as_ref())?;
        put_metric(&mut map, "tpr", Some(&s.tpr))?;
        put_metric(&mut map, "fpr", Some(&s.fpr))?;
        put_metric(&mut map, "fnr", Some(&s.fnr))?;
        put_metric(&mut map, "tnr", Some(&s.tnr))?;
        let m = report.macro_avg.as_ref();
        put_metric(&mut map, "macro_precision", m.map(|m| &m.precision))?;
        put_metric(&mut map, "macro_recall", m.map(|m| &m.recall))?;
        put_metric(&mut map, "macro_f1", m.map(|m| &m.f1))?;
        map.serialize_entry("undefined", &s.undefined)?;
        map.serialize_entry("roc_points", &report.roc.as_ref().map(|r| r.points.len()))?;
        map.end()
    };
    write(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| CctError::Data(e.to_string()))
}

/// Confusion matrix back out of a rendered report.
pub fn parse_report_confusion(text: &str) -> Result<ConfusionMatrix> {
    #[derive(serde::Deserialize)]
    struct Counts {
        tp: u64,
        fp: u64,
        #[serde(rename = "fn")]
        fn_: u64,
        tn: u64,
    }
    let c: Counts = serde_json::from_str(text)?;
    Ok(ConfusionMatrix { tp: c.tp, fp: c.fp, fn_: c.fn_, tn: c.tn })
}

/// One data row of a ROC CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocRow {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// `threshold,fpr,tpr` with one row per curve point, the first at threshold
/// `inf`. Manifest lines prefixed `# ` come first.
pub fn roc_csv(curve: &RocCurve, manifest: &RunManifest) -> String {
    let mut out = manifest.comment_lines("# ");
    out.push_str("threshold,fpr,tpr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    out
}

/// Parse [`roc_csv`] output. Errors name the 1-based line.
pub fn parse_roc_csv(text: &str) -> Result<Vec<RocRow>> {
    let mut rows = Vec::new();
    let mut header = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header {
            if line != "threshold,fpr,tpr" {
                return Err(CctError::Data(format!("ROC CSV line {line_no}: expected header threshold,fpr,tpr, found {line:?}")));
            }
            header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(CctError::Data(format!("ROC CSV line {line_no}: expected 3 fields, found {}", fields.len())));
        }
        let mut vals = [0.0; 3];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f.parse().map_err(|_| CctError::Data(format!("ROC CSV line {line_no}: {f:?} is not a number")))?;
        }
        if !(0.0..=1.0).contains(&vals[1]) || !(0.0..=1.0).contains(&vals[2]) {
            return Err(CctError::Data(format!("ROC CSV line {line_no}: rates must lie in [0,1]")));
        }
        rows.push(RocRow { threshold: vals[0], fpr: vals[1], tpr: vals[2] });
    }
    if !header {
        return Err(CctError::Data("ROC CSV has no header line".into()));
    }
    Ok(rows)
}
