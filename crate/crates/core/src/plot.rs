//! Standalone SVG charts: accuracy and loss against epoch, ROC curve, and a
//! confusion-matrix heatmap. Output is a pure function of the inputs.

use std::fmt::Write as _;

use crate::error::{CctError, Result};
use crate::manifest::RunManifest;
use crate::metrics::{ConfusionMatrix, RocRow};
use crate::trainer::HistoryRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// One named polyline with a marker per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series { name: name.into(), points }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Fixed axis ranges; `None` fits the data.
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
    pub series: Vec<Series>,
    /// Dashed `y = x` reference line.
    pub diagonal: bool,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Shortest decimal with at most `places` digits after the point.
fn num(v: f64, places: usize) -> String {
    let s = format!("{v:.places$}");
    let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// Manifest as an XML comment. `--` cannot appear inside a comment.
fn header(manifest: &RunManifest) -> String {
    let body = manifest.comment_lines("# ").replace("--", "- -");
    format!("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<!--\n{body}-->\n")
}

fn open_svg(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">",
        w = WIDTH,
        h = HEIGHT
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(out, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>", WIDTH / 2.0, escape(title));
}

/// Round step for about five intervals across `span`.
fn tick_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let m = if r <= 1.0 {
        1.0
    } else if r <= 2.0 {
        2.0
    } else if r <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = tick_step(hi - lo);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fit_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

impl LineChart {
    pub fn render(&self, manifest: &RunManifest) -> Result<String> {
        for s in &self.series {
            if let Some(p) = s.points.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
                return Err(CctError::Data(format!("series {} has a non-finite point {:?}", s.name, p)));
            }
        }
        let all = || self.series.iter().flat_map(|s| s.points.iter().copied());
        let (x0, x1) = self.x_range.unwrap_or_else(|| fit_range(all().map(|p| p.0)));
        let (y0, y1) = self.y_range.unwrap_or_else(|| fit_range(all().map(|p| p.1)));
        let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut out = header(manifest);
        open_svg(&mut out, &self.title);
        let _ = writeln!(
            out,
            "<rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
            num(pw, 2),
            num(ph, 2)
        );
        out.push_str("<g class=\"ticks\" stroke=\"#dddddd\">\n");
        let xt = ticks(x0, x1);
        let yt = ticks(y0, y1);
        for &t in &xt {
            let _ =
                writeln!(out, "<line x1=\"{x}\" y1=\"{MARGIN_TOP}\" x2=\"{x}\" y2=\"{}\"/>", num(MARGIN_TOP + ph, 2), x = num(sx(t), 2));
        }
        for &t in &yt {
            let _ =
                writeln!(out, "<line x1=\"{MARGIN_LEFT}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\"/>", num(MARGIN_LEFT + pw, 2), y = num(sy(t), 2));
        }
        out.push_str("</g>\n<g class=\"tick-labels\">\n");
        let places = |ts: &[f64]| if ts.len() > 1 { (-(ts[1] - ts[0]).log10().floor()).max(0.0) as usize } else { 2 };
        let (xp, yp) = (places(&xt), places(&yt));
        for &t in &xt {
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                num(sx(t), 2),
                num(MARGIN_TOP + ph + 18.0, 2),
                num(t, xp)
            );
        }
        for &t in &yt {
            let _ = writeln!(
                out,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
                num(MARGIN_LEFT - 6.0, 2),
                num(sy(t) + 4.0, 2),
                num(t, yp)
            );
        }
        out.push_str("</g>\n");
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            num(MARGIN_LEFT + pw / 2.0, 2),
            num(HEIGHT - 16.0, 2),
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            "<text x=\"18\" y=\"{y}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {y})\">{}</text>",
            escape(&self.y_label),
            y = num(MARGIN_TOP + ph / 2.0, 2)
        );
        if self.diagonal {
            let _ = writeln!(
                out,
                "<line class=\"diagonal\" x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888888\" stroke-dasharray=\"4 4\"/>",
                num(sx(x0.max(y0)), 2),
                num(sy(x0.max(y0)), 2),
                num(sx(x1.min(y1)), 2),
                num(sy(x1.min(y1)), 2)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let name = escape(&s.name);
            let _ = writeln!(out, "<g class=\"series\" data-series=\"{name}\" stroke=\"{color}\" fill=\"{color}\">");
            let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{},{}", num(sx(x), 2), num(sy(y), 2))).collect();
            let _ = writeln!(out, "<polyline fill=\"none\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
            for &(x, y) in &s.points {
                let _ = writeln!(
                    out,
                    "<circle class=\"point\" cx=\"{}\" cy=\"{}\" r=\"3\"><title>{} {}</title></circle>",
                    num(sx(x), 2),
                    num(sy(y), 2),
                    num(x, 6),
                    num(y, 6)
                );
            }
            out.push_str("</g>\n");
            let ly = MARGIN_TOP + 10.0 + 20.0 * i as f64;
            let lx = WIDTH - MARGIN_RIGHT + 12.0;
            let _ = writeln!(
                out,
                "<g class=\"legend\"><line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{name}</text></g>",
                num(lx, 2),
                num(lx + 20.0, 2),
                num(lx + 26.0, 2),
                num(ly + 4.0, 2)
            );
        }
        out.push_str("</svg>\n");
        Ok(out)
    }
}

/// Train and validation accuracy (as percentages) against epoch.
pub fn accuracy_svg(rows: &[HistoryRow], manifest: &RunManifest) -> Result<String> {
    let mut series = vec![Series::new("train", rows.iter().map(|r| (r.epoch as f64, 100.0 * r.train_acc)).collect())];
    let val: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.val_acc.map(|a| (r.epoch as f64, 100.0 * a))).collect();
    if !val.is_empty() {
        series.push(Series::new("validation", val));
    }
    LineChart {
        title: "Accuracy vs. epoch".into(),
        x_label: "epoch".into(),
        y_label: "accuracy (%)".into(),
        x_range: None,
        y_range: None,
        series,
        diagonal: false,
    }
    .render(manifest)
}

/// Train and validation loss against epoch.
pub fn loss_svg(rows: &[HistoryRow], manifest: &RunManifest) -> Result<String> {
    let mut series = vec![Series::new("train", rows.iter().map(|r| (r.epoch as f64, r.train_loss)).collect())];
    let val: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.val_loss.map(|l| (r.epoch as f64, l))).collect();
    if !val.is_empty() {
        series.push(Series::new("validation", val));
    }
    LineChart {
        title: "Loss vs. epoch".into(),
        x_label: "epoch".into(),
        y_label: "cross-entropy loss".into(),
        x_range: None,
        y_range: None,
        series,
        diagonal: false,
    }
    .render(manifest)
}

/// ROC curve on the unit square with the chance diagonal. The legend
/// carries the AUC when given.
pub fn roc_svg(rows: &[RocRow], auc: Option<f64>, manifest: &RunManifest) -> Result<String> {
    let name = match auc {
        Some(a) => format!("AUC {}", num(a, 4)),
        None => "ROC".into(),
    };
    LineChart {
        title: "Receiver operating characteristic".into(),
        x_label: "false positive rate".into(),
        y_label: "true positive rate".into(),
        x_range: Some((0.0, 1.0)),
        y_range: Some((0.0, 1.0)),
        series: vec![Series::new(name, rows.iter().map(|r| (r.fpr, r.tpr)).collect())],
        diagonal: true,
    }
    .render(manifest)
}

/// 2×2 heatmap, rows actual and columns predicted, positive first.
pub fn confusion_svg(cm: &ConfusionMatrix, manifest: &RunManifest) -> Result<String> {
    let cells = [[("TP", cm.tp), ("FN", cm.fn_)], [("FP", cm.fp), ("TN", cm.tn)]];
    let max = cells.iter().flatten().map(|c| c.1).max().unwrap_or(0).max(1) as f64;
    let side = 140.0;
    let left = (WIDTH - 2.0 * side) / 2.0 + 30.0;
    let top = 80.0;
    let mut out = header(manifest);
    open_svg(&mut out, "Confusion matrix");
    for (r, row) in cells.iter().enumerate() {
        for (c, &(tag, count)) in row.iter().enumerate() {
            let x = left + c as f64 * side;
            let y = top + r as f64 * side;
            // White through to a deep blue as the count grows.
            let t = count as f64 / max;
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * t).round() as u8;
            let fill = format!("#{:02x}{:02x}{:02x}", shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0));
            let ink = if t > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                out,
                "<g class=\"cell\" data-cell=\"{tag}\"><rect x=\"{}\" y=\"{}\" width=\"{side}\" height=\"{side}\" fill=\"{fill}\" stroke=\"black\"/>\
                 <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"22\" fill=\"{ink}\">{count}</text>\
                 <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\">{tag}</text></g>",
                num(x, 2),
                num(y, 2),
                num(x + side / 2.0, 2),
                num(y + side / 2.0 + 4.0, 2),
                num(x + side / 2.0, 2),
                num(y + side / 2.0 + 26.0, 2)
            );
        }
    }
    for (i, name) in ["positive", "negative"].iter().enumerate() {
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{name}</text>",
            num(left + side * (i as f64 + 0.5), 2),
            num(top - 8.0, 2)
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{name}</text>",
            num(left - 8.0, 2),
            num(top + side * (i as f64 + 0.5) + 4.0, 2)
        );
    }
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">predicted</text>", num(left + side, 2), num(top - 28.0, 2));
    let _ = writeln!(
        out,
        "<text x=\"{x}\" y=\"{y}\" text-anchor=\"middle\" transform=\"rotate(-90 {x} {y})\">actual</text>",
        x = num(left - 80.0, 2),
        y = num(top + side, 2)
    );
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<HistoryRow> {
        (1..=n)
            .map(|e| HistoryRow {
                epoch: e,
                train_loss: 1.0 / e as f64,
                train_acc: 0.5 + 0.1 * e as f64,
                val_loss: Some(1.2 / e as f64),
                val_acc: Some(0.45 + 0.1 * e as f64),
                seconds: None,
            })
            .collect()
    }

    fn series_points(svg: &str, name: &str) -> usize {
        let start = svg.find(&format!("data-series=\"{name}\"")).unwrap();
        let end = start + svg[start..].find("</g>").unwrap();
        svg[start..end].matches("class=\"point\"").count()
    }

    #[test]
    fn two_epochs_give_two_points_per_series() {
        let m = RunManifest::new("report");
        for svg in [accuracy_svg(&rows(2), &m).unwrap(), loss_svg(&rows(2), &m).unwrap()] {
            assert_eq!(series_points(&svg, "train"), 2);
            assert_eq!(series_points(&svg, "validation"), 2);
        }
    }

    #[test]
    fn missing_validation_drops_the_series() {
        let mut r = rows(3);
        for row in &mut r {
            row.val_acc = None;
            row.val_loss = None;
        }
        let svg = accuracy_svg(&r, &RunManifest::new("report")).unwrap();
        assert!(!svg.contains("data-series=\"validation\""));
    }

    #[test]
    fn output_is_byte_stable() {
        let m = RunManifest::new("report").with("seed", 3);
        assert_eq!(loss_svg(&rows(5), &m).unwrap(), loss_svg(&rows(5), &m).unwrap());
        let cm = ConfusionMatrix { tp: 198, fp: 2, fn_: 2, tn: 198 };
        assert_eq!(confusion_svg(&cm, &m).unwrap(), confusion_svg(&cm, &m).unwrap());
    }

    #[test]
    fn heatmap_labels_counts() {
        let cm = ConfusionMatrix { tp: 198, fp: 2, fn_: 2, tn: 198 };
        let svg = confusion_svg(&cm, &RunManifest::new("report")).unwrap();
        for (tag, count) in [("TP", 198), ("FN", 2), ("FP", 2), ("TN", 198)] {
            let start = svg.find(&format!("data-cell=\"{tag}\"")).unwrap();
            let cell = &svg[start..start + svg[start..].find("</g>").unwrap()];
            assert!(cell.contains(&format!(">{count}</text>")), "{tag}: {cell}");
        }
    }

    #[test]
    fn manifest_is_embedded_and_comment_safe() {
        let m = RunManifest::new("report").with("args", "--svg-dir out");
        let svg = roc_svg(&[], None, &m).unwrap();
        let comment = &svg[svg.find("<!--").unwrap() + 4..svg.find("-->").unwrap()];
        assert!(!comment.contains("--"));
        assert!(comment.contains("# command: report"));
    }

    #[test]
    fn roc_chart_spans_unit_square() {
        let r = [
            RocRow { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 },
            RocRow { threshold: 0.5, fpr: 0.0, tpr: 1.0 },
            RocRow { threshold: 0.1, fpr: 1.0, tpr: 1.0 },
        ];
        let svg = roc_svg(&r, Some(1.0), &RunManifest::new("report")).unwrap();
        assert_eq!(series_points(&svg, "AUC 1"), 3);
        assert!(svg.contains("points=\"70,380 70,40 490,40\""), "{svg}");
        assert!(svg.contains("class=\"diagonal\""));
    }

    #[test]
    fn rejects_non_finite_points() {
        let mut r = rows(2);
        r[1].train_loss = f64::NAN;
        assert!(matches!(loss_svg(&r, &RunManifest::new("report")), Err(CctError::Data(_))));
    }

    #[test]
    fn tick_steps_are_round() {
        assert_eq!(tick_step(1.0), 0.2);
        assert_eq!(tick_step(200.0), 50.0);
        assert_eq!(ticks(0.0, 1.0).len(), 6);
    }
}
