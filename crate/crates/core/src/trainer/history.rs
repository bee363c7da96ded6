use serde::{Deserialize, Serialize};

use crate::error::{CctError, Result};
use crate::manifest::RunManifest;
use crate::metrics::ConfusionMatrix;

pub const HISTORY_CSV_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

/// One epoch. Accuracies come from the confusion matrices beside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub train_confusion: ConfusionMatrix,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_confusion: Option<ConfusionMatrix>,
    pub val_auc: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub run: RunManifest,
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept when early stopping is on.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = self.run.comment_lines("# ");
        out.push_str(HISTORY_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                r.train_loss,
                r.train_accuracy,
                opt(r.val_loss),
                opt(r.val_accuracy),
                opt(r.seconds)
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// One parsed line of a history CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub seconds: Option<f64>,
}

/// Parse [`TrainHistory::to_csv`] output. Errors name the 1-based line.
pub fn parse_history_csv(text: &str) -> Result<Vec<HistoryRow>> {
    let mut rows: Vec<HistoryRow> = Vec::new();
    let mut header = false;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| CctError::Data(format!("history CSV line {n}: {m}"));
        if !header {
            if line != HISTORY_CSV_HEADER {
                return Err(err(format!("expected header {HISTORY_CSV_HEADER}, found {line:?}")));
            }
            header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("{name} {s:?} is not a finite number")))
        };
        let maybe = |s: &str, name: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s, name).map(Some)
            }
        };
        let epoch: usize = f[0].parse().map_err(|_| err(format!("epoch {:?} is not an integer", f[0])))?;
        let row = HistoryRow {
            epoch,
            train_loss: num(f[1], "train_loss")?,
            train_acc: num(f[2], "train_acc")?,
            val_loss: maybe(f[3], "val_loss")?,
            val_acc: maybe(f[4], "val_acc")?,
            seconds: maybe(f[5], "seconds")?,
        };
        for acc in [Some(row.train_acc), row.val_acc].into_iter().flatten() {
            if !(0.0..=1.0).contains(&acc) {
                return Err(err(format!("accuracy {acc} outside [0, 1]")));
            }
        }
        if let Some(prev) = rows.last() {
            if row.epoch <= prev.epoch {
                return Err(err(format!("epoch {} does not follow {}", row.epoch, prev.epoch)));
            }
        }
        rows.push(row);
    }
    if !header {
        return Err(CctError::Data("history CSV has no header line".into()));
    }
    Ok(rows)
}
