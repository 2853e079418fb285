//! Per-epoch metrics rows, their CSV form, and the curriculum summary
//! derived from them.

use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "epoch,split,loss,accuracy,scorenet_loss,num_mixed,mean_tokens_replaced,realized_gain,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One epoch of one split, as it appears in the CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub scorenet_loss: f64,
    pub num_mixed: usize,
    pub mean_tokens_replaced: f64,
    pub realized_gain: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
            self.epoch,
            self.split.as_str(),
            self.loss,
            self.accuracy,
            self.scorenet_loss,
            self.num_mixed,
            self.mean_tokens_replaced,
            self.realized_gain,
            self.wall_ms,
        )
    }
}

/// The full CSV as a string: fixed header, one line per row, `\n` endings.
pub fn metrics_csv_string(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    out
}

/// Writes the CSV to a file.
pub fn emit_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv_string(rows)).map_err(|e| Error::io(path, e))
}

/// Parses a CSV produced by [`metrics_csv_string`] back into rows.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::format(format!(
                "bad metrics header: {other:?}"
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::format(format!(
                "line {}: expected 9 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::format(format!("line {}: bad {what}", i + 2));
        let split = match fields[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            _ => return Err(bad("split")),
        };
        rows.push(MetricsRow {
            epoch: fields[0].parse().map_err(|_| bad("epoch"))?,
            split,
            loss: fields[2].parse().map_err(|_| bad("loss"))?,
            accuracy: fields[3].parse().map_err(|_| bad("accuracy"))?,
            scorenet_loss: fields[4].parse().map_err(|_| bad("scorenet_loss"))?,
            num_mixed: fields[5].parse().map_err(|_| bad("num_mixed"))?,
            mean_tokens_replaced: fields[6].parse().map_err(|_| bad("mean_tokens_replaced"))?,
            realized_gain: fields[7].parse().map_err(|_| bad("realized_gain"))?,
            wall_ms: fields[8].parse().map_err(|_| bad("wall_ms"))?,
        });
    }
    Ok(rows)
}

/// Mixing counts, early versus late in training.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSummary {
    pub early_mean: f64,
    pub late_mean: f64,
    pub rising: bool,
}

/// Compares mean mixed-instance counts over the first and last third of the
/// training epochs. Needs at least 9 epochs so the thirds are meaningful.
pub fn curriculum_trace(rows: &[MetricsRow]) -> Result<CurriculumSummary> {
    let counts: Vec<f64> = rows
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.num_mixed as f64)
        .collect();
    let epochs = counts.len();
    if epochs < 9 {
        return Err(Error::usage(format!(
            "curriculum trace needs at least 9 training epochs, got {epochs}"
        )));
    }
    let third = epochs / 3;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let early_mean = mean(&counts[..third]);
    let late_mean = mean(&counts[epochs - third..]);
    Ok(CurriculumSummary {
        early_mean,
        late_mean,
        rising: late_mean > early_mean,
    })
}
