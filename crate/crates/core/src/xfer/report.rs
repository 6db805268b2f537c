use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json_atomic};
use crate::xfer::matrix::{Cell, TransferMatrix};
use crate::xfer::run::RunResult;

pub const MATRIX_CSV: &str = "matrix.csv";
pub const MATRIX_MD: &str = "matrix.md";
pub const RESULTS_JSON: &str = "results.json";

/// Position of a transfer cell relative to its target's baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flag {
    Improved,
    Degraded,
    Equal,
}

impl Flag {
    pub fn symbol(self) -> &'static str {
        match self {
            Flag::Improved => "+",
            Flag::Degraded => "\u{2212}",
            Flag::Equal => "=",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Flag::Improved => "improved",
            Flag::Degraded => "degraded",
            Flag::Equal => "equal",
        }
    }
}

/// Plain comparison of means.
pub fn strict_flag(mean: f64, baseline_mean: f64) -> Flag {
    if mean > baseline_mean {
        Flag::Improved
    } else if mean < baseline_mean {
        Flag::Degraded
    } else {
        Flag::Equal
    }
}

pub fn pooled_stdev(a: f64, b: f64) -> f64 {
    ((a * a + b * b) / 2.0).sqrt()
}

/// Like [`strict_flag`], but differences within one pooled standard
/// deviation count as equal.
pub fn band_flag(mean: f64, stdev: f64, baseline_mean: f64, baseline_stdev: f64) -> Flag {
    if (mean - baseline_mean).abs() <= pooled_stdev(stdev, baseline_stdev) {
        Flag::Equal
    } else {
        strict_flag(mean, baseline_mean)
    }
}

/// Strict and banded flags of an off-diagonal cell, when both it and its
/// target's baseline succeeded.
pub fn cell_flags(cell: &Cell, baseline: &Cell) -> Option<(Flag, Flag)> {
    let r = cell.result.as_ref()?;
    let b = baseline.result.as_ref()?;
    Some((strict_flag(r.mean, b.mean), band_flag(r.mean, r.stdev, b.mean, b.stdev)))
}

fn one_line(s: &str) -> String {
    s.replace('|', "\\|").replace(['\n', '\r'], " ")
}

fn trial_list(r: &RunResult) -> String {
    r.trials.iter().map(|t| t.test_top1.to_string()).collect::<Vec<_>>().join(";")
}

pub fn matrix_csv(m: &TransferMatrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "source",
        "target",
        "stage",
        "status",
        "mean",
        "stdev",
        "n_trials",
        "test_top1_trials",
        "selected_lr",
        "baseline_mean",
        "baseline_stdev",
        "strict_flag",
        "band_flag",
        "error",
    ])?;
    for (s, row) in m.cells.iter().enumerate() {
        for (t, cell) in row.iter().enumerate() {
            let base = m.diagonal(t);
            let flags = (s != t).then(|| cell_flags(cell, base)).flatten();
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let r = cell.result.as_ref();
            w.write_record([
                cell.source.clone(),
                cell.target.clone(),
                cell.stage.to_string(),
                if r.is_some() { "ok".into() } else { "error".into() },
                opt(r.map(|r| r.mean)),
                opt(r.map(|r| r.stdev)),
                r.map(|r| r.trials.len().to_string()).unwrap_or_default(),
                r.map(trial_list).unwrap_or_default(),
                opt(r.map(|r| r.selected_lr)),
                opt(base.result.as_ref().map(|b| b.mean)),
                opt(base.result.as_ref().map(|b| b.stdev)),
                flags.map(|f| f.0.as_str().to_string()).unwrap_or_default(),
                flags.map(|f| f.1.as_str().to_string()).unwrap_or_default(),
                cell.error.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

/// Accuracies as percentages; the diagonal is bold, off-diagonal cells carry
/// their banded flag.
pub fn matrix_markdown(m: &TransferMatrix) -> String {
    let mut out = String::new();
    let kind = m
        .cells
        .iter()
        .flatten()
        .find_map(|c| c.result.as_ref().map(|r| r.accuracy_kind.clone()))
        .unwrap_or_else(|| "top1".into());
    let _ = writeln!(out, "# Transfer matrix ({kind}, test split, mean ±stdev %)\n");
    let _ = write!(out, "| source \\ target |");
    for d in &m.datasets {
        let _ = write!(out, " {} |", one_line(d));
    }
    let _ = write!(out, "\n|---|");
    for _ in &m.datasets {
        out.push_str("---|");
    }
    out.push('\n');
    for (s, row) in m.cells.iter().enumerate() {
        let _ = write!(out, "| {} |", one_line(&m.datasets[s]));
        for (t, cell) in row.iter().enumerate() {
            let text = match (&cell.result, &cell.error) {
                (Some(r), _) if s == t => format!("**{:.2}** ±{:.2}", 100.0 * r.mean, 100.0 * r.stdev),
                (Some(r), _) => {
                    let flag = cell_flags(cell, m.diagonal(t)).map(|f| f.1.symbol()).unwrap_or("?");
                    format!("{:.2} ±{:.2} {flag}", 100.0 * r.mean, 100.0 * r.stdev)
                }
                (None, e) => format!("ERR ({})", one_line(e.as_deref().unwrap_or("unknown"))),
            };
            let _ = write!(out, " {text} |");
        }
        out.push('\n');
    }
    out.push_str(
        "\n`+` above the target baseline, `\u{2212}` below, `=` within one pooled stdev. \
         Models are selected by validation top-1; matrix.csv also lists the strict mean comparison.\n",
    );
    out
}

/// Writes `matrix.csv`, `matrix.md` and `results.json` into `out_dir`.
pub fn emit_report(m: &TransferMatrix, out_dir: &Path) -> Result<()> {
    write_atomic(&out_dir.join(MATRIX_CSV), &matrix_csv(m)?)?;
    write_atomic(&out_dir.join(MATRIX_MD), matrix_markdown(m).as_bytes())?;
    write_json_atomic(&out_dir.join(RESULTS_JSON), m)
}
