//! CSV and markdown renderings of benchmark reports, comparisons and sparsity sweeps.
//!
//! Markdown tables round times to 2 decimals; CSV cells carry the shortest
//! representation that parses back to the exact `f64`.

use std::fmt;
use std::str::FromStr;

use crate::bench::{BenchReport, ComparisonTable};
use crate::compress::SparsitySweep;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    #[default]
    Markdown,
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Markdown => "md",
        })
    }
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "md" | "markdown" => Ok(OutputFormat::Markdown),
            _ => Err(Error::InvalidArgument(format!("unknown output format `{s}`"))),
        }
    }
}

enum Cell {
    Text(String),
    /// Value and the number of decimals used in markdown.
    Num(f64, usize),
}

impl Cell {
    fn render(&self, format: OutputFormat) -> String {
        match (self, format) {
            (Cell::Text(s), _) => s.clone(),
            (Cell::Num(v, _), OutputFormat::Csv) => v.to_string(),
            (Cell::Num(v, d), OutputFormat::Markdown) => format!("{v:.d$}"),
        }
    }
}

fn render(header: &[String], rows: &[Vec<Cell>], numeric_from: usize, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(Vec::new());
            w.write_record(header)?;
            for row in rows {
                w.write_record(row.iter().map(|c| c.render(format)))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
        OutputFormat::Markdown => {
            let line = |cells: Vec<String>| format!("| {} |\n", cells.join(" | "));
            let mut out = line(header.iter().map(|h| h.replace('|', "\\|")).collect());
            out += &line(
                (0..header.len())
                    .map(|i| if i < numeric_from { "---".into() } else { "---:".into() })
                    .collect(),
            );
            for row in rows {
                out += &line(row.iter().map(|c| c.render(format).replace('|', "\\|")).collect());
            }
            Ok(out)
        }
    }
}

/// One column per report with rows t_infer_1, mean, std, ste and accuracy.
pub fn emit_report(reports: &[BenchReport], format: OutputFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to emit".into()));
    }
    let md = format == OutputFormat::Markdown;
    let mut header = vec!["metric".to_string()];
    header.extend(
        reports
            .iter()
            .map(|r| format!("{} ({}/{})", r.model_id, r.format, r.backend)),
    );
    let metric = |label_md: &str, label_csv: &str, f: &dyn Fn(&BenchReport) -> f64| {
        let mut row = vec![Cell::Text(if md { label_md } else { label_csv }.into())];
        row.extend(reports.iter().map(|r| Cell::Num(f(r), 2)));
        row
    };
    let rows = vec![
        metric("t_infer_1 (ms)", "t_infer_1_ms", &|r| r.t_first_ms),
        metric("mean t_infer (ms)", "mean_ms", &|r| r.mean_ms),
        metric("std (ms)", "std_ms", &|r| r.std_ms),
        metric("ste (ms)", "ste_ms", &|r| r.ste_ms),
        if md {
            metric("accuracy (%)", "", &|r| 100.0 * r.accuracy)
        } else {
            metric("", "accuracy", &|r| r.accuracy)
        },
    ];
    render(&header, &rows, 1, format)
}

/// Plot-ready sweep table: sparsity, validation accuracy and loss, fine-tune epochs.
pub fn emit_sweep(sweep: &SparsitySweep, format: OutputFormat) -> Result<String> {
    if sweep.rows.is_empty() {
        return Err(Error::InvalidArgument("sweep has no rows".into()));
    }
    if let Some(r) = sweep.rows.iter().find(|r| !(0.0..=1.0).contains(&r.val_accuracy)) {
        return Err(Error::InvalidArgument(format!(
            "accuracy {} at sparsity {} outside [0, 1]",
            r.val_accuracy, r.sparsity
        )));
    }
    let header = ["sparsity", "val_accuracy", "val_loss", "epochs"].map(String::from);
    let rows: Vec<Vec<Cell>> = sweep
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::Num(r.sparsity, 2),
                Cell::Num(r.val_accuracy, 4),
                Cell::Num(r.val_loss, 4),
                Cell::Text(r.finetune_epochs.to_string()),
            ]
        })
        .collect();
    render(&header, &rows, 0, format)
}

/// One row per compared report, with speed relative to the first.
pub fn emit_comparison(table: &ComparisonTable, format: OutputFormat) -> Result<String> {
    let md = format == OutputFormat::Markdown;
    let header: Vec<String> = if md {
        [
            "model",
            "format",
            "backend",
            "t_infer_1 (ms)",
            "mean (ms)",
            "std (ms)",
            "ste (ms)",
            "accuracy (%)",
            "speedup",
            "mean ratio",
        ]
    } else {
        [
            "model",
            "format",
            "backend",
            "t_infer_1_ms",
            "mean_ms",
            "std_ms",
            "ste_ms",
            "accuracy",
            "speedup",
            "mean_ratio",
        ]
    }
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<Cell>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::Text(table.model_id.clone()),
                Cell::Text(r.format.to_string()),
                Cell::Text(r.backend.to_string()),
                Cell::Num(r.t_first_ms, 2),
                Cell::Num(r.mean_ms, 2),
                Cell::Num(r.std_ms, 2),
                Cell::Num(r.ste_ms, 2),
                Cell::Num(if md { 100.0 * r.accuracy } else { r.accuracy }, 2),
                Cell::Num(r.speedup, 2),
                Cell::Num(r.mean_ratio, 2),
            ]
        })
        .collect();
    render(&header, &rows, 3, format)
}
