//! Report emission: runs the capture-and-measure pipeline over an
//! evaluation sample and renders the metric families as CSV tables plus
//! self-contained SVG charts. Charts are views; every rendered number is
//! recoverable from a CSV.

mod csv;
mod pipeline;
mod svg;

pub use csv::{write_csv_files, ALL_CSV_FILES};
pub use pipeline::{analyze, AnalyzeOptions, AnalysisReport, DropChoice, LayerMode, MetricRow, Provenance, SurplusRow};
pub use svg::{write_svg_files, ALL_SVG_FILES};

use std::fs;
use std::path::Path;

use crate::Result;

/// Write the full bundle: per-metric CSVs, SVG charts, and summary JSON.
pub fn write_bundle(dir: &Path, report: &AnalysisReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv_files(dir, report)?;
    write_svg_files(dir, report)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    Ok(())
}
