//! Analysis artifacts by file name, shared by the CLI and the HTTP API.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clicksim_core::analysis::AnalysisReport;

use crate::store::write_atomic;
use crate::svg;

pub const TABLES: [&str; 6] = [
    "overlap.csv",
    "percentage.csv",
    "fits.csv",
    "groups.csv",
    "summary.json",
    "report.json",
];
pub const FIGURES: [&str; 3] = ["overlap.svg", "percentage.svg", "fits.svg"];

pub fn content_type(name: &str) -> &'static str {
    match name.rsplit('.').next() {
        Some("csv") => "text/csv; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

/// Renders one artifact, or `None` for an unknown name.
pub fn render(report: &AnalysisReport, name: &str) -> Option<Vec<u8>> {
    let mut buf = Vec::new();
    let ok = match name {
        "overlap.csv" => report.overlap.write_csv(&mut buf).is_ok(),
        "percentage.csv" => report.curves.write_csv(&mut buf).is_ok(),
        "fits.csv" => report.write_fits_csv(&mut buf).is_ok(),
        "groups.csv" => report.write_groups_csv(&mut buf).is_ok(),
        "summary.json" => serde_json::to_writer_pretty(&mut buf, &report.summary).is_ok(),
        "report.json" => serde_json::to_writer_pretty(&mut buf, report).is_ok(),
        "overlap.svg" => {
            buf = svg::overlap_svg(&report.overlap).into_bytes();
            true
        }
        "percentage.svg" => {
            buf = svg::percentage_svg(&report.curves).into_bytes();
            true
        }
        "fits.svg" => {
            buf = svg::fits_svg(report).into_bytes();
            true
        }
        _ => return None,
    };
    if name.ends_with(".json") {
        buf.push(b'\n');
    }
    ok.then_some(buf)
}

/// Writes every table, and the figures when `figures` is set, into `dir`.
pub fn write_all(report: &AnalysisReport, dir: &Path, figures: bool) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let names = TABLES.iter().chain(if figures { FIGURES.iter() } else { [].iter() });
    let mut written = Vec::new();
    for name in names {
        let bytes = render(report, name).ok_or_else(|| io::Error::other(format!("cannot render {name}")))?;
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
