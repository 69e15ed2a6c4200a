//! CSV tables of aggregated sweep cells.

use std::fs;
use std::path::Path;

use nerfattack_core::{Error, Result};

use crate::sweep::{Cell, SweepKind, SweepResult};

pub const HEADER: [&str; 7] = ["sweep_kind", "series", "k", "mean_distance", "std_distance", "success_rate", "n_runs"];

/// 17 significant digits: enough to round-trip any `f64`.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_csv(result: &SweepResult) -> Result<String> {
    let mut cells: Vec<&Cell> = result.cells.iter().collect();
    cells.sort_by_key(|c| (c.series, c.k));
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
    w.write_record(HEADER).map_err(csv_err)?;
    for c in cells {
        w.write_record([
            result.kind.as_str().to_string(),
            c.series.to_string(),
            c.k.to_string(),
            num(c.mean_distance),
            num(c.std_distance),
            num(c.success_rate),
            c.n_runs.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("ascii output"))
}

pub fn write_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let text = to_csv(result)?;
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

/// Parses a table written by [`write_csv`]. The result carries cells only.
pub fn parse_csv(text: &str, file: &Path) -> Result<SweepResult> {
    let bad = |field: &str, reason: String| Error::Format { file: file.into(), field: field.into(), reason };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad("header", e.to_string()))?;
    if header.iter().ne(HEADER) {
        return Err(bad("header", format!("expected {}", HEADER.join(","))));
    }
    let mut kind = None;
    let mut cells = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad("row", e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let k =
            SweepKind::parse(field(0)).ok_or_else(|| bad("sweep_kind", format!("row {}: {:?}", line + 1, field(0))))?;
        if *kind.get_or_insert(k) != k {
            return Err(bad("sweep_kind", "mixed sweep kinds".into()));
        }
        let int = |i: usize| field(i).parse::<usize>().map_err(|e| bad(HEADER[i], format!("row {}: {e}", line + 1)));
        let real = |i: usize| field(i).parse::<f64>().map_err(|e| bad(HEADER[i], format!("row {}: {e}", line + 1)));
        cells.push(Cell {
            series: int(1)?,
            k: int(2)?,
            mean_distance: real(3)?,
            std_distance: real(4)?,
            success_rate: real(5)?,
            n_runs: int(6)?,
        });
    }
    Ok(SweepResult { kind: kind.unwrap_or(SweepKind::Views), cells, runs: Vec::new(), provenance: None })
}

pub fn read_csv(path: &Path) -> Result<SweepResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    parse_csv(&text, path)
}
