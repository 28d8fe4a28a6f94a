//! CSV output with provenance headers and the numeric table reader.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

/// Reals with 17 significant digits; `inf`, `-inf` and `NaN` spelled out.
pub fn real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// A CSV document under construction.
pub struct CsvWriter {
    buf: String,
    columns: usize,
}

impl CsvWriter {
    /// Starts with `# config_hash=<hash> seed=<seed|none>` and the header row.
    pub fn new(config_hash: &str, seed: Option<u64>, columns: &[String]) -> Self {
        let seed = seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        let mut buf = format!("# config_hash={config_hash} seed={seed}\n");
        buf.push_str(&columns.join(","));
        buf.push('\n');
        Self {
            buf,
            columns: columns.len(),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        debug_assert_eq!(cells.len(), self.columns);
        for (k, c) in cells.iter().enumerate() {
            if k > 0 {
                self.buf.push(',');
            }
            let _ = write!(self.buf, "{c}");
        }
        self.buf.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn write(&self, path: &Path) -> CliResult<PathBuf> {
        std::fs::write(path, &self.buf).map_err(|e| CliError::io(path, e))?;
        Ok(path.to_path_buf())
    }
}

/// Header plus rows of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Parses a numeric CSV. Lines starting with `#` are comments; the first
/// other line is the header. Every cell must parse as a finite real.
pub fn parse_table(text: &str) -> CliResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(text.as_bytes());
    let bad = |message: String, line: Option<u64>| CliError::Config {
        message,
        line: line.map(|l| l as usize),
    };
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| bad(format!("bad CSV header: {e}"), e.position().map(|p| p.line())))?
        .iter()
        .map(str::to_string)
        .collect();
    if columns.is_empty() || columns.iter().any(String::is_empty) {
        return Err(bad("CSV header has empty column names".into(), None));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(format!("bad CSV row: {e}"), e.position().map(|p| p.line())))?;
        let line = record.position().map(|p| p.line());
        let row = record
            .iter()
            .map(|cell| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(bad(format!("`{cell}` is not a finite number"), line)),
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table { columns, rows })
}
