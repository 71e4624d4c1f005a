//! Plain-text tables for the terminal and full-precision CSV files.

use std::path::Path;

use anyhow::{Context, Result};
use mixcvar::data::write_atomic;

/// Two-decimal rendering used by every printed table.
pub fn fmt2(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.2}")
    }
}

pub fn fmt2_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), fmt2)
}

/// Left-aligned first column, right-aligned numeric columns.
pub fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut out = String::new();
        for (j, cell) in cells.iter().enumerate().take(cols) {
            if j == 0 {
                out += &format!("{cell:<w$}", w = widths[0]);
            } else {
                out += &format!("  {cell:>w$}", w = widths[j]);
            }
        }
        out.trim_end().to_string() + "\n"
    };
    let mut out = line(headers);
    out += &"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1));
    out += "\n";
    for row in rows {
        out += &line(row);
    }
    out
}

pub fn headers(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Write a CSV file atomically; numbers use the shortest round-trip form.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("buffering CSV: {e}"))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn full(v: f64) -> String {
    v.to_string()
}

pub fn full_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_decimals() {
        assert_eq!(fmt2(1.3116), "1.31");
        assert_eq!(fmt2(-0.004), "-0.00");
        assert_eq!(fmt2_opt(None), "-");
    }

    #[test]
    fn table_alignment() {
        let t = render_table(&headers(&["name", "x"]), &[vec!["a".into(), "1.00".into()], vec!["long".into(), "10.00".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "name      x");
        assert_eq!(lines[1], "-----------");
        assert_eq!(lines[2], "a      1.00");
        assert_eq!(lines[3], "long  10.00");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("t.csv");
        write_csv(&path, &headers(&["date", "a"]), &[vec!["d1".into(), full(0.1 + 0.2)]]).unwrap();
        let table = mixcvar::data::read_table(&path).unwrap();
        assert_eq!(table.values[(0, 0)], 0.1 + 0.2);
    }
}
