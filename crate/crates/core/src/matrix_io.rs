//! Plain-text matrix format: a header line `rows cols`, then `rows` lines of
//! whitespace-separated decimal numbers. Scientific notation is accepted.
//! Blank lines and lines starting with `#` are ignored by the reader.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::Mat;

pub fn parse_matrix(text: &str) -> Result<Mat> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::Parse("empty input, expected `rows cols` header".into()))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(Error::Parse(format!(
            "line {hline}: expected `rows cols`, found `{header}`"
        )));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse(format!("line {hline}: invalid dimension `{s}`")))
    };
    let rows = parse_dim(dims[0])?;
    let cols = parse_dim(dims[1])?;

    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (lineno, line) in lines {
        if seen == rows {
            return Err(Error::Parse(format!(
                "line {lineno}: unexpected data after {rows} rows"
            )));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Parse(format!("line {lineno}: invalid number `{tok}`")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::Parse(format!(
                "line {lineno}: expected {cols} values, found {}",
                data.len() - before
            )));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Parse(format!("expected {rows} rows, found {seen}")));
    }
    Ok(Mat::from_row_slice(rows, cols, &data))
}

/// Serializes with shortest round-trip formatting, so `parse_matrix` recovers
/// the exact values.
pub fn format_matrix(m: &Mat) -> String {
    let mut out = String::new();
    writeln!(out, "{} {}", m.nrows(), m.ncols()).unwrap();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Mat> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_matrix(&text).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    std::fs::write(path, format_matrix(m))?;
    Ok(())
}
