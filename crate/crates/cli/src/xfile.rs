//! Allocation matrices as headerless CSV of integer labels.

use std::path::Path;

use anyhow::{bail, Context, Result};

use sw_design::model::Sequence;

/// Parses one row per cluster. Blank lines are skipped.
pub fn parse(text: &str) -> Result<Vec<Sequence>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.context("malformed CSV")?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (j, field) in record.iter().enumerate() {
            let v: u8 = field
                .parse()
                .with_context(|| format!("line {line}, column {}: {field:?} is not a label in 0..=255", j + 1))?;
            row.push(v);
        }
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                bail!("line {line}: {} entries, expected {first}", row.len());
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("allocation matrix is empty");
    }
    Ok(rows)
}

pub fn read(path: &Path) -> Result<Vec<Sequence>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse(&text).with_context(|| format!("in {}", path.display()))
}

pub fn format(x: &[Sequence]) -> String {
    let mut out = String::new();
    for row in x {
        let cells: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let x = vec![vec![0, 0, 1, 2], vec![0, 1, 1, 2]];
        assert_eq!(parse(&format(&x)).unwrap(), x);
        assert_eq!(parse(" 0, 1\n\n1 ,1\n").unwrap(), vec![vec![0, 1], vec![1, 1]]);
    }

    #[test]
    fn errors_point_at_cell() {
        let e = format!("{:#}", parse("0,1\n0,x\n").unwrap_err());
        assert!(e.contains("line 2, column 2"), "{e}");
        let e = format!("{:#}", parse("0,1\n0,1,1\n").unwrap_err());
        assert!(e.contains("line 2"), "{e}");
        assert!(parse("").is_err());
    }
}
