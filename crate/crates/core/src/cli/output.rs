use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::Result;

/// Header record first, then one JSON value per line.
pub(crate) fn write_jsonl(path: &Path, header: Value, rows: &[Value]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// `#` comment block, then the CSV lines.
pub(crate) fn write_csv(path: &Path, comments: &str, lines: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(comments.as_bytes())?;
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}
