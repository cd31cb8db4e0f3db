//! Plain-text field snapshots, 8-bit PGM heatmaps and agent dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::ScalarField;

/// `ny` lines of `nx` values, bottom row (`j = 0`) first.
pub fn field_to_text(f: &ScalarField) -> String {
    let g = f.grid();
    let mut out = String::with_capacity(g.len() * 20);
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{:.12e}", f.get(i, j));
        }
        out.push('\n');
    }
    out
}

/// Parses the snapshot format back into row-major values (`j·nx + i`).
pub fn parse_field_text(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut values = Vec::new();
    let mut nx = None;
    let mut ny = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Config(format!("bad value `{t}`: {e}"))))
            .collect::<Result<_>>()?;
        match nx {
            None => nx = Some(row.len()),
            Some(n) if n != row.len() => {
                return Err(Error::Config(format!("row {ny} has {} values, expected {n}", row.len())))
            }
            _ => {}
        }
        values.extend(row);
        ny += 1;
    }
    Ok((nx.unwrap_or(0), ny, values))
}

/// Binary P5 heatmap scaled linearly from the field's min (0) to max (255),
/// top image row = largest `y`. Returns the image bytes and the `(min, max)`
/// used for scaling.
pub fn field_to_pgm(f: &ScalarField) -> (Vec<u8>, f64, f64) {
    let g = f.grid();
    let (lo, hi) = (f.min(), f.max());
    let span = hi - lo;
    let mut bytes = format!("P5\n{} {}\n255\n", g.nx(), g.ny()).into_bytes();
    for j in (0..g.ny()).rev() {
        for i in 0..g.nx() {
            let level = if span > 0.0 { ((f.get(i, j) - lo) / span * 255.0).round() } else { 0.0 };
            bytes.push(level.clamp(0.0, 255.0) as u8);
        }
    }
    (bytes, lo, hi)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.txt`, and with `pgm` also `<stem>.pgm` plus the
/// `<stem>.range` sidecar holding `min max`.
pub fn write_snapshot(dir: &Path, stem: &str, f: &ScalarField, pgm: bool) -> Result<()> {
    write_text(&dir.join(format!("{stem}.txt")), &field_to_text(f))?;
    if pgm {
        let (bytes, lo, hi) = field_to_pgm(f);
        let path = dir.join(format!("{stem}.pgm"));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        write_text(&dir.join(format!("{stem}.range")), &format!("{lo:.12e} {hi:.12e}\n"))?;
    }
    Ok(())
}
