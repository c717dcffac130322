//! Static map exports for figures: 16-bit binary PGM and CSV.
//!
//! PGM pixels are max-normalised. Non-negative maps use `[0, scale] -> [0, 65535]`; signed maps
//! (drifts) use `[-scale, scale] -> [0, 65535]` so zero sits at mid-grey. The scale is returned
//! for the caller to record.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

pub const PGM_MAXVAL: u16 = 65535;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapExport {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub signed: bool,
    /// Value mapped to the brightest pixel (and, if signed, its negative to black).
    pub scale: f64,
    pub maxval: u16,
    pub pgm: String,
    pub csv: String,
}

fn max_abs(values: ArrayView2<f64>) -> f64 {
    values.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

/// Returns the PGM bytes and the scale used.
pub fn encode_pgm(values: ArrayView2<f64>, signed: bool) -> Result<(Vec<u8>, f64)> {
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(
            "cannot export a map with non-finite values".into(),
        ));
    }
    let (rows, cols) = values.dim();
    let scale = max_abs(values);
    let max = f64::from(PGM_MAXVAL);
    let mut out = format!("P5\n{cols} {rows}\n{PGM_MAXVAL}\n").into_bytes();
    out.reserve(2 * rows * cols);
    for &x in values.iter() {
        let unit = match (signed, scale > 0.0) {
            (false, true) => (x / scale).max(0.0),
            (false, false) => 0.0,
            (true, true) => 0.5 * (x / scale + 1.0),
            (true, false) => 0.5,
        };
        let px = (unit * max).round().clamp(0.0, max) as u16;
        out.extend_from_slice(&px.to_be_bytes());
    }
    Ok((out, scale))
}

/// Parses a 16-bit P5 file as written by [`encode_pgm`] into raw pixel values.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Array2<u16>> {
    let bad = |r: &str| Error::format(path, r.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("bad header"))?);
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (cols, rows, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != usize::from(PGM_MAXVAL) {
        return Err(bad("expected maxval 65535"));
    }
    let body = bytes.get(pos..).ok_or_else(|| bad("truncated"))?;
    if body.len() != 2 * rows * cols {
        return Err(bad("pixel data length mismatch"));
    }
    let px = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Array2::from_shape_vec((rows, cols), px).map_err(|e| bad(&e.to_string()))
}

/// One row per grid row, comma separated, shortest round-trip decimal formatting.
pub fn encode_csv(values: ArrayView2<f64>) -> String {
    let mut out = String::new();
    for row in values.rows() {
        for (j, x) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{x:?}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Writes `<name>.pgm` and `<name>.csv` under `dir`.
pub fn export_map(
    dir: impl AsRef<Path>,
    name: &str,
    values: ArrayView2<f64>,
    signed: bool,
) -> Result<MapExport> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (pgm_bytes, scale) = encode_pgm(values, signed)?;
    let pgm = format!("{name}.pgm");
    let csv = format!("{name}.csv");
    binio::write_file(&dir.join(&pgm), &pgm_bytes)?;
    binio::write_file(&dir.join(&csv), encode_csv(values).as_bytes())?;
    let (rows, cols) = values.dim();
    Ok(MapExport {
        name: name.to_string(),
        rows,
        cols,
        signed,
        scale,
        maxval: PGM_MAXVAL,
        pgm,
        csv,
    })
}
