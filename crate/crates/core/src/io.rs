//! Small shared file-format helpers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

fn file_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Opens `path` for buffered reading; errors name the file.
pub fn open_read(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(file_error(path))
}

/// Creates (truncates) `path` for buffered writing; errors name the file.
pub fn create_write(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(file_error(path))
}

/// Reads `path` to a string; errors name the file.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(file_error(path))
}

/// Writes `contents` to `path`; errors name the file.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(file_error(path))
}

/// Writes a binary 16-bit PGM (P5, big-endian samples), mapping `[lo, hi]`
/// affinely onto `[0, 65535]` after clamping. `values` is row-major.
pub fn write_pgm16<W: Write>(
    mut w: W,
    width: usize,
    height: usize,
    values: &[f64],
    lo: f64,
    hi: f64,
) -> Result<()> {
    if values.len() != width * height || width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "PGM of {width}x{height} needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    if !(hi > lo) {
        return Err(Error::invalid("PGM range must satisfy lo < hi"));
    }
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let v = if v.is_finite() { v } else { lo };
        let q = ((v.clamp(lo, hi) - lo) / (hi - lo) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Parses a binary 16-bit PGM back into `(width, height, raw samples)`.
pub fn read_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let bad = |d: &str| Error::format("pgm", d.to_string());
    let mut fields = Vec::new();
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
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad("not a 16-bit P5 file"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = bytes.get(pos..).ok_or_else(|| bad("missing data"))?;
    if body.len() != 2 * w * h {
        return Err(bad("data length"));
    }
    let px = body
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, px))
}
