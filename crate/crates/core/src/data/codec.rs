//! File formats: the raw "TSAL" tensor container, binary PPM/PGM images, and
//! the fixation CSV.
//!
//! Container layout (bit-exact): magic "TSAL" | version u8 = 1 | rank u8 |
//! extents as u32 little-endian | payload float32 little-endian row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Fixation, FixationMap, FixationSet, ImageTensor, Result, SaliencyMap};
use crate::tensor::Tensor;

pub const TSAL_MAGIC: [u8; 4] = *b"TSAL";
pub const TSAL_VERSION: u8 = 1;

pub fn write_tensor(mut w: impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&TSAL_MAGIC)?;
    w.write_all(&[TSAL_VERSION, t.rank() as u8])?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(mut r: impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != TSAL_MAGIC {
        return Err(DataError::BadMagic { found: magic });
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != TSAL_VERSION {
        return Err(DataError::UnsupportedVersion(head[0]));
    }
    let rank = head[1] as usize;
    if !(1..=4).contains(&rank) {
        return Err(DataError::BadTensorHeader(format!("rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 4];
        r.read_exact(&mut ext)?;
        let e = u32::from_le_bytes(ext) as usize;
        if e == 0 {
            return Err(DataError::BadTensorHeader("zero extent".into()));
        }
        shape.push(e);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    let mut filled = 0;
    while filled < payload.len() {
        match r.read(&mut payload[filled..])? {
            0 => {
                return Err(DataError::Truncated {
                    expected: n * 4,
                    actual: filled,
                })
            }
            k => filled += k,
        }
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFinitePayload);
    }
    Tensor::new(&shape, data).map_err(|e| DataError::BadTensorHeader(e.to_string()))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    read_tensor(&bytes[..])
}

pub fn save_saliency_map(path: impl AsRef<Path>, map: &SaliencyMap) -> Result<()> {
    save_tensor(path, &map.to_tensor())
}

pub fn load_saliency_map(path: impl AsRef<Path>) -> Result<SaliencyMap> {
    SaliencyMap::from_tensor(&load_tensor(path)?)
}

pub fn save_fixation_map(path: impl AsRef<Path>, map: &FixationMap) -> Result<()> {
    save_tensor(path, &map.to_tensor())
}

pub fn load_fixation_map(path: impl AsRef<Path>) -> Result<FixationMap> {
    FixationMap::from_tensor(&load_tensor(path)?)
}

// ---------------------------------------------------------------------------
// fixation CSV: header `x,y,observer`, one row per fixation, LF endings
// ---------------------------------------------------------------------------

pub fn write_fixation_csv(mut w: impl Write, fx: &FixationSet) -> Result<()> {
    w.write_all(b"x,y,observer\n")?;
    for p in &fx.points {
        writeln!(w, "{},{},{}", p.x, p.y, p.observer)?;
    }
    Ok(())
}

pub fn read_fixation_csv(mut r: impl Read) -> Result<FixationSet> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "x,y,observer" => {}
        Some((_, header)) => {
            return Err(DataError::BadHeader {
                kind: "fixation csv",
                msg: format!("expected `x,y,observer`, got `{header}`"),
            })
        }
        None => {
            return Err(DataError::BadHeader {
                kind: "fixation csv",
                msg: "empty file".into(),
            })
        }
    }
    let mut points = Vec::new();
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(DataError::BadFixationRow {
                line: idx + 1,
                msg: format!("expected 3 columns, got {}", cols.len()),
            });
        }
        let parse =
            |s: &str, what: &str| -> Result<f64> {
                s.trim().parse().map_err(|_| DataError::BadFixationRow {
                    line: idx + 1,
                    msg: format!("bad {what} value `{s}`"),
                })
            };
        points.push(Fixation {
            x: parse(cols[0], "x")?,
            y: parse(cols[1], "y")?,
            observer: parse(cols[2], "observer")? as u32,
        });
    }
    Ok(FixationSet::new(points))
}

pub fn save_fixation_csv(path: impl AsRef<Path>, fx: &FixationSet) -> Result<()> {
    let mut buf = Vec::new();
    write_fixation_csv(&mut buf, fx)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_fixation_csv(path: impl AsRef<Path>) -> Result<FixationSet> {
    let bytes = fs::read(path)?;
    read_fixation_csv(&bytes[..])
}

// ---------------------------------------------------------------------------
// PPM (P6) input, PGM (P5) visualization export
// ---------------------------------------------------------------------------

fn read_pnm_header(bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    // Returns (width, height, offset past the maxval terminator).
    let mut pos = 0usize;
    let mut fields = Vec::new();
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(DataError::BadHeader {
            kind: "pnm",
            msg: format!("expected {magic} magic"),
        });
    }
    pos += 2;
    while fields.len() < 3 {
        // Skip whitespace and `#` comments between header fields.
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::BadHeader {
                kind: "pnm",
                msg: "missing header field".into(),
            });
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::BadHeader {
                kind: "pnm",
                msg: "unparseable header field".into(),
            })?;
        fields.push(v);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DataError::BadHeader {
            kind: "pnm",
            msg: "missing whitespace after maxval".into(),
        });
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(DataError::BadHeader {
            kind: "pnm",
            msg: format!("only maxval 255 supported, got {maxval}"),
        });
    }
    if w == 0 || h == 0 {
        return Err(DataError::BadHeader {
            kind: "pnm",
            msg: "zero dimension".into(),
        });
    }
    Ok((w, h, pos))
}

/// Reads an 8-bit binary PPM (P6) into a [0,1]-valued image.
pub fn read_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let (w, h, offset) = read_pnm_header(bytes, "P6")?;
    let need = w * h * 3;
    let payload = &bytes[offset..];
    if payload.len() < need {
        return Err(DataError::Truncated {
            expected: need,
            actual: payload.len(),
        });
    }
    let mut t = Tensor::zeros(&[3, h, w]);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let v = payload[(i * w + j) * 3 + c] as f64 / 255.0;
                t.set3(c, i, j, v);
            }
        }
    }
    ImageTensor::new(t)
}

pub fn write_ppm(mut w: impl Write, img: &ImageTensor) -> Result<()> {
    let (width, height) = (img.width(), img.height());
    write!(w, "P6\n{width} {height}\n255\n")?;
    let t = img.tensor();
    for i in 0..height {
        for j in 0..width {
            for c in 0..3 {
                let v = (t.at3(c, i, j).clamp(0.0, 1.0) * 255.0).round() as u8;
                w.write_all(&[v])?;
            }
        }
    }
    Ok(())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ImageTensor> {
    read_ppm(&fs::read(path)?)
}

pub fn save_ppm(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let mut buf = Vec::new();
    write_ppm(&mut buf, img)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Writes a max-normalized grayscale view of a density map as binary PGM (P5),
/// values = round(255 * density / max).
pub fn write_pgm(mut w: impl Write, map: &SaliencyMap) -> Result<()> {
    let max = map.density().iter().cloned().fold(0.0, f64::max);
    write!(w, "P5\n{} {}\n255\n", map.width, map.height)?;
    for &v in map.density() {
        let byte = if max > 0.0 {
            (255.0 * v / max).round() as u8
        } else {
            0
        };
        w.write_all(&[byte])?;
    }
    Ok(())
}

pub fn save_pgm(path: impl AsRef<Path>, map: &SaliencyMap) -> Result<()> {
    let mut buf = Vec::new();
    write_pgm(&mut buf, map)?;
    fs::write(path, buf)?;
    Ok(())
}
