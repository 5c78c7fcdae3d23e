//! Binary PPM (P6) reading and writing, 8-bit, colors in [0, 1] in memory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use grendel_core::image::ImageF;

use crate::error::EngineError;

pub fn write_ppm(img: &ImageF, path: &Path) -> Result<(), EngineError> {
    let file = fs::File::create(path).map_err(|e| EngineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    let mut bytes = Vec::with_capacity(img.data.len() * 3);
    for p in &img.data {
        for c in 0..3 {
            bytes.push((p[c].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(&bytes))
        .map_err(|e| EngineError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageF, EngineError> {
    let bytes = fs::read(path).map_err(|e| EngineError::io(path, e))?;
    let (w, h, offset) = parse_header(&bytes, path)?;
    let need = w as usize * h as usize * 3;
    let body = &bytes[offset..];
    if body.len() < need {
        return Err(EngineError::Image(format!(
            "{}: truncated pixel data ({} of {} bytes)",
            path.display(),
            body.len(),
            need
        )));
    }
    let mut img = ImageF::zeros(w, h);
    for (i, px) in img.data.iter_mut().enumerate() {
        for c in 0..3 {
            px[c] = body[i * 3 + c] as f64 / 255.0;
        }
    }
    Ok(img)
}

/// Reads only the dimensions, for manifest validation.
pub fn read_dims(path: &Path) -> Result<(u32, u32), EngineError> {
    let bytes = fs::read(path).map_err(|e| EngineError::io(path, e))?;
    let (w, h, _) = parse_header(&bytes, path)?;
    Ok((w, h))
}

/// Parses "P6 <w> <h> <maxval>" with comment and whitespace handling;
/// returns dimensions and the offset of the first pixel byte.
fn parse_header(bytes: &[u8], path: &Path) -> Result<(u32, u32, usize), EngineError> {
    let bad = |msg: &str| EngineError::Image(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(bad("not a P6 ppm"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            if pos >= bytes.len() {
                return Err(bad("truncated header"));
            }
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse().map_err(|_| bad("header field overflow"))?;
    }
    if fields[2] != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing pixel-data separator"));
    }
    Ok((fields[0], fields[1], pos + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let mut img = ImageF::zeros(7, 5);
        for (i, p) in img.data.iter_mut().enumerate() {
            for c in 0..3 {
                p[c] = ((i * 3 + c) % 256) as f64 / 255.0;
            }
        }
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(img.data, back.data);
        // And the bytes themselves are stable under a second save.
        let first = std::fs::read(&path).unwrap();
        write_ppm(&back, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn header_with_comment_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ppm");
        std::fs::write(&path, b"P6\n# a comment\n2 1\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert!((img.data[1][2] - 6.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_body_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P6\n4 4\n255\nxx").unwrap();
        assert!(matches!(read_ppm(&path), Err(EngineError::Image(_))));
    }
}
