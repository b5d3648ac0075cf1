//! Binary PGM (P5, maxval 255) reader/writer.

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};

pub fn write(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), width * height, "pgm payload size");
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn read(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let corrupt = |msg: &str| CoreError::CorruptRecord {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::new();
    // header: magic, width, height, maxval, separated by whitespace;
    // '#' starts a comment running to end of line
    while fields.len() < 4 {
        match bytes.get(pos) {
            None => return Err(corrupt("truncated header")),
            Some(b'#') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
            }
        }
    }
    if fields[0] != "P5" {
        return Err(corrupt(&format!("bad magic {:?}", fields[0])));
    }
    let width: usize = fields[1].parse().map_err(|_| corrupt("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| corrupt("bad height"))?;
    if fields[3] != "255" {
        return Err(corrupt("maxval must be 255"));
    }
    // exactly one whitespace byte separates header and payload
    if !bytes
        .get(pos)
        .map(|c| c.is_ascii_whitespace())
        .unwrap_or(false)
    {
        return Err(corrupt("missing header terminator"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() != width * height {
        return Err(corrupt(&format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            width * height
        )));
    }
    Ok((width, height, payload.to_vec()))
}
