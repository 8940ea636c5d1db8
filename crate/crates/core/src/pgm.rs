//! Binary greymap (P5) reading and writing for 8-bit masks.

use std::fs;
use std::path::Path;

use crate::array::Map;
use crate::error::{Error, Result};

/// Scales `[0, 1]` to `0..=255` rounding half up.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_pgm(map: &Map) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.as_slice().iter().map(|&v| to_u8(v)));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Map) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}

/// Values are divided by the file's maxval.
pub fn decode_pgm(bytes: &[u8]) -> Result<Map> {
    let mut pos = 0usize;
    let mut fields = [0usize; 3];
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Malformed("not a binary PGM (P5)".into()));
    }
    for f in fields.iter_mut() {
        let tok = next_token(bytes, &mut pos)?;
        *f = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Malformed("bad PGM header".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Malformed(format!("unsupported PGM maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width.checked_mul(height).ok_or(Error::DimOverflow)?;
    let raster = bytes.get(pos..pos + n).ok_or(Error::Truncated {
        needed: pos + n,
        available: bytes.len(),
    })?;
    Map::new(
        height,
        width,
        raster.iter().map(|&b| b as f64 / maxval as f64).collect(),
    )
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Map> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Truncated {
            needed: start + 1,
            available: bytes.len(),
        });
    }
    Ok(&bytes[start..*pos])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_half_up() {
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(1.5 / 255.0), 2);
    }

    #[test]
    fn round_trip_with_comment() {
        let m = Map::new(2, 3, vec![0.0, 1.0, 0.5, 0.2, 0.8, 1.0]).unwrap();
        let bytes = encode_pgm(&m);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let back = decode_pgm(&bytes).unwrap();
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let commented = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        assert_eq!(decode_pgm(commented).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n4 4\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
