//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::path::Path;

use crate::error::{Error, Result};

/// Decoded raster; `channels` is 1 for PGM and 3 for PPM, samples interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            match bytes.get(pos) {
                None => return Err("unexpected end of header".into()),
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let mut number = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad {what} {t:?}"))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err("empty raster".into());
    }
    if maxval != 255 {
        return Err(format!("only 8-bit rasters are supported, maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the payload
    let payload = bytes.get(pos + 1..).unwrap_or(&[]);
    let need = width * height * channels;
    if payload.len() < need {
        return Err(format!("truncated payload: need {need} bytes, have {}", payload.len()));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: payload[..need].to_vec(),
    })
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    std::fs::write(path, encode(r)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::parse(path, 0, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_and_round_trip() {
        let r = Raster {
            width: 2,
            height: 1,
            channels: 3,
            data: vec![1, 2, 3, 4, 5, 6],
        };
        let bytes = encode(&r);
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(decode(&bytes).unwrap(), r);
    }

    #[test]
    fn comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 2\n255\n\x00\x01\x02\x03";
        let r = decode(bytes).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 2, 1));
        assert_eq!(r.data, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_truncated_and_foreign() {
        assert!(decode(b"P5\n4 4\n255\n\x00\x00").is_err());
        assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode(b"P6\n1").is_err());
    }
}
