use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, RgbImage};

fn header(magic: &str, h: usize, w: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = header("P6", img.height(), img.width());
    out.extend_from_slice(img.data());
    out
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = header("P5", labels.height(), labels.width());
    out.extend_from_slice(labels.data());
    out
}

/// Parses `magic width height maxval` and returns the dims and the payload.
/// Comments (`#` to end of line) are allowed between header tokens.
fn parse<'a>(bytes: &'a [u8], magic: &[u8; 2], samples: usize) -> Result<(usize, usize, &'a [u8])> {
    let kind = String::from_utf8_lossy(magic).into_owned();
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::corrupt(format!("pnm: expected {kind} magic")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if pos == start || pos - start > 9 {
            return Err(Error::corrupt(format!("pnm: malformed {kind} header")));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::corrupt("pnm: bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::corrupt("pnm: missing whitespace after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::corrupt(format!("pnm: only maxval 255 supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::corrupt(format!("pnm: zero dimension {w}x{h}")));
    }
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(samples))
        .ok_or_else(|| Error::corrupt("pnm: dims overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() != need {
        return Err(Error::corrupt(format!(
            "pnm: payload has {} bytes, expected {need}",
            payload.len()
        )));
    }
    Ok((h, w, payload))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (h, w, data) = parse(bytes, b"P6", 3)?;
    RgbImage::new(h, w, data.to_vec())
}

/// Decodes a P5 label map. Class range checks are left to the caller.
pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (h, w, data) = parse(bytes, b"P5", 1)?;
    LabelMap::new(h, w, data.to_vec())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_file(path, &encode_ppm(img))
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    decode_pgm(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    write_file(path, &encode_pgm(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let img = RgbImage::new(2, 3, (0..18).collect()).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        let lab = LabelMap::new(3, 2, vec![0, 1, 2, 255, 4, 5]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&lab)).unwrap(), lab);
    }

    #[test]
    fn accepts_comments_and_extra_whitespace() {
        let mut b = b"P5 # made by hand\n 2\t1\n#c\n255\n".to_vec();
        b.extend_from_slice(&[7, 9]);
        let lab = decode_pgm(&b).unwrap();
        assert_eq!(lab.data(), &[7, 9]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n0 2\n255\n").is_err());
        assert!(decode_pgm(b"P5\n99999999999 2\n255\n").is_err());
        assert!(decode_ppm(b"P6").is_err());
    }
}
