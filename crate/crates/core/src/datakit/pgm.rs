//! Binary portable graymap (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantizes `[0, 1]` values to bytes, rounding half up, and prepends a
/// `P5` header with max value 255.
pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = img.require_matrix("write_pgm")?;
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("pgm pixel {v} outside [0, 1]")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v * 255.0 + 0.5).floor() as u8));
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("pgm", format!("bad {what}")))
    }
}

/// Parses a P5 image into `[0, 1]` values (sample / maxval).
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format("pgm", "missing P5 magic"));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("max value")?;
    if w == 0 || h == 0 {
        return Err(Error::format("pgm", "zero image dimension"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::format("pgm", format!("unsupported max value {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("pgm", "header not terminated"));
    }
    let raster = &bytes[cur.pos + 1..];
    if raster.len() < w * h {
        return Err(Error::format(
            "pgm",
            format!("truncated payload: {} of {} bytes", raster.len(), w * h),
        ));
    }
    let data = raster[..w * h]
        .iter()
        .map(|&b| (b as f64 / maxval as f64).min(1.0))
        .collect();
    Tensor::new(vec![h, w], data)
}

pub fn write_pgm(img: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_pgm(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_example() {
        let img = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 255, 128, 64]);
    }

    #[test]
    fn zero_image_has_zero_payload() {
        let bytes = encode_pgm(&Tensor::zeros(&[3, 5])).unwrap();
        assert!(bytes[bytes.len() - 15..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), b"P5\n5 3\n255\n".len() + 15);
    }

    #[test]
    fn rejects_out_of_range_and_malformed() {
        assert!(encode_pgm(&Tensor::full(&[1, 1], 1.5)).is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n2 x\n255\n").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_pgm(b"P5\n# made by hand\n2 1\n# max\n255\n\x00\xff").unwrap();
        assert_eq!(img.shape(), &[1, 2]);
        assert_eq!(img.data(), &[0.0, 1.0]);
    }
}
