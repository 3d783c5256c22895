//! Binary PGM (P5) reading and writing.
//!
//! Only 8-bit files (maxval 255) are accepted. Gray values map to `[0, 1]`
//! by division with 255 on read; masks threshold at 128. Parse errors carry
//! the byte offset of the problem.

use std::path::Path;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, details: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            details: details.into(),
        }
    }

    /// Skips whitespace and `#` comment lines between header tokens.
    fn skip_separators(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            return;
        }
    }

    fn ascii_int(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(format!("expected ASCII integer for {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are utf8")
            .parse()
            .map_err(|e| self.err(format!("bad {what}: {e}")))
    }
}

/// Parses P5 bytes into `(width, height, pixels)`.
fn parse_p5(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(cur.err(format!("unsupported magic `{found}` (expected P5)")));
    }
    cur.pos = 2;
    let width = cur.ascii_int("width")?;
    let height = cur.ascii_int("height")?;
    let maxval = cur.ascii_int("maxval")?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval} (expected 255)")));
    }
    if width == 0 || height == 0 {
        return Err(cur.err("zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the payload
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("missing whitespace before pixel payload"));
    }
    cur.pos += 1;
    let need = width * height;
    let have = bytes.len() - cur.pos;
    if have < need {
        cur.pos = bytes.len();
        return Err(cur.err(format!("truncated payload: need {need} bytes, have {have}")));
    }
    Ok((width, height, bytes[cur.pos..cur.pos + need].to_vec()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a grayscale image; values are scaled to `[0, 1]`.
pub fn read_pgm_image<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let bytes = read_bytes(path)?;
    let (w, h, pixels) = parse_p5(&bytes, path)?;
    let data = pixels
        .iter()
        .map(|&p| E::from_f64_c(p as f64 / 255.0))
        .collect();
    Tensor::from_vec(Shape::new(1, 1, h, w), data)
}

/// Reads a binary mask: pixels at or above 128 become foreground.
pub fn read_pgm_mask<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let bytes = read_bytes(path)?;
    let (w, h, pixels) = parse_p5(&bytes, path)?;
    let data = pixels
        .iter()
        .map(|&p| if p >= 128 { E::one() } else { E::zero() })
        .collect();
    Tensor::from_vec(Shape::new(1, 1, h, w), data)
}

fn quantize<E: Element>(t: &Tensor<E>) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::dim(
            "channel",
            format!("PGM output requires shape (1,1,h,w), got {s}"),
        ));
    }
    Ok(t.data()
        .iter()
        .map(|&v| (v.to_f64_c().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

/// Writes a `(1,1,h,w)` tensor as binary PGM, inverting the `[0,1]` scaling.
pub fn write_pgm<E: Element>(t: &Tensor<E>, path: &Path) -> Result<()> {
    let pixels = quantize(t)?;
    let s = t.shape();
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend_from_slice(&pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_bytes_parse_to_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        std::fs::write(&path, bytes).unwrap();
        let t = read_pgm_image::<f64>(&path).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 2, 2));
        let expect = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, e) in t.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-9);
        }
        // and the mask threshold at 128
        let m = read_pgm_mask::<f64>(&path).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn write_read_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.pgm");
        let data: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
        let t = Tensor::from_vec(Shape::new(1, 1, 8, 8), data).unwrap();
        write_pgm(&t, &path).unwrap();
        let back = read_pgm_image::<f32>(&path).unwrap();
        assert!(t.max_abs_diff(&back).unwrap() <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn wrong_magic_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ascii.pgm");
        std::fs::write(&path, b"P2\n1 1\n255\n0").unwrap();
        match read_pgm_image::<f32>(&path) {
            Err(Error::Parse { details, .. }) => {
                assert!(details.contains("unsupported magic"), "{details}")
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_maxval_and_truncation_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p16 = dir.path().join("m.pgm");
        std::fs::write(&p16, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(matches!(
            read_pgm_image::<f32>(&p16),
            Err(Error::Parse { .. })
        ));

        let trunc = dir.path().join("t.pgm");
        std::fs::write(&trunc, b"P5\n4 4\n255\n\x01\x02").unwrap();
        match read_pgm_image::<f32>(&trunc) {
            Err(Error::Parse { offset, details, .. }) => {
                assert!(offset > 0);
                assert!(details.contains("truncated"), "{details}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
