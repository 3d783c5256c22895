//! PPM (P6) overlay rendering of a segmentation result.
//!
//! Pixel legend: correctly predicted foreground (true positive) is pure
//! red, false positive pure blue, false negative pure green; everything
//! else shows the grayscale image.

use std::path::Path;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TRUE_POSITIVE: [u8; 3] = [255, 0, 0];
pub const FALSE_POSITIVE: [u8; 3] = [0, 0, 255];
pub const FALSE_NEGATIVE: [u8; 3] = [0, 255, 0];

/// Renders image + prediction + truth into a P6 PPM file.
pub fn render_overlay<E: Element>(
    image: &Tensor<E>,
    pred: &Tensor<E>,
    truth: &Tensor<E>,
    path: &Path,
) -> Result<()> {
    let s = image.shape();
    if pred.shape() != s || truth.shape() != s {
        return Err(Error::dim(
            "all",
            format!(
                "overlay inputs disagree: image {s}, pred {}, truth {}",
                pred.shape(),
                truth.shape()
            ),
        ));
    }
    if s.n != 1 || s.c != 1 {
        return Err(Error::dim(
            "channel",
            format!("overlay expects (1,1,h,w) tensors, got {s}"),
        ));
    }
    if !pred.is_binary() || !truth.is_binary() {
        return Err(Error::Validation("overlay masks must be binary".into()));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    for ((&img, &p), &t) in image
        .data()
        .iter()
        .zip(pred.data())
        .zip(truth.data())
    {
        let p = p == E::one();
        let t = t == E::one();
        let rgb = match (p, t) {
            (true, true) => TRUE_POSITIVE,
            (true, false) => FALSE_POSITIVE,
            (false, true) => FALSE_NEGATIVE,
            (false, false) => {
                let g = (img.to_f64_c().clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g]
            }
        };
        out.extend_from_slice(&rgb);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn read_pixels(path: &Path) -> Vec<[u8; 3]> {
        let bytes = std::fs::read(path).unwrap();
        let header_end = bytes
            .windows(4)
            .position(|w| w == b"255\n")
            .unwrap()
            + 4;
        bytes[header_end..]
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect()
    }

    fn mask(bits: &[u8], w: usize) -> Tensor<f32> {
        Tensor::from_vec(
            Shape::new(1, 1, bits.len() / w, w),
            bits.iter().map(|&b| b as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_prediction_is_red_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tp.ppm");
        let truth = mask(&[1, 1, 0, 0], 2);
        let img = Tensor::full(Shape::new(1, 1, 2, 2), 0.5f32);
        render_overlay(&img, &truth, &truth, &path).unwrap();
        let px = read_pixels(&path);
        assert_eq!(px[0], TRUE_POSITIVE);
        assert_eq!(px[1], TRUE_POSITIVE);
        assert!(px.iter().all(|&p| p != FALSE_POSITIVE && p != FALSE_NEGATIVE));
    }

    #[test]
    fn empty_prediction_is_green_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fn.ppm");
        let truth = mask(&[1, 0, 1, 0], 2);
        let pred = mask(&[0, 0, 0, 0], 2);
        let img = Tensor::full(Shape::new(1, 1, 2, 2), 0.25f32);
        render_overlay(&img, &pred, &truth, &path).unwrap();
        let px = read_pixels(&path);
        assert_eq!(px[0], FALSE_NEGATIVE);
        assert_eq!(px[2], FALSE_NEGATIVE);
        assert!(px.iter().all(|&p| p != TRUE_POSITIVE && p != FALSE_POSITIVE));
    }

    #[test]
    fn over_prediction_is_red_and_blue() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fp.ppm");
        let truth = mask(&[1, 0, 0, 0], 2);
        let pred = mask(&[1, 1, 1, 0], 2);
        let img = Tensor::full(Shape::new(1, 1, 2, 2), 0.75f32);
        render_overlay(&img, &pred, &truth, &path).unwrap();
        let px = read_pixels(&path);
        assert_eq!(px[0], TRUE_POSITIVE);
        assert_eq!(px[1], FALSE_POSITIVE);
        assert_eq!(px[2], FALSE_POSITIVE);
        assert!(!px.contains(&FALSE_NEGATIVE));
        // the background pixel stays grayscale
        assert_eq!(px[3], [191, 191, 191]);
    }
}
