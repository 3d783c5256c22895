//! Dyadic image and label pyramids.
//!
//! A [`ScalePyramid`] holds `S` tensors whose spatial sizes halve from one
//! level to the next. Image pyramids downscale by 2x2 average pooling; label
//! pyramids downscale the binary mask level by level with a majority rule
//! (block average, threshold 0.5, ties to foreground).
//!
//! ```
//! use mimofan::pyramid::image_pyramid;
//! use mimofan::tensor::{Shape, Tensor};
//!
//! let image = Tensor::<f32>::full(Shape::new(1, 1, 32, 32), 0.25);
//! let pyr = image_pyramid(&image, 5).unwrap();
//! let sizes: Vec<usize> = pyr.levels.iter().map(|l| l.shape().h).collect();
//! assert_eq!(sizes, [32, 16, 8, 4, 2]);
//! ```

use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::avg_pool2;
use crate::tensor::Tensor;

/// What a pyramid's levels contain.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum PyramidKind {
    Image,
    Label,
    Probability,
}

/// `S` tensors at dyadically decreasing spatial sizes.
#[derive(Clone, Debug)]
pub struct ScalePyramid<E: Element> {
    pub levels: Vec<Tensor<E>>,
    pub kind: PyramidKind,
}

impl<E: Element> ScalePyramid<E> {
    pub fn scales(&self) -> usize {
        self.levels.len()
    }
}

fn check_divisible<E: Element>(t: &Tensor<E>, scales: usize) -> Result<()> {
    if scales < 1 {
        return Err(Error::Contract("pyramid needs at least one scale".into()));
    }
    let factor = 1usize << (scales - 1);
    let s = t.shape();
    for (axis, dim) in [("h", s.h), ("w", s.w)] {
        if dim % factor != 0 {
            return Err(Error::dim(
                axis,
                format!(
                    "size {dim} not divisible by 2^{} = {factor} required for {scales} scales",
                    scales - 1
                ),
            ));
        }
    }
    Ok(())
}

/// Repeated 2x2 average pooling: level 0 is the source image, level `s` is
/// `avg_pool2` of level `s-1`. Spatial dims must be divisible by
/// `2^(scales-1)`.
pub fn image_pyramid<E: Element>(image: &Tensor<E>, scales: usize) -> Result<ScalePyramid<E>> {
    check_divisible(image, scales)?;
    let mut levels = Vec::with_capacity(scales);
    levels.push(image.clone());
    for s in 1..scales {
        let next = avg_pool2(&levels[s - 1])?;
        levels.push(next);
    }
    Ok(ScalePyramid {
        levels,
        kind: PyramidKind::Image,
    })
}

/// Downscales one binary level by majority: 2x2 block average, then
/// threshold at 0.5 with exact ties mapped to foreground.
fn downscale_label<E: Element>(level: &Tensor<E>) -> Result<Tensor<E>> {
    let mut pooled = avg_pool2(level)?;
    let half = E::from_f64_c(0.5);
    for v in pooled.data_mut() {
        *v = if *v >= half { E::one() } else { E::zero() };
    }
    Ok(pooled)
}

/// Builds the ground-truth pyramid for deep pyramid supervision. Every
/// level is a binary mask; the input must already be binary.
pub fn label_pyramid<E: Element>(mask: &Tensor<E>, scales: usize) -> Result<ScalePyramid<E>> {
    if !mask.is_binary() {
        return Err(Error::Validation(
            "label pyramid requires a binary {0,1} mask".into(),
        ));
    }
    check_divisible(mask, scales)?;
    let mut levels = Vec::with_capacity(scales);
    levels.push(mask.clone());
    for s in 1..scales {
        let next = downscale_label(&levels[s - 1])?;
        levels.push(next);
    }
    Ok(ScalePyramid {
        levels,
        kind: PyramidKind::Label,
    })
}
