//! Deep pyramid supervision loss.
//!
//! The training objective is a class-weighted cross-entropy averaged over
//! the supervised scales:
//!
//! ```text
//! L = (1/S) * sum_s (1/N_s) * sum_i sum_c  -w_c * y_{i,s,c} * log p_{i,s,c}
//! ```
//!
//! where `N_s` is the voxel count of scale `s`, so each scale contributes a
//! size-independent mean. Probabilities are clamped at `1e-7` before the
//! logarithm. The default class weights are 0.2 for background and 1.2 for
//! foreground.
//!
//! ```
//! use mimofan::loss::{dps_loss, ClassWeights};
//! use mimofan::pyramid::{PyramidKind, ScalePyramid};
//! use mimofan::tape::Tape;
//! use mimofan::tensor::{Shape, Tensor};
//!
//! // one scale, one voxel, foreground predicted at 0.5:
//! // L = 1.2 * ln 2
//! let mut tape = Tape::<f64>::new();
//! let probs = tape.leaf(
//!     Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.5, 0.5]).unwrap(),
//!     false,
//! );
//! let labels = ScalePyramid {
//!     levels: vec![Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap()],
//!     kind: PyramidKind::Label,
//! };
//! let loss = dps_loss(&mut tape, &[probs], &labels, ClassWeights::default()).unwrap();
//! let value = tape.value(loss).item().unwrap();
//! assert!((value - 1.2 * std::f64::consts::LN_2).abs() < 1e-12);
//! ```

use crate::element::Element;
use crate::error::{Error, Result};
use crate::pyramid::ScalePyramid;
use crate::tape::{Tape, Var};

/// Per-class weights of the cross-entropy.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub background: f64,
    pub foreground: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights {
            background: 0.2,
            foreground: 1.2,
        }
    }
}

impl ClassWeights {
    pub fn validate(&self) -> Result<()> {
        if self.background <= 0.0 || self.foreground <= 0.0 {
            return Err(Error::Config(
                "class weights must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted cross-entropy averaged over the supervised scales. `outputs`
/// are softmax maps on the tape (fine to coarse); `labels` is the matching
/// binary pyramid. With deep supervision disabled, pass only the finest
/// output and label.
pub fn dps_loss<E: Element>(
    tape: &mut Tape<E>,
    outputs: &[Var],
    labels: &ScalePyramid<E>,
    weights: ClassWeights,
) -> Result<Var> {
    weights.validate()?;
    if outputs.is_empty() {
        return Err(Error::Contract("dps_loss needs at least one scale".into()));
    }
    if outputs.len() > labels.levels.len() {
        return Err(Error::dim(
            "all",
            format!(
                "{} outputs but only {} label levels",
                outputs.len(),
                labels.levels.len()
            ),
        ));
    }
    let w_bg = E::from_f64_c(weights.background);
    let w_fg = E::from_f64_c(weights.foreground);
    let mut terms = Vec::with_capacity(outputs.len());
    for (s, (&out, level)) in outputs.iter().zip(&labels.levels).enumerate() {
        let os = tape.value(out).shape();
        let ls = level.shape();
        if (os.n, os.h, os.w) != (ls.n, ls.h, ls.w) {
            return Err(Error::dim(
                "all",
                format!("scale {s}: output {os} does not match labels {ls}"),
            ));
        }
        terms.push(tape.wce_level(out, level.clone(), w_bg, w_fg)?);
    }
    tape.scalar_mean(&terms)
}
