//! Dice metrics and evaluation reports.
//!
//! "Average Dice" is the mean of per-case Dice scores; "global Dice" pools
//! the voxel counts of all cases first. Both use the convention that two
//! empty masks score 1.0.
//!
//! ```
//! use mimofan::metrics::dice;
//! use mimofan::tensor::{Shape, Tensor};
//!
//! let a = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
//! let b = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
//! // |P| = 2, |T| = 2, overlap 1 -> dice 0.5
//! assert_eq!(dice::<f64>(&a, &b).unwrap(), 0.5);
//! ```

use std::io::Write;
use std::path::Path;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn counts<E: Element>(pred: &Tensor<E>, truth: &Tensor<E>) -> Result<(u64, u64, u64)> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(
            "all",
            format!("mask shapes differ: {} vs {}", pred.shape(), truth.shape()),
        ));
    }
    if !pred.is_binary() || !truth.is_binary() {
        return Err(Error::Validation("dice requires binary masks".into()));
    }
    let mut p = 0u64;
    let mut t = 0u64;
    let mut both = 0u64;
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let fa = a == E::one();
        let fb = b == E::one();
        p += fa as u64;
        t += fb as u64;
        both += (fa && fb) as u64;
    }
    Ok((p, t, both))
}

/// Dice coefficient `2|P∩T| / (|P| + |T|)`; 1.0 when both masks are empty.
pub fn dice<E: Element>(pred: &Tensor<E>, truth: &Tensor<E>) -> Result<f64> {
    let (p, t, both) = counts(pred, truth)?;
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Dice on pooled voxel counts across cases.
pub fn global_dice<E: Element>(cases: &[(Tensor<E>, Tensor<E>)]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Usage("global_dice of an empty case list".into()));
    }
    let mut p_sum = 0u64;
    let mut t_sum = 0u64;
    let mut both_sum = 0u64;
    for (pred, truth) in cases {
        let (p, t, both) = counts(pred, truth)?;
        p_sum += p;
        t_sum += t;
        both_sum += both;
    }
    if p_sum + t_sum == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both_sum as f64 / (p_sum + t_sum) as f64)
}

/// Per-case and aggregate Dice scores of one evaluation run.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub fold_id: usize,
    /// `(case_id, dice)` in evaluation order.
    pub per_case: Vec<(String, f64)>,
    pub average_dice: f64,
    pub global_dice: f64,
}

impl EvalReport {
    pub fn new(
        fold_id: usize,
        per_case: Vec<(String, f64)>,
        global_dice: f64,
    ) -> EvalReport {
        let average_dice = if per_case.is_empty() {
            0.0
        } else {
            per_case.iter().map(|(_, d)| d).sum::<f64>() / per_case.len() as f64
        };
        EvalReport {
            fold_id,
            per_case,
            average_dice,
            global_dice,
        }
    }

    /// CSV rows `fold,case_id,dice` followed by one summary row carrying
    /// the average and global Dice.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,case_id,dice\n");
        for (case, d) in &self.per_case {
            out.push_str(&format!("{},{case},{d:.6}\n", self.fold_id));
        }
        out.push_str(&format!(
            "summary,{:.6},{:.6}\n",
            self.average_dice, self.global_dice
        ));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}
