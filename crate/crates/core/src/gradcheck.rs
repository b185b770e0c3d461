//! Central finite-difference gradient checking.
//!
//! The checker is the independent oracle for every backward rule in this
//! crate: it re-evaluates the forward closure at perturbed inputs and never
//! touches the tape's backward path.
//!
//! Tolerances are defined at 64-bit precision. An element passes when
//!
//! ```text
//! |fd - analytic| / max(|fd|, |analytic|, denom_floor) <= rtol
//! ```
//!
//! with the default floor absorbing the O(step²) truncation noise of central
//! differences near zero gradients.

use crate::error::Result;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance.
    pub rtol: f64,
    /// Denominator floor for near-zero gradients.
    pub denom_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, rtol: 1e-4, denom_floor: 1e-3 }
    }
}

impl GradCheck {
    /// Maximum relative error between analytic and finite-difference
    /// gradients of `f` over every element of every input.
    ///
    /// `f` must be a deterministic pure function of the inputs: any discrete
    /// choice inside it (token selection, pooling index on exact ties) has to
    /// be stable under ±step perturbations or frozen by the caller.
    pub fn max_rel_err<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<f64>
    where
        F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
    {
        let analytic = {
            let mut tape = Tape::new();
            let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = f(&mut tape, &ids)?;
            let grads = tape.backward(loss)?;
            ids.iter()
                .map(|&id| {
                    grads
                        .get(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape().to_vec()))
                })
                .collect::<Vec<_>>()
        };

        let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = f(&mut tape, &ids)?;
            tape.value(loss).item()
        };

        let mut worst = 0.0f64;
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (ti, input) in inputs.iter().enumerate() {
            for e in 0..input.numel() {
                let orig = input.data()[e];

                let mut bumped = input.data().to_vec();
                bumped[e] = orig + self.step;
                work[ti] = Tensor::new(input.shape().to_vec(), bumped)?;
                let up = eval(&work)?;

                let mut bumped = input.data().to_vec();
                bumped[e] = orig - self.step;
                work[ti] = Tensor::new(input.shape().to_vec(), bumped)?;
                let down = eval(&work)?;

                work[ti] = input.clone();

                let fd = (up - down) / (2.0 * self.step);
                let an = analytic[ti].data()[e];
                let denom = fd.abs().max(an.abs()).max(self.denom_floor);
                worst = worst.max((fd - an).abs() / denom);
            }
        }
        Ok(worst)
    }

    /// `max_rel_err` folded into a pass/fail check against `rtol`.
    pub fn check<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<bool>
    where
        F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
    {
        Ok(self.max_rel_err(inputs, f)? <= self.rtol)
    }
}
