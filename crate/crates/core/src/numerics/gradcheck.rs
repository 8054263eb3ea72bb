//! Finite-difference verification of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for the relative error, so gradients that are zero up
/// to truncation noise do not produce spurious failures.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences for every input element.
pub fn grad_check<F>(op: &str, f: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    if loss.value().len() != 1 {
        return Err(Error::GradCheck {
            op: op.into(),
            reason: format!("loss must be scalar, got {:?}", loss.shape()),
        });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::GradCheck {
            op: op.into(),
            reason: "non-finite analytic gradient".into(),
        });
    }

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;
    for t in 0..inputs.len() {
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[t].data()[i];
            if !numeric.is_finite() {
                return Err(Error::GradCheck {
                    op: op.into(),
                    reason: format!("non-finite finite difference at input {t}[{i}]"),
                });
            }
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        op: op.into(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        checked,
        tolerance,
    })
}

/// Reduces a tensor-valued output to a scalar with fixed pseudo-random
/// weights, so every output element contributes a distinct cotangent.
pub fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut rng);
    out.mul(out.tape().constant(w)).map(Var::sum)
}
