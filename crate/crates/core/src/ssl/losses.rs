//! Training objectives, recorded on a [`GradientTape`] so they can be
//! differentiated. All reductions are means over rows unless stated.

use super::{Hyperparams, SslError};
use crate::ndkernel::{GradientTape, KernelError, Matrix, Var};

/// Mean over rows of `-sum_c t_c log softmax(z)_c`.
pub fn cross_entropy(
    tape: &mut GradientTape,
    logits: Var,
    targets: &Matrix,
) -> Result<Var, KernelError> {
    let logp = tape.log_softmax_rows(logits)?;
    let t = tape.constant(targets.clone());
    let prod = tape.mul(logp, t)?;
    let rows = tape.value(logits).rows() as f64;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / rows)
}

/// Mean over rows of the squared L2 distance `||p - t||^2`; not divided by
/// the number of classes.
pub fn squared_error(
    tape: &mut GradientTape,
    probs: Var,
    targets: &Matrix,
) -> Result<Var, KernelError> {
    let t = tape.constant(targets.clone());
    let diff = tape.sub(probs, t)?;
    let sq = tape.square(diff)?;
    let rows = tape.value(probs).rows() as f64;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / rows)
}

/// `sum_c pi_c log(pi_c / pbar_c)` with uniform `pi` and `pbar` the mean
/// softmax over rows. Equals `-log C - (1/C) sum_c log pbar_c`.
pub fn uniform_prior_penalty(tape: &mut GradientTape, probs: Var) -> Result<Var, KernelError> {
    let classes = tape.value(probs).cols() as f64;
    let pbar = tape.mean_rows(probs)?;
    let logs = tape.log(pbar)?;
    let total = tape.sum(logs)?;
    let scaled = tape.scale(total, -1.0 / classes)?;
    tape.add_scalar(scaled, -classes.ln())
}

/// NT-Xent over unit-norm embeddings laid out as interleaved pairs
/// `(2b, 2b + 1)`. Averaged over all `2B` anchors. One pair gives zero and
/// an empty batch contributes zero.
pub fn nt_xent(tape: &mut GradientTape, embeddings: Var, kappa: f64) -> Result<Var, SslError> {
    let n = tape.value(embeddings).rows();
    if !n.is_multiple_of(2) {
        return Err(SslError::DegenerateBatch(
            "contrastive batch must hold pairs",
        ));
    }
    if n == 0 {
        return Ok(tape.constant(Matrix::zeros(1, 1)));
    }
    let zt = tape.transpose(embeddings)?;
    let sim = tape.matmul(embeddings, zt)?;
    let logits = tape.scale(sim, 1.0 / kappa)?;
    let logp = tape.log_softmax_off_diagonal(logits)?;
    let mut mask = Matrix::zeros(n, n);
    for b in 0..n / 2 {
        mask.set(2 * b, 2 * b + 1, 1.0);
        mask.set(2 * b + 1, 2 * b, 1.0);
    }
    let m = tape.constant(mask);
    let picked = tape.mul(logp, m)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

/// Scalar values of the four objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub lx: f64,
    pub lu: f64,
    pub reg: f64,
    pub lc: f64,
}

impl LossBreakdown {
    /// `L_X + lambda_U L_U + lambda_r L_reg + lambda_C L_C`.
    pub fn total(&self, hp: &Hyperparams) -> f64 {
        self.lx + hp.lambda_u * self.lu + hp.lambda_r * self.reg + hp.lambda_c * self.lc
    }
}

/// Tape handles of the four objectives.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub lx: Var,
    pub lu: Var,
    pub reg: Var,
    pub lc: Var,
}

impl LossVars {
    pub fn values(&self, tape: &GradientTape) -> LossBreakdown {
        LossBreakdown {
            lx: tape.scalar(self.lx),
            lu: tape.scalar(self.lu),
            reg: tape.scalar(self.reg),
            lc: tape.scalar(self.lc),
        }
    }
}

/// Weighted sum of the objectives as a single tape scalar.
pub fn total_loss(
    tape: &mut GradientTape,
    parts: &LossVars,
    hp: &Hyperparams,
) -> Result<Var, KernelError> {
    let lu = tape.scale(parts.lu, hp.lambda_u)?;
    let reg = tape.scale(parts.reg, hp.lambda_r)?;
    let lc = tape.scale(parts.lc, hp.lambda_c)?;
    let a = tape.add(parts.lx, lu)?;
    let b = tape.add(a, reg)?;
    tape.add(b, lc)
}
