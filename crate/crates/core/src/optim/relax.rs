use rand::Rng;
use serde::{Deserialize, Serialize};

use super::WordMode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tape, Var};
use crate::vocab::PAD_INDEX;

/// Floor applied to probabilities before taking their log in gumbel mode.
pub const LOG_FLOOR: f64 = 1e-12;

/// Largest uniform draw used for gumbel noise; keeps `-log(-log u)` finite.
pub const UNIFORM_CEIL: f64 = 1.0 - 1e-16;

/// `-log(-log u)` with `u` clamped into the open unit interval.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(f64::MIN_POSITIVE, UNIFORM_CEIL);
    -(-u.ln()).ln()
}

/// I.i.d. standard Gumbel entries.
pub fn gumbel_noise<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(gumbel_from_uniform(rng.random::<f64>())))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

/// Exponential temperature schedule from `tau_start` down to `tau_end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub steps: usize,
}

impl AnnealSchedule {
    pub fn new(tau_start: f64, tau_end: f64, steps: usize) -> Result<Self> {
        if !(tau_end > 0.0 && tau_start >= tau_end && tau_start.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "anneal schedule needs tau_start >= tau_end > 0, got {tau_start} -> {tau_end}"
            )));
        }
        Ok(AnnealSchedule { tau_start, tau_end, steps })
    }

    /// `tau_start · (tau_end / tau_start)^(step / (steps - 1))`; a one-step schedule
    /// stays at `tau_start`.
    pub fn tau(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.tau_start;
        }
        if step + 1 >= self.steps {
            return self.tau_end;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(frac)
    }

    /// Temperature of the last ascent step.
    pub fn final_tau(&self) -> f64 {
        self.tau(self.steps.saturating_sub(1))
    }
}

/// Maps the free matrix `x` to the row matrix `P` fed into the embedding product.
///
/// * logit: `P = X`
/// * softmax: `p_t = softmax(x_t)`
/// * gumbel: `p_t = softmax((log max(softmax(x_t), 1e-12) + g_t) / tau)`
///
/// The padding column is masked out in every mode.
pub fn relax<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, mode: WordMode, tau: T, noise: Option<Var>) -> Result<Var> {
    match mode {
        WordMode::Logit => tape.mask_cols(x, vec![PAD_INDEX], T::zero()),
        WordMode::Softmax => {
            let masked = tape.mask_cols(x, vec![PAD_INDEX], T::neg_infinity())?;
            Ok(tape.softmax_rows(masked))
        }
        WordMode::Gumbel => {
            if !(tau > T::zero()) {
                return Err(Error::InvalidArgument(format!("gumbel temperature must be positive, got {tau}")));
            }
            let noise = noise.ok_or_else(|| Error::InvalidArgument("gumbel mode needs noise".into()))?;
            let masked = tape.mask_cols(x, vec![PAD_INDEX], T::neg_infinity())?;
            let p = tape.softmax_rows(masked);
            let floored = tape.clamp_min(p, T::lit(LOG_FLOOR));
            let logp = tape.log(floored)?;
            let perturbed = tape.add(logp, noise)?;
            let scaled = tape.affine(perturbed, T::one() / tau, T::zero());
            let scaled = tape.mask_cols(scaled, vec![PAD_INDEX], T::neg_infinity())?;
            Ok(tape.softmax_rows(scaled))
        }
    }
}

/// [`relax`] on plain matrices.
pub fn relax_matrix<T: Scalar>(x: &Matrix<T>, mode: WordMode, tau: T, noise: Option<&Matrix<T>>) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let nv = noise.map(|n| tape.constant(n));
    let p = relax(&mut tape, xv, mode, tau, nv)?;
    Ok(tape.value(p).clone())
}
