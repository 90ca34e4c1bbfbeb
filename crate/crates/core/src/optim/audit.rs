//! Gradient audit of every ascent objective against quad-precision central
//! differences.

use f128::f128;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{embedding_objective, gumbel_noise, word_objective, WordMode};
use crate::error::{Error, Result};
use crate::imaginet::{ModelWeights, NeuronTarget};
use crate::scalar::Scalar;
use crate::tensor::{grad_check_reference, Matrix, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub seq_len: usize,
    /// Central-difference step.
    pub step: f64,
    /// Temperatures checked in gumbel mode; logit and softmax use 1.
    pub taus: Vec<f64>,
    /// Exponent of the penalized embedding objective.
    pub lambda: f64,
    /// Seeds the evaluation points and the fixed gumbel noise.
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig { seq_len: 5, step: 1e-5, taus: vec![5.0, 1.0, 0.1], lambda: 2.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveCheck {
    pub objective: String,
    pub target: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Copy, Debug)]
enum Objective {
    Embedding(Option<f64>),
    Word(WordMode, f64),
}

impl Objective {
    fn name(self) -> String {
        match self {
            Objective::Embedding(None) => "emb".into(),
            Objective::Embedding(Some(l)) => format!("emb lambda={l}"),
            Objective::Word(WordMode::Logit, _) => "logit".into(),
            Objective::Word(WordMode::Softmax, _) => "smx".into(),
            Objective::Word(WordMode::Gumbel, tau) => format!("gbl tau={tau}"),
        }
    }
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| d.sample(rng)).collect()).expect("length matches shape")
}

/// Checks every objective on every target; results are ordered target-major.
/// Word matrices are drawn from `N(0, 1)`, embeddings from `N(0, 0.5)`.
pub fn audit_gradients(weights: &ModelWeights<f64>, targets: &[NeuronTarget], cfg: &AuditConfig) -> Result<Vec<ObjectiveCheck>> {
    if cfg.seq_len == 0 {
        return Err(Error::InvalidArgument("audit seq_len must be at least 1".into()));
    }
    if cfg.taus.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidArgument("audit temperatures must be positive".into()));
    }
    for t in targets {
        t.check(weights)?;
    }
    let dims = weights.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = normal(cfg.seq_len, dims.vocab, 1.0, &mut rng);
    let e = normal(cfg.seq_len, dims.embed, 0.5, &mut rng);
    let noise: Matrix<f64> = gumbel_noise(cfg.seq_len, dims.vocab, &mut rng);
    let wq: ModelWeights<f128> = weights.cast();
    let noise_q: Matrix<f128> = noise.cast();

    let mut objectives = vec![
        Objective::Embedding(None),
        Objective::Embedding(Some(cfg.lambda)),
        Objective::Word(WordMode::Logit, 1.0),
        Objective::Word(WordMode::Softmax, 1.0),
    ];
    objectives.extend(cfg.taus.iter().map(|&t| Objective::Word(WordMode::Gumbel, t)));
    let jobs: Vec<(&NeuronTarget, Objective)> =
        targets.iter().flat_map(|t| objectives.iter().map(move |&o| (t, o))).collect();

    jobs.par_iter()
        .map(|&(target, objective)| {
            let err = match objective {
                Objective::Embedding(lambda) => grad_check_reference(
                    |tape: &mut Tape<'_, f64>, ev| embedding_objective(tape, weights, target, ev, lambda),
                    |tape: &mut Tape<'_, f128>, ev| embedding_objective(tape, &wq, target, ev, lambda.map(f128::lit)),
                    &e,
                    cfg.step,
                )?,
                Objective::Word(mode, tau) => {
                    let gumbel = mode == WordMode::Gumbel;
                    grad_check_reference(
                        |tape: &mut Tape<'_, f64>, xv| {
                            let nv = gumbel.then(|| tape.constant(&noise));
                            Ok(word_objective(tape, weights, target, xv, mode, tau, nv)?.0)
                        },
                        |tape: &mut Tape<'_, f128>, xv| {
                            let nv = gumbel.then(|| tape.constant(&noise_q));
                            Ok(word_objective(tape, &wq, target, xv, mode, f128::lit(tau), nv)?.0)
                        },
                        &x,
                        cfg.step,
                    )?
                }
            };
            Ok(ObjectiveCheck { objective: objective.name(), target: target.to_string(), max_rel_error: err })
        })
        .collect()
}
