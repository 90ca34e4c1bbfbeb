//! Gradient-ascent input optimization.
//!
//! Word optimization ascends a free `T x V` matrix `X` through one of three
//! relaxations (logit, softmax, gumbel softmax) of the one-hot input, then decodes
//! by per-row argmax. Embedding optimization ascends the `T x d` embedding sequence
//! directly and decodes each row to its nearest real word by cosine.

mod audit;
mod relax;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaginet::{bind_path, forward, target_value, ModelWeights, NeuronTarget};
use crate::scalar::Scalar;
use crate::tensor::{argmax_excluding, cosine, Matrix, Tape, Var};
use crate::vocab::{Vocabulary, PAD_INDEX};

pub use audit::{audit_gradients, AuditConfig, ObjectiveCheck};
pub use relax::{gumbel_from_uniform, gumbel_noise, relax, relax_matrix, AnnealSchedule, LOG_FLOOR, UNIFORM_CEIL};

/// Relaxation applied to the free word matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordMode {
    Logit,
    Softmax,
    Gumbel,
}

/// The five methods compared by the evaluation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Exhaustive corpus n-gram search.
    Crp,
    /// Embedding optimization.
    Emb,
    /// Word optimization without softmax.
    Logit,
    /// Word optimization with softmax.
    Smx,
    /// Word optimization with gumbel softmax.
    Gbl,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Crp, Method::Emb, Method::Logit, Method::Smx, Method::Gbl];

    pub fn word_mode(self) -> Option<WordMode> {
        match self {
            Method::Logit => Some(WordMode::Logit),
            Method::Smx => Some(WordMode::Softmax),
            Method::Gbl => Some(WordMode::Gumbel),
            Method::Crp | Method::Emb => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Crp => "crp",
            Method::Emb => "emb",
            Method::Logit => "logit",
            Method::Smx => "smx",
            Method::Gbl => "gbl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crp" => Ok(Method::Crp),
            "emb" => Ok(Method::Emb),
            "logit" => Ok(Method::Logit),
            "smx" | "softmax" => Ok(Method::Smx),
            "gbl" | "gumbel" => Ok(Method::Gbl),
            _ => Err(Error::InvalidArgument(format!("unknown method '{s}' (crp|emb|logit|smx|gbl)"))),
        }
    }
}

impl From<WordMode> for Method {
    fn from(m: WordMode) -> Self {
        match m {
            WordMode::Logit => Method::Logit,
            WordMode::Softmax => Method::Smx,
            WordMode::Gumbel => Method::Gbl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WordConfig {
    pub mode: WordMode,
    /// n-gram length `T`.
    pub seq_len: usize,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    /// Standard deviation of the `Normal(0, σ)` initialization of `X`.
    pub init_std: f64,
    pub tau_start: f64,
    pub tau_end: f64,
}

impl Default for WordConfig {
    fn default() -> Self {
        WordConfig {
            mode: WordMode::Gumbel,
            seq_len: 5,
            steps: 500,
            step_size: 0.1,
            restarts: 8,
            init_std: 0.01,
            tau_start: 5.0,
            tau_end: 0.1,
        }
    }
}

impl WordConfig {
    pub fn schedule(&self) -> Result<AnnealSchedule> {
        AnnealSchedule::new(self.tau_start, self.tau_end, self.steps)
    }
}

/// Multiplies the embedding objective by `relu(r)^λ`, `r` being the mean over
/// positions of the best cosine to a real word embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub enabled: bool,
    pub lambda_start: f64,
    /// Added to `λ` after every ascent step.
    pub lambda_increment: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            enabled: false,
            lambda_start: 0.0,
            lambda_increment: 0.01,
        }
    }
}

impl PenaltyConfig {
    pub fn lambda(&self, step: usize) -> f64 {
        self.lambda_start + self.lambda_increment * step as f64
    }

    fn validate(&self) -> Result<()> {
        if self.lambda_start < 0.0 || self.lambda_increment < 0.0 {
            return Err(Error::InvalidArgument("penalty lambda must be nonnegative and nondecreasing".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub seq_len: usize,
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    pub init_std: f64,
    pub penalty: PenaltyConfig,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            seq_len: 5,
            steps: 500,
            step_size: 0.01,
            restarts: 8,
            init_std: 0.01,
            penalty: PenaltyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortedRestart {
    pub restart: usize,
    pub step: usize,
    pub reason: String,
}

/// Best-of-restarts outcome of one optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub method: Method,
    pub target: NeuronTarget,
    pub seed: u64,
    /// Decoded n-gram; never contains the padding index.
    pub tokens: Vec<usize>,
    /// Objective at the final relaxed (or continuous) input.
    pub relaxed_activation: f64,
    /// Target activation of the decoded one-hot n-gram.
    pub discrete_activation: f64,
    /// Objective per ascent step of the reported restart.
    pub trace: Vec<f64>,
    pub restarts_used: usize,
    pub best_restart: usize,
    /// Discrete activation per restart, `None` where the restart aborted.
    pub restart_activations: Vec<Option<f64>>,
    pub aborted: Vec<AbortedRestart>,
    /// Largest entry of each final relaxed row (word methods only).
    pub relaxed_row_max: Vec<f64>,
    /// Mean best cosine between optimized embeddings and real words (embedding method only).
    pub mean_nearest_cosine: Option<f64>,
}

/// Serializable record of a result with tokens rendered through a vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub target: String,
    pub target_spec: NeuronTarget,
    pub method: Method,
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub relaxed_activation: f64,
    pub discrete_activation: f64,
    pub trace_every: usize,
    pub trace: Vec<f64>,
    pub restarts_used: usize,
    pub best_restart: usize,
    pub aborted: Vec<AbortedRestart>,
    pub mean_nearest_cosine: Option<f64>,
}

impl OptimizationResult {
    /// Builds the serializable record, keeping every `trace_every`-th trace entry.
    pub fn to_record<H: Serialize>(&self, vocab: &Vocabulary, hyperparameters: &H, trace_every: usize) -> Result<ResultRecord> {
        let every = trace_every.max(1);
        Ok(ResultRecord {
            target: self.target.to_string(),
            target_spec: self.target.clone(),
            method: self.method,
            hyperparameters: serde_json::to_value(hyperparameters)?,
            seed: self.seed,
            tokens: self
                .tokens
                .iter()
                .map(|&t| vocab.token(t).unwrap_or("<?>").to_string())
                .collect(),
            token_ids: self.tokens.clone(),
            relaxed_activation: self.relaxed_activation,
            discrete_activation: self.discrete_activation,
            trace_every: every,
            trace: self.trace.iter().step_by(every).copied().collect(),
            restarts_used: self.restarts_used,
            best_restart: self.best_restart,
            aborted: self.aborted.clone(),
            mean_nearest_cosine: self.mean_nearest_cosine,
        })
    }
}

/// Independent random stream per restart.
pub(crate) fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

fn normal_matrix<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Result<Matrix<T>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(format!("init_std {std}: {e}")))?;
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect())
}

/// Records `f(relax(X) · M)` for a word matrix `X`; returns `(f, P)`.
pub fn word_objective<'w, T: Scalar>(
    tape: &mut Tape<'w, T>,
    weights: &'w ModelWeights<T>,
    target: &NeuronTarget,
    x: Var,
    mode: WordMode,
    tau: T,
    noise: Option<Var>,
) -> Result<(Var, Var)> {
    let p = relax(tape, x, mode, tau, noise)?;
    let m = tape.constant(&weights.embedding);
    let e = tape.matmul(p, m)?;
    let pv = bind_path(tape, weights.path(target.path));
    let fwd = forward(tape, e, &pv)?;
    Ok((target_value(tape, &fwd, target)?, p))
}

/// Records `f(E)`, or `relu(r)^λ · f(E)` when `lambda` is given.
pub fn embedding_objective<'w, T: Scalar>(
    tape: &mut Tape<'w, T>,
    weights: &'w ModelWeights<T>,
    target: &NeuronTarget,
    e: Var,
    lambda: Option<T>,
) -> Result<Var> {
    let pv = bind_path(tape, weights.path(target.path));
    let fwd = forward(tape, e, &pv)?;
    let f = target_value(tape, &fwd, target)?;
    let Some(lambda) = lambda else { return Ok(f) };
    let m = tape.constant(&weights.embedding);
    let cos = tape.cosine_rows(e, m)?;
    let cos = tape.mask_cols(cos, vec![PAD_INDEX], T::neg_infinity())?;
    let best = tape.row_max(cos);
    let r = tape.mean(best);
    let r = tape.relu(r);
    let weight = tape.powf(r, lambda);
    tape.mul(weight, f)
}

/// Per-row argmax over real words; ties resolve to the lowest index.
pub fn decode_argmax<T: Scalar>(x: &Matrix<T>) -> Result<Vec<usize>> {
    (0..x.rows())
        .map(|r| {
            argmax_excluding(x.row(r), &[PAD_INDEX])
                .ok_or_else(|| Error::Degenerate(format!("row {r} has no decodable entry")))
        })
        .collect()
}

/// Nearest real word by cosine for every row of `e`, with the best cosines.
/// Zero-norm vocabulary rows are never chosen.
pub fn decode_nearest<T: Scalar>(weights: &ModelWeights<T>, e: &Matrix<T>) -> Result<(Vec<usize>, Vec<T>)> {
    let m = &weights.embedding;
    let mut tokens = Vec::with_capacity(e.rows());
    let mut best_cos = Vec::with_capacity(e.rows());
    for t in 0..e.rows() {
        let row = e.row(t);
        if row.iter().all(|&v| v == T::zero()) {
            return Err(Error::Degenerate(format!("zero-norm embedding at position {t} cannot be decoded")));
        }
        let mut best: Option<(usize, T)> = None;
        for v in (0..m.rows()).filter(|&v| v != PAD_INDEX) {
            let Ok(c) = cosine(row, m.row(v)) else { continue };
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((v, c));
            }
        }
        let (v, c) = best.ok_or_else(|| Error::Degenerate("no nonzero word embedding to decode to".into()))?;
        tokens.push(v);
        best_cos.push(c);
    }
    Ok((tokens, best_cos))
}

struct RestartOutcome {
    tokens: Vec<usize>,
    relaxed: f64,
    discrete: f64,
    trace: Vec<f64>,
    row_max: Vec<f64>,
    mean_cos: Option<f64>,
}

type RestartResult = std::result::Result<RestartOutcome, AbortedRestart>;

fn abort(restart: usize, step: usize, reason: impl ToString) -> AbortedRestart {
    AbortedRestart {
        restart,
        step,
        reason: reason.to_string(),
    }
}

fn finite_or_abort<T: Scalar>(v: T, grad: &Matrix<T>, restart: usize, step: usize) -> std::result::Result<(), AbortedRestart> {
    if !v.is_finite() {
        return Err(abort(restart, step, format!("non-finite objective {v}")));
    }
    if !grad.is_finite() {
        return Err(abort(restart, step, "non-finite gradient"));
    }
    Ok(())
}

fn word_restart<T: Scalar>(
    weights: &ModelWeights<T>,
    target: &NeuronTarget,
    cfg: &WordConfig,
    schedule: &AnnealSchedule,
    seed: u64,
    restart: usize,
) -> RestartResult {
    let v = weights.dims().vocab;
    let t_len = cfg.seq_len;
    let mut rng = restart_rng(seed, restart);
    let mut x: Matrix<T> = normal_matrix(t_len, v, cfg.init_std, &mut rng).map_err(|e| abort(restart, 0, e))?;
    let gumbel = cfg.mode == WordMode::Gumbel;
    let step_size = T::lit(cfg.step_size);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut last_noise = None;

    for step in 0..cfg.steps {
        let tau = T::lit(schedule.tau(step));
        let noise: Option<Matrix<T>> = gumbel.then(|| gumbel_noise(t_len, v, &mut rng));
        let mut tape = Tape::new();
        let xv = tape.free(x.clone());
        let nv = noise.as_ref().map(|n| tape.constant(n));
        let (f, _) = word_objective(&mut tape, weights, target, xv, cfg.mode, tau, nv).map_err(|e| abort(restart, step, e))?;
        let value = tape.scalar(f);
        let grad = tape
            .backward(f)
            .map_err(|e| abort(restart, step, e))?
            .take(xv)
            .unwrap_or_else(|| Matrix::zeros(t_len, v));
        finite_or_abort(value, &grad, restart, step)?;
        trace.push(value.as_f64());
        for (xi, &gi) in x.data_mut().iter_mut().zip(grad.data()) {
            *xi = *xi + step_size * gi;
        }
        drop(tape);
        last_noise = noise;
    }

    let noise = match (gumbel, last_noise) {
        (true, Some(n)) => Some(n),
        (true, None) => Some(gumbel_noise(t_len, v, &mut rng)),
        (false, _) => None,
    };
    let tau = T::lit(schedule.final_tau());
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let nv = noise.as_ref().map(|n| tape.constant(n));
    let (f, p) = word_objective(&mut tape, weights, target, xv, cfg.mode, tau, nv).map_err(|e| abort(restart, cfg.steps, e))?;
    let relaxed = tape.scalar(f);
    if !relaxed.is_finite() {
        return Err(abort(restart, cfg.steps, format!("non-finite objective {relaxed}")));
    }
    let pm = tape.value(p);
    let row_max = (0..pm.rows())
        .map(|r| pm.row(r).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64())))
        .collect();

    let tokens = decode_argmax(&x).map_err(|e| abort(restart, cfg.steps, e))?;
    let discrete = weights
        .activation_of_tokens(&tokens, target)
        .map_err(|e| abort(restart, cfg.steps, e))?;
    Ok(RestartOutcome {
        tokens,
        relaxed: relaxed.as_f64(),
        discrete: discrete.as_f64(),
        trace,
        row_max,
        mean_cos: None,
    })
}

fn embedding_restart<T: Scalar>(
    weights: &ModelWeights<T>,
    target: &NeuronTarget,
    cfg: &EmbeddingConfig,
    init: Option<&Matrix<T>>,
    seed: u64,
    restart: usize,
) -> RestartResult {
    let d = weights.dims().embed;
    let mut rng = restart_rng(seed, restart);
    let mut e: Matrix<T> = match init {
        Some(m) => m.clone(),
        None => normal_matrix(cfg.seq_len, d, cfg.init_std, &mut rng).map_err(|e| abort(restart, 0, e))?,
    };
    let step_size = T::lit(cfg.step_size);
    let lambda_at = |step: usize| cfg.penalty.enabled.then(|| T::lit(cfg.penalty.lambda(step)));
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let ev = tape.free(e.clone());
        let f = embedding_objective(&mut tape, weights, target, ev, lambda_at(step)).map_err(|err| abort(restart, step, err))?;
        let value = tape.scalar(f);
        let grad = tape
            .backward(f)
            .map_err(|err| abort(restart, step, err))?
            .take(ev)
            .unwrap_or_else(|| Matrix::zeros(e.rows(), d));
        finite_or_abort(value, &grad, restart, step)?;
        trace.push(value.as_f64());
        for (ei, &gi) in e.data_mut().iter_mut().zip(grad.data()) {
            *ei = *ei + step_size * gi;
        }
    }

    let mut tape = Tape::new();
    let ev = tape.constant(&e);
    let final_lambda = lambda_at(cfg.steps.saturating_sub(1));
    let f = embedding_objective(&mut tape, weights, target, ev, final_lambda).map_err(|err| abort(restart, cfg.steps, err))?;
    let relaxed = tape.scalar(f);
    if !relaxed.is_finite() {
        return Err(abort(restart, cfg.steps, format!("non-finite objective {relaxed}")));
    }
    let (tokens, cos) = decode_nearest(weights, &e).map_err(|err| abort(restart, cfg.steps, err))?;
    let mean_cos = cos.iter().map(|c| c.as_f64()).sum::<f64>() / cos.len() as f64;
    let discrete = weights
        .activation_of_tokens(&tokens, target)
        .map_err(|err| abort(restart, cfg.steps, err))?;
    Ok(RestartOutcome {
        tokens,
        relaxed: relaxed.as_f64(),
        discrete: discrete.as_f64(),
        trace,
        row_max: Vec::new(),
        mean_cos: Some(mean_cos),
    })
}

/// Keeps the restart with the highest discrete activation (lowest index on ties).
fn best_of(method: Method, target: &NeuronTarget, seed: u64, outcomes: Vec<RestartResult>) -> Result<OptimizationResult> {
    let restarts = outcomes.len();
    let mut aborted = Vec::new();
    let mut restart_activations = Vec::with_capacity(restarts);
    let mut best: Option<(usize, RestartOutcome)> = None;
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                restart_activations.push(Some(o.discrete));
                if best.as_ref().is_none_or(|(_, b)| o.discrete > b.discrete) {
                    best = Some((i, o));
                }
            }
            Err(a) => {
                restart_activations.push(None);
                aborted.push(a);
            }
        }
    }
    let Some((best_restart, o)) = best else {
        let reason = aborted.first().map_or_else(|| "no restarts".to_string(), |a| a.reason.clone());
        return Err(Error::Optimization { restarts, reason });
    };
    for a in &aborted {
        log::warn!("{method} on {target}: restart {} aborted at step {}: {}", a.restart, a.step, a.reason);
    }
    Ok(OptimizationResult {
        method,
        target: target.clone(),
        seed,
        tokens: o.tokens,
        relaxed_activation: o.relaxed,
        discrete_activation: o.discrete,
        trace: o.trace,
        restarts_used: restarts - aborted.len(),
        best_restart,
        restart_activations,
        aborted,
        relaxed_row_max: o.row_max,
        mean_nearest_cosine: o.mean_cos,
    })
}

fn check_common<T: Scalar>(weights: &ModelWeights<T>, target: &NeuronTarget, seq_len: usize, restarts: usize) -> Result<()> {
    target.check(weights)?;
    if seq_len == 0 {
        return Err(Error::InvalidArgument("seq_len must be at least 1".into()));
    }
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be at least 1".into()));
    }
    Ok(())
}

/// Gradient ascent on a relaxed word matrix. Restarts run in parallel and are
/// merged by restart index, so the result does not depend on thread count.
pub fn optimize_words<T: Scalar>(
    target: &NeuronTarget,
    weights: &ModelWeights<T>,
    cfg: &WordConfig,
    seed: u64,
) -> Result<OptimizationResult> {
    check_common(weights, target, cfg.seq_len, cfg.restarts)?;
    let schedule = cfg.schedule()?;
    let outcomes: Vec<RestartResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| word_restart(weights, target, cfg, &schedule, seed, r))
        .collect();
    best_of(cfg.mode.into(), target, seed, outcomes)
}

/// Gradient ascent directly on the embedding sequence. `init` replaces the random
/// initialization for every restart.
pub fn optimize_embeddings<T: Scalar>(
    target: &NeuronTarget,
    weights: &ModelWeights<T>,
    cfg: &EmbeddingConfig,
    seed: u64,
    init: Option<&Matrix<T>>,
) -> Result<OptimizationResult> {
    let seq_len = init.map_or(cfg.seq_len, Matrix::rows);
    check_common(weights, target, seq_len, cfg.restarts)?;
    cfg.penalty.validate()?;
    if let Some(m) = init {
        if m.cols() != weights.dims().embed {
            return Err(Error::shape("optimize_embeddings", m.shape_string(), format!("embedding size {}", weights.dims().embed)));
        }
    }
    let outcomes: Vec<RestartResult> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| embedding_restart(weights, target, cfg, init, seed, r))
        .collect();
    best_of(Method::Emb, target, seed, outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaginet::{Layer, ModelDims, Path};

    fn toy(seed: u64) -> ModelWeights<f64> {
        let dims = ModelDims { vocab: 12, embed: 6, hidden: 6, visual: 4 };
        ModelWeights::random(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn quick(mode: WordMode) -> WordConfig {
        WordConfig { mode, seq_len: 3, steps: 40, restarts: 3, ..WordConfig::default() }
    }

    #[test]
    fn decode_ties_break_low_and_skip_padding() {
        let x = Matrix::from_vec(2, 4, vec![9.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(decode_argmax(&x).unwrap(), vec![1, 1]);
    }

    #[test]
    fn discrete_activation_is_recomputed() {
        let w = toy(1);
        let target = NeuronTarget::single(Path::Visual, Layer::Projection, 2);
        for mode in [WordMode::Logit, WordMode::Softmax, WordMode::Gumbel] {
            let r = optimize_words(&target, &w, &quick(mode), 7).unwrap();
            assert_eq!(r.discrete_activation, w.activation_of_tokens(&r.tokens, &target).unwrap());
            assert!(r.tokens.iter().all(|&t| t != PAD_INDEX));
            assert_eq!(r.trace.len(), 40);
            assert!(r.trace.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let w = toy(2);
        let target = NeuronTarget::group(Path::Lang, Layer::Hidden, vec![0, 3]);
        let a = optimize_words(&target, &w, &quick(WordMode::Gumbel), 99).unwrap();
        let b = optimize_words(&target, &w, &quick(WordMode::Gumbel), 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn best_restart_dominates_others() {
        let w = toy(3);
        let target = NeuronTarget::single(Path::Lang, Layer::Projection, 5);
        let r = optimize_words(&target, &w, &quick(WordMode::Softmax), 1).unwrap();
        let best = r.restart_activations.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, r.discrete_activation);
        assert_eq!(r.restart_activations[r.best_restart], Some(best));
    }

    #[test]
    fn zero_steps_decodes_initial_embeddings() {
        let w = toy(4);
        let target = NeuronTarget::single(Path::Visual, Layer::Projection, 0);
        let toks = [3, 7, 2];
        let init = w.embed_tokens(&toks).unwrap();
        let cfg = EmbeddingConfig { steps: 0, restarts: 1, ..EmbeddingConfig::default() };
        let r = optimize_embeddings(&target, &w, &cfg, 0, Some(&init)).unwrap();
        assert_eq!(r.tokens, toks);
        assert_eq!(r.mean_nearest_cosine, Some(1.0));
    }

    #[test]
    fn penalty_is_identity_on_real_embeddings() {
        let w = toy(5);
        let target = NeuronTarget::single(Path::Lang, Layer::Projection, 1);
        let e = w.embed_tokens(&[4, 9, 1, 1]).unwrap();
        let plain = {
            let mut tape = Tape::new();
            let ev = tape.constant(&e);
            let f = embedding_objective(&mut tape, &w, &target, ev, None).unwrap();
            tape.scalar(f)
        };
        for lambda in [0.0, 0.5, 2.0, 17.0] {
            let mut tape = Tape::new();
            let ev = tape.constant(&e);
            let f = embedding_objective(&mut tape, &w, &target, ev, Some(lambda)).unwrap();
            assert_eq!(tape.scalar(f), plain);
        }
    }

    #[test]
    fn zero_norm_row_cannot_be_decoded() {
        let w = toy(6);
        let e = Matrix::zeros(2, 6);
        assert!(matches!(decode_nearest(&w, &e), Err(Error::Degenerate(_))));
    }

    #[test]
    fn all_restarts_failing_is_an_error() {
        let w = toy(7);
        let target = NeuronTarget::single(Path::Visual, Layer::Projection, 0);
        let cfg = WordConfig { step_size: f64::INFINITY, ..quick(WordMode::Logit) };
        match optimize_words(&target, &w, &cfg, 0) {
            Err(Error::Optimization { restarts: 3, .. }) => {}
            other => panic!("expected optimization failure, got {other:?}"),
        }
    }
}
