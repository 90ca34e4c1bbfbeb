//! Desk-scale trainer: next-token cross-entropy on the language path plus final-step
//! squared error on the visual path, sharing the embedding.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bind_path_with, forward_steps, project, ModelWeights, PathVars};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub step_size: f64,
    /// Sequences per update; batches never mix sequence lengths.
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Seeds the batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            step_size: 0.5,
            batch_size: 16,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// Per-epoch losses, measured on each batch before its update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean next-token cross-entropy per prediction.
    pub lang_loss: Vec<f64>,
    /// Mean squared error per sequence (summed over visual features).
    pub visual_loss: Vec<f64>,
    /// Training objective per sequence.
    pub total_loss: Vec<f64>,
}

impl TrainReport {
    pub fn final_lang_loss(&self) -> Option<f64> {
        self.lang_loss.last().copied()
    }

    pub fn final_visual_loss(&self) -> Option<f64> {
        self.visual_loss.last().copied()
    }
}

fn path_vars(pv: &PathVars) -> [Var; 11] {
    let g = &pv.gru;
    [g.w_z, g.u_z, g.b_z, g.w_r, g.u_r, g.b_r, g.w_h, g.u_h, g.b_h, pv.proj, pv.proj_bias]
}

struct BatchLoss<T> {
    grads: Vec<Matrix<T>>,
    ce_sum: f64,
    predictions: usize,
    se_sum: f64,
}

fn batch_loss<T: Scalar>(
    weights: &ModelWeights<T>,
    seqs: &[&[usize]],
    targets: &Matrix<T>,
) -> Result<BatchLoss<T>> {
    let mut tape = Tape::new();
    let free = |t: &mut Tape<'_, T>, m: &Matrix<T>| t.free(m.clone());
    let emb = tape.free(weights.embedding.clone());
    let lang = bind_path_with(&mut tape, &weights.lang, free);
    let visual = bind_path_with(&mut tape, &weights.visual, free);

    let len = seqs[0].len();
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let idx: Vec<usize> = seqs.iter().map(|s| s[t]).collect();
        steps.push(tape.gather_rows(emb, idx)?);
    }

    let lang_fwd = forward_steps(&mut tape, &steps, &lang)?;
    let mut ce_terms = Vec::new();
    for t in 0..len.saturating_sub(1) {
        let logits = project(&mut tape, &lang, lang_fwd.hidden[t])?;
        let next: Vec<usize> = seqs.iter().map(|s| s[t + 1]).collect();
        ce_terms.push(tape.cross_entropy(logits, next)?);
    }

    let vis_fwd = forward_steps(&mut tape, &steps, &visual)?;
    let tgt = tape.constant_owned(targets.clone());
    let diff = tape.sub(vis_fwd.projection, tgt)?;
    let sq = tape.mul(diff, diff)?;
    let se = tape.sum(sq);

    let mut total = se;
    let mut ce_sum = 0.0;
    for &c in &ce_terms {
        ce_sum += tape.scalar(c).as_f64();
        total = tape.add(total, c)?;
    }
    let batch = T::from_usize(seqs.len()).expect("batch size fits scalar");
    let loss = tape.affine(total, T::one() / batch, T::zero());

    let mut grads = tape.backward(loss)?;
    let mut vars = vec![emb];
    vars.extend(path_vars(&lang));
    vars.extend(path_vars(&visual));
    let grads = vars
        .into_iter()
        .map(|v| {
            let shape = tape.value(v).shape();
            grads.take(v).unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
        })
        .collect();
    Ok(BatchLoss {
        grads,
        ce_sum,
        predictions: seqs.len() * len.saturating_sub(1),
        se_sum: tape.scalar(se).as_f64(),
    })
}

/// Trains `init` with clipped plain gradient descent for `cfg.epochs` epochs.
pub fn train_toy<T: Scalar>(
    init: ModelWeights<T>,
    corpus: &[Vec<usize>],
    visual_targets: &[Vec<T>],
    cfg: &TrainConfig,
) -> Result<(ModelWeights<T>, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Corpus("training corpus is empty".into()));
    }
    if corpus.len() != visual_targets.len() {
        return Err(Error::shape(
            "train_toy",
            format!("{} sequences", corpus.len()),
            format!("{} visual targets", visual_targets.len()),
        ));
    }
    if cfg.batch_size == 0 || !(cfg.step_size > 0.0) {
        return Err(Error::InvalidArgument("batch_size and step_size must be positive".into()));
    }
    init.validate()?;
    let dims = init.dims();
    for (i, (s, v)) in corpus.iter().zip(visual_targets).enumerate() {
        if s.is_empty() {
            return Err(Error::Corpus(format!("sequence {i} is empty")));
        }
        if let Some(&tok) = s.iter().find(|&&t| t >= dims.vocab) {
            return Err(Error::IndexOutOfRange {
                what: "vocabulary",
                index: tok,
                width: dims.vocab,
            });
        }
        if v.len() != dims.visual {
            return Err(Error::shape("train_toy", format!("visual width {}", dims.visual), format!("target {i} has {}", v.len())));
        }
    }

    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        by_len.entry(s.len()).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for ids in by_len.values() {
        batches.extend(ids.chunks(cfg.batch_size).map(<[usize]>::to_vec));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = init;
    let mut report = TrainReport::default();
    let step = T::lit(cfg.step_size);
    let n_seqs = corpus.len() as f64;

    for epoch in 0..cfg.epochs {
        batches.shuffle(&mut rng);
        let (mut ce, mut preds, mut se) = (0.0, 0usize, 0.0);
        for batch in &batches {
            let seqs: Vec<&[usize]> = batch.iter().map(|&i| corpus[i].as_slice()).collect();
            let rows: Vec<Vec<T>> = batch.iter().map(|&i| visual_targets[i].clone()).collect();
            let targets = Matrix::from_rows(&rows)?;
            let out = batch_loss(&weights, &seqs, &targets).map_err(|e| match e {
                Error::NonFinite(_) => Error::Training { epoch, loss: f64::NAN },
                other => other,
            })?;
            if !(out.ce_sum.is_finite() && out.se_sum.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    loss: out.ce_sum + out.se_sum,
                });
            }
            ce += out.ce_sum;
            preds += out.predictions;
            se += out.se_sum;

            let norm = out.grads.iter().map(|g| g.norm_sq().as_f64()).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Training { epoch, loss: f64::NAN });
            }
            let factor = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
            let scale = step * T::lit(factor);
            for (w, g) in weights.matrices_mut().into_iter().zip(&out.grads) {
                for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
                    *wv = *wv - scale * gv;
                }
            }
        }
        report.lang_loss.push(if preds > 0 { ce / preds as f64 } else { 0.0 });
        report.visual_loss.push(se / n_seqs);
        report.total_loss.push((ce + se) / n_seqs);
        log::debug!(
            "epoch {epoch}: lang {:.4} visual {:.4}",
            report.lang_loss[epoch],
            report.visual_loss[epoch]
        );
    }
    Ok((weights, report))
}
