//! Caption corpus ingestion and the exhaustive n-gram search baseline.

use std::cmp::Ordering;
use std::fs;
use std::path::Path as FsPath;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaginet::{ModelWeights, NeuronTarget, Path};
use crate::scalar::Scalar;
use crate::vocab::{Vocabulary, PAD_INDEX};

/// Windows evaluated per batched forward pass.
const SEARCH_BATCH: usize = 256;

/// Tokenized sentences. Unknown words are kept as [`PAD_INDEX`] so positions are
/// preserved; windows touching them are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenCorpus {
    pub sequences: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub lines: usize,
    pub sequences: usize,
    pub tokens: usize,
    pub unknown: usize,
}

/// Start of a length-`T` window inside the corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowRef {
    pub sequence: usize,
    pub offset: usize,
}

impl TokenCorpus {
    pub fn new(sequences: Vec<Vec<usize>>) -> Result<Self> {
        if let Some(i) = sequences.iter().position(Vec::is_empty) {
            return Err(Error::Corpus(format!("sequence {i} is empty")));
        }
        Ok(TokenCorpus { sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// All windows of length `t` that stay inside one sentence and contain no
    /// unknown token, in (sequence, offset) order.
    pub fn windows(&self, t: usize) -> Vec<WindowRef> {
        let mut out = Vec::new();
        if t == 0 {
            return out;
        }
        for (s, seq) in self.sequences.iter().enumerate() {
            if seq.len() < t {
                continue;
            }
            for offset in 0..=seq.len() - t {
                if !seq[offset..offset + t].contains(&PAD_INDEX) {
                    out.push(WindowRef { sequence: s, offset });
                }
            }
        }
        out
    }

    pub fn window(&self, w: WindowRef, t: usize) -> &[usize] {
        &self.sequences[w.sequence][w.offset..w.offset + t]
    }

    /// Known tokens of sequence `i`, space-joined.
    pub fn detokenize(&self, i: usize, vocab: &Vocabulary) -> String {
        let known: Vec<usize> = self.sequences[i].iter().copied().filter(|&t| t != PAD_INDEX).collect();
        vocab.render(&known)
    }

    /// Rejects indices outside a model's vocabulary.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for (s, seq) in self.sequences.iter().enumerate() {
            if let Some(&t) = seq.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Corpus(format!(
                    "sequence {s}: token index {t} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        Ok(())
    }
}

/// Tokenizes one sentence per line on whitespace.
pub fn ingest_str(text: &str, vocab: &Vocabulary, lowercase: bool) -> Result<(TokenCorpus, IngestStats)> {
    let mut stats = IngestStats::default();
    let mut sequences = Vec::new();
    for line in text.lines() {
        stats.lines += 1;
        let line = if lowercase { line.to_lowercase() } else { line.to_string() };
        let seq: Vec<usize> = line
            .split_whitespace()
            .map(|tok| match vocab.index(tok) {
                Some(i) if i != PAD_INDEX => i,
                _ => {
                    stats.unknown += 1;
                    PAD_INDEX
                }
            })
            .collect();
        if seq.is_empty() {
            continue;
        }
        stats.tokens += seq.len();
        sequences.push(seq);
    }
    if sequences.iter().all(|s| s.iter().all(|&t| t == PAD_INDEX)) {
        return Err(Error::Corpus("no known tokens after filtering".into()));
    }
    stats.sequences = sequences.len();
    Ok((TokenCorpus { sequences }, stats))
}

pub fn ingest(path: &FsPath, vocab: &Vocabulary, lowercase: bool) -> Result<(TokenCorpus, IngestStats)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_str(&text, vocab, lowercase)
}

/// One scored corpus n-gram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NGramHit {
    pub tokens: Vec<usize>,
    pub activation: f64,
    pub sequence: usize,
    pub offset: usize,
}

/// Serializable hit with tokens rendered as strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitRecord {
    pub target: String,
    pub rank: usize,
    pub tokens: Vec<String>,
    pub activation: f64,
    pub sequence: usize,
    pub offset: usize,
}

impl NGramHit {
    pub fn to_record(&self, target: &NeuronTarget, rank: usize, vocab: &Vocabulary) -> HitRecord {
        HitRecord {
            target: target.to_string(),
            rank,
            tokens: self.tokens.iter().map(|&t| vocab.token(t).unwrap_or("<?>").to_string()).collect(),
            activation: self.activation,
            sequence: self.sequence,
            offset: self.offset,
        }
    }
}

/// Descending activation, then ascending (sequence, offset). A total order.
pub fn hit_order(a: &NGramHit, b: &NGramHit) -> Ordering {
    b.activation
        .total_cmp(&a.activation)
        .then(a.sequence.cmp(&b.sequence))
        .then(a.offset.cmp(&b.offset))
}

fn keep_top(hits: &mut Vec<NGramHit>, k: usize) {
    hits.sort_by(hit_order);
    hits.truncate(k);
}

/// Exhaustive search for one target. See [`search_many`].
pub fn search<T: Scalar>(
    corpus: &TokenCorpus,
    target: &NeuronTarget,
    weights: &ModelWeights<T>,
    t: usize,
    top_k: usize,
    shards: usize,
) -> Result<Vec<NGramHit>> {
    Ok(search_many(corpus, std::slice::from_ref(target), weights, t, top_k, shards)?.remove(0))
}

/// Scores every valid length-`t` window for every target and returns the `top_k`
/// hits per target, sorted by [`hit_order`].
///
/// Windows are split into `shards` contiguous ranges evaluated in parallel, each
/// keeping a local top-k; the merge uses the same total order, so the output does
/// not depend on the shard count. Each path's forward pass is shared by all its
/// targets.
pub fn search_many<T: Scalar>(
    corpus: &TokenCorpus,
    targets: &[NeuronTarget],
    weights: &ModelWeights<T>,
    t: usize,
    top_k: usize,
    shards: usize,
) -> Result<Vec<Vec<NGramHit>>> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    for target in targets {
        target.check(weights)?;
    }
    corpus.check_vocab(weights.dims().vocab)?;
    let windows = corpus.windows(t);
    if windows.is_empty() {
        return Err(Error::EmptySearch { t });
    }
    let shard_len = windows.len().div_ceil(shards.max(1));
    let per_shard: Vec<Vec<Vec<NGramHit>>> = windows
        .par_chunks(shard_len)
        .map(|chunk| search_shard(corpus, chunk, targets, weights, t, top_k))
        .collect::<Result<_>>()?;

    let mut merged: Vec<Vec<NGramHit>> = vec![Vec::new(); targets.len()];
    for shard in per_shard {
        for (acc, hits) in merged.iter_mut().zip(shard) {
            acc.extend(hits);
        }
    }
    for hits in &mut merged {
        keep_top(hits, top_k);
    }
    Ok(merged)
}

fn search_shard<T: Scalar>(
    corpus: &TokenCorpus,
    windows: &[WindowRef],
    targets: &[NeuronTarget],
    weights: &ModelWeights<T>,
    t: usize,
    top_k: usize,
) -> Result<Vec<Vec<NGramHit>>> {
    let mut best: Vec<Vec<NGramHit>> = vec![Vec::new(); targets.len()];
    for batch in windows.chunks(SEARCH_BATCH) {
        let toks: Vec<&[usize]> = batch.iter().map(|&w| corpus.window(w, t)).collect();
        for path in [Path::Lang, Path::Visual] {
            if !targets.iter().any(|tg| tg.path == path) {
                continue;
            }
            let (hidden, proj) = weights.final_outputs(&toks, path)?;
            for (target, acc) in targets.iter().zip(best.iter_mut()).filter(|(tg, _)| tg.path == path) {
                let layer = match target.layer {
                    crate::imaginet::Layer::Hidden => &hidden,
                    crate::imaginet::Layer::Projection => &proj,
                };
                for (i, &w) in batch.iter().enumerate() {
                    acc.push(NGramHit {
                        tokens: toks[i].to_vec(),
                        activation: target.aggregate(layer.row(i)).as_f64(),
                        sequence: w.sequence,
                        offset: w.offset,
                    });
                }
                if acc.len() >= 4 * top_k.max(SEARCH_BATCH) {
                    keep_top(acc, top_k);
                }
            }
        }
    }
    for acc in &mut best {
        keep_top(acc, top_k);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaginet::{Layer, ModelDims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["a", "cat", "sits", "on", "the", "mat"]).unwrap()
    }

    #[test]
    fn known_line_is_one_sequence() {
        let (c, stats) = ingest_str("a cat sits\n", &vocab(), true).unwrap();
        assert_eq!(c.sequences, vec![vec![1, 2, 3]]);
        assert_eq!(stats, IngestStats { lines: 1, sequences: 1, tokens: 3, unknown: 0 });
    }

    #[test]
    fn unknown_token_blocks_overlapping_windows() {
        let (c, stats) = ingest_str("a dog sits on\n", &vocab(), true).unwrap();
        assert_eq!(stats.unknown, 1);
        let w = c.windows(2);
        assert_eq!(w, vec![WindowRef { sequence: 0, offset: 2 }]);
    }

    #[test]
    fn detokenize_reproduces_known_tokens() {
        let v = vocab();
        let (c, _) = ingest_str("The cat  sits on a hat\n\n", &v, true).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.detokenize(0, &v), "the cat sits on a");
    }

    #[test]
    fn lowercasing_can_be_disabled() {
        let (c, stats) = ingest_str("The cat\n", &vocab(), false).unwrap();
        assert_eq!(stats.unknown, 1);
        assert_eq!(c.sequences[0], vec![0, 2]);
    }

    #[test]
    fn all_unknown_is_an_error() {
        assert!(matches!(ingest_str("dog bird\n", &vocab(), true), Err(Error::Corpus(_))));
    }

    #[test]
    fn windows_do_not_cross_sentences() {
        let c = TokenCorpus::new(vec![vec![1, 2], vec![3, 4]]).unwrap();
        assert!(c.windows(3).is_empty());
        assert_eq!(c.windows(2).len(), 2);
    }

    fn model() -> ModelWeights<f64> {
        let dims = ModelDims { vocab: 7, embed: 5, hidden: 4, visual: 3 };
        ModelWeights::random(dims, 1.0, &mut ChaCha8Rng::seed_from_u64(8))
    }

    #[test]
    fn single_window_is_returned() {
        let c = TokenCorpus::new(vec![vec![1, 2, 3, 4, 5], vec![6, 1]]).unwrap();
        let w = model();
        let target = NeuronTarget::single(Path::Visual, Layer::Projection, 1);
        let hits = search(&c, &target, &w, 5, 3, 2).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].tokens, vec![1, 2, 3, 4, 5]);
        assert_eq!(hits[0].activation, w.activation_of_tokens(&hits[0].tokens, &target).unwrap());
    }

    #[test]
    fn no_windows_is_empty_search() {
        let c = TokenCorpus::new(vec![vec![1, 2]]).unwrap();
        let target = NeuronTarget::single(Path::Lang, Layer::Hidden, 0);
        assert!(matches!(search(&c, &target, &model(), 5, 1, 1), Err(Error::EmptySearch { t: 5 })));
    }
}
