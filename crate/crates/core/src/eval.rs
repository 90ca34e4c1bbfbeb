//! Method comparison: target selection, one row of best-of-restarts activations per
//! target, paired t-tests against corpus search, and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{search_many, NGramHit, TokenCorpus};
use crate::error::{Error, Result};
use crate::imaginet::{Layer, ModelWeights, NeuronTarget, Path};
use crate::neurongroups::NeuronGrouping;
use crate::optim::{optimize_embeddings, optimize_words, EmbeddingConfig, Method, WordConfig};
use crate::scalar::Scalar;
use crate::stats::{paired_t, TTestReport};
use crate::vocab::Vocabulary;

/// Uniform sample of `count` targets without replacement, sorted. Hidden-layer
/// targets are neuron groups and need a grouping of the same path.
pub fn select_targets<T: Scalar>(
    weights: &ModelWeights<T>,
    path: Path,
    layer: Layer,
    count: usize,
    seed: u64,
    grouping: Option<&NeuronGrouping>,
) -> Result<Vec<NeuronTarget>> {
    let pool: Vec<NeuronTarget> = match layer {
        Layer::Projection => (0..weights.layer_width(path, layer))
            .map(|i| NeuronTarget::single(path, layer, i))
            .collect(),
        Layer::Hidden => {
            let g = grouping.ok_or_else(|| Error::InvalidArgument("hidden-layer targets need a neuron grouping".into()))?;
            if g.path != path {
                return Err(Error::InvalidArgument(format!("grouping is for path {}, not {path}", g.path)));
            }
            g.targets()
        }
    };
    if count == 0 || count > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {count} targets from {} available on {path}:{layer}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonConfig {
    pub methods: Vec<Method>,
    /// n-gram length shared by every method.
    pub seq_len: usize,
    /// Mode is set per method.
    pub word: WordConfig,
    pub embedding: EmbeddingConfig,
    pub seed: u64,
    /// Corpus-search shard count; does not affect results.
    pub shards: usize,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            methods: Method::ALL.to_vec(),
            seq_len: 5,
            word: WordConfig::default(),
            embedding: EmbeddingConfig::default(),
            seed: 0,
            shards: 1,
        }
    }
}

/// Outcome of one method on one target. Exactly one of `activation` and `error` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCell {
    pub method: Method,
    pub tokens: Vec<usize>,
    pub activation: Option<f64>,
    pub error: Option<String>,
    pub mean_nearest_cosine: Option<f64>,
}

impl MethodCell {
    fn failed(method: Method, e: impl ToString) -> Self {
        MethodCell { method, tokens: Vec::new(), activation: None, error: Some(e.to_string()), mean_nearest_cosine: None }
    }
}

/// Cells follow the configured method order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub target: NeuronTarget,
    pub cells: Vec<MethodCell>,
}

impl ComparisonRow {
    pub fn cell(&self, method: Method) -> Option<&MethodCell> {
        self.cells.iter().find(|c| c.method == method)
    }

    pub fn activation(&self, method: Method) -> Option<f64> {
        self.cell(method).and_then(|c| c.activation)
    }
}

/// splitmix64 finalizer; decorrelates per-target and per-method seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Activations of stored n-grams are recomputed with a fresh forward pass and must
/// match bit for bit; a mismatch fails the cell.
fn verified<T: Scalar>(weights: &ModelWeights<T>, target: &NeuronTarget, mut cell: MethodCell) -> MethodCell {
    let Some(claimed) = cell.activation else { return cell };
    match weights.activation_of_tokens(&cell.tokens, target) {
        Ok(v) if v.as_f64() == claimed => cell,
        Ok(v) => MethodCell::failed(cell.method, format!("activation {claimed} not reproduced (forward gives {v})")),
        Err(e) => {
            cell.activation = None;
            cell.error = Some(e.to_string());
            cell
        }
    }
}

/// Runs every configured method on every target. Targets run in parallel and
/// the rows keep target order; a failing method marks only its own cell.
pub fn run_comparison<T: Scalar>(
    targets: &[NeuronTarget],
    weights: &ModelWeights<T>,
    corpus: Option<&TokenCorpus>,
    cfg: &ComparisonConfig,
) -> Result<Vec<ComparisonRow>> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no targets to compare".into()));
    }
    if cfg.methods.is_empty() {
        return Err(Error::InvalidArgument("no methods enabled".into()));
    }
    for target in targets {
        target.check(weights)?;
    }
    let crp: Option<std::result::Result<Vec<Vec<NGramHit>>, String>> = cfg.methods.contains(&Method::Crp).then(|| {
        let corpus = corpus.ok_or_else(|| "corpus search needs a corpus".to_string())?;
        search_many(corpus, targets, weights, cfg.seq_len, 1, cfg.shards.max(1)).map_err(|e| e.to_string())
    });

    let rows = targets
        .par_iter()
        .enumerate()
        .map(|(ti, target)| {
            let cells = cfg
                .methods
                .iter()
                .enumerate()
                .map(|(mi, &method)| {
                    let seed = mix_seed(cfg.seed, ti as u64, mi as u64);
                    let cell = match method {
                        Method::Crp => match crp.as_ref().expect("searched when enabled") {
                            Ok(hits) => {
                                let hit = &hits[ti][0];
                                MethodCell {
                                    method,
                                    tokens: hit.tokens.clone(),
                                    activation: Some(hit.activation),
                                    error: None,
                                    mean_nearest_cosine: None,
                                }
                            }
                            Err(e) => MethodCell::failed(method, e),
                        },
                        Method::Emb => {
                            let ecfg = EmbeddingConfig { seq_len: cfg.seq_len, ..cfg.embedding.clone() };
                            optimized(method, optimize_embeddings(target, weights, &ecfg, seed, None))
                        }
                        _ => {
                            let mode = method.word_mode().expect("word method");
                            let wcfg = WordConfig { mode, seq_len: cfg.seq_len, ..cfg.word.clone() };
                            optimized(method, optimize_words(target, weights, &wcfg, seed))
                        }
                    };
                    verified(weights, target, cell)
                })
                .collect();
            ComparisonRow { target: target.clone(), cells }
        })
        .collect();
    Ok(rows)
}

fn optimized(method: Method, r: Result<crate::optim::OptimizationResult>) -> MethodCell {
    match r {
        Ok(res) => MethodCell {
            method,
            tokens: res.tokens,
            activation: Some(res.discrete_activation),
            error: None,
            mean_nearest_cosine: res.mean_nearest_cosine,
        },
        Err(e) => MethodCell::failed(method, e),
    }
}

/// Paired test of `a - b` over rows where both cells succeeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub a: Method,
    pub b: Method,
    /// Rows dropped because either cell failed.
    pub excluded: usize,
    pub report: Option<TTestReport>,
    pub error: Option<String>,
}

/// Corpus search against every other enabled method.
pub fn compare_against_corpus(rows: &[ComparisonRow], methods: &[Method]) -> Vec<PairedComparison> {
    methods
        .iter()
        .filter(|&&m| m != Method::Crp && methods.contains(&Method::Crp))
        .map(|&b| {
            let pairs: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|r| Some((r.activation(Method::Crp)?, r.activation(b)?)))
                .collect();
            let (xa, xb): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let (report, error) = match paired_t(&xa, &xb) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            PairedComparison { a: Method::Crp, b, excluded: rows.len() - pairs.len(), report, error }
        })
        .collect()
}

/// Mean activation per method over its successful cells.
pub fn method_means(rows: &[ComparisonRow], methods: &[Method]) -> BTreeMap<String, Option<f64>> {
    methods
        .iter()
        .map(|&m| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.activation(m)).collect();
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            (m.to_string(), mean)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub model_hash: String,
    pub config_hash: String,
    pub restart_policy: String,
}

impl ReportMetadata {
    fn comment_lines(&self) -> String {
        format!(
            "# seed: {}\n# model_hash: {}\n# config_hash: {}\n# restart_policy: {}\n",
            self.seed, self.model_hash, self.config_hash, self.restart_policy
        )
    }
}

/// One line of the qualitative table.
pub fn table_row(method: Method, ngram: &str, activation: f64) -> String {
    format!("{method} | {ngram} | {activation:.2}")
}

#[derive(Serialize)]
struct TTestFile<'a> {
    metadata: &'a ReportMetadata,
    means: BTreeMap<String, Option<f64>>,
    tests: &'a [PairedComparison],
}

/// Writes `activations.csv`, `table.txt` and `ttests.json` into `out_dir`.
/// Output bytes depend only on the arguments.
pub fn emit_reports(
    rows: &[ComparisonRow],
    ttests: &[PairedComparison],
    vocab: &Vocabulary,
    metadata: &ReportMetadata,
    out_dir: &FsPath,
) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no comparison rows to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let methods: Vec<Method> = rows[0].cells.iter().map(|c| c.method).collect();
    let write = |name: &str, body: String| {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };

    let mut csv = metadata.comment_lines();
    csv.push_str("target");
    for m in &methods {
        write!(csv, ",{m}").expect("string write");
    }
    let with_cos = methods.contains(&Method::Emb);
    if with_cos {
        csv.push_str(",emb_cosine");
    }
    csv.push('\n');
    for row in rows {
        csv.push_str(&row.target.to_string());
        for m in &methods {
            csv.push(',');
            if let Some(v) = row.activation(*m) {
                write!(csv, "{v}").expect("string write");
            }
        }
        if with_cos {
            csv.push(',');
            if let Some(c) = row.cell(Method::Emb).and_then(|c| c.mean_nearest_cosine) {
                write!(csv, "{c}").expect("string write");
            }
        }
        csv.push('\n');
    }
    write("activations.csv", csv)?;

    let mut table = metadata.comment_lines();
    for row in rows {
        writeln!(table, "\n{}", row.target).expect("string write");
        for cell in &row.cells {
            let line = match (&cell.activation, &cell.error) {
                (Some(v), _) => table_row(cell.method, &vocab.render(&cell.tokens), *v),
                (None, e) => format!("{} | failed: {} | -", cell.method, e.as_deref().unwrap_or("unknown")),
            };
            writeln!(table, "{line}").expect("string write");
        }
    }
    write("table.txt", table)?;

    let file = TTestFile { metadata, means: method_means(rows, &methods), tests: ttests };
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    write("ttests.json", json)
}
