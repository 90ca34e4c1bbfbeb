//! Run configuration: a TOML file with one table per module, overridden by
//! `--section.key value` flags. Unknown keys are rejected at every level.

use std::fs;
use std::path::{Path as FsPath, PathBuf};

use neurondream::imaginet::TrainConfig;
use neurondream::optim::{AuditConfig, EmbeddingConfig, WordConfig};
use neurondream::{Layer, Method, Path};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stochastic step derives its seed from it.
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelSection,
    pub synth: SynthSection,
    pub train: TrainConfig,
    pub word: WordConfig,
    pub embedding: EmbeddingConfig,
    pub search: SearchSection,
    pub optimize: OptimizeSection,
    pub cluster: ClusterSection,
    pub evaluate: EvaluateSection,
    pub gradcheck: GradCheckSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Weight manifest written by `train-toy`.
    pub weights: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// One caption per line.
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { weights: None, vocab: None, corpus: None, out: PathBuf::from("out") }
    }
}

/// Dimensions of the toy model; the vocabulary size comes from the lexicon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed: usize,
    pub hidden: usize,
    pub visual: usize,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { embed: 32, hidden: 32, visual: 32, init_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub sentences: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { sentences: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub neurons: Vec<String>,
    pub seq_len: usize,
    pub top_k: usize,
    /// Lowercase corpus lines before lookup.
    pub lowercase: bool,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection { neurons: Vec::new(), seq_len: 5, top_k: 10, lowercase: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSection {
    pub method: Method,
    pub neurons: Vec<String>,
    /// Keep every n-th trace entry in the result file.
    pub trace_every: usize,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        OptimizeSection { method: Method::Gbl, neurons: Vec::new(), trace_every: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterSection {
    pub path: Path,
    pub seq_len: usize,
    /// Windows sampled for the activation profile.
    pub samples: usize,
    /// 0 picks one group per eight neurons.
    pub groups: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection { path: Path::Lang, seq_len: 5, samples: 2000, groups: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub paths: Vec<Path>,
    pub layer: Layer,
    /// Targets sampled per path.
    pub targets: usize,
    pub methods: Vec<Method>,
    pub seq_len: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            paths: vec![Path::Visual, Path::Lang],
            layer: Layer::Projection,
            targets: 20,
            methods: Method::ALL.to_vec(),
            seq_len: 5,
        }
    }
}

/// Random model and objectives for the gradient audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub visual: usize,
    pub neurons: Vec<String>,
    pub seq_len: usize,
    pub step: f64,
    pub taus: Vec<f64>,
    pub lambda: f64,
    pub tolerance: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        let audit = AuditConfig::default();
        GradCheckSection {
            vocab: 50,
            embed: 16,
            hidden: 16,
            visual: 8,
            neurons: vec!["vis:proj:3".into(), "lang:proj:17".into(), "lang:hid:1+4+9".into()],
            seq_len: audit.seq_len,
            step: audit.step,
            taus: audit.taus,
            lambda: audit.lambda,
            tolerance: 1e-4,
        }
    }
}

impl GradCheckSection {
    pub fn audit(&self, seed: u64) -> AuditConfig {
        AuditConfig { seq_len: self.seq_len, step: self.step, taus: self.taus.clone(), lambda: self.lambda, seed }
    }
}

/// Splits `--section.key value` and `--section.key=value` overrides out of `args`.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::config(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("malformed override key '{key}'")));
    }
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for s in sections {
        let entry = cur.entry(s.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override '{key}': '{s}' is not a section")))?;
    }
    cur.insert(last.to_string(), override_value(value));
    Ok(())
}

/// Reads the optional config file, applies overrides (flags win) and deserializes.
pub fn load(path: Option<&FsPath>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::config(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| CliError::config(format!("config: {e}")))
}

impl RunConfig {
    /// Resolved configuration as written to `run.toml`.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::config(format!("cannot serialize config: {e}")))
    }

    /// Hash of everything that can change results; the output directory is excluded.
    pub fn hash(&self) -> Result<String, CliError> {
        let mut c = self.clone();
        c.paths.out = PathBuf::new();
        let digest = Sha256::digest(c.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Value of a required path field, which must exist on disk.
    pub fn require(&self, field: &str, value: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        let p = value.clone().ok_or_else(|| CliError::config(format!("{field} is required for this command")))?;
        if !p.exists() {
            return Err(CliError::config(format!("{field}: {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Sets the n-gram length of every module.
    pub fn set_seq_len(&mut self, t: usize) {
        self.word.seq_len = t;
        self.embedding.seq_len = t;
        self.search.seq_len = t;
        self.cluster.seq_len = t;
        self.evaluate.seq_len = t;
    }

    pub fn out(&self) -> PathBuf {
        self.paths.out.clone()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("model.embed", self.model.embed),
            ("model.hidden", self.model.hidden),
            ("model.visual", self.model.visual),
            ("synth.sentences", self.synth.sentences),
            ("word.seq_len", self.word.seq_len),
            ("word.restarts", self.word.restarts),
            ("embedding.seq_len", self.embedding.seq_len),
            ("embedding.restarts", self.embedding.restarts),
            ("search.seq_len", self.search.seq_len),
            ("search.top_k", self.search.top_k),
            ("optimize.trace_every", self.optimize.trace_every),
            ("cluster.seq_len", self.cluster.seq_len),
            ("evaluate.targets", self.evaluate.targets),
            ("evaluate.seq_len", self.evaluate.seq_len),
            ("gradcheck.vocab", self.gradcheck.vocab),
            ("gradcheck.embed", self.gradcheck.embed),
            ("gradcheck.hidden", self.gradcheck.hidden),
            ("gradcheck.visual", self.gradcheck.visual),
            ("gradcheck.seq_len", self.gradcheck.seq_len),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::config(format!("{k} must be at least 1")));
        }
        if self.cluster.samples < 2 {
            return Err(CliError::config("cluster.samples must be at least 2"));
        }
        if self.gradcheck.vocab < 2 {
            return Err(CliError::config("gradcheck.vocab must be at least 2 (padding plus one word)"));
        }
        let finite_pos = [
            ("model.init_scale", self.model.init_scale),
            ("word.step_size", self.word.step_size),
            ("embedding.step_size", self.embedding.step_size),
            ("gradcheck.step", self.gradcheck.step),
            ("gradcheck.tolerance", self.gradcheck.tolerance),
        ];
        if let Some((k, v)) = finite_pos.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(CliError::config(format!("{k} must be positive and finite, got {v}")));
        }
        if self.evaluate.methods.is_empty() {
            return Err(CliError::config("evaluate.methods is empty"));
        }
        if self.evaluate.paths.is_empty() {
            return Err(CliError::config("evaluate.paths is empty"));
        }
        if self.optimize.method == Method::Crp {
            return Err(CliError::config("optimize.method = \"crp\" is a corpus search; use the search command"));
        }
        self.word.schedule().map_err(|e| CliError::config(format!("word: {e}")))?;
        Ok(())
    }
}
