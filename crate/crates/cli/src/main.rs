//! `neurondream`: finds maximally activating n-grams for neurons of the toy GRU
//! caption model and compares optimization methods against corpus search.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use neurondream::corpus::{self, TokenCorpus};
use neurondream::eval::{self, ComparisonConfig, ReportMetadata};
use neurondream::imaginet::{self, ModelDims, ModelWeights};
use neurondream::neurongroups::{self, NeuronGrouping};
use neurondream::optim::{self, audit_gradients, OptimizationResult};
use neurondream::synth::{self, SynthConfig};
use neurondream::{Error, Method, NeuronTarget, Path, Vocabulary};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::RunConfig;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError { code: 4, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        if e.is_numeric() {
            CliError::numeric(message)
        } else if matches!(e, Error::InvalidArgument(_) | Error::IndexOutOfRange { .. }) {
            CliError::config(message)
        } else {
            CliError::data(message)
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "neurondream",
    version,
    about = "Maximally activating n-grams for neurons of a GRU caption model",
    after_help = "Any config key can be overridden as --section.key VALUE (for example --word.steps 200)."
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on it. Defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Root seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic captions, train the toy model and save weights, vocabulary and captions.
    TrainToy,
    /// Exhaustive corpus n-gram search for the top activating windows.
    Search {
        /// Target as path:layer:index, or path:layer:i+j+k for a group mean. Repeatable.
        #[arg(long = "neuron")]
        neurons: Vec<String>,
        /// n-gram length.
        #[arg(long = "T")]
        seq_len: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Gradient-ascent input optimization with one method.
    Optimize {
        /// emb, logit, smx or gbl.
        #[arg(long)]
        mode: Option<Method>,
        /// Target as path:layer:index, or path:layer:i+j+k for a group mean. Repeatable.
        #[arg(long = "neuron")]
        neurons: Vec<String>,
        /// n-gram length.
        #[arg(long = "T")]
        seq_len: Option<usize>,
    },
    /// Group hidden neurons of one path by correlation of their activations.
    Cluster {
        /// lang or vis.
        #[arg(long)]
        path: Option<Path>,
        /// Number of groups.
        #[arg(long)]
        groups: Option<usize>,
    },
    /// Compare methods on sampled targets and write CSV, table and t-test reports.
    Evaluate,
    /// Check analytic gradients of every ascent objective on a random model.
    GradCheck,
}

fn main() -> ExitCode {
    let level = std::env::var("NEURONDREAM_LOG").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

fn run() -> CliResult<()> {
    let (args, overrides) = config::extract_overrides(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return Err(CliError::config("invalid command line"));
        }
        Err(e) => {
            print!("{e}");
            return Ok(());
        }
    };
    let mut cfg = config::load(cli.config.as_deref(), &overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.paths.out = out;
    }
    apply_command_flags(&mut cfg, &cli.command);
    cfg.validate()?;

    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot start {jobs} workers: {e}")))?;
    }
    let jobs = rayon::current_num_threads();

    let out = cfg.out();
    fs::create_dir_all(&out).map_err(|e| CliError::data(format!("cannot create {}: {e}", out.display())))?;
    let name = command_name(&cli.command);
    // Loadable with --config; the comment records which command produced it.
    write_file(&out.join("run.toml"), format!("# neurondream {name}\n{}", cfg.to_toml()?))?;
    log::info!("{name}: output in {}, {jobs} workers", out.display());

    match cli.command {
        Command::TrainToy => train_toy(&cfg),
        Command::Search { .. } => search(&cfg, jobs),
        Command::Optimize { .. } => optimize(&cfg),
        Command::Cluster { .. } => cluster(&cfg),
        Command::Evaluate => evaluate(&cfg, jobs),
        Command::GradCheck => grad_check(&cfg),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::TrainToy => "train-toy",
        Command::Search { .. } => "search",
        Command::Optimize { .. } => "optimize",
        Command::Cluster { .. } => "cluster",
        Command::Evaluate => "evaluate",
        Command::GradCheck => "grad-check",
    }
}

/// Subcommand flags are shorthands for config keys, so `run.toml` records them.
fn apply_command_flags(cfg: &mut RunConfig, command: &Command) {
    match command {
        Command::Search { neurons, seq_len, top_k } => {
            if !neurons.is_empty() {
                cfg.search.neurons = neurons.clone();
            }
            if let Some(t) = *seq_len {
                cfg.set_seq_len(t);
            }
            if let Some(k) = *top_k {
                cfg.search.top_k = k;
            }
        }
        Command::Optimize { mode, neurons, seq_len } => {
            if let Some(m) = *mode {
                cfg.optimize.method = m;
            }
            if !neurons.is_empty() {
                cfg.optimize.neurons = neurons.clone();
            }
            if let Some(t) = *seq_len {
                cfg.set_seq_len(t);
            }
        }
        Command::Cluster { path, groups } => {
            if let Some(p) = *path {
                cfg.cluster.path = p;
            }
            if let Some(g) = *groups {
                cfg.cluster.groups = g;
            }
        }
        Command::TrainToy | Command::Evaluate | Command::GradCheck => {}
    }
}

fn write_file(path: &FsPath, body: String) -> CliResult<()> {
    fs::write(path, body).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<S: Serialize>(path: &FsPath, value: &S) -> CliResult<()> {
    let mut body = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    body.push('\n');
    write_file(path, body)
}

fn parse_targets(field: &str, specs: &[String]) -> CliResult<Vec<NeuronTarget>> {
    if specs.is_empty() {
        return Err(CliError::config(format!("{field} is empty; pass --neuron path:layer:index")));
    }
    specs
        .iter()
        .map(|s| s.parse().map_err(|e: Error| CliError::config(format!("{field}: {e}"))))
        .collect()
}

struct Model {
    weights: ModelWeights<f64>,
    vocab: Vocabulary,
}

fn load_model(cfg: &RunConfig) -> CliResult<Model> {
    let vocab_path = cfg.require("paths.vocab", &cfg.paths.vocab)?;
    let weights_path = cfg.require("paths.weights", &cfg.paths.weights)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let weights: ModelWeights<f64> = imaginet::load_weights(&weights_path)?;
    if weights.dims().vocab != vocab.len() {
        return Err(CliError::data(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            weights.dims().vocab
        )));
    }
    Ok(Model { weights, vocab })
}

fn load_corpus(cfg: &RunConfig, vocab: &Vocabulary) -> CliResult<TokenCorpus> {
    let path = cfg.require("paths.corpus", &cfg.paths.corpus)?;
    let (corpus, stats) = corpus::ingest(&path, vocab, cfg.search.lowercase)?;
    log::info!(
        "corpus: {} sequences, {} tokens, {} unknown",
        stats.sequences,
        stats.tokens,
        stats.unknown
    );
    Ok(corpus)
}

fn train_toy(cfg: &RunConfig) -> CliResult<()> {
    let data = synth::generate(&SynthConfig { sentences: cfg.synth.sentences, visual: cfg.model.visual, seed: cfg.seed })?;
    let dims = ModelDims {
        vocab: data.vocab.len(),
        embed: cfg.model.embed,
        hidden: cfg.model.hidden,
        visual: cfg.model.visual,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(eval::mix_seed(cfg.seed, 0, 1));
    let init = ModelWeights::<f64>::random(dims, cfg.model.init_scale, &mut rng);
    let (weights, report) = imaginet::train_toy(init, &data.sequences, &data.visual, &cfg.train)?;

    let out = cfg.out();
    imaginet::save_weights(&weights, &out.join("weights.json"))?;
    data.vocab.save(&out.join("vocab.txt"))?;
    write_file(&out.join("captions.txt"), data.caption_text())?;
    write_json(&out.join("train.json"), &report)?;
    println!(
        "trained V={} d={} h={} visual={} on {} captions: lang loss {:.4}, visual loss {:.4}",
        dims.vocab,
        dims.embed,
        dims.hidden,
        dims.visual,
        data.captions.len(),
        report.final_lang_loss().unwrap_or(f64::NAN),
        report.final_visual_loss().unwrap_or(f64::NAN),
    );
    println!("model fingerprint {}", weights.fingerprint());
    Ok(())
}

#[derive(Serialize)]
struct SearchFile {
    seq_len: usize,
    top_k: usize,
    hits: Vec<corpus::HitRecord>,
}

fn search(cfg: &RunConfig, jobs: usize) -> CliResult<()> {
    let targets = parse_targets("search.neurons", &cfg.search.neurons)?;
    let model = load_model(cfg)?;
    let corpus = load_corpus(cfg, &model.vocab)?;
    let t = cfg.search.seq_len;
    let per_target = corpus::search_many(&corpus, &targets, &model.weights, t, cfg.search.top_k, jobs)?;
    let mut hits = Vec::new();
    for (target, found) in targets.iter().zip(&per_target) {
        if let Some(best) = found.first() {
            println!("{target} | {} | {:.4}", model.vocab.render(&best.tokens), best.activation);
        }
        hits.extend(found.iter().enumerate().map(|(rank, h)| h.to_record(target, rank, &model.vocab)));
    }
    write_json(&cfg.out().join("search.json"), &SearchFile { seq_len: t, top_k: cfg.search.top_k, hits })
}

fn optimize(cfg: &RunConfig) -> CliResult<()> {
    let targets = parse_targets("optimize.neurons", &cfg.optimize.neurons)?;
    let model = load_model(cfg)?;
    let method = cfg.optimize.method;
    let method_index = Method::ALL.iter().position(|&m| m == method).expect("method is listed") as u64;
    let mut records = Vec::with_capacity(targets.len());
    for (ti, target) in targets.iter().enumerate() {
        target.check(&model.weights)?;
        let seed = eval::mix_seed(cfg.seed, ti as u64, method_index);
        let (result, record): (OptimizationResult, _) = match method.word_mode() {
            Some(mode) => {
                let wc = optim::WordConfig { mode, ..cfg.word.clone() };
                let r = optim::optimize_words(target, &model.weights, &wc, seed)?;
                let rec = r.to_record(&model.vocab, &wc, cfg.optimize.trace_every)?;
                (r, rec)
            }
            None => {
                let r = optim::optimize_embeddings(target, &model.weights, &cfg.embedding, seed, None)?;
                let rec = r.to_record(&model.vocab, &cfg.embedding, cfg.optimize.trace_every)?;
                (r, rec)
            }
        };
        println!("{target} | {method} | {} | {:.4}", model.vocab.render(&result.tokens), result.discrete_activation);
        records.push(record);
    }
    write_json(&cfg.out().join("optimize.json"), &records)
}

fn grouping_for(cfg: &RunConfig, model: &Model, corpus: &TokenCorpus, path: Path) -> CliResult<NeuronGrouping> {
    let c = &cfg.cluster;
    let profile = neurongroups::profile(corpus, path, &model.weights, c.seq_len, c.samples, eval::mix_seed(cfg.seed, 2, 0))?;
    let width = profile.matrix.cols();
    let k = if c.groups == 0 { neurongroups::default_group_count(width) } else { c.groups };
    Ok(neurongroups::group_neurons(&profile, k)?)
}

fn cluster(cfg: &RunConfig) -> CliResult<()> {
    let model = load_model(cfg)?;
    let corpus = load_corpus(cfg, &model.vocab)?;
    let path = cfg.cluster.path;
    let grouping = grouping_for(cfg, &model, &corpus, path)?;
    println!(
        "{path}: {} groups over {} windows, {} constant neurons excluded",
        grouping.groups.len(),
        grouping.samples,
        grouping.degenerate.len()
    );
    for target in grouping.targets() {
        println!("{target}");
    }
    let mut body = grouping.to_json()?;
    body.push('\n');
    write_file(&cfg.out().join(format!("groups_{path}.json")), body)
}

fn evaluate(cfg: &RunConfig, jobs: usize) -> CliResult<()> {
    let ev = &cfg.evaluate;
    let model = load_model(cfg)?;
    let needs_corpus = ev.methods.contains(&Method::Crp) || ev.layer == neurondream::Layer::Hidden;
    let corpus = needs_corpus.then(|| load_corpus(cfg, &model.vocab)).transpose()?;
    let cmp = ComparisonConfig {
        methods: ev.methods.clone(),
        seq_len: ev.seq_len,
        word: cfg.word.clone(),
        embedding: cfg.embedding.clone(),
        seed: cfg.seed,
        shards: jobs,
    };
    let metadata = ReportMetadata {
        seed: cfg.seed,
        model_hash: model.weights.fingerprint(),
        config_hash: cfg.hash()?,
        restart_policy: format!(
            "best of {} restarts (word methods), best of {} (emb)",
            cfg.word.restarts, cfg.embedding.restarts
        ),
    };
    for (pi, &path) in ev.paths.iter().enumerate() {
        let grouping = match (ev.layer, corpus.as_ref()) {
            (neurondream::Layer::Hidden, Some(c)) => Some(grouping_for(cfg, &model, c, path)?),
            _ => None,
        };
        let seed = eval::mix_seed(cfg.seed, 1, pi as u64);
        let targets = eval::select_targets(&model.weights, path, ev.layer, ev.targets, seed, grouping.as_ref())?;
        let rows = eval::run_comparison(&targets, &model.weights, corpus.as_ref(), &cmp)?;
        let tests = eval::compare_against_corpus(&rows, &ev.methods);
        let dir = cfg.out().join(format!("{path}_{}", ev.layer));
        eval::emit_reports(&rows, &tests, &model.vocab, &metadata, &dir)?;

        println!("{path}:{} ({} targets)", ev.layer, targets.len());
        for (m, mean) in eval::method_means(&rows, &ev.methods) {
            match mean {
                Some(v) => println!("  mean {m}: {v:.4}"),
                None => println!("  mean {m}: -"),
            }
        }
        for t in &tests {
            match &t.report {
                Some(r) => println!("  {} - {}: t = {:.3}, p = {:.3e}, n = {}", t.a, t.b, r.t, r.p, r.n),
                None => println!("  {} - {}: {}", t.a, t.b, t.error.as_deref().unwrap_or("no test")),
            }
        }
    }
    Ok(())
}

fn grad_check(cfg: &RunConfig) -> CliResult<()> {
    let g = &cfg.gradcheck;
    let dims = ModelDims { vocab: g.vocab, embed: g.embed, hidden: g.hidden, visual: g.visual };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = ModelWeights::<f64>::random(dims, 1.0, &mut rng);
    let targets = parse_targets("gradcheck.neurons", &g.neurons)?;
    let checks = audit_gradients(&weights, &targets, &g.audit(cfg.seed))?;
    for c in &checks {
        println!("{:<16} {:<16} {:.3e}", c.target, c.objective, c.max_rel_error);
    }
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e}");
    write_json(&cfg.out().join("gradcheck.json"), &checks)?;
    if !(worst < g.tolerance) {
        return Err(CliError::numeric(format!("max relative error {worst:.3e} exceeds tolerance {:.1e}", g.tolerance)));
    }
    Ok(())
}
