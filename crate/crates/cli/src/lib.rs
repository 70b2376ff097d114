//! The `tmclir` pipeline: every stage is a subcommand reading and writing
//! files, so stages can be rerun, inspected and swapped independently.

pub mod artifacts;
pub mod retrieval;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use tmclir::corpus::{decontaminate, CorpusFormat, MonolingualPool, ParallelCorpus};
use tmclir::dense::build_index;
use tmclir::encoder::{train, EncoderParams, TrainConfig, TrainingExample, Vocab};
use tmclir::eval::{calibrate_threshold, rate_at, xsim_error, RetrievalReport};
use tmclir::lexical::{Bm25Index, Bm25Params, FuzzyMatcher};
use tmclir::mining::{mine_dense, mine_lexical, read_examples, render_examples};
use tmclir::synthetic::{SyntheticConfig, SyntheticLanguages};
use tmclir::text::{TokenizerConfig, TokenizerMode};

use artifacts::{export_examples, Calibration, HitsFile, HitsHeader, HitsRecord};
use retrieval::{load_checkpoint, load_corpus, load_pool, Retriever, RetrieverArgs};

#[derive(Debug, Parser)]
#[command(name = "tmclir", version, about = "Translation-memory retrieval pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Tokenization and language labels shared by every command that reads text.
#[derive(Debug, Clone, Args)]
pub struct TokenArgs {
    /// `whitespace` or `whitespace-punct`.
    #[arg(long, value_parser = parse_mode, default_value = "whitespace-punct")]
    pub tokenizer: TokenizerMode,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long, default_value = "src")]
    pub src_lang: String,
    #[arg(long, default_value = "tgt")]
    pub tgt_lang: String,
}

fn parse_mode(s: &str) -> Result<TokenizerMode, String> {
    serde_json::from_value(Value::String(s.into()))
        .map_err(|_| format!("unknown tokenizer {s:?}; expected whitespace or whitespace-punct"))
}

impl TokenArgs {
    pub fn config(&self) -> TokenizerConfig {
        TokenizerConfig {
            mode: self.tokenizer,
            lowercase: self.lowercase,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a parallel corpus, optionally split it and prepare a pool.
    Ingest(IngestArgs),
    /// Build a BM25 index over a pool or key collection.
    BuildLexicalIndex(BuildLexicalArgs),
    /// Encode a pool into a vector index.
    BuildDenseIndex(BuildDenseArgs),
    /// Attach target-side candidates to every pair of a corpus.
    MineCandidates(MineArgs),
    /// Train or fine-tune an encoder.
    Train(TrainArgs),
    /// Find the threshold giving a target retrieval rate.
    Calibrate(CalibrateArgs),
    /// Retrieve up to k examples per query.
    Retrieve(RetrieveArgs),
    /// Score a hits file against reference targets.
    Eval(EvalArgs),
    /// Join hits with pool text for downstream generation.
    ExportExamples(ExportArgs),
    /// Write a synthetic pseudo-bilingual corpus and pool.
    GenerateSynthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Parallel corpus, TSV (`src<TAB>tgt`) or JSONL (`{"src":..,"tgt":..}`).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Train/valid/test fractions, e.g. `0.8,0.1,0.1`.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// External target-language pool; the training targets are used otherwise.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Back-translations of `--pool`, line-aligned.
    #[arg(long, requires = "pool")]
    pub pool_bt: Option<PathBuf>,
    /// Pool segments above this similarity to a held-out target are dropped.
    #[arg(long, default_value_t = 0.9)]
    pub decontaminate: f64,
    #[command(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Args)]
pub struct BuildLexicalArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.2)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.75)]
    pub b: f64,
    #[command(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Args)]
pub struct BuildDenseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Miner {
    /// Nearest pool segments to the source under an encoder.
    Dense,
    /// Pool segments most similar to the reference target.
    Lexical,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, value_enum)]
    pub miner: Miner,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Skip the pool segment sharing the pair's id (mining a corpus against
    /// its own target side).
    #[arg(long)]
    pub exclude_self: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub lexical_index: Option<PathBuf>,
    #[arg(long)]
    pub prefilter_n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Args)]
#[group(id = "train_input", required = true, multiple = false, args = ["train_corpus", "train_candidates"])]
pub struct TrainArgs {
    /// TOML training configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_corpus: Option<PathBuf>,
    #[arg(long)]
    pub train_candidates: Option<PathBuf>,
    #[arg(long, conflicts_with = "valid_candidates", required_unless_present = "valid_candidates")]
    pub valid_corpus: Option<PathBuf>,
    #[arg(long)]
    pub valid_candidates: Option<PathBuf>,
    /// Checkpoint to start from; a fresh encoder is initialized otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the loss and validation history as JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[command(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub retriever: RetrieverArgs,
    #[arg(long, default_value_t = 0.5)]
    pub target_rate: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[group(id = "cutoff", required = true, multiple = false, args = ["threshold", "calibration", "target_rate"])]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub retriever: RetrieverArgs,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    /// Calibration file written by `calibrate`.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Calibrate on the queries themselves.
    #[arg(long)]
    pub target_rate: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub hits: PathBuf,
    /// Corpus the hits were retrieved for; its targets are the references.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    /// Encoder whose xsim error on the query corpus is reported.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-query similarities as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub hits: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tokens: TokenArgs,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5000)]
    pub train: usize,
    #[arg(long, default_value_t = 500)]
    pub valid: usize,
    #[arg(long, default_value_t = 2000)]
    pub pool: usize,
    /// Per-token edit probability between the two sides.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::BuildLexicalIndex(a) => build_lexical_index(a),
        Command::BuildDenseIndex(a) => build_dense_index(a),
        Command::MineCandidates(a) => mine_candidates(a),
        Command::Train(a) => train_cmd(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Eval(a) => eval(a),
        Command::ExportExamples(a) => export(a),
        Command::GenerateSynthetic(a) => generate_synthetic(a),
    }
}

/// The single JSON line printed on failure.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<tmclir::Error>())
        .map_or("error", tmclir::Error::kind);
    let message = err
        .chain()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(": ");
    json!({"error": {"kind": kind, "message": message}}).to_string()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(tmclir::Error::InvalidArgument("k must be at least 1".into()).into());
    }
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let tok = a.tokens.config();
    let corpus = load_corpus(&a.input, &a.tokens)?;
    let jsonl = CorpusFormat::Jsonl;
    let mut files = serde_json::Map::new();
    let mut save_corpus = |name: &str, c: &ParallelCorpus| -> Result<()> {
        let path = a.out_dir.join(format!("{name}.jsonl"));
        write(&path, c.render(jsonl)?)?;
        files.insert(name.into(), json!({"path": path, "pairs": c.len()}));
        Ok(())
    };

    let (train_c, held_out) = match &a.split {
        Some(f) => {
            if f.len() != 3 {
                return Err(tmclir::Error::InvalidArgument(format!("--split takes 3 fractions, got {}", f.len())).into());
            }
            let (train_c, valid, test) = corpus.split((f[0], f[1], f[2]), a.seed)?;
            save_corpus("train", &train_c)?;
            save_corpus("valid", &valid)?;
            save_corpus("test", &test)?;
            let held: Vec<_> = valid.targets().chain(test.targets()).cloned().collect();
            (train_c, held)
        }
        None => {
            save_corpus("corpus", &corpus)?;
            (corpus, Vec::new())
        }
    };

    // The pool, plus the source-language collection aligned with it.
    let (pool, keys, key_name) = match &a.pool {
        Some(path) => {
            let pool = load_pool(path, &a.tokens)?;
            let bt = match &a.pool_bt {
                Some(bt_path) => {
                    let bt = MonolingualPool::load(bt_path, CorpusFormat::from_path(bt_path), &a.tokens.src_lang, &tok)?;
                    if bt.len() != pool.len() {
                        bail!("{} has {} lines but the pool has {}", bt_path.display(), bt.len(), pool.len());
                    }
                    Some(bt)
                }
                None => None,
            };
            (pool, bt, "pool-bt")
        }
        None => (train_c.target_pool(), Some(train_c.source_pool()), "pool-src"),
    };
    let before = pool.len();
    let pool = if held_out.is_empty() {
        pool
    } else {
        decontaminate(&pool, &held_out, a.decontaminate)?
    };
    write(&a.out_dir.join("pool.jsonl"), pool.render(jsonl)?)?;
    if let Some(keys) = keys {
        let kept = pool.positions();
        let keys = MonolingualPool {
            lang: keys.lang,
            segments: keys.segments.into_iter().filter(|s| kept.contains_key(&s.id)).collect(),
        };
        write(&a.out_dir.join(format!("{key_name}.jsonl")), keys.render(jsonl)?)?;
    }
    let manifest = json!({
        "src_lang": a.tokens.src_lang,
        "tgt_lang": a.tokens.tgt_lang,
        "tokenizer": tok,
        "seed": a.seed,
        "split": a.split,
        "decontaminate": a.decontaminate,
        "corpora": files,
        "pool": {"segments": pool.len(), "removed": before - pool.len()},
    });
    write_json(&a.out_dir.join("manifest.json"), &manifest)
}

fn build_lexical_index(a: BuildLexicalArgs) -> Result<()> {
    let pool = load_pool(&a.pool, &a.tokens)?;
    let index = Bm25Index::build(&pool.segments, Bm25Params { k1: a.k1, b: a.b })?;
    index.save(&a.out)?;
    Ok(())
}

fn build_dense_index(a: BuildDenseArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let tokens = TokenArgs {
        tokenizer: params.tokenizer.mode,
        lowercase: params.tokenizer.lowercase,
        ..a.tokens
    };
    let pool = load_pool(&a.pool, &tokens)?;
    build_index(&params, &pool)?.save(&a.out)?;
    Ok(())
}

fn mine_candidates(a: MineArgs) -> Result<()> {
    check_k(a.k)?;
    let (examples, tok, config) = match a.miner {
        Miner::Dense => {
            let Some(ckpt) = &a.checkpoint else {
                return Err(tmclir::Error::Missing("dense mining needs --checkpoint".into()).into());
            };
            let params = load_checkpoint(ckpt)?;
            let tokens = TokenArgs {
                tokenizer: params.tokenizer.mode,
                lowercase: params.tokenizer.lowercase,
                ..a.tokens.clone()
            };
            let corpus = load_corpus(&a.corpus, &tokens)?;
            let pool = load_pool(&a.pool, &tokens)?;
            let index = match &a.index {
                Some(path) => {
                    if !path.exists() {
                        return Err(tmclir::Error::Missing(format!("vector index {}", path.display())).into());
                    }
                    tmclir::dense::VectorIndex::load(path)?
                }
                None => build_index(&params, &pool)?,
            };
            let ex = mine_dense(&params, &index, &pool, &corpus, a.k, a.exclude_self)?;
            (ex, params.tokenizer, json!({"miner": "dense", "encoder": params.echo}))
        }
        Miner::Lexical => {
            let corpus = load_corpus(&a.corpus, &a.tokens)?;
            let pool = load_pool(&a.pool, &a.tokens)?;
            let matcher = match &a.lexical_index {
                Some(path) => {
                    if !path.exists() {
                        return Err(tmclir::Error::Missing(format!("lexical index {}", path.display())).into());
                    }
                    FuzzyMatcher::new(Bm25Index::load(path)?, &pool.segments)?
                }
                None => FuzzyMatcher::build(&pool.segments, Bm25Params::default())?,
            };
            let ex = mine_lexical(&matcher, &pool, &corpus, a.k, a.prefilter_n, a.exclude_self)?;
            (ex, a.tokens.config(), json!({"miner": "lexical", "prefilter_n": a.prefilter_n}))
        }
    };
    let mut config = config;
    config["k"] = json!(a.k);
    config["exclude_self"] = json!(a.exclude_self);
    let text = render_examples(&examples, &a.tokens.src_lang, &a.tokens.tgt_lang, &tok, config);
    write(&a.out, text)
}

fn load_examples(corpus: &Option<PathBuf>, candidates: &Option<PathBuf>, tokens: &TokenArgs) -> Result<Vec<TrainingExample>> {
    match (corpus, candidates) {
        (Some(path), _) => Ok(load_corpus(path, tokens)?
            .pairs
            .into_iter()
            .map(|(x, y)| TrainingExample::new(x, y))
            .collect()),
        (None, Some(path)) => {
            if !path.exists() {
                return Err(tmclir::Error::Missing(format!("candidate file {}", path.display())).into());
            }
            Ok(read_examples(path)?)
        }
        (None, None) => unreachable!("clap requires one input"),
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    config.validate()?;
    let init = match &a.init {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let tokens = match &init {
        Some(p) => TokenArgs {
            tokenizer: p.tokenizer.mode,
            lowercase: p.tokenizer.lowercase,
            ..a.tokens.clone()
        },
        None => a.tokens.clone(),
    };
    let train_set = load_examples(&a.train_corpus, &a.train_candidates, &tokens)?;
    let valid_set = load_examples(&a.valid_corpus, &a.valid_candidates, &tokens)?;
    let init = match init {
        Some(p) => p,
        None => {
            let vocab = Vocab::build(train_set.iter().flat_map(|ex| {
                [&ex.x, &ex.y]
                    .into_iter()
                    .chain(ex.candidates.iter().map(|c| &c.segment))
            }));
            EncoderParams::init(vocab, config.d, tokens.config(), config.seed)?
        }
    };
    let (params, history) = train(init, &train_set, &valid_set, &config)?;
    params.save(&a.out)?;
    if let Some(path) = &a.history {
        write_json(path, &serde_json::to_value(&history)?)?;
    }
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    if !(a.target_rate > 0.0 && a.target_rate <= 1.0) {
        return Err(tmclir::Error::InvalidArgument(format!("target rate {} not in (0, 1]", a.target_rate)).into());
    }
    let r = Retriever::load(&a.retriever)?;
    let scores = r.top_scores()?;
    let threshold = calibrate_threshold(&scores, a.target_rate)?;
    let cal = Calibration {
        retriever: r.kind,
        target_rate: a.target_rate,
        threshold,
        achieved_rate: rate_at(&scores, threshold),
        num_queries: scores.len(),
    };
    write_json(&a.out, &serde_json::to_value(&cal)?)
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    check_k(a.k)?;
    let r = Retriever::load(&a.retriever)?;
    let threshold = match (a.threshold, &a.calibration, a.target_rate) {
        (Some(t), _, _) => {
            if t.is_nan() {
                return Err(tmclir::Error::InvalidArgument("threshold is NaN".into()).into());
            }
            t
        }
        (_, Some(path), _) => {
            let cal = Calibration::read(path)?;
            if cal.retriever != r.kind {
                bail!("calibration is for {} but the retriever is {}", cal.retriever, r.kind);
            }
            cal.threshold
        }
        (_, _, Some(rate)) => calibrate_threshold(&r.top_scores()?, rate)?,
        _ => unreachable!("clap requires a cutoff"),
    };
    let hits = r.run(a.k, threshold)?;
    let file = HitsFile {
        header: HitsHeader {
            retriever: r.kind,
            k: a.k,
            threshold,
            prefilter_n: r.prefilter_n,
            encoder: r.encoder_echo(),
        },
        records: r
            .queries
            .sources()
            .zip(hits)
            .map(|(x, hits)| HitsRecord { query: x.id, hits })
            .collect(),
    };
    write(&a.out, file.render())
}

fn eval(a: EvalArgs) -> Result<()> {
    let hits = HitsFile::read(&a.hits)?;
    let queries = load_corpus(&a.queries, &a.tokens)?;
    let pool = load_pool(&a.pool, &a.tokens)?;
    let lists = hits.aligned(&queries)?;
    let refs: Vec<_> = queries.targets().cloned().collect();
    let mut report = RetrievalReport::compute(&lists, &refs, &pool)?;
    if let Some(ckpt) = &a.checkpoint {
        let params = load_checkpoint(ckpt)?;
        let tokens = TokenArgs {
            tokenizer: params.tokenizer.mode,
            lowercase: params.tokenizer.lowercase,
            ..a.tokens.clone()
        };
        report.xsim_error = Some(xsim_error(&params, &load_corpus(&a.queries, &tokens)?)?);
    }
    report.config = serde_json::to_value(&hits.header)?;
    report.save(&a.out)?;
    if let Some(csv) = &a.csv {
        write(csv, report.to_csv())?;
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let hits = HitsFile::read(&a.hits)?;
    let queries = load_corpus(&a.queries, &a.tokens)?;
    let pool = load_pool(&a.pool, &a.tokens)?;
    let records = export_examples(&hits, &queries, &pool)?;
    let header = serde_json::to_value(&hits.header)?;
    write(&a.out, tmclir::jsonl::render(&header, &records))
}

fn generate_synthetic(a: SyntheticArgs) -> Result<()> {
    let config = SyntheticConfig {
        seed: a.seed,
        noise: a.noise,
        ..SyntheticConfig::default()
    };
    let lang = SyntheticLanguages::new(config.clone());
    let tok = TokenizerConfig::default();
    let corpus = |n, stream| {
        let pairs = lang.generate(n, stream);
        ParallelCorpus::from_pairs("src", "tgt", pairs.into_iter().map(|p| (p.src, p.tgt)), &tok)
    };
    let jsonl = CorpusFormat::Jsonl;
    write(&a.out_dir.join("train.jsonl"), corpus(a.train, 1).render(jsonl)?)?;
    write(&a.out_dir.join("valid.jsonl"), corpus(a.valid, 2).render(jsonl)?)?;
    let pool = lang.generate(a.pool, 3);
    let side = |lang: &str, texts: Vec<&str>| MonolingualPool::from_texts(lang, texts, &tok).render(jsonl);
    write(&a.out_dir.join("pool.jsonl"), side("tgt", pool.iter().map(|p| p.tgt.as_str()).collect())?)?;
    write(&a.out_dir.join("pool-src.jsonl"), side("src", pool.iter().map(|p| p.src.as_str()).collect())?)?;
    write(&a.out_dir.join("pool-bt.jsonl"), side("src", pool.iter().map(|p| p.bt.as_str()).collect())?)?;
    write_json(&a.out_dir.join("synthetic.json"), &serde_json::to_value(&config)?)
}
