//! Loading a retriever from its artifacts and running it over a query set.

use std::fmt;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use tmclir::corpus::{CorpusFormat, MonolingualPool, ParallelCorpus};
use tmclir::dense::{build_index, VectorIndex};
use tmclir::encoder::{EncoderParams, Objective};
use tmclir::hits::Hit;
use tmclir::lexical::{Bm25Index, Bm25Params, FuzzyMatcher, MatchOptions};
use tmclir::text::Segment;

use crate::TokenArgs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum RetrieverKind {
    #[serde(rename = "fuzzy-src")]
    #[value(name = "fuzzy-src")]
    FuzzySrc,
    #[serde(rename = "fuzzy-gold")]
    #[value(name = "fuzzy-gold")]
    FuzzyGold,
    #[serde(rename = "fuzzy-bt")]
    #[value(name = "fuzzy-bt")]
    FuzzyBt,
    #[serde(rename = "dense")]
    #[value(name = "dense")]
    Dense,
    #[serde(rename = "dense+bow")]
    #[value(name = "dense+bow")]
    DenseBow,
    #[serde(rename = "ft-MSE")]
    #[value(name = "ft-MSE")]
    FtMse,
    #[serde(rename = "ft-MAE")]
    #[value(name = "ft-MAE")]
    FtMae,
    #[serde(rename = "ft-Rank")]
    #[value(name = "ft-Rank")]
    FtRank,
}

impl RetrieverKind {
    pub fn is_dense(self) -> bool {
        self.objective().is_some()
    }

    /// Training objective a dense retriever's checkpoint must come from.
    pub fn objective(self) -> Option<Objective> {
        match self {
            RetrieverKind::FuzzySrc | RetrieverKind::FuzzyGold | RetrieverKind::FuzzyBt => None,
            RetrieverKind::Dense => Some(Objective::Contrastive),
            RetrieverKind::DenseBow => Some(Objective::ContrastiveBow),
            RetrieverKind::FtMse => Some(Objective::FtMse),
            RetrieverKind::FtMae => Some(Objective::FtMae),
            RetrieverKind::FtRank => Some(Objective::FtRank),
        }
    }
}

impl fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Debug, Clone, Args)]
pub struct RetrieverArgs {
    #[arg(long, value_enum)]
    pub retriever: RetrieverKind,
    /// Parallel corpus whose sources (targets for fuzzy-gold) are the queries.
    #[arg(long)]
    pub queries: PathBuf,
    /// Target-language pool that hits refer to.
    #[arg(long)]
    pub pool: PathBuf,
    /// Collection matched by fuzzy-src and fuzzy-bt: source-side texts (or
    /// back-translations) sharing ids with the pool.
    #[arg(long)]
    pub key_pool: Option<PathBuf>,
    /// Prebuilt BM25 index over the matched collection.
    #[arg(long)]
    pub lexical_index: Option<PathBuf>,
    /// Encoder checkpoint, for dense retrievers.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Prebuilt vector index over the pool; built on the fly when absent.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Rescore only the BM25 top-n segments instead of the whole collection.
    #[arg(long)]
    pub prefilter_n: Option<usize>,
    #[command(flatten)]
    pub tokens: TokenArgs,
}

enum Engine {
    Lexical {
        matcher: FuzzyMatcher,
        gold: bool,
    },
    Dense {
        params: EncoderParams,
        index: VectorIndex,
    },
}

pub struct Retriever {
    pub kind: RetrieverKind,
    pub queries: ParallelCorpus,
    pub pool: MonolingualPool,
    pub prefilter_n: Option<usize>,
    engine: Engine,
}

pub fn load_pool(path: &PathBuf, tokens: &TokenArgs) -> Result<MonolingualPool> {
    Ok(MonolingualPool::load(
        path,
        CorpusFormat::from_path(path),
        &tokens.tgt_lang,
        &tokens.config(),
    )?)
}

pub fn load_corpus(path: &PathBuf, tokens: &TokenArgs) -> Result<ParallelCorpus> {
    Ok(ParallelCorpus::load(
        path,
        CorpusFormat::from_path(path),
        &tokens.src_lang,
        &tokens.tgt_lang,
        &tokens.config(),
    )?)
}

pub fn load_checkpoint(path: &PathBuf) -> Result<EncoderParams> {
    if !path.exists() {
        return Err(tmclir::Error::Missing(format!("encoder checkpoint {}", path.display())).into());
    }
    Ok(EncoderParams::load(path)?)
}

fn lexical_matcher(collection: &[Segment], index: Option<&PathBuf>) -> Result<FuzzyMatcher> {
    Ok(match index {
        Some(path) => {
            if !path.exists() {
                return Err(tmclir::Error::Missing(format!("lexical index {}", path.display())).into());
            }
            FuzzyMatcher::new(Bm25Index::load(path)?, collection)?
        }
        None => FuzzyMatcher::build(collection, Bm25Params::default())?,
    })
}

impl Retriever {
    pub fn load(args: &RetrieverArgs) -> Result<Retriever> {
        let pool = load_pool(&args.pool, &args.tokens)?;
        let engine = match args.retriever {
            RetrieverKind::FuzzyGold => Engine::Lexical {
                matcher: lexical_matcher(&pool.segments, args.lexical_index.as_ref())?,
                gold: true,
            },
            RetrieverKind::FuzzySrc | RetrieverKind::FuzzyBt => {
                let Some(key_path) = &args.key_pool else {
                    return Err(tmclir::Error::Missing(format!(
                        "{} needs --key-pool with the texts to match against",
                        args.retriever
                    ))
                    .into());
                };
                let keys = MonolingualPool::load(
                    key_path,
                    CorpusFormat::from_path(key_path),
                    &args.tokens.src_lang,
                    &args.tokens.config(),
                )?;
                let ids = pool.positions();
                if let Some(stray) = keys.segments.iter().find(|s| !ids.contains_key(&s.id)) {
                    bail!("key pool segment {} has no counterpart in the pool", stray.id);
                }
                Engine::Lexical {
                    matcher: lexical_matcher(&keys.segments, args.lexical_index.as_ref())?,
                    gold: false,
                }
            }
            kind => {
                let Some(ckpt) = &args.checkpoint else {
                    return Err(tmclir::Error::Missing(format!("{kind} needs --checkpoint")).into());
                };
                let params = load_checkpoint(ckpt)?;
                check_objective(kind, &params)?;
                let index = match &args.index {
                    Some(path) => {
                        if !path.exists() {
                            return Err(tmclir::Error::Missing(format!("vector index {}", path.display())).into());
                        }
                        let index = VectorIndex::load(path)?;
                        if index.dim() != params.dim() {
                            return Err(tmclir::Error::DimensionMismatch {
                                expected: params.dim(),
                                actual: index.dim(),
                            }
                            .into());
                        }
                        if index.len() != pool.len() {
                            bail!("vector index has {} rows but the pool has {} segments", index.len(), pool.len());
                        }
                        index
                    }
                    None => build_index(&params, &pool)?,
                };
                Engine::Dense { params, index }
            }
        };
        // Dense queries are re-tokenized with the checkpoint's tokenizer.
        let tokens = match &engine {
            Engine::Dense { params, .. } => TokenArgs {
                tokenizer: params.tokenizer.mode,
                lowercase: params.tokenizer.lowercase,
                ..args.tokens.clone()
            },
            Engine::Lexical { .. } => args.tokens.clone(),
        };
        Ok(Retriever {
            kind: args.retriever,
            queries: load_corpus(&args.queries, &tokens)?,
            pool,
            prefilter_n: args.prefilter_n,
            engine,
        })
    }

    pub fn encoder_echo(&self) -> serde_json::Value {
        match &self.engine {
            Engine::Dense { params, .. } => params.echo.clone(),
            Engine::Lexical { .. } => serde_json::Value::Null,
        }
    }

    /// Up to `k` hits per query scoring at least `threshold`, in query order.
    pub fn run(&self, k: usize, threshold: f64) -> Result<Vec<Vec<Hit>>> {
        match &self.engine {
            Engine::Lexical { matcher, gold } => {
                let queries: Vec<Segment> = if *gold {
                    self.queries.targets().cloned().collect()
                } else {
                    self.queries.sources().cloned().collect()
                };
                // Similarities live in [0, 1]; a threshold above 1 keeps nothing.
                if threshold > 1.0 {
                    return Ok(vec![Vec::new(); queries.len()]);
                }
                let opts = MatchOptions {
                    k,
                    prefilter_n: self.prefilter_n,
                    threshold: threshold.max(0.0),
                    exclude: None,
                };
                Ok(matcher
                    .fuzzy_match_batch(&queries, &opts)?
                    .into_iter()
                    .map(|r| r.hits)
                    .collect())
            }
            Engine::Dense { params, index } => {
                let q: Vec<Vec<f64>> = self.queries.sources().map(|x| params.encode(x)).collect();
                Ok(index.knn_batch(&q, k, threshold)?)
            }
        }
    }

    /// Score of the best hit of every query; queries without any candidate
    /// score negative infinity.
    pub fn top_scores(&self) -> Result<Vec<f64>> {
        let floor = match self.engine {
            Engine::Lexical { .. } => 0.0,
            Engine::Dense { .. } => f64::NEG_INFINITY,
        };
        Ok(self
            .run(1, floor)?
            .iter()
            .map(|h| h.first().map_or(f64::NEG_INFINITY, |h| h.score))
            .collect())
    }
}

fn check_objective(kind: RetrieverKind, params: &EncoderParams) -> Result<()> {
    let Some(name) = params.echo.get("objective").and_then(|v| v.as_str()) else {
        return Ok(());
    };
    let expected = kind.objective().expect("dense retriever");
    let trained: Objective = name
        .parse()
        .with_context(|| format!("checkpoint echoes unknown objective {name:?}"))?;
    if trained != expected {
        bail!("retriever {kind} expects a checkpoint trained with {expected}, got {trained}");
    }
    Ok(())
}
