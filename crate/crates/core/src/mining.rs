//! Mining target-side candidates for the fine-tuning objectives, and the
//! candidate file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{MonolingualPool, ParallelCorpus};
use crate::dense::VectorIndex;
use crate::encoder::{Candidate, EncoderParams, TrainingExample};
use crate::error::{Error, Result};
use crate::hits::Hit;
use crate::jsonl;
use crate::lexical::{FuzzyMatcher, MatchOptions};
use crate::text::{Segment, SegmentId, TokenizerConfig};

fn attach(
    pair: &(Segment, Segment),
    hits: &[Hit],
    pool: &MonolingualPool,
    k: usize,
) -> Result<TrainingExample> {
    let candidates = hits
        .iter()
        .take(k)
        .map(|h| {
            pool.get(h.id)
                .cloned()
                .ok_or_else(|| Error::Missing(format!("pool segment {}", h.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingExample::with_candidates(
        pair.0.clone(),
        pair.1.clone(),
        candidates,
    ))
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::invalid("k must be at least 1"))
    } else {
        Ok(())
    }
}

/// For every pair, the `k` pool segments closest to the source under the
/// encoder. With `exclude_self`, the pool segment sharing the target's id is
/// skipped (for mining a corpus against its own target side).
pub fn mine_dense(
    params: &EncoderParams,
    index: &VectorIndex,
    pool: &MonolingualPool,
    corpus: &ParallelCorpus,
    k: usize,
    exclude_self: bool,
) -> Result<Vec<TrainingExample>> {
    check_k(k)?;
    if index.len() != pool.len() {
        return Err(Error::invalid(format!(
            "vector index has {} rows but the pool has {} segments",
            index.len(),
            pool.len()
        )));
    }
    if index.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            actual: params.dim(),
        });
    }
    let queries: Vec<Vec<f64>> = corpus.sources().map(|x| params.encode(x)).collect();
    let want = if exclude_self { k + 1 } else { k };
    let hits = index.knn_batch(&queries, want, f64::NEG_INFINITY)?;
    corpus
        .pairs
        .iter()
        .zip(hits)
        .map(|(pair, mut h)| {
            if exclude_self {
                h.retain(|hit| hit.id != pair.1.id);
            }
            attach(pair, &h, pool, k)
        })
        .collect()
}

/// For every pair, the `k` pool segments with the highest Levenshtein
/// similarity to the reference target, optionally BM25-prefiltered.
pub fn mine_lexical(
    matcher: &FuzzyMatcher,
    pool: &MonolingualPool,
    corpus: &ParallelCorpus,
    k: usize,
    prefilter_n: Option<usize>,
    exclude_self: bool,
) -> Result<Vec<TrainingExample>> {
    check_k(k)?;
    if matcher.len() != pool.len() {
        return Err(Error::invalid(format!(
            "lexical index covers {} segments but the pool has {}",
            matcher.len(),
            pool.len()
        )));
    }
    let base = MatchOptions {
        k,
        prefilter_n,
        threshold: 0.0,
        exclude: None,
    };
    base.validate()?;
    corpus
        .pairs
        .iter()
        .map(|pair| {
            let opts = MatchOptions {
                exclude: exclude_self.then_some(pair.1.id),
                ..base
            };
            attach(pair, &matcher.search(&pair.1.tokens, &opts), pool, k)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CandidateRecord {
    id: SegmentId,
    text: String,
    lev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExampleRecord {
    id: SegmentId,
    src: String,
    tgt: String,
    candidates: Vec<CandidateRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExampleHeader {
    src_lang: String,
    tgt_lang: String,
    tokenizer: TokenizerConfig,
    #[serde(default)]
    config: serde_json::Value,
}

/// Candidate file: a header with languages, tokenizer and `config`, then
/// one example per line.
pub fn render_examples(
    examples: &[TrainingExample],
    src_lang: &str,
    tgt_lang: &str,
    tokenizer: &TokenizerConfig,
    config: serde_json::Value,
) -> String {
    let header = ExampleHeader {
        src_lang: src_lang.into(),
        tgt_lang: tgt_lang.into(),
        tokenizer: *tokenizer,
        config,
    };
    let records: Vec<ExampleRecord> = examples
        .iter()
        .map(|ex| ExampleRecord {
            id: ex.x.id,
            src: ex.x.raw.clone(),
            tgt: ex.y.raw.clone(),
            candidates: ex
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    id: c.segment.id,
                    text: c.segment.raw.clone(),
                    lev: c.lev,
                })
                .collect(),
        })
        .collect();
    jsonl::render(&serde_json::to_value(header).expect("header serializes"), &records)
}

/// Parses a candidate file, re-tokenizing with the tokenizer named in its
/// header and re-checking every stored similarity and its ordering.
pub fn parse_examples(text: &str, origin: &Path) -> Result<Vec<TrainingExample>> {
    let (header, records): (_, Vec<ExampleRecord>) = jsonl::parse(text, origin)?;
    let header: ExampleHeader = serde_json::from_value(header)
        .map_err(|e| Error::Format(format!("{}: candidate file header: {e}", origin.display())))?;
    let tok = header.tokenizer;
    records
        .into_iter()
        .map(|r| {
            let ex = TrainingExample {
                x: Segment::new(r.id, header.src_lang.as_str(), r.src, &tok),
                y: Segment::new(r.id, header.tgt_lang.as_str(), r.tgt, &tok),
                candidates: r
                    .candidates
                    .into_iter()
                    .map(|c| Candidate {
                        segment: Segment::new(c.id, header.tgt_lang.as_str(), c.text, &tok),
                        lev: c.lev,
                    })
                    .collect(),
            };
            ex.validate()
                .map_err(|e| Error::Format(format!("{}: {e}", origin.display())))?;
            Ok(ex)
        })
        .collect()
}

pub fn read_examples(path: &Path) -> Result<Vec<TrainingExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_examples(&text, path)
}
