//! Retrieval metrics and threshold calibration.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_file, MonolingualPool, ParallelCorpus};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::hits::Hit;
use crate::text::{levenshtein_similarity, Segment};

fn dcg(gains: impl IntoIterator<Item = f64>) -> f64 {
    gains
        .into_iter()
        .enumerate()
        .map(|(rank, g)| g / ((rank + 2) as f64).log2())
        .sum()
}

/// NDCG of gains listed in model-ranking order, with linear gains and a
/// `log2(rank + 1)` discount. A list without positive gain scores 1.
pub fn ndcg(ranked_gains: &[f64]) -> f64 {
    let mut ideal = ranked_gains.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(ideal);
    if best <= 0.0 {
        return 1.0;
    }
    (dcg(ranked_gains.iter().copied()) / best).clamp(0.0, 1.0)
}

/// Mean of the present values; `None` when nothing is present.
pub fn lev_at_1(per_query: &[Option<f64>]) -> Option<f64> {
    let (sum, n) = per_query
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn resolve<'a>(pool: &'a MonolingualPool, hit: &Hit) -> Result<&'a Segment> {
    pool.get(hit.id)
        .ok_or_else(|| Error::Missing(format!("pool segment {}", hit.id)))
}

/// Levenshtein similarity between each reference and its query's top hit,
/// `None` for queries without hits.
pub fn best_match_levs(
    hits: &[Vec<Hit>],
    references: &[Segment],
    pool: &MonolingualPool,
) -> Result<Vec<Option<f64>>> {
    if hits.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hit lists for {} references",
            hits.len(),
            references.len()
        )));
    }
    hits.iter()
        .zip(references)
        .map(|(h, r)| match h.first() {
            None => Ok(None),
            Some(top) => Ok(Some(levenshtein_similarity(
                &r.tokens,
                &resolve(pool, top)?.tokens,
            ))),
        })
        .collect()
}

/// Fraction of queries with at least one hit.
pub fn retrieval_rate(hits: &[Vec<Hit>]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|h| !h.is_empty()).count() as f64 / hits.len() as f64
}

/// Percentage of sources whose nearest target is not their own. Ties go to
/// the lowest target position.
pub fn xsim_error_embeddings(sources: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if sources.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} source and {} target embeddings",
            sources.len(),
            targets.len()
        )));
    }
    if sources.len() < 2 {
        return Err(Error::invalid("xsim needs at least 2 pairs"));
    }
    let wrong = sources
        .par_iter()
        .enumerate()
        .filter(|(i, x)| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (j, y) in targets.iter().enumerate() {
                let s: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                if s > best_score {
                    best = j;
                    best_score = s;
                }
            }
            best != *i
        })
        .count();
    Ok(100.0 * wrong as f64 / sources.len() as f64)
}

/// xsim error of an encoder on a parallel evaluation set.
pub fn xsim_error(params: &EncoderParams, eval: &ParallelCorpus) -> Result<f64> {
    let xs: Vec<Vec<f64>> = eval.pairs.par_iter().map(|(x, _)| params.encode(x)).collect();
    let ys: Vec<Vec<f64>> = eval.pairs.par_iter().map(|(_, y)| params.encode(y)).collect();
    xsim_error_embeddings(&xs, &ys)
}

/// Smallest observed score `t` such that at most `target_rate` of the
/// scores are `>= t`.
///
/// When even the maximum score is shared by too many queries (all scores
/// equal, say), the threshold is placed just above the maximum and nothing
/// is retrieved.
pub fn calibrate_threshold(scores: &[f64], target_rate: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot calibrate on an empty score list"));
    }
    if !(target_rate > 0.0 && target_rate <= 1.0) {
        return Err(Error::invalid(format!(
            "target rate {target_rate} not in (0, 1]"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let budget = target_rate * n as f64 + 1e-9;
    let mut i = 0;
    while i < n {
        // sorted[i] is the first occurrence of its value: n - i scores are >= it.
        if (n - i) as f64 <= budget {
            return Ok(sorted[i]);
        }
        let v = sorted[i];
        while i < n && sorted[i] == v {
            i += 1;
        }
    }
    Ok(sorted[n - 1].next_up())
}

/// Fraction of scores `>= threshold`.
pub fn rate_at(scores: &[f64], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64
}

/// Metrics of one retrieval run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub num_queries: usize,
    /// Levenshtein similarity of each query's top hit to its reference.
    pub per_query_lev: Vec<Option<f64>>,
    /// Mean over queries with a hit; absent when no query has one.
    pub lev_at_1: Option<f64>,
    pub xsim_error: Option<f64>,
    pub retrieval_rate: f64,
    /// Mean NDCG of the retrieved lists against reference similarity.
    pub ndcg: Option<f64>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl RetrievalReport {
    /// Scores hit lists against aligned references.
    pub fn compute(
        hits: &[Vec<Hit>],
        references: &[Segment],
        pool: &MonolingualPool,
    ) -> Result<RetrievalReport> {
        let per_query_lev = best_match_levs(hits, references, pool)?;
        let mut ndcgs = Vec::new();
        for (h, r) in hits.iter().zip(references) {
            if h.is_empty() {
                continue;
            }
            let gains = h
                .iter()
                .map(|hit| Ok(levenshtein_similarity(&r.tokens, &resolve(pool, hit)?.tokens)))
                .collect::<Result<Vec<f64>>>()?;
            ndcgs.push(ndcg(&gains));
        }
        let ndcg = (!ndcgs.is_empty()).then(|| ndcgs.iter().sum::<f64>() / ndcgs.len() as f64);
        Ok(RetrievalReport {
            num_queries: hits.len(),
            lev_at_1: lev_at_1(&per_query_lev),
            per_query_lev,
            xsim_error: None,
            retrieval_rate: retrieval_rate(hits),
            ndcg,
            config: serde_json::Value::Null,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per query: position and best-match similarity (empty when
    /// nothing was retrieved).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query,best_lev\n");
        for (i, v) in self.per_query_lev.iter().enumerate() {
            match v {
                Some(v) => writeln!(out, "{i},{v}"),
                None => writeln!(out, "{i},"),
            }
            .unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<RetrievalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
