//! File formats owned by the pipeline: hit lists, calibration results and
//! exported retrieval contexts.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tmclir::corpus::{MonolingualPool, ParallelCorpus};
use tmclir::hits::Hit;
use tmclir::jsonl;
use tmclir::text::SegmentId;

use crate::retrieval::RetrieverKind;

/// Hits of one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitsRecord {
    pub query: SegmentId,
    pub hits: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitsHeader {
    pub retriever: RetrieverKind,
    pub k: usize,
    pub threshold: f64,
    pub prefilter_n: Option<usize>,
    /// Training configuration of the encoder, for dense retrievers.
    #[serde(default)]
    pub encoder: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HitsFile {
    pub header: HitsHeader,
    pub records: Vec<HitsRecord>,
}

impl HitsFile {
    pub fn render(&self) -> String {
        let header = serde_json::to_value(&self.header).expect("header serializes");
        jsonl::render(&header, &self.records)
    }

    pub fn read(path: &Path) -> Result<HitsFile> {
        let (header, records) = jsonl::read(path)?;
        let header = serde_json::from_value(header)
            .with_context(|| format!("{}: not a hits file header", path.display()))?;
        Ok(HitsFile { header, records })
    }

    /// Hit lists aligned with the pairs of `queries`.
    pub fn aligned(&self, queries: &ParallelCorpus) -> Result<Vec<Vec<Hit>>> {
        if self.records.len() != queries.len() {
            bail!(
                "hits file has {} records but the query corpus has {} pairs",
                self.records.len(),
                queries.len()
            );
        }
        self.records
            .iter()
            .zip(&queries.pairs)
            .map(|(r, (x, _))| {
                if r.query != x.id {
                    bail!("hits record for query {} where {} was expected", r.query, x.id);
                }
                Ok(r.hits.clone())
            })
            .collect()
    }
}

/// Threshold reproducing a target retrieval rate on a query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub retriever: RetrieverKind,
    pub target_rate: f64,
    pub threshold: f64,
    /// Rate actually reached on the calibration queries.
    pub achieved_rate: f64,
    pub num_queries: usize,
}

impl Calibration {
    pub fn read(path: &Path) -> Result<Calibration> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("missing calibration file {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("{}: not a calibration file", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: SegmentId,
    pub text: String,
    pub score: f64,
}

/// A source sentence with its retrieved target-language examples, in rank
/// order. An empty list is the "no example" condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub id: SegmentId,
    pub src: String,
    pub examples: Vec<Example>,
}

pub fn export_examples(
    hits: &HitsFile,
    queries: &ParallelCorpus,
    pool: &MonolingualPool,
) -> Result<Vec<ExportRecord>> {
    let lists = hits.aligned(queries)?;
    let positions = pool.positions();
    lists
        .iter()
        .zip(&queries.pairs)
        .map(|(list, (x, _))| {
            let examples = list
                .iter()
                .map(|h| {
                    let Some(&at) = positions.get(&h.id) else {
                        return Err(tmclir::Error::Missing(format!(
                            "pool segment {} referenced by query {}",
                            h.id, x.id
                        ))
                        .into());
                    };
                    Ok(Example {
                        id: h.id,
                        text: pool.segments[at].raw.clone(),
                        score: h.score,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ExportRecord {
                id: x.id,
                src: x.raw.clone(),
                examples,
            })
        })
        .collect()
}

pub fn parse_export(text: &str, origin: &Path) -> Result<(Value, Vec<ExportRecord>)> {
    Ok(jsonl::parse(text, origin)?)
}
