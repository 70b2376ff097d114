//! Exact inner-product search over unit-normalized segment embeddings.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::corpus::{write_file, MonolingualPool};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::hits::{Hit, TopK};
use crate::text::SegmentId;

const MAGIC: &[u8; 8] = b"TMCVIDX\n";
const VERSION: u32 = 1;

/// Rows are stored as `f32`; scores are accumulated in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<SegmentId>,
    data: Vec<f32>,
}

/// Encodes every pool segment.
pub fn build_index(params: &EncoderParams, pool: &MonolingualPool) -> Result<VectorIndex> {
    if pool.is_empty() {
        return Err(Error::Empty("pool".into()));
    }
    let rows: Vec<Vec<f64>> = pool.segments.par_iter().map(|s| params.encode(s)).collect();
    VectorIndex::from_rows(pool.segments.iter().map(|s| s.id).collect(), &rows)
}

impl VectorIndex {
    /// Rows must be unit vectors of one dimension; ids must be unique.
    pub fn from_rows(ids: Vec<SegmentId>, rows: &[Vec<f64>]) -> Result<VectorIndex> {
        if rows.is_empty() {
            return Err(Error::Empty("vector index".into()));
        }
        if ids.len() != rows.len() {
            return Err(Error::invalid(format!(
                "{} ids for {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::invalid("vectors must have at least one dimension"));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, row) in ids.iter().zip(rows) {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("row {id} has norm {norm}, expected 1")));
            }
            if !seen.insert(*id) {
                return Err(Error::invalid(format!("duplicate id {id} in vector index")));
            }
            data.extend(row.iter().map(|&v| v as f32));
        }
        Ok(VectorIndex { dim, ids, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[SegmentId] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Best `k` rows by inner product with `query`, dropping scores below
    /// `threshold`. Ties are broken by ascending id.
    pub fn knn(&self, query: &[f64], k: usize, threshold: f64) -> Result<Vec<Hit>> {
        self.check_query(query, k, threshold)?;
        Ok(self.scan(query, k, threshold))
    }

    /// [`knn`](Self::knn) for many queries in parallel; output order
    /// follows input order.
    pub fn knn_batch(&self, queries: &[Vec<f64>], k: usize, threshold: f64) -> Result<Vec<Vec<Hit>>> {
        for q in queries {
            self.check_query(q, k, threshold)?;
        }
        Ok(queries
            .par_iter()
            .map(|q| self.scan(q, k, threshold))
            .collect())
    }

    fn check_query(&self, query: &[f64], k: usize, threshold: f64) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if threshold.is_nan() {
            return Err(Error::invalid("threshold is NaN"));
        }
        let norm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::invalid(format!("query has norm {norm}, expected 1")));
        }
        Ok(())
    }

    fn scan(&self, query: &[f64], k: usize, threshold: f64) -> Vec<Hit> {
        let mut top = TopK::new(k);
        for (i, row) in self.data.chunks_exact(self.dim).enumerate() {
            let score: f64 = row.iter().zip(query).map(|(&r, q)| r as f64 * q).sum();
            if score >= threshold {
                top.push(Hit {
                    id: self.ids[i],
                    score,
                });
            }
        }
        top.into_sorted()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u64(self.ids.len() as u64);
        w.u64(self.dim as u64);
        for id in &self.ids {
            w.u32(id.0);
        }
        for &v in &self.data {
            w.f32(v);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<VectorIndex> {
        let (mut r, version) = Reader::open(bytes, MAGIC, "vector index")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported vector index version {version}")));
        }
        let n = r.u64()? as usize;
        let dim = r.u64()? as usize;
        if n == 0 || dim == 0 {
            return Err(Error::Format("vector index is empty".into()));
        }
        let ids = (0..n).map(|_| r.u32().map(SegmentId)).collect::<Result<Vec<_>>>()?;
        let total = n
            .checked_mul(dim)
            .ok_or_else(|| Error::Format("vector index size overflows".into()))?;
        let data = (0..total).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        if ids.iter().collect::<HashSet<_>>().len() != n {
            return Err(Error::Format("duplicate ids in vector index".into()));
        }
        Ok(VectorIndex { dim, ids, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<VectorIndex> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
