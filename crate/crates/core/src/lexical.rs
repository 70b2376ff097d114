//! BM25 inverted index and Levenshtein fuzzy matching.
//!
//! [`FuzzyMatcher`] serves the three lexical retrievers with one code path;
//! they differ only in which text is indexed and which text is the query:
//!
//! | retriever  | indexed collection           | query              |
//! |------------|------------------------------|--------------------|
//! | fuzzy-src  | TM source side               | source sentence    |
//! | fuzzy-gold | TM / pool target side        | reference target   |
//! | fuzzy-bt   | back-translated pool         | source sentence    |
//!
//! In exact mode every segment is rescored with Levenshtein similarity. With
//! a prefilter only the BM25 top-n candidates are rescored.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::corpus::write_file;
use crate::error::{Error, Result};
use crate::hits::{Hit, TopK};
use crate::text::{levenshtein_similarity, Segment, SegmentId, Token};

const MAGIC: &[u8; 8] = b"TMCBM25\n";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    /// Position of the segment in the indexed collection.
    pub doc: u32,
    pub tf: u32,
}

/// Inverted index over a segment collection.
///
/// Documents are addressed by their position in the collection the index
/// was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    params: Bm25Params,
    terms: HashMap<String, u32>,
    /// Term strings by term id, sorted.
    vocab: Vec<String>,
    postings: Vec<Vec<Posting>>,
    doc_len: Vec<u32>,
    avg_len: f64,
    /// Length-normalized term frequency of every posting, parallel to `postings`.
    tf_weights: Vec<Vec<f64>>,
}

impl Bm25Index {
    pub fn build(collection: &[Segment], params: Bm25Params) -> Result<Bm25Index> {
        if collection.is_empty() {
            return Err(Error::Empty("BM25 collection".into()));
        }
        let mut by_term: BTreeMap<&str, Vec<Posting>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(collection.len());
        for (doc, seg) in collection.iter().enumerate() {
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &seg.tokens {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (term, count) in tf {
                by_term.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf: count,
                });
            }
            doc_len.push(seg.tokens.len() as u32);
        }
        let avg_len = doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64;
        let (vocab, postings): (Vec<String>, Vec<Vec<Posting>>) = by_term
            .into_iter()
            .map(|(t, p)| (t.to_owned(), p))
            .unzip();
        Ok(Self::assemble(params, vocab, postings, doc_len, avg_len))
    }

    fn assemble(
        params: Bm25Params,
        vocab: Vec<String>,
        postings: Vec<Vec<Posting>>,
        doc_len: Vec<u32>,
        avg_len: f64,
    ) -> Bm25Index {
        let terms = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let Bm25Params { k1, b } = params;
        let tf_weights = postings
            .iter()
            .map(|list| {
                list.iter()
                    .map(|p| {
                        let tf = p.tf as f64;
                        let dl = doc_len[p.doc as usize] as f64;
                        tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avg_len))
                    })
                    .collect()
            })
            .collect();
        Bm25Index {
            params,
            terms,
            vocab,
            postings,
            doc_len,
            avg_len,
            tf_weights,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_len.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_len.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_len(&self, doc: usize) -> u32 {
        self.doc_len[doc]
    }

    pub fn term_id(&self, token: &str) -> Option<u32> {
        self.terms.get(token).copied()
    }

    pub fn postings(&self, token: &str) -> &[Posting] {
        match self.term_id(token) {
            Some(id) => &self.postings[id as usize],
            None => &[],
        }
    }

    pub fn num_terms(&self) -> usize {
        self.vocab.len()
    }

    /// Okapi BM25 idf, `ln(1 + (N - df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, df: usize) -> f64 {
        let n = self.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top-`n` documents by BM25 score, ties by ascending position.
    ///
    /// Each distinct query term contributes once. Documents sharing no term
    /// with the query are never returned.
    pub fn top_n(&self, query: &[Token], n: usize) -> Vec<(usize, f64)> {
        let mut term_ids: Vec<u32> = query.iter().filter_map(|t| self.term_id(t.as_str())).collect();
        term_ids.sort_unstable();
        term_ids.dedup();
        if term_ids.is_empty() || n == 0 {
            return Vec::new();
        }

        let mut scores = vec![0.0f64; self.len()];
        for &term in &term_ids {
            let list = &self.postings[term as usize];
            let idf = self.idf(list.len());
            for (p, w) in list.iter().zip(&self.tf_weights[term as usize]) {
                scores[p.doc as usize] += idf * w;
            }
        }
        let mut touched: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| s > 0.0)
            .collect();

        let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if touched.len() > n {
            touched.select_nth_unstable_by(n - 1, by_rank);
            touched.truncate(n);
        }
        touched.sort_unstable_by(by_rank);
        touched
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u64(self.len() as u64);
        w.f64(self.avg_len);
        w.f64(self.params.k1);
        w.f64(self.params.b);
        w.varint(self.vocab.len() as u64);
        for t in &self.vocab {
            w.str(t);
        }
        for list in &self.postings {
            w.varint(list.len() as u64);
            let mut prev = 0u32;
            for p in list {
                w.varint(u64::from(p.doc - prev));
                w.varint(u64::from(p.tf));
                prev = p.doc;
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Bm25Index> {
        let (mut r, version) = Reader::open(bytes, MAGIC, "BM25 index")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported BM25 index version {version}"
            )));
        }
        let n = r.u64()? as usize;
        let avg_len = r.f64()?;
        let params = Bm25Params {
            k1: r.f64()?,
            b: r.f64()?,
        };
        let n_terms = r.varint()? as usize;
        let vocab = (0..n_terms).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let mut doc_len = vec![0u32; n];
        let mut postings = Vec::with_capacity(n_terms);
        for _ in 0..n_terms {
            let count = r.varint()? as usize;
            let mut list = Vec::with_capacity(count);
            let mut doc = 0u64;
            for i in 0..count {
                let delta = r.varint()?;
                if i > 0 && delta == 0 {
                    return Err(Error::Format("posting list not strictly increasing".into()));
                }
                doc += delta;
                let tf = r.varint()? as u32;
                if doc as usize >= n {
                    return Err(Error::Format(format!("posting doc {doc} >= N = {n}")));
                }
                doc_len[doc as usize] += tf;
                list.push(Posting {
                    doc: doc as u32,
                    tf,
                });
            }
            postings.push(list);
        }
        r.finish()?;
        Ok(Self::assemble(params, vocab, postings, doc_len, avg_len))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Bm25Index> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub k: usize,
    /// `None` rescores the whole collection.
    pub prefilter_n: Option<usize>,
    /// Hits with similarity below this are dropped.
    pub threshold: f64,
    /// Collection segment to skip, for querying a collection with one of its own members.
    pub exclude: Option<SegmentId>,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            k: 3,
            prefilter_n: None,
            threshold: 0.0,
            exclude: None,
        }
    }
}

impl MatchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!(
                "fuzzy threshold {} not in [0, 1]",
                self.threshold
            )));
        }
        if self.prefilter_n == Some(0) {
            return Err(Error::invalid("prefilter size must be at least 1"));
        }
        Ok(())
    }
}

/// Hits for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyMatchResult {
    pub query: SegmentId,
    pub hits: Vec<Hit>,
}

/// A BM25 index bound to the collection it was built from.
#[derive(Debug, Clone)]
pub struct FuzzyMatcher {
    index: Bm25Index,
    ids: Vec<SegmentId>,
    /// Collection tokens as index term ids.
    docs: Vec<Vec<u32>>,
}

const UNKNOWN_TERM: u32 = u32::MAX;

impl FuzzyMatcher {
    pub fn build(collection: &[Segment], params: Bm25Params) -> Result<FuzzyMatcher> {
        let index = Bm25Index::build(collection, params)?;
        Self::new(index, collection)
    }

    /// Binds a (possibly loaded) index to its collection.
    pub fn new(index: Bm25Index, collection: &[Segment]) -> Result<FuzzyMatcher> {
        if index.len() != collection.len() {
            return Err(Error::invalid(format!(
                "index covers {} segments but the collection has {}",
                index.len(),
                collection.len()
            )));
        }
        let mut docs = Vec::with_capacity(collection.len());
        for (pos, seg) in collection.iter().enumerate() {
            let ids: Vec<u32> = seg
                .tokens
                .iter()
                .map(|t| index.term_id(t.as_str()).unwrap_or(UNKNOWN_TERM))
                .collect();
            if ids.contains(&UNKNOWN_TERM) || ids.len() as u32 != index.doc_len(pos) {
                return Err(Error::invalid(format!(
                    "segment {} does not match the index (was the index built from another collection?)",
                    seg.id
                )));
            }
            docs.push(ids);
        }
        Ok(FuzzyMatcher {
            index,
            ids: collection.iter().map(|s| s.id).collect(),
            docs,
        })
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn encode_query(&self, query: &[Token]) -> Vec<u32> {
        query
            .iter()
            .map(|t| self.index.term_id(t.as_str()).unwrap_or(UNKNOWN_TERM))
            .collect()
    }

    /// Best `k` segments by Levenshtein similarity to `query`.
    pub fn search(&self, query: &[Token], opts: &MatchOptions) -> Vec<Hit> {
        let q = self.encode_query(query);
        let mut top = TopK::new(opts.k);
        let mut consider = |pos: usize| {
            let id = self.ids[pos];
            if opts.exclude == Some(id) {
                return;
            }
            let score = levenshtein_similarity(&q, &self.docs[pos]);
            if score >= opts.threshold {
                top.push(Hit { id, score });
            }
        };
        match opts.prefilter_n {
            None => (0..self.docs.len()).for_each(&mut consider),
            Some(n) => self
                .index
                .top_n(query, n)
                .into_iter()
                .for_each(|(pos, _)| consider(pos)),
        }
        top.into_sorted()
    }

    pub fn fuzzy_match(&self, query: &Segment, opts: &MatchOptions) -> Result<FuzzyMatchResult> {
        opts.validate()?;
        Ok(FuzzyMatchResult {
            query: query.id,
            hits: self.search(&query.tokens, opts),
        })
    }

    /// Parallel over queries; output in query order.
    pub fn fuzzy_match_batch(
        &self,
        queries: &[Segment],
        opts: &MatchOptions,
    ) -> Result<Vec<FuzzyMatchResult>> {
        opts.validate()?;
        Ok(queries
            .par_iter()
            .map(|q| FuzzyMatchResult {
                query: q.id,
                hits: self.search(&q.tokens, opts),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hits::rank_order;
    use crate::text::TokenizerConfig;
    use proptest::prelude::*;

    fn collection(texts: &[&str]) -> Vec<Segment> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Segment::new(i as u32, "fr", *t, &TokenizerConfig::default()))
            .collect()
    }

    fn toks(s: &str) -> Vec<Token> {
        crate::text::tokenize(s, &TokenizerConfig::default())
    }

    /// Okapi BM25 written out term by term from the textbook definition.
    fn hand_bm25(docs: &[Vec<&str>], query: &[&str], k1: f64, b: f64) -> Vec<f64> {
        let n = docs.len() as f64;
        let avg = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
        let mut q: Vec<&str> = query.to_vec();
        q.sort();
        q.dedup();
        docs.iter()
            .map(|d| {
                q.iter()
                    .map(|term| {
                        let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
                        let tf = d.iter().filter(|t| *t == term).count() as f64;
                        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avg))
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn singleton_index() {
        let idx = Bm25Index::build(&collection(&["a b"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.avg_len(), 2.0);
        assert_eq!(idx.postings("a"), &[Posting { doc: 0, tf: 1 }]);
        assert_eq!(idx.postings("b"), &[Posting { doc: 0, tf: 1 }]);
    }

    #[test]
    fn empty_collection_rejected() {
        assert!(Bm25Index::build(&[], Bm25Params::default()).is_err());
    }

    #[test]
    fn duplicates_get_distinct_postings() {
        let idx = Bm25Index::build(&collection(&["a b", "a b"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.postings("a").len(), 2);
        let incidences: usize = ["a", "b"].iter().map(|t| idx.postings(t).len()).sum();
        assert_eq!(incidences, 4);
    }

    #[test]
    fn scores_match_hand_formula() {
        let texts = ["the cat sat on the mat", "the dog sat", "a cat and a dog and a bird"];
        let idx = Bm25Index::build(&collection(&texts), Bm25Params::default()).unwrap();
        let docs: Vec<Vec<&str>> = texts.iter().map(|t| t.split(' ').collect()).collect();
        for query in ["cat", "the cat", "dog sat sat", "bird on mat", "the dog sat"] {
            let expected = hand_bm25(&docs, &query.split(' ').collect::<Vec<_>>(), 1.2, 0.75);
            let got = idx.top_n(&toks(query), 10);
            for (pos, score) in &got {
                assert!((score - expected[*pos]).abs() < 1e-12, "{query}: {pos}");
            }
            let nonzero = expected.iter().filter(|s| **s > 0.0).count();
            assert_eq!(got.len(), nonzero, "{query}");
        }
        // The exact copy of document 1 ranks it first.
        assert_eq!(idx.top_n(&toks("the dog sat"), 1)[0].0, 1);
    }

    #[test]
    fn top_n_edge_cases() {
        let idx = Bm25Index::build(&collection(&["a b", "b c", "c d"]), Bm25Params::default())
            .unwrap();
        assert!(idx.top_n(&toks("zzz"), 5).is_empty());
        assert_eq!(idx.top_n(&toks("b"), 10).len(), 2);
        // Equal scores tie-break by position.
        let tied = idx.top_n(&toks("b"), 10);
        assert_eq!(tied[0].1, tied[1].1);
        assert_eq!((tied[0].0, tied[1].0), (0, 1));
    }

    #[test]
    fn binary_round_trip() {
        let coll = collection(&["le chat", "le chien le chat", "un oiseau", ""]);
        let idx = Bm25Index::build(&coll, Bm25Params { k1: 0.9, b: 0.4 }).unwrap();
        let bytes = idx.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Bm25Index::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert!(Bm25Index::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn fuzzy_examples() {
        let coll = collection(&["a b c", "a b d", "x y z"]);
        let m = FuzzyMatcher::build(&coll, Bm25Params::default()).unwrap();
        let q = Segment::new(9, "fr", "a b c", &TokenizerConfig::default());
        let opts = MatchOptions {
            k: 1,
            ..Default::default()
        };
        let r = m.fuzzy_match(&q, &opts).unwrap();
        assert_eq!(r.hits, vec![Hit { id: SegmentId(0), score: 1.0 }]);

        let q = Segment::new(9, "fr", "a b q", &TokenizerConfig::default());
        let strict = MatchOptions {
            threshold: 1.0,
            ..opts
        };
        assert!(m.fuzzy_match(&q, &strict).unwrap().hits.is_empty());

        let self_query = coll[0].clone();
        let excl = MatchOptions {
            k: 3,
            exclude: Some(self_query.id),
            ..Default::default()
        };
        let hits = m.fuzzy_match(&self_query, &excl).unwrap().hits;
        assert_eq!(hits[0].id, SegmentId(1));
        assert!(hits.iter().all(|h| h.id != self_query.id));

        assert!(m
            .fuzzy_match(&q, &MatchOptions { k: 0, ..opts })
            .is_err());
    }

    #[test]
    fn matcher_rejects_foreign_collection() {
        let idx = Bm25Index::build(&collection(&["a b"]), Bm25Params::default()).unwrap();
        assert!(FuzzyMatcher::new(idx.clone(), &collection(&["a c"])).is_err());
        assert!(FuzzyMatcher::new(idx, &collection(&["a b", "a"])).is_err());
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 0..8)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exact_mode_equals_brute_force(
            texts in prop::collection::vec(sentence(), 1..200),
            query in sentence(),
            k in 1usize..5,
            threshold in 0.0f64..=1.0,
        ) {
            let coll: Vec<Segment> = texts.iter().enumerate()
                .map(|(i, t)| Segment::new(i as u32, "fr", t.as_str(), &TokenizerConfig::default()))
                .collect();
            let m = FuzzyMatcher::build(&coll, Bm25Params::default()).unwrap();
            let q = toks(&query);
            let opts = MatchOptions { k, threshold, ..Default::default() };
            let got = m.search(&q, &opts);

            let mut all: Vec<Hit> = coll.iter()
                .map(|s| Hit { id: s.id, score: levenshtein_similarity(&q, &s.tokens) })
                .filter(|h| h.score >= threshold)
                .collect();
            all.sort_by(rank_order);
            all.truncate(k);
            prop_assert_eq!(&got, &all);

            // Raising the threshold never adds hits.
            let stricter = MatchOptions { threshold: (threshold + 0.2).min(1.0), ..opts };
            prop_assert!(m.search(&q, &stricter).len() <= got.len());

            // Growing the pool never lowers the best hit.
            let half = &coll[..coll.len().div_ceil(2)];
            let small = FuzzyMatcher::build(half, Bm25Params::default()).unwrap();
            let best = |hits: &[Hit]| hits.first().map_or(-1.0, |h| h.score);
            prop_assert!(best(&small.search(&q, &opts)) <= best(&got));
        }
    }
}
