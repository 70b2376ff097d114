//! Parallel corpora and monolingual retrieval pools.
//!
//! Both formats are UTF-8, one record per line:
//!
//! * JSONL: `{"src": .., "tgt": ..}` for parallel data, `{"text": ..}` for a
//!   pool; an optional integer `"id"` may be present.
//! * TSV: `source<TAB>target` for parallel data, a single text column for a pool.
//!
//! Blank lines are skipped.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{levenshtein_similarity, Segment, SegmentId, TokenizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl CorpusFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> CorpusFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => CorpusFormat::Tsv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(Error::invalid(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// Aligned source/target pairs. Pair `i` has id `i` on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub src_lang: String,
    pub tgt_lang: String,
    pub pairs: Vec<(Segment, Segment)>,
}

impl ParallelCorpus {
    /// Builds a corpus from raw text pairs, assigning dense ids.
    pub fn from_pairs<S: AsRef<str>, T: AsRef<str>>(
        src_lang: &str,
        tgt_lang: &str,
        pairs: impl IntoIterator<Item = (S, T)>,
        tokenizer: &TokenizerConfig,
    ) -> ParallelCorpus {
        let pairs = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (s, t))| {
                (
                    Segment::new(i as u32, src_lang, s.as_ref(), tokenizer),
                    Segment::new(i as u32, tgt_lang, t.as_ref(), tokenizer),
                )
            })
            .collect();
        ParallelCorpus {
            src_lang: src_lang.to_owned(),
            tgt_lang: tgt_lang.to_owned(),
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &Segment> {
        self.pairs.iter().map(|(s, _)| s)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Segment> {
        self.pairs.iter().map(|(_, t)| t)
    }

    /// The target side as a pool (same ids).
    pub fn target_pool(&self) -> MonolingualPool {
        MonolingualPool {
            lang: self.tgt_lang.clone(),
            segments: self.targets().cloned().collect(),
        }
    }

    /// The source side as a pool (same ids).
    pub fn source_pool(&self) -> MonolingualPool {
        MonolingualPool {
            lang: self.src_lang.clone(),
            segments: self.sources().cloned().collect(),
        }
    }

    pub fn parse(
        text: &str,
        format: CorpusFormat,
        src_lang: &str,
        tgt_lang: &str,
        tokenizer: &TokenizerConfig,
        origin: &Path,
    ) -> Result<ParallelCorpus> {
        let mut raw_pairs = Vec::new();
        for (lineno, line) in numbered_lines(text) {
            let bad = |message: String| Error::Record {
                path: origin.to_path_buf(),
                line: lineno,
                message,
            };
            let (src, tgt) = match format {
                CorpusFormat::Jsonl => {
                    let rec: JsonRecord = serde_json::from_str(line)
                        .map_err(|e| bad(format!("invalid JSON: {e}")))?;
                    if let Some(id) = rec.id {
                        if id as usize != raw_pairs.len() {
                            return Err(bad(format!(
                                "id {id} out of order, expected {}",
                                raw_pairs.len()
                            )));
                        }
                    }
                    let src = rec.src.ok_or_else(|| bad("missing field \"src\"".into()))?;
                    let tgt = rec.tgt.ok_or_else(|| bad("missing field \"tgt\"".into()))?;
                    (src, tgt)
                }
                CorpusFormat::Tsv => {
                    let mut cols = line.split('\t');
                    let src = cols.next().unwrap_or_default();
                    let tgt = cols
                        .next()
                        .ok_or_else(|| bad("missing target column".into()))?;
                    if cols.next().is_some() {
                        return Err(bad("expected 2 tab-separated columns".into()));
                    }
                    (src.to_owned(), tgt.to_owned())
                }
            };
            if src.trim().is_empty() {
                return Err(bad("empty source text".into()));
            }
            if tgt.trim().is_empty() {
                return Err(bad("empty target text".into()));
            }
            raw_pairs.push((src, tgt));
        }
        if raw_pairs.is_empty() {
            return Err(Error::Empty(origin.display().to_string()));
        }
        Ok(ParallelCorpus::from_pairs(
            src_lang, tgt_lang, raw_pairs, tokenizer,
        ))
    }

    pub fn load(
        path: &Path,
        format: CorpusFormat,
        src_lang: &str,
        tgt_lang: &str,
        tokenizer: &TokenizerConfig,
    ) -> Result<ParallelCorpus> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, format, src_lang, tgt_lang, tokenizer, path)
    }

    pub fn render(&self, format: CorpusFormat) -> Result<String> {
        let mut out = String::new();
        for (s, t) in &self.pairs {
            match format {
                CorpusFormat::Jsonl => {
                    let rec = JsonRecord {
                        id: Some(s.id.0),
                        src: Some(s.raw.clone()),
                        tgt: Some(t.raw.clone()),
                        text: None,
                    };
                    out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                }
                CorpusFormat::Tsv => {
                    check_tsv_field(&s.raw)?;
                    check_tsv_field(&t.raw)?;
                    out.push_str(&s.raw);
                    out.push('\t');
                    out.push_str(&t.raw);
                }
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, format: CorpusFormat) -> Result<()> {
        write_file(path, self.render(format)?.as_bytes())
    }

    /// Shuffles and partitions into train/valid/test, renumbering each part densely.
    ///
    /// Valid and test sizes are `floor(N * fraction)` (at least one each); the
    /// remainder goes to train.
    pub fn split(
        &self,
        fractions: (f64, f64, f64),
        seed: u64,
    ) -> Result<(ParallelCorpus, ParallelCorpus, ParallelCorpus)> {
        let (ftrain, fvalid, ftest) = fractions;
        if [ftrain, fvalid, ftest].iter().any(|f| !(*f > 0.0)) {
            return Err(Error::invalid("split fractions must be positive"));
        }
        if ((ftrain + fvalid + ftest) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions sum to {}, expected 1",
                ftrain + fvalid + ftest
            )));
        }
        let n = self.len();
        if n < 3 {
            return Err(Error::invalid(format!(
                "cannot split a corpus of {n} pairs into three parts"
            )));
        }
        let size = |f: f64| ((n as f64 * f + 1e-9).floor() as usize).max(1);
        let n_valid = size(fvalid);
        let n_test = size(ftest);
        if n_valid + n_test >= n {
            return Err(Error::invalid("split leaves no training pairs"));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (valid_idx, rest) = order.split_at(n_valid);
        let (test_idx, train_idx) = rest.split_at(n_test);

        let take = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            let pairs = idx
                .iter()
                .enumerate()
                .map(|(new_id, &old)| {
                    let (mut s, mut t) = self.pairs[old].clone();
                    s.id = SegmentId(new_id as u32);
                    t.id = SegmentId(new_id as u32);
                    (s, t)
                })
                .collect();
            ParallelCorpus {
                src_lang: self.src_lang.clone(),
                tgt_lang: self.tgt_lang.clone(),
                pairs,
            }
        };
        Ok((take(train_idx), take(valid_idx), take(test_idx)))
    }
}

/// Target-language segments used as a retrieval pool. Ids need not be dense.
#[derive(Debug, Clone, PartialEq)]
pub struct MonolingualPool {
    pub lang: String,
    pub segments: Vec<Segment>,
}

impl MonolingualPool {
    pub fn from_texts<S: AsRef<str>>(
        lang: &str,
        texts: impl IntoIterator<Item = S>,
        tokenizer: &TokenizerConfig,
    ) -> MonolingualPool {
        MonolingualPool {
            lang: lang.to_owned(),
            segments: texts
                .into_iter()
                .enumerate()
                .map(|(i, t)| Segment::new(i as u32, lang, t.as_ref(), tokenizer))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn get(&self, id: SegmentId) -> Option<&Segment> {
        // Fast path for dense ids.
        match self.segments.get(id.0 as usize) {
            Some(s) if s.id == id => Some(s),
            _ => self.segments.iter().find(|s| s.id == id),
        }
    }

    /// Map from id to position, for pools with gaps in their ids.
    pub fn positions(&self) -> HashMap<SegmentId, usize> {
        self.segments
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id, i))
            .collect()
    }

    pub fn parse(
        text: &str,
        format: CorpusFormat,
        lang: &str,
        tokenizer: &TokenizerConfig,
        origin: &Path,
    ) -> Result<MonolingualPool> {
        let mut segments: Vec<Segment> = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in numbered_lines(text) {
            let bad = |message: String| Error::Record {
                path: origin.to_path_buf(),
                line: lineno,
                message,
            };
            let (id, raw) = match format {
                CorpusFormat::Jsonl => {
                    let rec: JsonRecord = serde_json::from_str(line)
                        .map_err(|e| bad(format!("invalid JSON: {e}")))?;
                    let raw = rec.text.ok_or_else(|| bad("missing field \"text\"".into()))?;
                    (rec.id.unwrap_or(segments.len() as u32), raw)
                }
                CorpusFormat::Tsv => {
                    if line.contains('\t') {
                        return Err(bad("expected a single text column".into()));
                    }
                    (segments.len() as u32, line.to_owned())
                }
            };
            if !seen.insert(id) {
                return Err(bad(format!("duplicate id {id}")));
            }
            segments.push(Segment::new(id, lang, raw, tokenizer));
        }
        if segments.is_empty() {
            return Err(Error::Empty(origin.display().to_string()));
        }
        Ok(MonolingualPool {
            lang: lang.to_owned(),
            segments,
        })
    }

    pub fn load(
        path: &Path,
        format: CorpusFormat,
        lang: &str,
        tokenizer: &TokenizerConfig,
    ) -> Result<MonolingualPool> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, format, lang, tokenizer, path)
    }

    /// TSV output drops ids; reloading it renumbers densely.
    pub fn render(&self, format: CorpusFormat) -> Result<String> {
        let mut out = String::new();
        for s in &self.segments {
            match format {
                CorpusFormat::Jsonl => {
                    let rec = JsonRecord {
                        id: Some(s.id.0),
                        src: None,
                        tgt: None,
                        text: Some(s.raw.clone()),
                    };
                    out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                }
                CorpusFormat::Tsv => {
                    check_tsv_field(&s.raw)?;
                    out.push_str(&s.raw);
                }
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, format: CorpusFormat) -> Result<()> {
        write_file(path, self.render(format)?.as_bytes())
    }
}

/// Removes near-duplicates of held-out segments from a pool.
///
/// A pool segment is dropped when its Levenshtein similarity to its best
/// match among `held_out` is strictly greater than `threshold`. Exact
/// duplicate raw strings inside the pool are dropped as well (first
/// occurrence kept). Surviving segments keep their ids and order.
///
/// Candidates are generated from an inverted index over `held_out`; a
/// held-out segment is only rescored when the multiset token overlap bound
/// `overlap / max(len)` exceeds the threshold, so no qualifying match is missed.
pub fn decontaminate(
    pool: &MonolingualPool,
    held_out: &[Segment],
    threshold: f64,
) -> Result<MonolingualPool> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "decontamination threshold {threshold} not in [0, 1]"
        )));
    }

    let mut vocab: HashMap<&str, u32> = HashMap::new();
    let held = intern(held_out, &mut vocab);
    let docs = intern(&pool.segments, &mut vocab);

    // token -> [(held-out position, count)]
    let mut postings: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
    for (h, toks) in held.iter().enumerate() {
        for (tok, count) in counts(toks) {
            postings.entry(tok).or_default().push((h as u32, count));
        }
    }
    let has_empty_held = held.iter().any(Vec::is_empty);

    let contaminated: Vec<bool> = docs
        .par_iter()
        .map_init(
            || (vec![0u32; held.len()], Vec::<u32>::new()),
            |(overlap, touched), doc| {
                if doc.is_empty() {
                    // Lev(empty, empty) = 1, Lev(empty, non-empty) = 0.
                    return has_empty_held && threshold < 1.0;
                }
                for (tok, count) in counts(doc) {
                    if let Some(list) = postings.get(&tok) {
                        for &(h, hc) in list {
                            if overlap[h as usize] == 0 {
                                touched.push(h);
                            }
                            overlap[h as usize] += count.min(hc);
                        }
                    }
                }
                let mut hit = false;
                for &h in touched.iter() {
                    let other = &held[h as usize];
                    let bound = overlap[h as usize] as f64 / doc.len().max(other.len()) as f64;
                    if !hit && bound > threshold && levenshtein_similarity(doc, other) > threshold {
                        hit = true;
                    }
                    overlap[h as usize] = 0;
                }
                touched.clear();
                hit
            },
        )
        .collect();

    let mut seen_raw = HashSet::new();
    let segments = pool
        .segments
        .iter()
        .zip(contaminated)
        .filter(|(s, dirty)| !dirty && seen_raw.insert(s.raw.as_str()))
        .map(|(s, _)| s.clone())
        .collect();
    Ok(MonolingualPool {
        lang: pool.lang.clone(),
        segments,
    })
}

fn intern<'a>(segments: &'a [Segment], vocab: &mut HashMap<&'a str, u32>) -> Vec<Vec<u32>> {
    segments
        .iter()
        .map(|s| {
            s.tokens
                .iter()
                .map(|t| {
                    let next = vocab.len() as u32;
                    *vocab.entry(t.as_str()).or_insert(next)
                })
                .collect()
        })
        .collect()
}

fn counts(tokens: &[u32]) -> Vec<(u32, u32)> {
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    let mut out: Vec<(u32, u32)> = Vec::new();
    for t in sorted {
        match out.last_mut() {
            Some((last, c)) if *last == t => *c += 1,
            _ => out.push((t, 1)),
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tgt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

pub(crate) fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn check_tsv_field(s: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        Err(Error::invalid(format!(
            "text {s:?} contains a tab or newline and cannot be written as TSV"
        )))
    } else {
        Ok(())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> TokenizerConfig {
        TokenizerConfig::default()
    }

    fn pool(texts: &[&str]) -> MonolingualPool {
        MonolingualPool::from_texts("fr", texts.iter().copied(), &cfg())
    }

    fn segs(texts: &[&str]) -> Vec<Segment> {
        pool(texts).segments
    }

    fn parse_parallel(text: &str, format: CorpusFormat) -> Result<ParallelCorpus> {
        ParallelCorpus::parse(text, format, "en", "fr", &cfg(), Path::new("mem"))
    }

    #[test]
    fn jsonl_and_tsv_agree() {
        let a = parse_parallel("{\"src\": \"hello\", \"tgt\": \"bonjour\"}\n", CorpusFormat::Jsonl)
            .unwrap();
        let b = parse_parallel("hello\tbonjour\n", CorpusFormat::Tsv).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs[0].0.tokens.len(), 1);
        assert_eq!(a.pairs[0].1.tokens.len(), 1);
        assert_eq!(a.pairs[0].1.id, SegmentId(0));
    }

    #[test]
    fn missing_field_names_line() {
        let text = "{\"src\": \"a\", \"tgt\": \"b\"}\n{\"src\": \"c\"}\n";
        match parse_parallel(text, CorpusFormat::Jsonl) {
            Err(Error::Record { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("tgt"), "{message}");
            }
            other => panic!("expected record error, got {other:?}"),
        }
        match parse_parallel("a\tb\nc\n", CorpusFormat::Tsv) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected record error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(
            parse_parallel("\n\n", CorpusFormat::Jsonl),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            MonolingualPool::parse("", CorpusFormat::Tsv, "fr", &cfg(), Path::new("p")),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn pool_keeps_explicit_ids() {
        let p = MonolingualPool::parse(
            "{\"id\": 4, \"text\": \"a b\"}\n{\"id\": 9, \"text\": \"c\"}\n",
            CorpusFormat::Jsonl,
            "fr",
            &cfg(),
            Path::new("p"),
        )
        .unwrap();
        assert_eq!(p.segments[1].id, SegmentId(9));
        assert_eq!(p.get(SegmentId(9)).unwrap().raw, "c");
        assert!(p.get(SegmentId(1)).is_none());
        let dup = MonolingualPool::parse(
            "{\"id\": 4, \"text\": \"a\"}\n{\"id\": 4, \"text\": \"c\"}\n",
            CorpusFormat::Jsonl,
            "fr",
            &cfg(),
            Path::new("p"),
        );
        assert!(matches!(dup, Err(Error::Record { line: 2, .. })));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let corpus = ParallelCorpus::from_pairs(
            "en",
            "fr",
            (0..10).map(|i| (format!("s{i}"), format!("t{i}"))),
            &cfg(),
        );
        let (tr, va, te) = corpus.split((0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        let again = corpus.split((0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr.clone(), va.clone(), te.clone()), again);

        let mut all: Vec<String> = [&tr, &va, &te]
            .iter()
            .flat_map(|c| c.pairs.iter().map(|(s, _)| s.raw.clone()))
            .collect();
        all.sort();
        let mut expected: Vec<String> = corpus.pairs.iter().map(|(s, _)| s.raw.clone()).collect();
        expected.sort();
        assert_eq!(all, expected);
        for part in [&tr, &va, &te] {
            for (i, (s, t)) in part.pairs.iter().enumerate() {
                assert_eq!(s.id.0 as usize, i);
                assert_eq!(t.id, s.id);
            }
        }

        assert!(corpus.split((0.5, 0.5, 0.5), 7).is_err());
        let tiny = ParallelCorpus::from_pairs("en", "fr", [("a", "b"), ("c", "d")], &cfg());
        assert!(tiny.split((0.8, 0.1, 0.1), 7).is_err());
    }

    #[test]
    fn decontaminate_examples() {
        let held = segs(&["le chat est sur le tapis"]);
        let p = pool(&[
            "le chat est sur le tapis",
            "le chien dort",
            // Lev = 0.5 against the held-out sentence (3 substitutions out of 6)
            "le chat mange sous un tapis",
        ]);
        assert_eq!(
            levenshtein_similarity(&p.segments[2].tokens, &held[0].tokens),
            0.5
        );
        let clean = decontaminate(&p, &held, 0.9).unwrap();
        let kept: Vec<&str> = clean.segments.iter().map(|s| s.raw.as_str()).collect();
        assert_eq!(kept, ["le chien dort", "le chat mange sous un tapis"]);
        assert_eq!(clean.segments[0].id, SegmentId(1));
    }

    #[test]
    fn threshold_one_only_dedups() {
        let held = segs(&["a b c"]);
        let p = pool(&["a b c", "x y", "x y", "a b c"]);
        let clean = decontaminate(&p, &held, 1.0).unwrap();
        let kept: Vec<&str> = clean.segments.iter().map(|s| s.raw.as_str()).collect();
        assert_eq!(kept, ["a b c", "x y"]);
    }

    #[test]
    fn empty_segments() {
        let mut p = pool(&["a", "b"]);
        p.segments.push(Segment::new(2, "fr", "", &cfg()));
        let clean = decontaminate(&p, &segs(&[""]), 0.9).unwrap();
        assert_eq!(clean.len(), 2);
        let clean = decontaminate(&p, &segs(&["a"]), 0.9).unwrap();
        assert_eq!(clean.len(), 2);
        assert_eq!(clean.segments[1].raw, "");
    }

    fn full_scan_contaminated(p: &MonolingualPool, held: &[Segment], t: f64) -> Vec<bool> {
        p.segments
            .iter()
            .map(|s| {
                held.iter()
                    .any(|h| levenshtein_similarity(&s.tokens, &h.tokens) > t)
            })
            .collect()
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..7)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn matches_full_scan_and_is_idempotent(
            pool_texts in prop::collection::vec(sentence(), 1..25),
            held_texts in prop::collection::vec(sentence(), 1..6),
            t in 0.0f64..=1.0,
        ) {
            let p = MonolingualPool::from_texts("fr", &pool_texts, &cfg());
            let held = MonolingualPool::from_texts("fr", &held_texts, &cfg()).segments;
            let once = decontaminate(&p, &held, t).unwrap();

            let dirty = full_scan_contaminated(&p, &held, t);
            let mut seen = HashSet::new();
            let expected: Vec<&Segment> = p.segments.iter().zip(&dirty)
                .filter(|(s, d)| !**d && seen.insert(s.raw.clone()))
                .map(|(s, _)| s)
                .collect();
            prop_assert_eq!(once.segments.iter().collect::<Vec<_>>(), expected);

            let twice = decontaminate(&once, &held, t).unwrap();
            prop_assert_eq!(&once, &twice);

            // A lower threshold removes a superset.
            let lower = decontaminate(&p, &held, t * 0.5).unwrap();
            let kept: HashSet<SegmentId> = once.segments.iter().map(|s| s.id).collect();
            prop_assert!(lower.segments.iter().all(|s| kept.contains(&s.id)));
        }

        #[test]
        fn save_load_round_trip(texts in prop::collection::vec("[a-z ,.]{1,20}", 1..10)) {
            let texts: Vec<String> = texts.into_iter().filter(|t| !t.trim().is_empty()).collect();
            prop_assume!(!texts.is_empty());
            let corpus = ParallelCorpus::from_pairs(
                "en", "fr", texts.iter().map(|t| (t.clone(), t.to_uppercase())), &cfg());
            for format in [CorpusFormat::Jsonl, CorpusFormat::Tsv] {
                let first = corpus.render(format).unwrap();
                let reloaded = parse_parallel(&first, format).unwrap();
                prop_assert_eq!(&reloaded, &corpus);
                prop_assert_eq!(reloaded.render(format).unwrap(), first);
            }
            let p = MonolingualPool::from_texts("fr", &texts, &cfg());
            for format in [CorpusFormat::Jsonl, CorpusFormat::Tsv] {
                let first = p.render(format).unwrap();
                let reloaded = MonolingualPool::parse(&first, format, "fr", &cfg(), Path::new("p")).unwrap();
                prop_assert_eq!(&reloaded, &p);
                prop_assert_eq!(reloaded.render(format).unwrap(), first);
            }
        }
    }
}
