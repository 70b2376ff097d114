//! Synthetic corpora for experiments and tests.
//!
//! [`SyntheticLanguages`] produces a pseudo-bilingual corpus: target
//! sentences are frame templates with content-word slots, and each source
//! sentence is a fixed word-for-word relabeling of its target with random
//! edit noise. [`zipf_segments`] produces monolingual text with a Zipfian
//! word distribution, and [`perturb`] derives noisy near-copies from it.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Number of sentence templates.
    pub templates: usize,
    /// Function words shared by the templates.
    pub frame_vocab: usize,
    /// Content words per filler class.
    pub filler_vocab: usize,
    /// Number of filler classes; every slot draws from one class.
    pub filler_classes: usize,
    /// Inclusive range of frame words per template.
    pub frame_len: (usize, usize),
    /// Inclusive range of slots per template.
    pub slots: (usize, usize),
    /// Zipf exponent of the filler distribution.
    pub zipf_exponent: f64,
    /// Per-token edit probability applied when deriving the source side.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            templates: 4,
            frame_vocab: 40,
            filler_vocab: 300,
            filler_classes: 4,
            frame_len: (5, 8),
            slots: (3, 5),
            zipf_exponent: 1.0,
            noise: 0.1,
        }
    }
}

/// One generated sentence with its two derived renderings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticPair {
    /// Pseudo-source: relabeled target with edit noise.
    pub src: String,
    pub tgt: String,
    /// Back-translation of the target: relabeled again with fresh noise.
    pub bt: String,
}

#[derive(Debug, Clone, Copy)]
enum Word {
    Frame(u32),
    /// A slot filled from the given filler class.
    Slot(u32),
}

type Template = Vec<Word>;

#[derive(Debug, Clone)]
pub struct SyntheticLanguages {
    config: SyntheticConfig,
    templates: Vec<Template>,
    /// Target word id to source word id.
    relabel: Vec<u32>,
    fillers: Zipf<f64>,
}

impl SyntheticLanguages {
    pub fn new(config: SyntheticConfig) -> SyntheticLanguages {
        assert!(config.templates > 0 && config.frame_vocab > 0);
        assert!(config.filler_vocab > 0 && config.filler_classes > 0);
        assert!(config.frame_len.0 <= config.frame_len.1 && config.slots.0 <= config.slots.1);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let templates = (0..config.templates)
            .map(|_| {
                let frames = rng.random_range(config.frame_len.0..=config.frame_len.1);
                let slots = rng.random_range(config.slots.0..=config.slots.1);
                let mut t: Template = (0..frames)
                    .map(|_| Word::Frame(rng.random_range(0..config.frame_vocab as u32)))
                    .collect();
                for _ in 0..slots {
                    let at = rng.random_range(0..=t.len());
                    let class = rng.random_range(0..config.filler_classes as u32);
                    t.insert(at, Word::Slot(class));
                }
                t
            })
            .collect();
        let words = (config.frame_vocab + config.filler_vocab * config.filler_classes) as u32;
        let mut relabel: Vec<u32> = (0..words).collect();
        rand::seq::SliceRandom::shuffle(relabel.as_mut_slice(), &mut rng);
        let fillers = Zipf::new(config.filler_vocab as f64, config.zipf_exponent)
            .expect("valid Zipf parameters");
        SyntheticLanguages {
            config,
            templates,
            relabel,
            fillers,
        }
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    fn target_ids(&self, rng: &mut impl Rng) -> Vec<u32> {
        let t = self.templates.choose(rng).expect("at least one template");
        t.iter()
            .map(|w| match *w {
                Word::Frame(f) => f,
                Word::Slot(class) => {
                    let rank = self.fillers.sample(rng) as u32 - 1;
                    (self.config.frame_vocab + class as usize * self.config.filler_vocab) as u32 + rank
                }
            })
            .collect()
    }

    fn words(&self) -> u32 {
        self.relabel.len() as u32
    }

    /// Relabels into the source language, then substitutes, deletes,
    /// inserts or swaps tokens, each with probability `noise / 4`.
    fn to_source(&self, ids: &[u32], rng: &mut impl Rng) -> Vec<u32> {
        let mut out: Vec<u32> = ids.iter().map(|&i| self.relabel[i as usize]).collect();
        edit(&mut out, self.config.noise, self.words(), rng);
        out
    }

    /// `n` pairs drawn from a stream identified by `stream`; distinct
    /// streams of one language pair share templates and vocabularies.
    pub fn generate(&self, n: usize, stream: u64) -> Vec<SyntheticPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        (0..n)
            .map(|_| {
                let tgt = self.target_ids(&mut rng);
                let src = self.to_source(&tgt, &mut rng);
                let bt = self.to_source(&tgt, &mut rng);
                SyntheticPair {
                    src: render(&src, 's'),
                    tgt: render(&tgt, 't'),
                    bt: render(&bt, 's'),
                }
            })
            .collect()
    }
}

fn render(ids: &[u32], prefix: char) -> String {
    let words: Vec<String> = ids.iter().map(|i| format!("{prefix}{i}")).collect();
    words.join(" ")
}

fn edit(tokens: &mut Vec<u32>, rate: f64, alphabet: u32, rng: &mut impl Rng) {
    let mut i = 0;
    while i < tokens.len() {
        if rng.random::<f64>() < rate {
            match rng.random_range(0..4) {
                0 => tokens[i] = rng.random_range(0..alphabet),
                1 if tokens.len() > 1 => {
                    tokens.remove(i);
                    continue;
                }
                2 => {
                    tokens.insert(i, rng.random_range(0..alphabet));
                    i += 1;
                }
                3 if i + 1 < tokens.len() => tokens.swap(i, i + 1),
                _ => {}
            }
        }
        i += 1;
    }
}

/// `n` segments of `len` words (inclusive range) drawn from a Zipfian
/// distribution over `vocab` words.
pub fn zipf_segments(
    n: usize,
    vocab: usize,
    len: (usize, usize),
    exponent: f64,
    seed: u64,
) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(vocab as f64, exponent).expect("valid Zipf parameters");
    (0..n)
        .map(|_| {
            let l = rng.random_range(len.0..=len.1);
            let ids: Vec<u32> = (0..l).map(|_| zipf.sample(&mut rng) as u32 - 1).collect();
            render(&ids, 'w')
        })
        .collect()
}

/// A near-copy of `text` (as produced by [`zipf_segments`]) with each word
/// edited with probability `rate`.
pub fn perturb(text: &str, rate: f64, vocab: usize, rng: &mut impl Rng) -> String {
    let mut ids: Vec<u32> = text
        .split_whitespace()
        .map(|w| w.trim_start_matches('w').parse().unwrap_or(0))
        .collect();
    edit(&mut ids, rate, vocab as u32, rng);
    render(&ids, 'w')
}
