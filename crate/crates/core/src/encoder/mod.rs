//! A small dual encoder with hand-written gradients.
//!
//! A sentence is embedded as
//!
//! ```text
//! h = mean(emb[t] for t in tokens)
//! u = tanh(W h + c)
//! e = u / |u|
//! ```
//!
//! and two segments are compared with `sim(x, y) = e(x) · e(y)`, the cosine
//! similarity of the unit vectors. Source and target language share the
//! same parameters and vocabulary.
//!
//! The parameters also carry the slope `a` and position `b` of the
//! cosine-to-Levenshtein mapping (see [`mapping_f`]) and two linear
//! bag-of-words heads used by the `contrastive+bow` objective.

mod loss;
mod train;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::corpus::write_file;
use crate::error::{Error, Result};
use crate::text::{tokenize, Segment, Token, TokenizerConfig};

pub use loss::{
    loss_bow, loss_contrastive, loss_rank, loss_regression, mapping_f, ErrKind, CLAMP_EPS,
};
pub use train::{
    train, validation_ndcg, Candidate, Objective, TrainConfig, TrainHistory, TrainingExample,
};

pub const UNK: &str = "<unk>";

/// Token to row mapping. Row 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Every distinct token of `segments`, sorted, after the unknown token.
    pub fn build<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> Vocab {
        let mut set = BTreeSet::new();
        for s in segments {
            for t in &s.tokens {
                set.insert(t.as_str());
            }
        }
        set.remove(UNK);
        let tokens = std::iter::once(UNK.to_owned())
            .chain(set.into_iter().map(str::to_owned))
            .collect();
        Self::from_tokens(tokens).expect("sorted tokens are unique")
    }

    /// `tokens[0]` must be the unknown token.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Format(format!("vocabulary must start with {UNK}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Row ids of a token sequence; an empty sequence becomes `[UNK]`.
    pub fn ids(&self, tokens: &[Token]) -> Vec<u32> {
        if tokens.is_empty() {
            return vec![0];
        }
        tokens.iter().map(|t| self.id(t.as_str())).collect()
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.random_range(-scale..scale))
                .collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Learning-rate group of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Embeddings, projection and bag-of-words heads.
    Network,
    /// The mapping slope and position.
    Mapping,
}

/// All trainable tensors. Also used, zero-initialized, as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `V × d` token embeddings.
    pub emb: Matrix,
    /// `d × d`, output by input.
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
    pub a: f64,
    pub b: f64,
    /// `d × V` head predicting target words from a source embedding.
    pub bow_src: Matrix,
    pub bow_src_bias: Vec<f64>,
    /// `d × V` head predicting source words from a target embedding.
    pub bow_tgt: Matrix,
    pub bow_tgt_bias: Vec<f64>,
}

pub type Gradients = Weights;

impl Weights {
    pub fn zeros(vocab: usize, dim: usize) -> Weights {
        Weights {
            emb: Matrix::zeros(vocab, dim),
            proj: Matrix::zeros(dim, dim),
            proj_bias: vec![0.0; dim],
            a: 0.0,
            b: 0.0,
            bow_src: Matrix::zeros(dim, vocab),
            bow_src_bias: vec![0.0; vocab],
            bow_tgt: Matrix::zeros(dim, vocab),
            bow_tgt_bias: vec![0.0; vocab],
        }
    }

    pub fn zeros_like(&self) -> Weights {
        Weights::zeros(self.vocab_size(), self.dim())
    }

    pub fn random(vocab: usize, dim: usize, seed: u64) -> Weights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan = (3.0 / dim as f64).sqrt();
        Weights {
            emb: Matrix::uniform(vocab, dim, 1.0, &mut rng),
            proj: Matrix::uniform(dim, dim, fan, &mut rng),
            proj_bias: vec![0.0; dim],
            a: 1.0,
            b: 0.0,
            bow_src: Matrix::uniform(dim, vocab, fan, &mut rng),
            bow_src_bias: vec![0.0; vocab],
            bow_tgt: Matrix::uniform(dim, vocab, fan, &mut rng),
            bow_tgt_bias: vec![0.0; vocab],
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.rows
    }

    pub fn vocab_size(&self) -> usize {
        self.emb.rows
    }

    pub fn tensors(&self) -> [(&[f64], ParamGroup); 9] {
        use ParamGroup::*;
        [
            (&self.emb.data, Network),
            (&self.proj.data, Network),
            (&self.proj_bias, Network),
            (std::slice::from_ref(&self.a), Mapping),
            (std::slice::from_ref(&self.b), Mapping),
            (&self.bow_src.data, Network),
            (&self.bow_src_bias, Network),
            (&self.bow_tgt.data, Network),
            (&self.bow_tgt_bias, Network),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&mut [f64], ParamGroup); 9] {
        use ParamGroup::*;
        [
            (&mut self.emb.data, Network),
            (&mut self.proj.data, Network),
            (&mut self.proj_bias, Network),
            (std::slice::from_mut(&mut self.a), Mapping),
            (std::slice::from_mut(&mut self.b), Mapping),
            (&mut self.bow_src.data, Network),
            (&mut self.bow_src_bias, Network),
            (&mut self.bow_tgt.data, Network),
            (&mut self.bow_tgt_bias, Network),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(t, _)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(t, _)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Weights) {
        for ((dst, _), (src, _)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (t, _) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn fill_zero(&mut self) {
        for (t, _) in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Encoded {
    ids: Vec<u32>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    norm: f64,
    pub out: Vec<f64>,
}

/// Vocabulary, weights, the tokenizer the vocabulary was built with, and a
/// free-form echo of the configuration that produced the checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub vocab: Vocab,
    pub weights: Weights,
    pub tokenizer: TokenizerConfig,
    pub echo: serde_json::Value,
}

const CKPT_MAGIC: &[u8; 8] = b"TMCCKPT\n";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dim: usize,
    tokenizer: TokenizerConfig,
    #[serde(default)]
    echo: serde_json::Value,
}

impl EncoderParams {
    pub fn init(vocab: Vocab, dim: usize, tokenizer: TokenizerConfig, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        let weights = Weights::random(vocab.len(), dim, seed);
        Ok(EncoderParams {
            vocab,
            weights,
            tokenizer,
            echo: serde_json::Value::Null,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub(crate) fn forward(&self, tokens: &[Token]) -> Encoded {
        self.forward_ids(self.vocab.ids(tokens))
    }

    pub(crate) fn forward_ids(&self, ids: Vec<u32>) -> Encoded {
        let w = &self.weights;
        let d = w.dim();
        let mut pooled = vec![0.0; d];
        for &id in &ids {
            for (p, e) in pooled.iter_mut().zip(w.emb.row(id as usize)) {
                *p += e;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);

        let hidden: Vec<f64> = (0..d)
            .map(|i| {
                let z = w.proj_bias[i] + dot(w.proj.row(i), &pooled);
                z.tanh()
            })
            .collect();
        let norm = dot(&hidden, &hidden).sqrt();
        let out = if norm > 1e-300 {
            hidden.iter().map(|h| h / norm).collect()
        } else {
            // tanh output exactly zero: fall back to a fixed unit vector
            let mut e = vec![0.0; d];
            e[0] = 1.0;
            e
        };
        Encoded {
            ids,
            pooled,
            hidden,
            norm,
            out,
        }
    }

    /// Accumulates the gradient of a loss with respect to the network
    /// weights, given its gradient `grad_out` with respect to the unit output.
    pub(crate) fn backward(&self, enc: &Encoded, grad_out: &[f64], grads: &mut Gradients) {
        if enc.norm <= 1e-300 {
            return;
        }
        let w = &self.weights;
        let d = w.dim();
        let proj_out = dot(&enc.out, grad_out);
        let mut grad_z = vec![0.0; d];
        for i in 0..d {
            let grad_hidden = (grad_out[i] - enc.out[i] * proj_out) / enc.norm;
            grad_z[i] = grad_hidden * (1.0 - enc.hidden[i] * enc.hidden[i]);
        }
        let mut grad_pooled = vec![0.0; d];
        for (i, &gz) in grad_z.iter().enumerate() {
            if gz == 0.0 {
                continue;
            }
            grads.proj_bias[i] += gz;
            let g_row = grads.proj.row_mut(i);
            for (g, p) in g_row.iter_mut().zip(&enc.pooled) {
                *g += gz * p;
            }
            for (gp, wij) in grad_pooled.iter_mut().zip(w.proj.row(i)) {
                *gp += gz * wij;
            }
        }
        let inv = 1.0 / enc.ids.len() as f64;
        for &id in &enc.ids {
            for (g, gp) in grads.emb.row_mut(id as usize).iter_mut().zip(&grad_pooled) {
                *g += gp * inv;
            }
        }
    }

    /// Unit-norm embedding of a segment.
    pub fn encode(&self, seg: &Segment) -> Vec<f64> {
        self.forward(&seg.tokens).out
    }

    /// Tokenizes with the checkpoint's tokenizer, then encodes.
    pub fn encode_text(&self, raw: &str) -> Vec<f64> {
        self.forward(&tokenize(raw, &self.tokenizer)).out
    }

    /// Cosine similarity of two segments.
    pub fn sim(&self, x: &Segment, y: &Segment) -> f64 {
        dot(&self.encode(x), &self.encode(y))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let w = &self.weights;
        let mut out = Writer::new(CKPT_MAGIC, CKPT_VERSION);
        let header = CheckpointHeader {
            dim: w.dim(),
            tokenizer: self.tokenizer,
            echo: self.echo.clone(),
        };
        out.str(&serde_json::to_string(&header).expect("header serializes"));
        out.varint(self.vocab.len() as u64);
        for t in &self.vocab.tokens {
            out.str(t);
        }
        for (t, _) in w.tensors() {
            out.f64s(t);
        }
        out.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EncoderParams> {
        let (mut r, version) = Reader::open(bytes, CKPT_MAGIC, "encoder checkpoint")?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header: CheckpointHeader = serde_json::from_str(&r.str()?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let n = r.varint()? as usize;
        let tokens = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_tokens(tokens)?;
        if header.dim == 0 {
            return Err(Error::Format("checkpoint dimension is zero".into()));
        }
        let mut weights = Weights::zeros(vocab.len(), header.dim);
        for (t, _) in weights.tensors_mut() {
            let vals = r.f64s(t.len())?;
            t.copy_from_slice(&vals);
        }
        r.finish()?;
        if !weights.is_finite() {
            return Err(Error::Format("checkpoint contains non-finite weights".into()));
        }
        Ok(EncoderParams {
            vocab,
            weights,
            tokenizer: header.tokenizer,
            echo: header.echo,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<EncoderParams> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
