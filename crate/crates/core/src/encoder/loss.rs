//! Training objectives and their gradients.
//!
//! Every public loss returns `(loss, gradients)` where the gradient buffer
//! has the shape of [`Weights`]. The `*_into` variants accumulate into a
//! caller-owned buffer and are what the trainer uses.

use serde::{Deserialize, Serialize};

use super::{dot, EncoderParams, Encoded, Gradients, Weights};
use crate::error::{Error, Result};
use crate::text::Segment;

/// Cosines are clamped to `[-1 + ε, 1 - ε]` before `atanh`.
pub const CLAMP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrKind {
    #[serde(rename = "MSE")]
    Mse,
    #[serde(rename = "MAE")]
    Mae,
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn clamp_cos(t: f64) -> f64 {
    t.clamp(-1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS)
}

/// `σ(a · atanh(t) + b)`, mapping a cosine in `[-1, 1]` to `(0, 1)`.
///
/// Strictly increasing in `t` when `a > 0`. `t` is clamped first so the
/// mapping stays finite for identical segments.
pub fn mapping_f(a: f64, b: f64, t: f64) -> f64 {
    sigmoid(a * clamp_cos(t).atanh() + b)
}

struct RegressionTerm {
    loss: f64,
    d_sim: f64,
    d_a: f64,
    d_b: f64,
}

fn regression_term(a: f64, b: f64, sim: f64, target: f64, err: ErrKind) -> RegressionTerm {
    let t = clamp_cos(sim);
    let u = t.atanh();
    let f = sigmoid(a * u + b);
    let diff = f - target;
    let (loss, d_f) = match err {
        ErrKind::Mse => (diff * diff, 2.0 * diff),
        ErrKind::Mae => (diff.abs(), if diff == 0.0 { 0.0 } else { diff.signum() }),
    };
    let d_s = d_f * f * (1.0 - f);
    let inside = t == sim;
    RegressionTerm {
        loss,
        d_sim: if inside { d_s * a / (1.0 - t * t) } else { 0.0 },
        d_a: d_s * u,
        d_b: d_s,
    }
}

fn check_lev(lev: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lev) {
        Ok(())
    } else {
        Err(Error::invalid(format!("Levenshtein target {lev} not in [0, 1]")))
    }
}

/// Sum over candidates of `Err(f(sim(x, ỹ)), lev)`.
pub(crate) fn regression_into(
    params: &EncoderParams,
    x: &Segment,
    candidates: &[(&Segment, f64)],
    err: ErrKind,
    grads: &mut Gradients,
) -> f64 {
    let ex = params.forward(&x.tokens);
    let d = params.dim();
    let mut grad_x = vec![0.0; d];
    let mut total = 0.0;
    for &(cand, lev) in candidates {
        let ec = params.forward(&cand.tokens);
        let sim = dot(&ex.out, &ec.out);
        let term = regression_term(params.weights.a, params.weights.b, sim, lev, err);
        total += term.loss;
        grads.a += term.d_a;
        grads.b += term.d_b;
        if term.d_sim != 0.0 {
            let grad_c: Vec<f64> = ex.out.iter().map(|v| term.d_sim * v).collect();
            params.backward(&ec, &grad_c, grads);
            for (g, v) in grad_x.iter_mut().zip(&ec.out) {
                *g += term.d_sim * v;
            }
        }
    }
    params.backward(&ex, &grad_x, grads);
    total
}

/// Metric-learning loss `Err(f(sim(x, ỹ)), Lev(y, ỹ))` for one candidate.
pub fn loss_regression(
    params: &EncoderParams,
    x: &Segment,
    candidate: &Segment,
    lev_target: f64,
    err: ErrKind,
) -> Result<(f64, Gradients)> {
    check_lev(lev_target)?;
    let mut grads = params.weights.zeros_like();
    let loss = regression_into(params, x, &[(candidate, lev_target)], err, &mut grads);
    Ok((loss, grads))
}

fn check_ranked(candidates: &[(&Segment, f64)]) -> Result<()> {
    if candidates.len() < 2 {
        return Err(Error::invalid(format!(
            "rank loss needs at least 2 candidates, got {}",
            candidates.len()
        )));
    }
    for &(_, lev) in candidates {
        check_lev(lev)?;
    }
    if candidates.windows(2).any(|w| w[0].1 < w[1].1) {
        return Err(Error::invalid(
            "rank loss candidates must be sorted by decreasing Levenshtein similarity",
        ));
    }
    Ok(())
}

pub(crate) fn rank_into(
    params: &EncoderParams,
    x: &Segment,
    candidates: &[(&Segment, f64)],
    margin: f64,
    grads: &mut Gradients,
) -> f64 {
    let ex = params.forward(&x.tokens);
    let encs: Vec<Encoded> = candidates
        .iter()
        .map(|(c, _)| params.forward(&c.tokens))
        .collect();
    let sims: Vec<f64> = encs.iter().map(|e| dot(&ex.out, &e.out)).collect();

    let mut d_sims = vec![0.0; sims.len()];
    let mut total = 0.0;
    // i ranks below j; its similarity should trail by the adaptive margin.
    for i in 0..sims.len() {
        for j in 0..i {
            let gap = margin * (candidates[i].1 - candidates[j].1).abs();
            let u = sims[i] - sims[j] + gap;
            if u > 0.0 {
                total += u;
                d_sims[i] += 1.0;
                d_sims[j] -= 1.0;
            }
        }
    }

    let d = params.dim();
    let mut grad_x = vec![0.0; d];
    for (enc, &ds) in encs.iter().zip(&d_sims) {
        if ds == 0.0 {
            continue;
        }
        let grad_c: Vec<f64> = ex.out.iter().map(|v| ds * v).collect();
        params.backward(enc, &grad_c, grads);
        for (g, v) in grad_x.iter_mut().zip(&enc.out) {
            *g += ds * v;
        }
    }
    params.backward(&ex, &grad_x, grads);
    total
}

/// Pairwise hinge with adaptive margin over candidates sorted by
/// decreasing Levenshtein similarity:
///
/// ```text
/// Σ_{i > j} max(0, sim(x, ỹ_i) - sim(x, ỹ_j) + m · |lev_i - lev_j|)
/// ```
///
/// Unsorted input or fewer than two candidates is an error.
pub fn loss_rank(
    params: &EncoderParams,
    x: &Segment,
    candidates: &[(&Segment, f64)],
    margin: f64,
) -> Result<(f64, Gradients)> {
    check_ranked(candidates)?;
    let mut grads = params.weights.zeros_like();
    let loss = rank_into(params, x, candidates, margin, &mut grads);
    Ok((loss, grads))
}

pub(crate) fn check_contrastive_batch(batch: &[(&Segment, &Segment)]) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::invalid(format!(
            "contrastive batch needs at least 2 pairs, got {}",
            batch.len()
        )));
    }
    for i in 0..batch.len() {
        for j in 0..i {
            if batch[i].1.tokens == batch[j].1.tokens {
                return Err(Error::invalid(format!(
                    "duplicate target in contrastive batch (positions {j} and {i})"
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn contrastive_into(
    params: &EncoderParams,
    batch: &[(&Segment, &Segment)],
    grads: &mut Gradients,
) -> f64 {
    let n = batch.len();
    let d = params.dim();
    let xs: Vec<Encoded> = batch.iter().map(|(x, _)| params.forward(&x.tokens)).collect();
    let ys: Vec<Encoded> = batch.iter().map(|(_, y)| params.forward(&y.tokens)).collect();

    let mut grad_x = vec![vec![0.0; d]; n];
    let mut grad_y = vec![vec![0.0; d]; n];
    let mut total = 0.0;
    for i in 0..n {
        let sims: Vec<f64> = ys.iter().map(|y| dot(&xs[i].out, &y.out)).collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sims.iter().map(|s| (s - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - sims[i];
        for j in 0..n {
            let coeff = (sims[j] - lse).exp() - if i == j { 1.0 } else { 0.0 };
            for k in 0..d {
                grad_x[i][k] += coeff * ys[j].out[k];
                grad_y[j][k] += coeff * xs[i].out[k];
            }
        }
    }
    for (enc, g) in xs.iter().zip(&grad_x) {
        params.backward(enc, g, grads);
    }
    for (enc, g) in ys.iter().zip(&grad_y) {
        params.backward(enc, g, grads);
    }
    total
}

/// In-batch softmax loss `-Σ_i log softmax_j(sim(x_i, y_j))[i]`.
///
/// Needs at least two pairs and no repeated target inside the batch.
pub fn loss_contrastive(
    params: &EncoderParams,
    batch: &[(Segment, Segment)],
) -> Result<(f64, Gradients)> {
    let refs: Vec<(&Segment, &Segment)> = batch.iter().map(|(x, y)| (x, y)).collect();
    check_contrastive_batch(&refs)?;
    let mut grads = params.weights.zeros_like();
    let loss = contrastive_into(params, &refs, &mut grads);
    Ok((loss, grads))
}

/// Vocabulary rows of `tokens` with their multiplicities; each row counted
/// once under set semantics.
fn bag(params: &EncoderParams, seg: &Segment, set_semantics: bool) -> Vec<(u32, f64)> {
    let mut ids = params.vocab.ids(&seg.tokens);
    ids.sort_unstable();
    let mut out: Vec<(u32, f64)> = Vec::new();
    for id in ids {
        match out.last_mut() {
            Some((last, c)) if *last == id => {
                if !set_semantics {
                    *c += 1.0;
                }
            }
            _ => out.push((id, 1.0)),
        }
    }
    out
}

/// `-Σ_{w ∈ bag} log softmax(H e + c)[w]`; returns the loss and adds the
/// head gradient, returning the gradient with respect to `e`.
fn bow_head(
    head: &super::Matrix,
    bias: &[f64],
    emb: &[f64],
    bag: &[(u32, f64)],
    grad_head: &mut super::Matrix,
    grad_bias: &mut [f64],
) -> (f64, Vec<f64>) {
    let mut logits = bias.to_vec();
    for (k, &ek) in emb.iter().enumerate() {
        for (l, h) in logits.iter_mut().zip(head.row(k)) {
            *l += ek * h;
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + z.ln();

    let total_count: f64 = bag.iter().map(|(_, c)| c).sum();
    let mut loss = 0.0;
    let mut d_logits: Vec<f64> = logits
        .iter()
        .map(|l| total_count * (l - lse).exp())
        .collect();
    for &(w, c) in bag {
        loss += c * (lse - logits[w as usize]);
        d_logits[w as usize] -= c;
    }

    for (g, d) in grad_bias.iter_mut().zip(&d_logits) {
        *g += d;
    }
    let mut grad_emb = vec![0.0; emb.len()];
    for (k, &ek) in emb.iter().enumerate() {
        for (g, d) in grad_head.row_mut(k).iter_mut().zip(&d_logits) {
            *g += ek * d;
        }
        grad_emb[k] = dot(head.row(k), &d_logits);
    }
    (loss, grad_emb)
}

pub(crate) fn bow_into(
    params: &EncoderParams,
    x: &Segment,
    y: &Segment,
    set_semantics: bool,
    grads: &mut Gradients,
) -> f64 {
    let w: &Weights = &params.weights;
    let ex = params.forward(&x.tokens);
    let ey = params.forward(&y.tokens);
    let bag_x = bag(params, x, set_semantics);
    let bag_y = bag(params, y, set_semantics);

    let (l1, g_ex) = bow_head(
        &w.bow_src,
        &w.bow_src_bias,
        &ex.out,
        &bag_y,
        &mut grads.bow_src,
        &mut grads.bow_src_bias,
    );
    let (l2, g_ey) = bow_head(
        &w.bow_tgt,
        &w.bow_tgt_bias,
        &ey.out,
        &bag_x,
        &mut grads.bow_tgt,
        &mut grads.bow_tgt_bias,
    );
    params.backward(&ex, &g_ex, grads);
    params.backward(&ey, &g_ey, grads);
    l1 + l2
}

/// Bag-of-words loss: predict the target words from the source embedding
/// and the source words from the target embedding, each with its own head.
pub fn loss_bow(
    params: &EncoderParams,
    x: &Segment,
    y: &Segment,
    set_semantics: bool,
) -> (f64, Gradients) {
    let mut grads = params.weights.zeros_like();
    let loss = bow_into(params, x, y, set_semantics, &mut grads);
    (loss, grads)
}
