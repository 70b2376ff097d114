use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{
    bow_into, check_contrastive_batch, contrastive_into, rank_into, regression_into, ErrKind,
};
use super::{dot, EncoderParams, ParamGroup, Weights};
use crate::error::{Error, Result};
use crate::eval::ndcg;
use crate::text::{levenshtein_similarity, Segment, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "contrastive")]
    Contrastive,
    #[serde(rename = "contrastive+bow")]
    ContrastiveBow,
    #[serde(rename = "ft-MSE")]
    FtMse,
    #[serde(rename = "ft-MAE")]
    FtMae,
    #[serde(rename = "ft-Rank")]
    FtRank,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Contrastive,
        Objective::ContrastiveBow,
        Objective::FtMse,
        Objective::FtMae,
        Objective::FtRank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Contrastive => "contrastive",
            Objective::ContrastiveBow => "contrastive+bow",
            Objective::FtMse => "ft-MSE",
            Objective::FtMae => "ft-MAE",
            Objective::FtRank => "ft-Rank",
        }
    }

    /// Whether training examples must carry mined candidates.
    pub fn needs_candidates(self) -> bool {
        matches!(self, Objective::FtMse | Objective::FtMae | Objective::FtRank)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Objective> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown objective {s:?}")))
    }
}

/// Training hyper-parameters; also the schema of the TOML training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Learning rate of the network weights.
    pub lr: f64,
    /// Learning rate of the mapping slope and position.
    pub lr_ab: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Embedding dimension when training from scratch.
    pub d: usize,
    /// Rank-loss margin scale.
    pub m: f64,
    pub bow_set_semantics: bool,
    /// Heavy-ball momentum, 0 for plain gradient descent.
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Contrastive,
            lr: 1e-4,
            lr_ab: 1e-2,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            d: 64,
            m: 1.0,
            bow_set_semantics: true,
            momentum: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("lr_ab", self.lr_ab)?;
        if !(self.m.is_finite() && self.m >= 0.0) {
            return Err(Error::invalid(format!("margin m must be >= 0, got {}", self.m)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if self.d == 0 {
            return Err(Error::invalid("d must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub segment: Segment,
    /// Levenshtein similarity to the reference target.
    pub lev: f64,
}

/// A source, its reference target and mined target-side candidates sorted
/// by decreasing `lev`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x: Segment,
    pub y: Segment,
    pub candidates: Vec<Candidate>,
}

impl TrainingExample {
    pub fn new(x: Segment, y: Segment) -> TrainingExample {
        TrainingExample {
            x,
            y,
            candidates: Vec::new(),
        }
    }

    /// Attaches candidates, computing their similarity to `y` and sorting
    /// them by decreasing similarity (stable, so ties keep input order).
    pub fn with_candidates(x: Segment, y: Segment, candidates: Vec<Segment>) -> TrainingExample {
        let mut candidates: Vec<Candidate> = candidates
            .into_iter()
            .map(|segment| Candidate {
                lev: levenshtein_similarity(&y.tokens, &segment.tokens),
                segment,
            })
            .collect();
        candidates.sort_by(|a, b| b.lev.total_cmp(&a.lev));
        TrainingExample { x, y, candidates }
    }

    /// Checks that the stored similarities are correct and sorted.
    pub fn validate(&self) -> Result<()> {
        for c in &self.candidates {
            let lev = levenshtein_similarity(&self.y.tokens, &c.segment.tokens);
            if (lev - c.lev).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "candidate {} of example {} has lev {} but recomputes to {lev}",
                    c.segment.id, self.x.id, c.lev
                )));
            }
        }
        if self.candidates.windows(2).any(|w| w[0].lev < w[1].lev) {
            return Err(Error::invalid(format!(
                "candidates of example {} are not sorted by decreasing lev",
                self.x.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Validation NDCG before training (index 0) and after each epoch.
    pub epoch_ndcg: Vec<f64>,
    /// Index into `epoch_ndcg` of the returned checkpoint.
    pub best_epoch: usize,
}

fn cand_refs(ex: &TrainingExample) -> Vec<(&Segment, f64)> {
    ex.candidates.iter().map(|c| (&c.segment, c.lev)).collect()
}

/// Mean loss of one batch; fills `grads` with the matching mean gradient.
/// Returns `None` when no example in the batch contributes.
fn batch_loss(
    params: &EncoderParams,
    batch: &[&TrainingExample],
    config: &TrainConfig,
    grads: &mut Weights,
) -> Option<f64> {
    grads.fill_zero();
    let (total, terms) = match config.objective {
        Objective::Contrastive | Objective::ContrastiveBow => {
            let mut seen: HashSet<&[Token]> = HashSet::new();
            let pairs: Vec<(&Segment, &Segment)> = batch
                .iter()
                .filter(|ex| seen.insert(&ex.y.tokens))
                .map(|ex| (&ex.x, &ex.y))
                .collect();
            if check_contrastive_batch(&pairs).is_err() {
                return None;
            }
            let mut total = contrastive_into(params, &pairs, grads);
            if config.objective == Objective::ContrastiveBow {
                for (x, y) in &pairs {
                    total += bow_into(params, x, y, config.bow_set_semantics, grads);
                }
            }
            (total, pairs.len())
        }
        Objective::FtMse | Objective::FtMae => {
            let err = if config.objective == Objective::FtMse {
                ErrKind::Mse
            } else {
                ErrKind::Mae
            };
            let mut total = 0.0;
            let mut terms = 0;
            for ex in batch.iter().filter(|ex| !ex.candidates.is_empty()) {
                total += regression_into(params, &ex.x, &cand_refs(ex), err, grads);
                terms += ex.candidates.len();
            }
            (total, terms)
        }
        Objective::FtRank => {
            let mut total = 0.0;
            let mut terms = 0;
            for ex in batch.iter().filter(|ex| ex.candidates.len() >= 2) {
                total += rank_into(params, &ex.x, &cand_refs(ex), config.m, grads);
                terms += 1;
            }
            (total, terms)
        }
    };
    if terms == 0 {
        return None;
    }
    grads.scale(1.0 / terms as f64);
    Some(total / terms as f64)
}

/// Validation score used for checkpoint selection.
///
/// An example with candidates contributes the NDCG of its candidates ranked
/// by model similarity, with gain `lev`. Examples without candidates are
/// grouped in consecutive batches of `batch_size`; each source then ranks
/// the batch's targets, with gain the Levenshtein similarity between that
/// target and its own reference. The result is the mean over examples.
pub fn validation_ndcg(
    params: &EncoderParams,
    valid: &[TrainingExample],
    batch_size: usize,
) -> Result<f64> {
    if valid.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let mut scores = Vec::with_capacity(valid.len());
    let mut bare = Vec::new();
    for ex in valid {
        if ex.candidates.is_empty() {
            bare.push(ex);
            continue;
        }
        let ex_emb = params.encode(&ex.x);
        let mut ranked: Vec<(f64, f64)> = ex
            .candidates
            .iter()
            .map(|c| (dot(&ex_emb, &params.encode(&c.segment)), c.lev))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        scores.push(ndcg(&ranked.iter().map(|r| r.1).collect::<Vec<_>>()));
    }
    for chunk in bare.chunks(batch_size.max(1)) {
        let ys: Vec<Vec<f64>> = chunk.iter().map(|ex| params.encode(&ex.y)).collect();
        for ex in chunk {
            let ex_emb = params.encode(&ex.x);
            let mut ranked: Vec<(f64, f64)> = chunk
                .iter()
                .zip(&ys)
                .map(|(other, y)| {
                    (
                        dot(&ex_emb, y),
                        levenshtein_similarity(&ex.y.tokens, &other.y.tokens),
                    )
                })
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            scores.push(ndcg(&ranked.iter().map(|r| r.1).collect::<Vec<_>>()));
        }
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mini-batch gradient descent from `init`, returning the parameters with
/// the best validation NDCG (the initial parameters included).
pub fn train(
    init: EncoderParams,
    train: &[TrainingExample],
    valid: &[TrainingExample],
    config: &TrainConfig,
) -> Result<(EncoderParams, TrainHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    for ex in train.iter().chain(valid) {
        ex.validate()?;
    }
    if config.objective.needs_candidates() {
        let min = if config.objective == Objective::FtRank { 2 } else { 1 };
        if !train.iter().any(|ex| ex.candidates.len() >= min) {
            return Err(Error::Missing(format!(
                "{} needs training examples with at least {min} mined candidate(s); run mine-candidates first",
                config.objective
            )));
        }
    }

    let mut params = init;
    params.echo = serde_json::to_value(config).expect("config serializes");
    let mut history = TrainHistory {
        epoch_ndcg: vec![validation_ndcg(&params, valid, config.batch_size)?],
        ..TrainHistory::default()
    };
    let mut best = params.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grads = params.weights.zeros_like();
    let mut velocity = (config.momentum > 0.0).then(|| params.weights.zeros_like());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &train[i]).collect();
            let Some(loss) = batch_loss(&params, &batch, config, &mut grads) else {
                continue;
            };
            history.step_losses.push(loss);
            let step = match velocity.as_mut() {
                Some(v) => {
                    v.scale(config.momentum);
                    v.add_scaled(1.0, &grads);
                    &*v
                }
                None => &grads,
            };
            for ((p, group), (g, _)) in params.weights.tensors_mut().into_iter().zip(step.tensors())
            {
                let lr = match group {
                    ParamGroup::Network => config.lr,
                    ParamGroup::Mapping => config.lr_ab,
                };
                for (p, g) in p.iter_mut().zip(g) {
                    *p -= lr * g;
                }
            }
            if !params.weights.is_finite() {
                return Err(Error::invalid(format!(
                    "training diverged at epoch {epoch}; lower the learning rate"
                )));
            }
        }
        let score = validation_ndcg(&params, valid, config.batch_size)?;
        if score > history.epoch_ndcg[history.best_epoch] {
            history.best_epoch = epoch;
            best = params.clone();
        }
        history.epoch_ndcg.push(score);
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Vocab;
    use crate::text::TokenizerConfig;

    fn seg(id: u32, s: &str) -> Segment {
        Segment::new(id, "xx", s, &TokenizerConfig::default())
    }

    fn corpus() -> Vec<TrainingExample> {
        let pairs = [
            ("a b c", "p q r"),
            ("a b d", "p q s"),
            ("e f", "t u"),
            ("e g", "t v"),
            ("h i j", "w x y"),
            ("h c j", "w r y"),
        ];
        pairs
            .iter()
            .enumerate()
            .map(|(i, (x, y))| TrainingExample::new(seg(i as u32, x), seg(i as u32, y)))
            .collect()
    }

    fn init(examples: &[TrainingExample], seed: u64) -> EncoderParams {
        let vocab = Vocab::build(examples.iter().flat_map(|e| [&e.x, &e.y]));
        EncoderParams::init(vocab, 8, TokenizerConfig::default(), seed).unwrap()
    }

    #[test]
    fn objective_names_round_trip() {
        for o in Objective::ALL {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
            let json = serde_json::to_string(&o).unwrap();
            assert_eq!(json, format!("\"{}\"", o.name()));
        }
        assert!("ft-mse".parse::<Objective>().is_err());
    }

    #[test]
    fn config_from_toml() {
        let cfg = TrainConfig::from_toml(
            "objective = \"ft-MAE\"\nlr = 0.5\nepochs = 3\nbow_set_semantics = false\n",
        )
        .unwrap();
        assert_eq!(cfg.objective, Objective::FtMae);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.lr_ab, 1e-2);
        assert_eq!(cfg.batch_size, 32);
        assert!(!cfg.bow_set_semantics);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("lr = -1").is_err());
        assert!(TrainConfig::from_toml("learning_rate = 1").is_err());
    }

    #[test]
    fn same_seed_same_history() {
        let data = corpus();
        let cfg = TrainConfig {
            objective: Objective::ContrastiveBow,
            lr: 0.1,
            epochs: 3,
            batch_size: 4,
            seed: 7,
            momentum: 0.9,
            ..TrainConfig::default()
        };
        let (p1, h1) = train(init(&data, 1), &data, &data, &cfg).unwrap();
        let (p2, h2) = train(init(&data, 1), &data, &data, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        assert_eq!(h1.epoch_ndcg.len(), 4);
        assert!(!h1.step_losses.is_empty());
        let bits: Vec<u64> = h1.step_losses.iter().map(|l| l.to_bits()).collect();
        assert_eq!(bits, h2.step_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        // Each candidate's target lev equals f(sim) under the initial
        // parameters, so every regression term has zero gradient.
        let data = corpus();
        let p = init(&data, 3);
        let mut examples = Vec::new();
        for (i, ex) in data.iter().enumerate() {
            let other = &data[(i + 1) % data.len()].y;
            let sim = p.sim(&ex.x, other);
            let lev = crate::encoder::mapping_f(p.weights.a, p.weights.b, sim);
            examples.push(TrainingExample {
                x: ex.x.clone(),
                y: ex.y.clone(),
                candidates: vec![Candidate {
                    segment: other.clone(),
                    lev,
                }],
            });
        }
        let cfg = TrainConfig {
            objective: Objective::FtMse,
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut grads = p.weights.zeros_like();
        let batch: Vec<&TrainingExample> = examples.iter().collect();
        let loss = batch_loss(&p, &batch, &cfg, &mut grads).unwrap();
        assert!(loss < 1e-24);
        assert!(grads.tensors().iter().all(|(t, _)| t.iter().all(|g| g.abs() < 1e-10)));
    }

    #[test]
    fn fine_tuning_requires_candidates() {
        let data = corpus();
        for objective in [Objective::FtMse, Objective::FtMae, Objective::FtRank] {
            let cfg = TrainConfig {
                objective,
                ..TrainConfig::default()
            };
            let err = train(init(&data, 0), &data, &data, &cfg).unwrap_err();
            assert_eq!(err.kind(), "missing");
        }
    }

    #[test]
    fn candidates_are_sorted_and_checked() {
        let ex = TrainingExample::with_candidates(
            seg(0, "a"),
            seg(0, "p q r"),
            vec![seg(1, "z"), seg(2, "p q r"), seg(3, "p q")],
        );
        let levs: Vec<f64> = ex.candidates.iter().map(|c| c.lev).collect();
        assert_eq!(levs[0], 1.0);
        assert!((levs[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(levs[2], 0.0);
        ex.validate().unwrap();
        let mut bad = ex.clone();
        bad.candidates.swap(0, 1);
        assert!(bad.validate().is_err());
        let mut wrong = ex;
        wrong.candidates[2].lev = 0.5;
        assert!(wrong.validate().is_err());
    }

    #[test]
    fn validation_ndcg_of_candidates() {
        let data = corpus();
        let p = init(&data, 5);
        let x = seg(0, "a b");
        let (c1, c2) = (seg(1, "p"), seg(2, "q"));
        let s1 = p.sim(&x, &c1);
        let s2 = p.sim(&x, &c2);
        let ex = TrainingExample {
            x,
            y: seg(0, "p"),
            candidates: vec![
                Candidate { segment: c1, lev: 0.8 },
                Candidate { segment: c2, lev: 0.2 },
            ],
        };
        let expected = if s1 >= s2 { 1.0 } else { ndcg(&[0.2, 0.8]) };
        assert!((validation_ndcg(&p, &[ex], 32).unwrap() - expected).abs() < 1e-12);
        assert!(validation_ndcg(&p, &[], 32).is_err());
    }
}
