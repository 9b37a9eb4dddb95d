//! Marginal-likelihood training and perplexity evaluation.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{edge_posteriors, forward_marginalize, Approx, ForwardPass, GumbelConfig};
use crate::model::LatticeLm;
use crate::nn::Adam;
use crate::tensor::{Gradients, Graph};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub approx: Approx,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub gumbel: GumbelConfig,
    pub seed: u64,
    /// Global gradient-norm threshold; `f64::INFINITY` disables clipping.
    #[serde(with = "finite_or_null")]
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            approx: Approx::Marginal,
            lr: 0.01,
            batch_size: 16,
            epochs: 5,
            dropout: 0.0,
            gumbel: GumbelConfig::default(),
            seed: 1,
            clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip threshold must be positive, got {}", self.clip)));
        }
        self.gumbel.validate()
    }
}

/// JSON has no infinity; an unbounded threshold is stored as `null`.
mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_some(x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Weights used when scoring held-out text: sampling modes fall back to the
/// deterministic expectation.
pub fn eval_approx(approx: Approx) -> Approx {
    match approx {
        Approx::MonteCarlo | Approx::Gumbel => Approx::Marginal,
        other => other,
    }
}

/// Mixes a base seed with indices into an independent stream seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        x = x.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

fn run_forward<'m>(
    model: &'m LatticeLm,
    g: &mut Graph<'m>,
    tokens: &[TokenId],
    approx: Approx,
    tau: f64,
    dropout: f64,
    rng: &mut StdRng,
) -> Result<(ForwardPass, crate::lattice::Lattice)> {
    if tokens.is_empty() {
        return Err(Error::Empty("sentence"));
    }
    let lattice = model.build_lattice(tokens)?;
    let masks = (dropout > 0.0).then_some((dropout, &mut *rng));
    let mut session = model.session(g, masks)?;
    let fwd = forward_marginalize(g, &lattice, &mut session, approx, tau, rng)?;
    Ok((fwd, lattice))
}

/// `-log p(X)` with no dropout.
pub fn sentence_loss(model: &LatticeLm, tokens: &[TokenId], approx: Approx, tau: f64, seed: u64) -> Result<f64> {
    let mut g = Graph::new(&model.params);
    let mut rng = StdRng::seed_from_u64(seed);
    let (fwd, _) = run_forward(model, &mut g, tokens, approx, tau, 0.0, &mut rng)?;
    Ok(-fwd.log_prob_value())
}

/// Loss, parameter gradients and expected chunk-length counts for one
/// sentence.
pub struct SentenceGrad {
    pub loss: f64,
    pub grads: Gradients,
    /// Posterior mass per chunk length (index 0 is length 1).
    pub length_mass: Vec<f64>,
}

pub fn sentence_gradients(
    model: &LatticeLm,
    tokens: &[TokenId],
    approx: Approx,
    tau: f64,
    dropout: f64,
    seed: u64,
) -> Result<SentenceGrad> {
    let mut g = Graph::new(&model.params);
    let mut rng = StdRng::seed_from_u64(seed);
    let (fwd, lattice) = run_forward(model, &mut g, tokens, approx, tau, dropout, &mut rng)?;
    let loss_var = g.scale(fwd.log_prob, -1.0)?;
    let table = g.backward(loss_var)?;
    let mut grads = model.params.zeros_like();
    table.accumulate_into(&mut grads, 1.0);
    let post = edge_posteriors(&lattice, &fwd)?;
    let mut length_mass = Vec::new();
    for (e, p) in lattice.edges().iter().zip(&post) {
        if length_mass.len() < e.len() {
            length_mass.resize(e.len(), 0.0);
        }
        length_mass[e.len() - 1] += p;
    }
    Ok(SentenceGrad {
        loss: g.scalar_value(loss_var),
        grads,
        length_mass,
    })
}

/// Groups sentences of equal length, splits groups into batches, and
/// shuffles batch order.
pub fn length_buckets(corpus: &[Vec<TokenId>], batch_size: usize, rng: &mut StdRng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        groups.entry(s.len()).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idx) in groups {
        idx.shuffle(rng);
        batches.extend(idx.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean negative log-probability per token over the epoch's batches.
    pub train_loss: f64,
    pub valid_perplexity: f64,
    pub tau: f64,
    /// Expected number of chunks of each length, summed over the epoch.
    pub length_mass: Vec<f64>,
}

impl EpochMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, self.train_loss, self.valid_perplexity, self.tau
        )
    }
}

pub const METRICS_HEADER: &str = "epoch\ttrain_loss\tvalid_perplexity\ttau";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_valid_perplexity: f64,
    /// Batches processed, which also drives the temperature schedule.
    pub batches: u64,
}

/// Trains in place and leaves `model` holding the parameters with the best
/// validation perplexity. Without validation data the training corpus is
/// used for selection.
pub fn train(
    model: &mut LatticeLm,
    train_set: &[Vec<TokenId>],
    valid_set: &[Vec<TokenId>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let selection = if valid_set.is_empty() { train_set } else { valid_set };
    let eval_mode = eval_approx(cfg.approx);
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut order_rng = StdRng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let mut global_batch = 0u64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (0, f64::INFINITY, model.params.clone());

    for epoch in 1..=cfg.epochs {
        let batches = length_buckets(train_set, cfg.batch_size, &mut order_rng);
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        let mut length_mass: Vec<f64> = Vec::new();
        for (b, batch) in batches.iter().enumerate() {
            let tau = cfg.gumbel.tau_at(global_batch);
            let frozen: &LatticeLm = model;
            let results: Vec<Result<SentenceGrad>> = batch
                .par_iter()
                .map(|&i| {
                    let seed = derive_seed(cfg.seed, &[epoch as u64, b as u64, i as u64]);
                    sentence_gradients(frozen, &train_set[i], cfg.approx, tau, cfg.dropout, seed)
                })
                .collect();
            let mut grads = model.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in results.into_iter().zip(batch) {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(Error::Diverged { epoch, batch: b });
                }
                loss_sum += r.loss;
                tokens += train_set[i].len();
                grads.add_scaled(&r.grads, scale);
                if length_mass.len() < r.length_mass.len() {
                    length_mass.resize(r.length_mass.len(), 0.0);
                }
                for (m, x) in length_mass.iter_mut().zip(&r.length_mass) {
                    *m += x;
                }
            }
            if !grads.global_norm().is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            if cfg.clip.is_finite() {
                grads.clip_global_norm(cfg.clip);
            }
            adam.update(&mut model.params, &grads)?;
            global_batch += 1;
        }
        let report = evaluate_perplexity(model, selection, eval_mode)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / tokens as f64,
            valid_perplexity: report.perplexity,
            tau: cfg.gumbel.tau_at(global_batch),
            length_mass,
        };
        if report.perplexity < best.1 {
            best = (epoch, report.perplexity, model.params.clone());
        }
        on_epoch(&metrics);
        history.push(metrics);
    }
    if cfg.epochs > 0 {
        model.params = best.2;
    }
    Ok(TrainOutcome {
        history,
        best_epoch: best.0,
        best_valid_perplexity: best.1,
        batches: global_batch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub tokens: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total_log_prob: f64,
    /// Unit tokens including one `<eos>` per sentence.
    pub tokens: usize,
    pub perplexity: f64,
    pub sentences: Vec<SentenceRecord>,
}

impl EvalReport {
    pub fn from_records(sentences: Vec<SentenceRecord>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Empty("evaluation corpus"));
        }
        let total_log_prob: f64 = sentences.iter().map(|s| s.log_prob).sum();
        let tokens: usize = sentences.iter().map(|s| s.tokens).sum();
        Ok(EvalReport {
            total_log_prob,
            tokens,
            perplexity: (-total_log_prob / tokens as f64).exp(),
            sentences,
        })
    }
}

/// Perplexity with dropout disabled; sentences are scored in parallel.
pub fn evaluate_perplexity(model: &LatticeLm, corpus: &[Vec<TokenId>], approx: Approx) -> Result<EvalReport> {
    let approx = eval_approx(approx);
    let records = corpus
        .par_iter()
        .map(|s| {
            let loss = sentence_loss(model, s, approx, 1.0, 0)?;
            Ok(SentenceRecord {
                tokens: s.len(),
                log_prob: -loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(records)
}

/// Perplexity from the token-by-token evaluator (single-path models only).
pub fn evaluate_sequential(model: &LatticeLm, corpus: &[Vec<TokenId>]) -> Result<EvalReport> {
    let records = corpus
        .par_iter()
        .map(|s| {
            Ok(SentenceRecord {
                tokens: s.len(),
                log_prob: model.sequential_logprob(s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(records)
}
