//! Marginalising sentence probability over every lattice path.
//!
//! [`forward_marginalize`] visits nodes in index order. Each node's
//! predictive distribution is computed once; every incoming edge produces a
//! local recurrent state from its source, and the node's forward
//! log-probability is the log-sum over `α(source) + log p(chunk | source)`.
//! The node's own recurrent state is then one of four combinations of the
//! local states, chosen by [`Approx`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeKind, SegPath};
use crate::nn::LayerState;
use crate::tensor::{logsumexp, Graph, Tensor, Var};

/// Floor applied to `log M` before adding Gumbel noise.
pub const LOG_WEIGHT_FLOOR: f64 = -30.0;

/// How a node's recurrent state is formed from its predecessors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Approx {
    /// Unweighted sum of the local states.
    Direct,
    /// The local state of one predecessor sampled from `M`.
    #[serde(rename = "mc")]
    MonteCarlo,
    /// Expectation of the local states under `M`.
    #[default]
    Marginal,
    /// Weights from a temperature softmax of Gumbel-perturbed `log M`.
    Gumbel,
}

impl FromStr for Approx {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Approx::Direct),
            "mc" | "monte-carlo" => Ok(Approx::MonteCarlo),
            "marginal" => Ok(Approx::Marginal),
            "gumbel" => Ok(Approx::Gumbel),
            other => Err(Error::Config(format!(
                "unknown approximation {other:?} (expected direct, mc, marginal or gumbel)"
            ))),
        }
    }
}

impl fmt::Display for Approx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Approx::Direct => "direct",
            Approx::MonteCarlo => "mc",
            Approx::Marginal => "marginal",
            Approx::Gumbel => "gumbel",
        })
    }
}

/// Gumbel-softmax temperature with geometric annealing per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub tau0: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            tau0: 5.0,
            tau_min: 0.5,
            decay: 0.9995,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.tau_min > 0.0 && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("invalid temperature schedule {self:?}")));
        }
        Ok(())
    }

    /// `max(tau_min, tau0 · decay^batch)`
    pub fn tau_at(&self, batch: u64) -> f64 {
        (self.tau0 * self.decay.powf(batch as f64)).max(self.tau_min)
    }
}

/// What the marginalisation needs from a model, for one sentence.
pub trait LatticeScorer<'p> {
    /// Per-node predictive state, computed once and shared by outgoing edges.
    type Head;

    /// Recurrent state at node 0.
    fn initial_state(&mut self, g: &mut Graph<'p>) -> Result<Vec<LayerState>>;

    fn head(&mut self, g: &mut Graph<'p>, state: &[LayerState]) -> Result<Self::Head>;

    /// `log p(edge | source)` given the source node's head.
    fn edge_logprob(&mut self, g: &mut Graph<'p>, head: &mut Self::Head, lattice: &Lattice, edge: usize) -> Result<Var>;

    /// Local state after consuming the edge's embedding from `state`.
    fn advance(&mut self, g: &mut Graph<'p>, state: &[LayerState], lattice: &Lattice, edge: usize) -> Result<Vec<LayerState>>;

    /// Per-layer cell applications made by [`LatticeScorer::advance`] so far.
    fn lstm_steps(&self) -> usize;
}

/// Distribution over the incoming edges of one node.
#[derive(Debug, Clone, Copy)]
pub struct PredecessorDist {
    /// Forward log-probability of the node.
    pub alpha: Var,
    /// `log M` per incoming edge.
    pub log_weights: Var,
    /// `M` per incoming edge.
    pub weights: Var,
}

/// `M(e) = exp(α(src) + log p(e | src) − α(node))`, with
/// `α(node) = logsumexp` over the same joint scores.
pub fn predecessor_dist(g: &mut Graph<'_>, joint_scores: &[Var]) -> Result<PredecessorDist> {
    if joint_scores.is_empty() {
        return Err(Error::Lattice("node has no incoming edges".into()));
    }
    let scores = g.concat(joint_scores)?;
    let alpha = g.logsumexp(scores)?;
    let log_weights = g.sub(scores, alpha)?;
    let weights = g.exp(log_weights)?;
    Ok(PredecessorDist {
        alpha,
        log_weights,
        weights,
    })
}

/// Combines local states into the node state. Returns the state and the
/// numeric weight given to each incoming edge.
pub fn combine_states(
    g: &mut Graph<'_>,
    approx: Approx,
    dist: &PredecessorDist,
    locals: &[Vec<LayerState>],
    tau: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<LayerState>, Vec<f64>)> {
    let n = locals.len();
    if n == 0 {
        return Err(Error::Lattice("no local states to combine".into()));
    }
    if approx == Approx::Gumbel && !(tau > 0.0) {
        return Err(Error::Config(format!("Gumbel temperature must be positive, got {tau}")));
    }
    let layers = locals[0].len();
    let mix = |g: &mut Graph<'_>, w: Option<Var>| -> Result<Vec<LayerState>> {
        (0..layers)
            .map(|l| {
                let hs: Vec<Var> = locals.iter().map(|s| s[l].h).collect();
                let cs: Vec<Var> = locals.iter().map(|s| s[l].c).collect();
                Ok(match w {
                    Some(w) => LayerState {
                        h: g.weighted_sum(w, &hs)?,
                        c: g.weighted_sum(w, &cs)?,
                    },
                    None => LayerState {
                        h: g.sum(&hs)?,
                        c: g.sum(&cs)?,
                    },
                })
            })
            .collect()
    };
    match approx {
        Approx::Direct => Ok((mix(g, None)?, vec![1.0; n])),
        Approx::Marginal => {
            let w = g.value(dist.weights).to_vec();
            Ok((mix(g, Some(dist.weights))?, w))
        }
        Approx::MonteCarlo => {
            let k = sample_index(g.value(dist.weights), rng);
            let mut w = vec![0.0; n];
            w[k] = 1.0;
            Ok((locals[k].clone(), w))
        }
        Approx::Gumbel => {
            let noise: Vec<f64> = {
                let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
                (0..n).map(|_| gumbel.sample(rng)).collect()
            };
            let clamped = g.clamp_min(dist.log_weights, LOG_WEIGHT_FLOOR)?;
            let noise = g.constant(Tensor::vector(noise))?;
            let perturbed = g.add(clamped, noise)?;
            let scaled = g.scale(perturbed, 1.0 / tau)?;
            let w = g.softmax(scaled)?;
            let wv = g.value(w).to_vec();
            Ok((mix(g, Some(w))?, wv))
        }
    }
}

/// Index drawn with probability proportional to `weights`.
pub fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Result of [`forward_marginalize`].
pub struct ForwardPass {
    /// `log p(X)`, differentiable.
    pub log_prob: Var,
    /// Forward log-probability per node.
    pub alphas: Vec<f64>,
    /// `log p(edge | source)` per edge.
    pub edge_logprobs: Vec<f64>,
    /// Recurrent state per node.
    pub states: Vec<Vec<LayerState>>,
    /// Predecessor distribution `M` per node, in incoming-edge order.
    pub predecessor_weights: Vec<Vec<f64>>,
    /// Weights actually used to combine local states, per node.
    pub mixing_weights: Vec<Vec<f64>>,
    /// Per-layer cell applications spent on lattice edges.
    pub lstm_steps: usize,
}

impl ForwardPass {
    pub fn log_prob_value(&self) -> f64 {
        *self.alphas.last().expect("at least one node")
    }
}

/// Forward recursion over the lattice; `O(|edges|)` recurrent steps.
pub fn forward_marginalize<'p, S: LatticeScorer<'p>>(
    g: &mut Graph<'p>,
    lattice: &Lattice,
    scorer: &mut S,
    approx: Approx,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<ForwardPass> {
    let nodes = lattice.num_nodes();
    let steps_before = scorer.lstm_steps();
    let mut states: Vec<Vec<LayerState>> = Vec::with_capacity(nodes);
    let mut heads: Vec<Option<S::Head>> = (0..nodes).map(|_| None).collect();
    let mut alpha_vars = Vec::with_capacity(nodes);
    let mut alphas = Vec::with_capacity(nodes);
    let mut edge_logprobs = vec![f64::NAN; lattice.num_edges()];
    let mut predecessor_weights = vec![Vec::new()];
    let mut mixing_weights = vec![Vec::new()];

    states.push(scorer.initial_state(g)?);
    alpha_vars.push(g.scalar(0.0)?);
    alphas.push(0.0);

    for j in 1..nodes {
        let incoming = lattice.incoming(j);
        if incoming.is_empty() {
            return Err(Error::Lattice(format!("node {j} is unreachable")));
        }
        let mut joint = Vec::with_capacity(incoming.len());
        let mut locals = Vec::with_capacity(incoming.len());
        for &k in incoming {
            let src = lattice.edge(k).from;
            if heads[src].is_none() {
                heads[src] = Some(scorer.head(g, &states[src])?);
            }
            let head = heads[src].as_mut().expect("head computed");
            let lp = scorer.edge_logprob(g, head, lattice, k)?;
            edge_logprobs[k] = g.scalar_value(lp);
            joint.push(g.add(alpha_vars[src], lp)?);
            locals.push(scorer.advance(g, &states[src], lattice, k)?);
        }
        let dist = predecessor_dist(g, &joint)?;
        let (state, used) = if locals.len() == 1 {
            (locals.pop().expect("one local state"), vec![1.0])
        } else {
            combine_states(g, approx, &dist, &locals, tau, rng)?
        };
        predecessor_weights.push(g.value(dist.weights).to_vec());
        mixing_weights.push(used);
        alphas.push(g.scalar_value(dist.alpha));
        alpha_vars.push(dist.alpha);
        states.push(state);
    }

    let log_prob = *alpha_vars.last().expect("final node");
    Ok(ForwardPass {
        log_prob,
        alphas,
        edge_logprobs,
        states,
        predecessor_weights,
        mixing_weights,
        lstm_steps: scorer.lstm_steps() - steps_before,
    })
}

/// Exact `log Σ_paths p(path)`, running the recurrence separately along every
/// enumerated path.
pub fn brute_force_logprob<'p, S: LatticeScorer<'p>>(
    g: &mut Graph<'p>,
    lattice: &Lattice,
    scorer: &mut S,
    cap: u128,
) -> Result<f64> {
    let count = lattice.path_count();
    if count > cap {
        return Err(Error::EnumerationCap { cap });
    }
    let mut scores = Vec::with_capacity(count as usize);
    let state = scorer.initial_state(g)?;
    extend_paths(g, lattice, scorer, 0, &state, 0.0, &mut scores)?;
    Ok(logsumexp(&scores))
}

/// Depth-first walk over every segmentation; paths sharing a prefix share
/// its states.
fn extend_paths<'p, S: LatticeScorer<'p>>(
    g: &mut Graph<'p>,
    lattice: &Lattice,
    scorer: &mut S,
    node: usize,
    state: &[LayerState],
    prefix: f64,
    scores: &mut Vec<f64>,
) -> Result<()> {
    if node == lattice.final_node() {
        scores.push(prefix);
        return Ok(());
    }
    let mut head = scorer.head(g, state)?;
    for &k in lattice.outgoing(node) {
        let lp = scorer.edge_logprob(g, &mut head, lattice, k)?;
        let total = prefix + g.scalar_value(lp);
        let next = scorer.advance(g, state, lattice, k)?;
        extend_paths(g, lattice, scorer, lattice.edge(k).to, &next, total, scores)?;
    }
    Ok(())
}

/// Log-probability of one segmentation under the exact recurrence.
pub fn path_logprob<'p, S: LatticeScorer<'p>>(
    g: &mut Graph<'p>,
    lattice: &Lattice,
    scorer: &mut S,
    path: &SegPath,
) -> Result<f64> {
    let mut state = scorer.initial_state(g)?;
    let mut total = 0.0;
    for &k in &path.edges {
        let mut head = scorer.head(g, &state)?;
        let lp = scorer.edge_logprob(g, &mut head, lattice, k)?;
        total += g.scalar_value(lp);
        state = scorer.advance(g, &state, lattice, k)?;
    }
    Ok(total)
}

/// Posterior probability of every edge via a backward recursion over the
/// edge log-probabilities recorded by the forward pass.
pub fn edge_posteriors(lattice: &Lattice, fwd: &ForwardPass) -> Result<Vec<f64>> {
    let last = lattice.final_node();
    let mut log_beta = vec![f64::NEG_INFINITY; lattice.num_nodes()];
    log_beta[last] = 0.0;
    for i in (0..last).rev() {
        let terms: Vec<f64> = lattice
            .outgoing(i)
            .iter()
            .map(|&k| fwd.edge_logprobs[k] + log_beta[lattice.edge(k).to])
            .collect();
        if terms.is_empty() {
            return Err(Error::Lattice(format!("node {i} cannot reach the final node")));
        }
        log_beta[i] = logsumexp(&terms);
    }
    let total = fwd.alphas[last];
    Ok(lattice
        .edges()
        .iter()
        .enumerate()
        .map(|(k, e)| (fwd.alphas[e.from] + fwd.edge_logprobs[k] + log_beta[e.to] - total).exp())
        .collect())
}

/// Follows the highest-posterior outgoing edge from node 0; ties prefer the
/// shorter chunk, then the lower embedding index.
pub fn greedy_segmentation(lattice: &Lattice, posteriors: &[f64]) -> SegPath {
    let mut node = 0;
    let mut edges = Vec::new();
    while node < lattice.final_node() {
        let mut best: Option<usize> = None;
        for &k in lattice.outgoing(node) {
            best = match best {
                None => Some(k),
                Some(b) => {
                    let (eb, ek) = (lattice.edge(b), lattice.edge(k));
                    let better = posteriors[k] > posteriors[b]
                        || (posteriors[k] == posteriors[b] && (ek.len(), ek.sense) < (eb.len(), eb.sense));
                    Some(if better { k } else { b })
                }
            };
        }
        let k = best.expect("every non-final node has an outgoing edge");
        edges.push(k);
        node = lattice.edge(k).to;
    }
    SegPath { edges }
}

/// Per position, the posterior of each sense edge (they sum to one).
pub fn sense_posteriors(lattice: &Lattice, posteriors: &[f64]) -> Result<Vec<Vec<f64>>> {
    if !matches!(lattice.kind(), LatticeKind::Multi { .. }) {
        return Err(Error::Lattice("sense posteriors need a multilattice".into()));
    }
    Ok((0..lattice.final_node())
        .map(|t| {
            let mut senses: Vec<(usize, f64)> = lattice
                .outgoing(t)
                .iter()
                .map(|&k| (lattice.edge(k).sense, posteriors[k]))
                .collect();
            senses.sort_by_key(|s| s.0);
            senses.into_iter().map(|s| s.1).collect()
        })
        .collect())
}
