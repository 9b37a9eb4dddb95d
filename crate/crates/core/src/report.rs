//! Text reports: segmentation posteriors and sense preferences.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::inference::{edge_posteriors, forward_marginalize, greedy_segmentation, sense_posteriors, Approx};
use crate::lattice::Lattice;
use crate::model::{LatticeLm, LatticeSpec};
use crate::tensor::Graph;
use crate::vocab::TokenId;

/// Posterior analysis of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceAnalysis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub lattice: Lattice,
    pub posteriors: Vec<f64>,
}

pub fn analyze(model: &LatticeLm, tokens: &[TokenId], approx: Approx) -> Result<SentenceAnalysis> {
    if tokens.is_empty() {
        return Err(Error::Empty("sentence"));
    }
    let lattice = model.build_lattice(tokens)?;
    let mut g = Graph::new(&model.params);
    let mut session = model.session(&mut g, None)?;
    let mut rng = StdRng::seed_from_u64(0);
    let approx = crate::train::eval_approx(approx);
    let fwd = forward_marginalize(&mut g, &lattice, &mut session, approx, 1.0, &mut rng)?;
    let posteriors = edge_posteriors(&lattice, &fwd)?;
    Ok(SentenceAnalysis {
        tokens: tokens.to_vec(),
        log_prob: fwd.log_prob_value(),
        lattice,
        posteriors,
    })
}

impl SentenceAnalysis {
    /// For each chunk start, the percentage of paths through it that continue
    /// with a chunk of each available length.
    pub fn length_percentages(&self) -> Vec<Vec<(usize, f64)>> {
        (0..self.lattice.final_node())
            .map(|i| {
                let mut by_len: BTreeMap<usize, f64> = BTreeMap::new();
                for &k in self.lattice.outgoing(i) {
                    *by_len.entry(self.lattice.edge(k).len()).or_default() += self.posteriors[k];
                }
                let occupancy: f64 = by_len.values().sum();
                by_len
                    .into_iter()
                    .map(|(len, p)| (len, if occupancy > 0.0 { 100.0 * p / occupancy } else { 0.0 }))
                    .collect()
            })
            .collect()
    }

    /// `(start, end)` token spans of the greedy segmentation.
    pub fn greedy_spans(&self) -> Vec<(usize, usize)> {
        greedy_segmentation(&self.lattice, &self.posteriors)
            .edges
            .iter()
            .map(|&k| {
                let e = self.lattice.edge(k);
                (e.from, e.to)
            })
            .collect()
    }
}

fn surfaces<'a>(model: &'a LatticeLm, tokens: &[TokenId]) -> Vec<&'a str> {
    model.vocab.tokens().decode(tokens)
}

/// One block per sentence: the greedy segmentation in brackets, then one
/// line per token position with the length distribution of the chunk
/// starting there.
pub fn segment_report(model: &LatticeLm, corpus: &[Vec<TokenId>], approx: Approx) -> Result<String> {
    let mut out = String::new();
    for (n, tokens) in corpus.iter().enumerate() {
        let a = analyze(model, tokens, approx)?;
        let words = surfaces(model, tokens);
        let boxed: Vec<String> = a
            .greedy_spans()
            .into_iter()
            .map(|(i, j)| format!("[{}]", words[i..j].join(" ")))
            .collect();
        writeln!(out, "# sentence {}\tlog_prob={:.4}", n + 1, a.log_prob).expect("write to string");
        writeln!(out, "{}", boxed.join(" ")).expect("write to string");
        for (i, dist) in a.length_percentages().into_iter().enumerate() {
            let cells: Vec<String> = dist.iter().map(|(len, pct)| format!("{len}:{pct:.1}%")).collect();
            writeln!(out, "{i}\t{}\t{}", words[i], cells.join("\t")).expect("write to string");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Per occurrence, the posterior of each sense; then, per token type, how
/// often each sense was preferred.
pub fn senses_report(model: &LatticeLm, corpus: &[Vec<TokenId>]) -> Result<String> {
    if !matches!(model.config.lattice, LatticeSpec::Sense { .. }) {
        return Err(Error::Config("sense reports need a multi-embedding model".into()));
    }
    let mut out = String::new();
    let mut tally: BTreeMap<TokenId, Vec<usize>> = BTreeMap::new();
    for (n, tokens) in corpus.iter().enumerate() {
        let a = analyze(model, tokens, Approx::Marginal)?;
        let words = surfaces(model, tokens);
        writeln!(out, "# sentence {}", n + 1).expect("write to string");
        for (i, senses) in sense_posteriors(&a.lattice, &a.posteriors)?.into_iter().enumerate() {
            let best = argmax(&senses);
            let cells: Vec<String> = senses
                .iter()
                .enumerate()
                .map(|(k, p)| format!("s{k}:{:.1}%", 100.0 * p))
                .collect();
            writeln!(out, "{i}\t{}\t{}\t-> s{best}", words[i], cells.join("\t")).expect("write to string");
            let counts = tally.entry(tokens[i]).or_insert_with(|| vec![0; senses.len()]);
            counts[best] += 1;
        }
        out.push('\n');
    }
    writeln!(out, "# preferred sense counts per token").expect("write to string");
    for (t, counts) in tally {
        let cells: Vec<String> = counts.iter().enumerate().map(|(k, c)| format!("s{k}:{c}")).collect();
        writeln!(out, "{}\t{}", model.vocab.tokens().surface(t), cells.join("\t")).expect("write to string");
    }
    Ok(out)
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = k;
        }
    }
    best
}
