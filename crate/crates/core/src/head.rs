//! Per-node predictive distributions over outgoing edges.
//!
//! [`SentinelHead`] scores chunks: a tied softmax over the chunk inventory
//! plus a sentinel entry, whose mass a sub-LSTM spreads over every token
//! sequence up to the maximum chunk length. [`SenseHead`] scores
//! `(token, sense)` pairs for multilattices.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{glorot, tied_output_logits, LayerState, LstmParams};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::vocab::{ChunkVocab, TokenId, EOS};

/// Parameters of the chunk head. The output table is shared with the
/// non-compositional chunk embeddings: rows `0..chunks` are chunks, row
/// `chunks` is the sentinel, and row `chunks + 1` is the unknown-chunk
/// embedding (never scored).
#[derive(Debug, Clone, PartialEq)]
pub struct SentinelHead {
    pub chunk_table: ParamId,
    pub out_bias: ParamId,
    pub projection: ParamId,
    pub sub_init: ParamId,
    pub sub_lstm: LstmParams,
    pub sub_out: ParamId,
    pub sub_bias: ParamId,
    /// Unit-token embeddings fed to the sub-LSTM.
    pub token_table: ParamId,
    pub num_chunks: usize,
    pub num_tokens: usize,
    pub max_len: usize,
}

impl SentinelHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        vocab: &ChunkVocab,
        chunk_table: ParamId,
        token_table: ParamId,
        embed_dim: usize,
        hidden_dim: usize,
        sub_hidden_dim: usize,
    ) -> Result<Self> {
        let num_chunks = vocab.len();
        let num_tokens = vocab.tokens().len();
        Ok(SentinelHead {
            chunk_table,
            out_bias: store.add("head.out_bias", Tensor::zeros(vec![num_chunks + 1])),
            projection: store.add("head.projection", glorot(rng, embed_dim, hidden_dim)),
            sub_init: store.add("head.sub_init", glorot(rng, sub_hidden_dim, hidden_dim)),
            sub_lstm: LstmParams::new(store, rng, "head.sub", embed_dim, sub_hidden_dim, 1)?,
            sub_out: store.add("head.sub_out", glorot(rng, num_tokens + 1, sub_hidden_dim)),
            sub_bias: store.add("head.sub_bias", Tensor::zeros(vec![num_tokens + 1])),
            token_table,
            num_chunks,
            num_tokens,
            max_len: vocab.max_len(),
        })
    }

    pub fn sentinel_index(&self) -> usize {
        self.num_chunks
    }

    /// Index of the end-of-chunk symbol in the sub-LSTM output.
    pub fn end_index(&self) -> usize {
        self.num_tokens
    }

    /// Log-probabilities over the chunk inventory followed by the sentinel.
    pub fn main_chunk_dist(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        let table = g.param(self.chunk_table);
        let bias = g.param(self.out_bias);
        let proj = g.param(self.projection);
        let logits = tied_output_logits(g, hidden, table, bias, proj, self.num_chunks + 1)?;
        Ok(g.log_softmax(logits)?)
    }

    /// Starts a sub-LSTM run conditioned on the main hidden vector.
    pub fn start_sub(&self, g: &mut Graph<'_>, hidden: Var) -> Result<SubLstmRun> {
        let init = g.param(self.sub_init);
        let h = g.matvec(init, hidden)?;
        let c = g.zeros(self.sub_lstm.hidden_dim);
        let mut run = SubLstmRun {
            prefixes: HashMap::new(),
        };
        let logits = self.sub_logits(g, h)?;
        // no empty chunks: the end symbol is excluded at the first position
        let tokens_only = g.slice(logits, 0, self.num_tokens)?;
        let dist = g.log_softmax(tokens_only)?;
        run.prefixes.insert(Vec::new(), (LayerState { h, c }, dist));
        Ok(run)
    }

    fn sub_logits(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let out = g.param(self.sub_out);
        let bias = g.param(self.sub_bias);
        let scores = g.matvec(out, h)?;
        Ok(g.add(scores, bias)?)
    }

    fn prefix_dist(&self, g: &mut Graph<'_>, run: &mut SubLstmRun, prefix: &[TokenId]) -> Result<Var> {
        if let Some((_, dist)) = run.prefixes.get(prefix) {
            return Ok(*dist);
        }
        let parent = &prefix[..prefix.len() - 1];
        self.prefix_dist(g, run, parent)?;
        let (state, _) = run.prefixes[parent];
        let table = g.param(self.token_table);
        let last = *prefix.last().expect("non-empty prefix");
        let x = g.row(table, last as usize)?;
        let next = self.sub_lstm.step(g, &[state], x, None)?[0];
        let logits = self.sub_logits(g, next.h)?;
        let dist = g.log_softmax(logits)?;
        run.prefixes.insert(prefix.to_vec(), (next, dist));
        Ok(dist)
    }

    /// `log p_sub(chunk)`: token by token, then the end symbol unless the
    /// chunk already has the maximum length.
    pub fn sub_chunk_logprob(&self, g: &mut Graph<'_>, run: &mut SubLstmRun, chunk: &[TokenId]) -> Result<Var> {
        if chunk.is_empty() || chunk.len() > self.max_len {
            return Err(Error::Config(format!(
                "chunk length {} outside 1..={}",
                chunk.len(),
                self.max_len
            )));
        }
        if let Some(&t) = chunk.iter().find(|&&t| t as usize >= self.num_tokens) {
            return Err(Error::Config(format!("token id {t} outside the vocabulary")));
        }
        let mut terms = Vec::with_capacity(chunk.len() + 1);
        for k in 0..chunk.len() {
            let dist = self.prefix_dist(g, run, &chunk[..k])?;
            terms.push(g.pick(dist, chunk[k] as usize)?);
        }
        if chunk.len() < self.max_len {
            let dist = self.prefix_dist(g, run, chunk)?;
            terms.push(g.pick(dist, self.end_index())?);
        }
        Ok(g.sum(&terms)?)
    }

    /// `log(p_main(C) + p_main(<s>) p_sub(C))`; chunks outside the inventory
    /// only receive the sentinel term.
    pub fn chunk_logprob(
        &self,
        g: &mut Graph<'_>,
        main: Var,
        run: &mut SubLstmRun,
        vocab: &ChunkVocab,
        chunk: &[TokenId],
    ) -> Result<Var> {
        let sub = self.sub_chunk_logprob(g, run, chunk)?;
        let sentinel = g.pick(main, self.sentinel_index())?;
        let via_sentinel = g.add(sentinel, sub)?;
        match vocab.id_of(chunk) {
            Some(id) => {
                let direct = g.pick(main, id as usize)?;
                let both = g.concat(&[direct, via_sentinel])?;
                Ok(g.logsumexp(both)?)
            }
            None => Ok(via_sentinel),
        }
    }
}

/// Sub-LSTM states and output distributions, keyed by consumed prefix, so
/// chunks sharing a prefix at one node share computation.
pub struct SubLstmRun {
    prefixes: HashMap<Vec<TokenId>, (LayerState, Var)>,
}

/// Output layer for multilattices: one row per `(token, sense)` pair, tied to
/// the sense embeddings. `<eos>` has a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct SenseHead {
    pub sense_table: ParamId,
    pub out_bias: ParamId,
    pub projection: ParamId,
    pub senses: usize,
    offsets: Vec<usize>,
    rows: usize,
}

impl SenseHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        num_tokens: usize,
        senses: usize,
        sense_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        if senses == 0 || sense_dim == 0 {
            return Err(Error::Config("sense count and sense dimension must be positive".into()));
        }
        let mut offsets = Vec::with_capacity(num_tokens);
        let mut rows = 0;
        for t in 0..num_tokens {
            offsets.push(rows);
            rows += if t as TokenId == EOS { 1 } else { senses };
        }
        Ok(SenseHead {
            sense_table: store.add("sense.table", glorot(rng, rows, sense_dim)),
            out_bias: store.add("sense.out_bias", Tensor::zeros(vec![rows])),
            projection: store.add("sense.projection", glorot(rng, sense_dim, hidden_dim)),
            senses,
            offsets,
            rows,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.rows
    }

    pub fn senses_of(&self, token: TokenId) -> usize {
        if token == EOS {
            1
        } else {
            self.senses
        }
    }

    /// Table row of `(token, sense)`.
    pub fn row(&self, token: TokenId, sense: usize) -> Result<usize> {
        let base = *self
            .offsets
            .get(token as usize)
            .ok_or_else(|| Error::Config(format!("token id {token} outside the vocabulary")))?;
        if sense >= self.senses_of(token) {
            return Err(Error::Config(format!("sense {sense} out of range for token {token}")));
        }
        Ok(base + sense)
    }

    /// Log-probabilities over every `(token, sense)` row.
    pub fn sense_dist(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        let table = g.param(self.sense_table);
        let bias = g.param(self.out_bias);
        let proj = g.param(self.projection);
        let logits = tied_output_logits(g, hidden, table, bias, proj, self.rows)?;
        Ok(g.log_softmax(logits)?)
    }
}
