//! Lattice language models: parameters plus a per-sentence scorer.

use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{SenseHead, SentinelHead, SubLstmRun};
use crate::inference::LatticeScorer;
use crate::lattice::Lattice;
use crate::nn::{glorot, glorot_vector, BiLstm, DropoutMasks, LayerState, LstmParams};
use crate::tensor::{Graph, ParamId, ParamStore, Var};
use crate::vocab::{ChunkVocab, TokenId};

/// Which lattice the model marginalises over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LatticeSpec {
    /// Dense lattice of chunks up to `max_len` tokens.
    Chunk { max_len: usize },
    /// Multilattice with `senses` embeddings per token.
    Sense { senses: usize },
}

impl LatticeSpec {
    pub fn build(&self, tokens: &[TokenId]) -> Result<Lattice> {
        match *self {
            LatticeSpec::Chunk { max_len: 1 } => Lattice::single_path(tokens),
            LatticeSpec::Chunk { max_len } => Lattice::dense(tokens, max_len),
            LatticeSpec::Sense { senses } => Lattice::multi(tokens, senses),
        }
    }

    /// True when every sentence has exactly one path.
    pub fn is_single_path(&self) -> bool {
        matches!(self, LatticeSpec::Chunk { max_len: 1 } | LatticeSpec::Sense { senses: 1 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lattice: LatticeSpec,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub sub_hidden_dim: usize,
    /// Predict from a zero vector instead of the LSTM output, making every
    /// node's distribution independent of history.
    #[serde(default)]
    pub context_free_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lattice: LatticeSpec::Chunk { max_len: 1 },
            embed_dim: 32,
            hidden_dim: 32,
            layers: 2,
            sub_hidden_dim: 16,
            context_free_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.layers == 0 || self.embed_dim == 0 {
            return Err(Error::Config("embedding, hidden and layer sizes must be positive".into()));
        }
        match self.lattice {
            LatticeSpec::Chunk { max_len } => {
                if max_len == 0 {
                    return Err(Error::Config("lattice size must be at least 1".into()));
                }
                if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
                    return Err(Error::Config(format!(
                        "chunk models need an even embedding size, got {}",
                        self.embed_dim
                    )));
                }
                if self.sub_hidden_dim == 0 {
                    return Err(Error::Config("sub-LSTM hidden size must be positive".into()));
                }
            }
            LatticeSpec::Sense { senses } => {
                if senses == 0 || self.embed_dim / senses == 0 {
                    return Err(Error::Config(format!(
                        "{senses} embeddings per token do not fit in embedding size {}",
                        self.embed_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Chunk model: a token table feeding the composer and sub-LSTM, a chunk
/// table holding non-compositional embeddings (tied with the output layer),
/// and the main LSTM over `compositional ⊕ non-compositional` carriers.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkNet {
    pub token_table: ParamId,
    pub chunk_table: ParamId,
    pub bos: ParamId,
    pub lstm: LstmParams,
    pub composer: BiLstm,
    pub head: SentinelHead,
}

/// Multi-embedding model: sense rows serve as both inputs and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SenseNet {
    pub bos: ParamId,
    pub lstm: LstmParams,
    pub head: SenseHead,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Net {
    Chunk(ChunkNet),
    Sense(SenseNet),
}

#[derive(Debug, Clone)]
pub struct LatticeLm {
    pub config: ModelConfig,
    pub vocab: ChunkVocab,
    pub params: ParamStore,
    pub net: Net,
}

impl LatticeLm {
    pub fn new(config: ModelConfig, vocab: ChunkVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let h = config.hidden_dim;
        let v = vocab.tokens().len();
        let net = match config.lattice {
            LatticeSpec::Chunk { max_len } => {
                if vocab.max_len() != max_len {
                    return Err(Error::Config(format!(
                        "chunk vocabulary built for L={} but the model uses L={max_len}",
                        vocab.max_len()
                    )));
                }
                let token_table = store.add("embed.tokens", glorot(&mut rng, v, d));
                let chunk_table = store.add("embed.chunks", glorot(&mut rng, vocab.len() + 2, d));
                let bos = store.add("embed.bos", glorot_vector(&mut rng, 2 * d));
                let lstm = LstmParams::new(&mut store, &mut rng, "lstm", 2 * d, h, config.layers)?;
                let composer = BiLstm::new(&mut store, &mut rng, "composer", d, d / 2)?;
                let head = SentinelHead::new(
                    &mut store,
                    &mut rng,
                    &vocab,
                    chunk_table,
                    token_table,
                    d,
                    h,
                    config.sub_hidden_dim,
                )?;
                Net::Chunk(ChunkNet {
                    token_table,
                    chunk_table,
                    bos,
                    lstm,
                    composer,
                    head,
                })
            }
            LatticeSpec::Sense { senses } => {
                if vocab.len() != v {
                    return Err(Error::Config("multi-embedding models take no multi-token chunks".into()));
                }
                let ds = d / senses;
                let head = SenseHead::new(&mut store, &mut rng, v, senses, ds, h)?;
                let bos = store.add("embed.bos", glorot_vector(&mut rng, ds));
                let lstm = LstmParams::new(&mut store, &mut rng, "lstm", ds, h, config.layers)?;
                Net::Sense(SenseNet { bos, lstm, head })
            }
        };
        Ok(LatticeLm {
            config,
            vocab,
            params: store,
            net,
        })
    }

    pub fn lstm(&self) -> &LstmParams {
        match &self.net {
            Net::Chunk(n) => &n.lstm,
            Net::Sense(n) => &n.lstm,
        }
    }

    pub fn build_lattice(&self, tokens: &[TokenId]) -> Result<Lattice> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab.tokens().len()) {
            return Err(Error::Config(format!("token id {t} outside the vocabulary")));
        }
        self.config.lattice.build(tokens)
    }

    /// Starts scoring one sentence. With `dropout = Some((rate, rng))` one set
    /// of masks is sampled for the whole sentence.
    pub fn session<'m>(&'m self, g: &mut Graph<'m>, dropout: Option<(f64, &mut StdRng)>) -> Result<Session<'m>> {
        let masks = match dropout {
            Some((rate, rng)) => DropoutMasks::sample(g, self.lstm(), rate, rng)?,
            None => DropoutMasks::default(),
        };
        Ok(Session {
            model: self,
            masks,
            carriers: HashMap::new(),
            steps: 0,
        })
    }

    /// `log p(X)` by running the LSTM token by token, without a lattice.
    /// Only defined for single-path configurations.
    pub fn sequential_logprob(&self, tokens: &[TokenId]) -> Result<f64> {
        if !self.config.lattice.is_single_path() {
            return Err(Error::Config("the sequential evaluator needs L=1 or E=1".into()));
        }
        if tokens.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        let mut g = Graph::new(&self.params);
        let mut session = self.session(&mut g, None)?;
        let mut state = session.initial_state(&mut g)?;
        let mut total = 0.0;
        for &t in tokens {
            let hidden = session.hidden(&mut g, &state)?;
            let (lp, x) = match &self.net {
                Net::Chunk(n) => {
                    let main = n.head.main_chunk_dist(&mut g, hidden)?;
                    let mut run = n.head.start_sub(&mut g, hidden)?;
                    let lp = n.head.chunk_logprob(&mut g, main, &mut run, &self.vocab, &[t])?;
                    (lp, session.chunk_carrier(&mut g, &[t])?)
                }
                Net::Sense(n) => {
                    let dist = n.head.sense_dist(&mut g, hidden)?;
                    let row = n.head.row(t, 0)?;
                    let table = g.param(n.head.sense_table);
                    (g.pick(dist, row)?, g.row(table, row)?)
                }
            };
            total += g.scalar_value(lp);
            state = self.lstm().step(&mut g, &state, x, None)?;
        }
        Ok(total)
    }
}

/// Predictive state of one lattice node.
pub enum NodeHead {
    Chunk { main: Var, run: SubLstmRun },
    Sense { dist: Var },
}

/// Scores one sentence's lattice against a model. Edge carriers are cached
/// per span and sense, so parallel edges over the same tokens share work.
pub struct Session<'m> {
    model: &'m LatticeLm,
    masks: DropoutMasks,
    carriers: HashMap<(Vec<TokenId>, usize), Var>,
    steps: usize,
}

impl<'m> Session<'m> {
    fn hidden(&self, g: &mut Graph<'m>, state: &[LayerState]) -> Result<Var> {
        if self.model.config.context_free_head {
            return Ok(g.zeros(self.model.config.hidden_dim));
        }
        let top = state.last().expect("at least one layer").h;
        self.masks.apply_output(g, top)
    }

    /// `compose(tokens) ⊕ non-compositional row`.
    pub fn chunk_carrier(&mut self, g: &mut Graph<'m>, span: &[TokenId]) -> Result<Var> {
        self.carrier(g, span, 0)
    }

    fn carrier(&mut self, g: &mut Graph<'m>, span: &[TokenId], sense: usize) -> Result<Var> {
        let key = (span.to_vec(), sense);
        if let Some(&x) = self.carriers.get(&key) {
            return Ok(x);
        }
        let x = match &self.model.net {
            Net::Chunk(n) => {
                let tokens = g.param(n.token_table);
                let rows = span
                    .iter()
                    .map(|&t| g.row(tokens, t as usize))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let composed = n.composer.compose(g, &rows)?;
                let row = match self.model.vocab.id_of(span) {
                    Some(id) => id as usize,
                    None => self.model.vocab.len() + 1,
                };
                let table = g.param(n.chunk_table);
                let own = g.row(table, row)?;
                g.concat(&[composed, own])?
            }
            Net::Sense(n) => {
                let table = g.param(n.head.sense_table);
                g.row(table, n.head.row(span[0], sense)?)?
            }
        };
        self.carriers.insert(key, x);
        Ok(x)
    }
}

impl<'m> LatticeScorer<'m> for Session<'m> {
    type Head = NodeHead;

    fn initial_state(&mut self, g: &mut Graph<'m>) -> Result<Vec<LayerState>> {
        let lstm = self.model.lstm();
        let bos = match &self.model.net {
            Net::Chunk(n) => n.bos,
            Net::Sense(n) => n.bos,
        };
        let zero = lstm.zero_state(g);
        let x = g.param(bos);
        lstm.step(g, &zero, x, Some(&self.masks))
    }

    fn head(&mut self, g: &mut Graph<'m>, state: &[LayerState]) -> Result<NodeHead> {
        let hidden = self.hidden(g, state)?;
        Ok(match &self.model.net {
            Net::Chunk(n) => NodeHead::Chunk {
                main: n.head.main_chunk_dist(g, hidden)?,
                run: n.head.start_sub(g, hidden)?,
            },
            Net::Sense(n) => NodeHead::Sense {
                dist: n.head.sense_dist(g, hidden)?,
            },
        })
    }

    fn edge_logprob(&mut self, g: &mut Graph<'m>, head: &mut NodeHead, lattice: &Lattice, edge: usize) -> Result<Var> {
        let span = lattice.span(edge);
        match (&self.model.net, head) {
            (Net::Chunk(n), NodeHead::Chunk { main, run }) => n.head.chunk_logprob(g, *main, run, &self.model.vocab, span),
            (Net::Sense(n), NodeHead::Sense { dist }) => {
                let row = n.head.row(span[0], lattice.edge(edge).sense)?;
                Ok(g.pick(*dist, row)?)
            }
            _ => Err(Error::Config("head does not match the model".into())),
        }
    }

    fn advance(&mut self, g: &mut Graph<'m>, state: &[LayerState], lattice: &Lattice, edge: usize) -> Result<Vec<LayerState>> {
        let x = self.carrier(g, lattice.span(edge), lattice.edge(edge).sense)?;
        let lstm = self.model.lstm();
        self.steps += lstm.num_layers();
        lstm.step(g, state, x, Some(&self.masks))
    }

    fn lstm_steps(&self) -> usize {
        self.steps
    }
}

/// Random token sequence ending in `<eos>`, drawn from the non-reserved ids.
pub fn random_sentence(rng: &mut impl Rng, vocab_size: usize, len: usize) -> Vec<TokenId> {
    let mut s: Vec<TokenId> = (0..len.saturating_sub(1))
        .map(|_| rng.gen_range(crate::vocab::RESERVED as TokenId..vocab_size as TokenId))
        .collect();
    s.push(crate::vocab::EOS);
    s
}
