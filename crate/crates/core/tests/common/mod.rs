//! Synthetic corpora and small models shared by the integration tests.
#![allow(dead_code)]

use lattice_lm::model::{LatticeLm, LatticeSpec, ModelConfig};
use lattice_lm::vocab::{ChunkVocab, TokenId, TokenVocab, EOS, RESERVED};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Zipf};

pub struct Synthetic {
    pub tokens: TokenVocab,
    pub train: Vec<Vec<TokenId>>,
    pub valid: Vec<Vec<TokenId>>,
}

impl Synthetic {
    pub fn train_tokens(&self) -> usize {
        self.train.iter().map(Vec::len).sum()
    }
}

/// Vocabulary of `size` entries: the reserved ids plus `w3, w4, ...`.
pub fn word_vocab(size: usize) -> TokenVocab {
    let surfaces: Vec<String> = (RESERVED..size).map(|i| format!("w{i}")).collect();
    TokenVocab::from_surfaces(&surfaces).unwrap()
}

fn sentences_until(rng: &mut StdRng, target_tokens: usize, mut sentence: impl FnMut(&mut StdRng) -> Vec<TokenId>) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut n = 0;
    while n < target_tokens {
        let mut s = sentence(rng);
        s.push(EOS);
        n += s.len();
        out.push(s);
    }
    out
}

/// Shape of the planted-bigram corpus.
#[derive(Debug, Clone, Copy)]
pub struct BigramDesign {
    pub heads: usize,
    pub tails: usize,
    pub bigrams: usize,
    /// Distinct words that may follow a bigram.
    pub followers: usize,
    /// Chance that the next slot holds a bigram rather than a filler word.
    pub rate: f64,
    pub zipf: f64,
}

impl Default for BigramDesign {
    fn default() -> Self {
        BigramDesign {
            heads: 6,
            tails: 6,
            bigrams: 24,
            followers: 24,
            rate: 0.3,
            zipf: 1.0,
        }
    }
}

/// Zipfian filler over 200 token types with planted bigrams. Each bigram
/// joins a head word with a tail word, and the word after it depends on the
/// pair as a whole, not on either part.
pub fn planted_bigram_corpus(seed: u64, train_tokens: usize, valid_tokens: usize) -> Synthetic {
    planted_bigram_corpus_with(BigramDesign::default(), seed, train_tokens, valid_tokens)
}

pub fn planted_bigram_corpus_with(d: BigramDesign, seed: u64, train_tokens: usize, valid_tokens: usize) -> Synthetic {
    const VOCAB: usize = 200;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut words: Vec<TokenId> = (RESERVED as TokenId..VOCAB as TokenId).collect();
    words.shuffle(&mut rng);
    let heads: Vec<TokenId> = words.drain(..d.heads).collect();
    let tails: Vec<TokenId> = words.drain(..d.tails).collect();
    let follower_words: Vec<TokenId> = words.drain(..d.followers).collect();
    let followers: Vec<TokenId> = (0..d.bigrams).map(|k| follower_words[k % d.followers]).collect();
    let filler = words;
    let mut pairs: Vec<(TokenId, TokenId)> = heads.iter().flat_map(|&h| tails.iter().map(move |&t| (h, t))).collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(d.bigrams);
    let zipf = Zipf::new(filler.len() as u64, d.zipf).unwrap();

    let mut sentence = |rng: &mut StdRng| {
        let len = rng.gen_range(6..=14);
        let mut s = Vec::with_capacity(len + 3);
        while s.len() < len {
            if rng.gen_bool(d.rate) {
                let k = rng.gen_range(0..d.bigrams);
                s.extend([pairs[k].0, pairs[k].1, followers[k]]);
            } else {
                s.push(filler[zipf.sample(rng) as usize - 1]);
            }
        }
        s
    };
    let train = sentences_until(&mut rng, train_tokens, &mut sentence);
    let valid = sentences_until(&mut rng, valid_tokens, &mut sentence);
    Synthetic {
        tokens: word_vocab(VOCAB),
        train,
        valid,
    }
}

/// Shape of the homograph corpus.
#[derive(Debug, Clone, Copy)]
pub struct HomographDesign {
    pub homographs: usize,
    /// Chance that the next slot holds a homograph and its successor.
    pub rate: f64,
    pub zipf: f64,
}

impl Default for HomographDesign {
    fn default() -> Self {
        HomographDesign {
            homographs: 20,
            rate: 0.25,
            zipf: 1.0,
        }
    }
}

/// Homographs shared by two disjoint topics. Every sentence draws its words
/// from one topic; a homograph's successor comes from a topic-specific
/// table, so which "sense" is active is only visible from context.
pub fn homograph_corpus(seed: u64, train_tokens: usize, valid_tokens: usize) -> Synthetic {
    homograph_corpus_with(HomographDesign::default(), seed, train_tokens, valid_tokens)
}

pub fn homograph_corpus_with(d: HomographDesign, seed: u64, train_tokens: usize, valid_tokens: usize) -> Synthetic {
    const VOCAB: usize = 200;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut words: Vec<TokenId> = (RESERVED as TokenId..VOCAB as TokenId).collect();
    words.shuffle(&mut rng);
    let homographs: Vec<TokenId> = words.drain(..d.homographs).collect();
    let half = words.len() / 2;
    let topics = [words[..half].to_vec(), words[half..].to_vec()];
    let successors: Vec<Vec<TokenId>> = topics
        .iter()
        .map(|t| (0..d.homographs).map(|_| t[rng.gen_range(0..t.len())]).collect())
        .collect();
    let zipf = Zipf::new(half as u64, d.zipf).unwrap();

    let mut sentence = |rng: &mut StdRng| {
        let topic = rng.gen_range(0..2);
        let len = rng.gen_range(6..=14);
        let mut s = Vec::with_capacity(len + 2);
        while s.len() < len {
            if rng.gen_bool(d.rate) {
                let h = rng.gen_range(0..d.homographs);
                s.extend([homographs[h], successors[topic][h]]);
            } else {
                s.push(topics[topic][zipf.sample(rng) as usize - 1]);
            }
        }
        s
    };
    let train = sentences_until(&mut rng, train_tokens, &mut sentence);
    let valid = sentences_until(&mut rng, valid_tokens, &mut sentence);
    Synthetic {
        tokens: word_vocab(VOCAB),
        train,
        valid,
    }
}

/// Small random sentences ending in `<eos>`.
pub fn random_sentence(rng: &mut impl Rng, vocab_size: usize, len: usize) -> Vec<TokenId> {
    lattice_lm::model::random_sentence(rng, vocab_size, len)
}

/// A model over `vocab_size` tokens. Chunk lattices get `extra` random
/// multi-token chunks.
pub fn small_model(lattice: LatticeSpec, vocab_size: usize, hidden: usize, layers: usize, seed: u64, context_free: bool) -> LatticeLm {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let tokens = word_vocab(vocab_size);
    let vocab = match lattice {
        LatticeSpec::Chunk { max_len } => {
            let mut extra: Vec<Vec<TokenId>> = Vec::new();
            if max_len > 1 {
                for _ in 0..6 {
                    let len = rng.gen_range(2..=max_len);
                    let c = random_sentence(&mut rng, vocab_size, len + 1)[..len].to_vec();
                    if !extra.contains(&c) {
                        extra.push(c);
                    }
                }
            }
            ChunkVocab::from_parts(tokens, extra, max_len).unwrap()
        }
        LatticeSpec::Sense { .. } => ChunkVocab::from_parts(tokens, vec![], 1).unwrap(),
    };
    let config = ModelConfig {
        lattice,
        embed_dim: 6,
        hidden_dim: hidden,
        layers,
        sub_hidden_dim: 4,
        context_free_head: context_free,
    };
    LatticeLm::new(config, vocab, seed).unwrap()
}
