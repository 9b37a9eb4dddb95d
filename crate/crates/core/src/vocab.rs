//! Corpus preprocessing, the unit-token vocabulary, and the chunk inventory
//! (every unit token plus the most frequent n-grams up to a maximum length).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type ChunkId = u32;

pub const UNK: TokenId = 0;
pub const NUM: TokenId = 1;
pub const EOS: TokenId = 2;
/// Number of reserved ids at the start of every [`TokenVocab`].
pub const RESERVED: usize = 3;

pub const UNK_SURFACE: &str = "<unk>";
pub const NUM_SURFACE: &str = "<N>";
pub const EOS_SURFACE: &str = "<eos>";
/// Surface of the sentinel output symbol. It never becomes a token id; raw
/// occurrences map to [`UNK`].
pub const SENTINEL_SURFACE: &str = "<s>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Whitespace-separated words.
    #[default]
    Word,
    /// One token per code point.
    Char,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Mode::Word),
            "char" => Ok(Mode::Char),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected word or char)"))),
        }
    }
}

/// Lowercasing, number normalisation and splitting into token surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub mode: Mode,
    /// Sentences with more tokens than this (before `<eos>`) are dropped.
    pub max_len: usize,
}

fn replace_digit_runs(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_run = false;
    for ch in s.chars() {
        if ch.is_numeric() {
            if !in_run {
                out.push_str(NUM_SURFACE);
            }
            in_run = true;
        } else {
            out.push(ch);
            in_run = false;
        }
    }
    out
}

impl Preprocessor {
    pub fn new(mode: Mode, max_len: usize) -> Self {
        Preprocessor { mode, max_len }
    }

    /// Token surfaces of one line, without `<eos>`.
    pub fn tokenize(&self, line: &str) -> Vec<String> {
        let lower = line.to_lowercase();
        match self.mode {
            Mode::Word => lower.split_whitespace().map(replace_digit_runs).collect(),
            Mode::Char => {
                let mut out = Vec::new();
                let mut in_run = false;
                for ch in lower.chars().filter(|c| !c.is_whitespace()) {
                    if ch.is_numeric() {
                        if !in_run {
                            out.push(NUM_SURFACE.to_string());
                        }
                        in_run = true;
                    } else {
                        out.push(ch.to_string());
                        in_run = false;
                    }
                }
                out
            }
        }
    }

    fn kept_sentences<'a, I>(&self, lines: I) -> Vec<Vec<String>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        lines
            .into_iter()
            .map(|l| self.tokenize(l))
            .filter(|t| !t.is_empty() && t.len() <= self.max_len)
            .collect()
    }

    /// Builds a vocabulary of at most `vocab_size` entries (reserved ids
    /// included) from `lines` and encodes them. Every encoded sentence ends
    /// with [`EOS`].
    pub fn build<'a, I>(&self, lines: I, vocab_size: usize) -> Result<(TokenVocab, Vec<Vec<TokenId>>)>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if vocab_size < RESERVED {
            return Err(Error::Config(format!(
                "vocabulary size {vocab_size} is below the {RESERVED} reserved entries"
            )));
        }
        let sentences = self.kept_sentences(lines);
        if sentences.is_empty() {
            return Err(Error::Empty("corpus after filtering"));
        }
        let mut freq: HashMap<&str, (u64, usize)> = HashMap::new();
        for tok in sentences.iter().flatten() {
            let n = freq.len();
            freq.entry(tok.as_str()).or_insert((0, n)).0 += 1;
        }
        let mut ranked: Vec<(&str, u64, usize)> = freq
            .iter()
            .filter(|(s, _)| reserved_id(s).is_none())
            .map(|(s, (c, first))| (*s, *c, *first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(vocab_size - RESERVED);

        let mut vocab = TokenVocab::empty();
        for (surface, _, _) in &ranked {
            vocab.push(surface, 0);
        }
        let corpus: Vec<Vec<TokenId>> = sentences.iter().map(|s| vocab.encode_tokens(s)).collect();
        for sent in &corpus {
            for &t in sent {
                vocab.counts[t as usize] += 1;
            }
        }
        Ok((vocab, corpus))
    }

    /// Encodes lines against an existing vocabulary, applying the same
    /// length filter.
    pub fn encode<'a, I>(&self, vocab: &TokenVocab, lines: I) -> Vec<Vec<TokenId>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        self.kept_sentences(lines)
            .iter()
            .map(|s| vocab.encode_tokens(s))
            .collect()
    }
}

fn reserved_id(surface: &str) -> Option<TokenId> {
    match surface {
        UNK_SURFACE | EOS_SURFACE | SENTINEL_SURFACE => Some(UNK),
        NUM_SURFACE => Some(NUM),
        _ => None,
    }
}

/// Unit-token vocabulary with dense ids; ids `0..RESERVED` are
/// `<unk>`, `<N>` and `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    surfaces: Vec<String>,
    counts: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl TokenVocab {
    fn empty() -> Self {
        let mut v = TokenVocab {
            surfaces: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for s in [UNK_SURFACE, NUM_SURFACE, EOS_SURFACE] {
            v.push(s, 0);
        }
        v
    }

    fn push(&mut self, surface: &str, count: u64) -> TokenId {
        let id = self.surfaces.len() as TokenId;
        self.surfaces.push(surface.to_string());
        self.counts.push(count);
        self.index.insert(surface.to_string(), id);
        id
    }

    /// Vocabulary holding the reserved entries plus `surfaces`, all with zero
    /// counts.
    pub fn from_surfaces<S: AsRef<str>>(surfaces: &[S]) -> Result<Self> {
        let mut v = TokenVocab::empty();
        for s in surfaces {
            let s = s.as_ref();
            if reserved_id(s).is_some() || v.index.contains_key(s) {
                return Err(Error::Format {
                    what: "vocabulary",
                    detail: format!("duplicate or reserved surface {s:?}"),
                });
            }
            v.push(s, 0);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.surfaces[id as usize]
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts[id as usize]
    }

    /// Maps surfaces to ids (unknowns to [`UNK`]) and appends [`EOS`].
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = tokens
            .iter()
            .map(|t| {
                let t = t.as_ref();
                reserved_id(t).or_else(|| self.id(t)).unwrap_or(UNK)
            })
            .collect();
        out.push(EOS);
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&i| self.surface(i)).collect()
    }

    /// One `surface<TAB>count` line per id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (s, c) in self.surfaces.iter().zip(&self.counts) {
            let _ = writeln!(out, "{s}\t{c}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut v = TokenVocab {
            surfaces: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let (surface, count) = line.rsplit_once('\t').ok_or_else(|| Error::Format {
                what: "vocabulary",
                detail: format!("line {}: expected surface<TAB>count", n + 1),
            })?;
            let count: u64 = count.parse().map_err(|_| Error::Format {
                what: "vocabulary",
                detail: format!("line {}: bad count {count:?}", n + 1),
            })?;
            if v.index.contains_key(surface) {
                return Err(Error::Format {
                    what: "vocabulary",
                    detail: format!("line {}: duplicate surface {surface:?}", n + 1),
                });
            }
            v.push(surface, count);
        }
        let expected = [UNK_SURFACE, NUM_SURFACE, EOS_SURFACE];
        if v.len() < RESERVED || v.surfaces[..RESERVED] != expected {
            return Err(Error::Format {
                what: "vocabulary",
                detail: format!("first entries must be {expected:?}"),
            });
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Restores the surface lookup after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self
            .surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
    }
}

/// Chunk inventory. Chunk id `v` is the unit chunk `[v]` for every token id
/// `v`; frequent n-grams follow. The sentinel output row sits at index
/// [`ChunkVocab::sentinel_index`], one past the last chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkVocab {
    tokens: TokenVocab,
    chunks: Vec<Vec<TokenId>>,
    max_len: usize,
    #[serde(skip)]
    index: HashMap<Vec<TokenId>, ChunkId>,
}

impl ChunkVocab {
    /// Unit chunks for every token followed by `extra` multi-token chunks.
    pub fn from_parts(tokens: TokenVocab, extra: Vec<Vec<TokenId>>, max_len: usize) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::Config("maximum chunk length must be at least 1".into()));
        }
        let mut chunks: Vec<Vec<TokenId>> = (0..tokens.len() as TokenId).map(|t| vec![t]).collect();
        chunks.extend(extra);
        let mut vocab = ChunkVocab {
            tokens,
            chunks,
            max_len,
            index: HashMap::new(),
        };
        vocab.rebuild_index()?;
        Ok(vocab)
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.tokens.reindex();
        self.index.clear();
        for (id, c) in self.chunks.iter().enumerate() {
            if c.is_empty() || c.len() > self.max_len {
                return Err(Error::Format {
                    what: "chunk vocabulary",
                    detail: format!("chunk {id} has length {} (max {})", c.len(), self.max_len),
                });
            }
            if c.iter().any(|&t| t as usize >= self.tokens.len()) {
                return Err(Error::Format {
                    what: "chunk vocabulary",
                    detail: format!("chunk {id} references an unknown token id"),
                });
            }
            if self.index.insert(c.clone(), id as ChunkId).is_some() {
                return Err(Error::Format {
                    what: "chunk vocabulary",
                    detail: format!("duplicate chunk {c:?}"),
                });
            }
        }
        for t in 0..self.tokens.len() {
            if self.chunks.get(t).map(|c| c.as_slice()) != Some(&[t as TokenId][..]) {
                return Err(Error::Format {
                    what: "chunk vocabulary",
                    detail: format!("chunk {t} must be the unit token {t}"),
                });
            }
        }
        Ok(())
    }

    /// Restores lookup tables after deserialisation.
    pub fn reindex(&mut self) -> Result<()> {
        self.rebuild_index()
    }

    pub fn tokens(&self) -> &TokenVocab {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn sentinel_index(&self) -> usize {
        self.chunks.len()
    }

    pub fn id_of(&self, tokens: &[TokenId]) -> Option<ChunkId> {
        self.index.get(tokens).copied()
    }

    pub fn chunk(&self, id: ChunkId) -> &[TokenId] {
        &self.chunks[id as usize]
    }

    pub fn chunks(&self) -> &[Vec<TokenId>] {
        &self.chunks
    }

    /// Multi-token chunks only, in id order.
    pub fn multi_token_chunks(&self) -> &[Vec<TokenId>] {
        &self.chunks[self.tokens.len()..]
    }

    pub fn chunks_to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.chunks {
            let ids: Vec<String> = c.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "{}", ids.join(" "));
        }
        out
    }

    pub fn chunks_from_text(tokens: TokenVocab, text: &str, max_len: usize) -> Result<Self> {
        let mut chunks = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let ids = line
                .split(' ')
                .map(|s| s.parse::<TokenId>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format {
                    what: "chunk file",
                    detail: format!("line {}: expected space-separated token ids", n + 1),
                })?;
            chunks.push(ids);
        }
        let mut vocab = ChunkVocab {
            tokens,
            chunks,
            max_len,
            index: HashMap::new(),
        };
        vocab.rebuild_index()?;
        Ok(vocab)
    }

    pub fn save_chunks(&self, path: &Path) -> Result<()> {
        fs::write(path, self.chunks_to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load_chunks(tokens: TokenVocab, path: &Path, max_len: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::chunks_from_text(tokens, &text, max_len)
    }
}

/// Adds the `budget` most frequent n-grams with `2 <= n <= max_len` to the
/// unit vocabulary. Counting stays within sentences and never includes
/// [`EOS`]; ties go to the n-gram seen first.
pub fn build_chunk_vocab(
    corpus: &[Vec<TokenId>],
    tokens: TokenVocab,
    budget: usize,
    max_len: usize,
) -> Result<ChunkVocab> {
    if max_len == 0 {
        return Err(Error::Config("maximum chunk length must be at least 1".into()));
    }
    let mut counts: HashMap<&[TokenId], (u64, usize)> = HashMap::new();
    for sent in corpus {
        for n in 2..=max_len {
            for w in sent.windows(n) {
                if w.contains(&EOS) {
                    continue;
                }
                let first = counts.len();
                counts.entry(w).or_insert((0, first)).0 += 1;
            }
        }
    }
    let mut ranked: Vec<(&[TokenId], u64, usize)> = counts.into_iter().map(|(k, (c, f))| (k, c, f)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let extra = ranked.into_iter().take(budget).map(|(k, _, _)| k.to_vec()).collect();
    ChunkVocab::from_parts(tokens, extra, max_len)
}
