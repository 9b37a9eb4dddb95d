//! Lattices over token-level prefixes. Node `j` stands for the first `j`
//! tokens of the sentence; an edge `i -> j` emits tokens `i..j` (with one of
//! several embeddings on multilattices).

use crate::error::{Error, Result};
use crate::vocab::{TokenId, EOS};

/// Default ceiling for [`enumerate_paths`].
pub const ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    /// Embedding index; always 0 outside multilattices.
    pub sense: usize,
}

impl Edge {
    pub fn len(&self) -> usize {
        self.to - self.from
    }

    pub fn is_empty(&self) -> bool {
        self.to == self.from
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatticeKind {
    SinglePath,
    Dense { max_len: usize },
    Multi { senses: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lattice {
    tokens: Vec<TokenId>,
    edges: Vec<Edge>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    kind: LatticeKind,
}

/// A segmentation: edge indices from node 0 to the final node.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegPath {
    pub edges: Vec<usize>,
}

impl SegPath {
    /// Chunk boundaries `0 = s0 < s1 < ... = |X|`.
    pub fn boundaries(&self, lattice: &Lattice) -> Vec<usize> {
        let mut b = vec![0];
        b.extend(self.edges.iter().map(|&e| lattice.edge(e).to));
        b
    }
}

fn non_empty(tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        Err(Error::Empty("lattice tokens"))
    } else {
        Ok(())
    }
}

impl Lattice {
    fn from_edges(tokens: &[TokenId], mut edges: Vec<Edge>, kind: LatticeKind) -> Self {
        edges.sort_by_key(|e| (e.to, e.from, e.sense));
        let n = tokens.len() + 1;
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for (k, e) in edges.iter().enumerate() {
            incoming[e.to].push(k);
            outgoing[e.from].push(k);
        }
        Lattice {
            tokens: tokens.to_vec(),
            edges,
            incoming,
            outgoing,
            kind,
        }
    }

    /// One unit edge per position.
    pub fn single_path(tokens: &[TokenId]) -> Result<Self> {
        non_empty(tokens)?;
        let edges = (0..tokens.len())
            .map(|i| Edge {
                from: i,
                to: i + 1,
                sense: 0,
            })
            .collect();
        Ok(Self::from_edges(tokens, edges, LatticeKind::SinglePath))
    }

    /// Every span of length `1..=max_len`, except that only unit edges may
    /// cover an end-of-sentence token.
    pub fn dense(tokens: &[TokenId], max_len: usize) -> Result<Self> {
        non_empty(tokens)?;
        if max_len == 0 {
            return Err(Error::Config("lattice size must be at least 1".into()));
        }
        let mut edges = Vec::new();
        for i in 0..tokens.len() {
            for len in 1..=max_len.min(tokens.len() - i) {
                if len > 1 && tokens[i..i + len].contains(&EOS) {
                    continue;
                }
                edges.push(Edge {
                    from: i,
                    to: i + len,
                    sense: 0,
                });
            }
        }
        Ok(Self::from_edges(tokens, edges, LatticeKind::Dense { max_len }))
    }

    /// `senses` parallel unit edges per position; end-of-sentence tokens get
    /// a single edge.
    pub fn multi(tokens: &[TokenId], senses: usize) -> Result<Self> {
        non_empty(tokens)?;
        if senses == 0 {
            return Err(Error::Config("embeddings per token must be at least 1".into()));
        }
        let mut edges = Vec::new();
        for (i, &t) in tokens.iter().enumerate() {
            let n = if t == EOS { 1 } else { senses };
            edges.extend((0..n).map(|sense| Edge {
                from: i,
                to: i + 1,
                sense,
            }));
        }
        Ok(Self::from_edges(tokens, edges, LatticeKind::Multi { senses }))
    }

    pub fn kind(&self) -> LatticeKind {
        self.kind
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Node count `|X| + 1`.
    pub fn num_nodes(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn final_node(&self) -> usize {
        self.tokens.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, k: usize) -> Edge {
        self.edges[k]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Tokens emitted by edge `k`.
    pub fn span(&self, k: usize) -> &[TokenId] {
        let e = self.edges[k];
        &self.tokens[e.from..e.to]
    }

    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    pub fn outgoing(&self, node: usize) -> &[usize] {
        &self.outgoing[node]
    }

    /// Maximum in-degree `D`.
    pub fn max_in_degree(&self) -> usize {
        self.incoming.iter().map(|v| v.len()).max().unwrap_or(0)
    }

    /// Number of segmentations by the prefix recursion `N(j) = Σ N(i)`.
    pub fn path_count(&self) -> u128 {
        let mut n = vec![0u128; self.num_nodes()];
        n[0] = 1;
        for j in 1..self.num_nodes() {
            n[j] = self.incoming[j]
                .iter()
                .map(|&k| n[self.edges[k].from])
                .fold(0u128, |a, b| a.saturating_add(b));
        }
        n[self.final_node()]
    }

    /// Checks the structural invariants every builder must uphold.
    pub fn validate(&self) -> Result<()> {
        let last = self.final_node();
        for (k, e) in self.edges.iter().enumerate() {
            if e.from >= e.to || e.to > last {
                return Err(Error::Lattice(format!("edge {k} is not forward: {e:?}")));
            }
            let senses = match self.kind {
                LatticeKind::Multi { senses } => senses,
                _ => 1,
            };
            if e.sense >= senses {
                return Err(Error::Lattice(format!("edge {k} has sense {} >= {senses}", e.sense)));
            }
        }
        if !self.incoming[0].is_empty() {
            return Err(Error::Lattice("node 0 has incoming edges".into()));
        }
        for j in 1..=last {
            if self.incoming[j].is_empty() {
                return Err(Error::Lattice(format!("node {j} has no incoming edge")));
            }
        }
        for i in 0..last {
            if self.outgoing[i].is_empty() {
                return Err(Error::Lattice(format!("node {i} has no outgoing edge")));
            }
        }
        Ok(())
    }
}

/// Every path from node 0 to the final node, in lexicographic edge order.
pub fn enumerate_paths(lattice: &Lattice, cap: u128) -> Result<Vec<SegPath>> {
    if lattice.path_count() > cap {
        return Err(Error::EnumerationCap { cap });
    }
    let mut out = Vec::new();
    let mut stack = Vec::new();
    fn walk(l: &Lattice, node: usize, stack: &mut Vec<usize>, out: &mut Vec<SegPath>) {
        if node == l.final_node() {
            out.push(SegPath { edges: stack.clone() });
            return;
        }
        for &k in l.outgoing(node) {
            stack.push(k);
            walk(l, l.edge(k).to, stack, out);
            stack.pop();
        }
    }
    walk(lattice, 0, &mut stack, &mut out);
    Ok(out)
}
