//! Batch sets, the batch interaction graph, the connectivity conditions that
//! make the orthogonal frame the unique mini-batch optimum, and
//! batch-binding.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LabelSet;

/// Hard cap on the factorial enumeration in [`all_permutation_batches`].
pub const MAX_ENUMERATION_N: usize = 8;

/// An ordered collection of example-index batches over a universe of `n`
/// examples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawBatchSet")]
pub struct BatchSet {
    n: usize,
    batches: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct RawBatchSet {
    n: usize,
    batches: Vec<Vec<usize>>,
}

impl TryFrom<RawBatchSet> for BatchSet {
    type Error = Error;

    fn try_from(raw: RawBatchSet) -> Result<Self> {
        Self::new(raw.n, raw.batches)
    }
}

impl BatchSet {
    /// Every batch must be non-empty, in range, and free of repeated indices.
    pub fn new(n: usize, batches: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![usize::MAX; n];
        for (b, batch) in batches.iter().enumerate() {
            if batch.is_empty() {
                return Err(Error::EmptyBatch(b));
            }
            for &i in batch {
                if i >= n {
                    return Err(Error::IndexOutOfRange { index: i, n });
                }
                if seen[i] == b {
                    return Err(Error::InvalidArgument(format!(
                        "index {i} repeated within batch {b}"
                    )));
                }
                seen[i] = b;
            }
        }
        Ok(Self { n, batches })
    }

    /// One batch holding every example.
    pub fn full(n: usize) -> Self {
        Self {
            n,
            batches: vec![(0..n).collect()],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn push(&mut self, batch: Vec<usize>) -> Result<()> {
        let mut all = std::mem::take(&mut self.batches);
        all.push(batch);
        *self = Self::new(self.n, all)?;
        Ok(())
    }

    /// Whether the batches are pairwise disjoint and cover `0..n`.
    pub fn is_partition(&self) -> bool {
        let mut hits = vec![0usize; self.n];
        for &i in self.batches.iter().flatten() {
            hits[i] += 1;
        }
        hits.iter().all(|&h| h == 1)
    }

    pub(crate) fn validate_against(&self, y: &LabelSet) -> Result<()> {
        if self.n != y.n() {
            return Err(Error::DimensionMismatch {
                what: "batch universe vs labels",
                expected: y.n(),
                found: self.n,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Undirected graph on example indices with an edge between two examples
/// iff some batch contains both.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionGraph {
    n: usize,
    adjacency: Vec<bool>,
    edge_count: usize,
}

impl InteractionGraph {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            adjacency: vec![false; n * n],
            edge_count: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u != v && u < self.n && v < self.n && self.adjacency[u * self.n + v]
    }

    /// Edges `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count);
        for u in 0..self.n {
            for v in u + 1..self.n {
                if self.adjacency[u * self.n + v] {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn is_complete(&self) -> bool {
        self.edge_count == self.n * self.n.saturating_sub(1) / 2
    }

    /// Connects every pair inside `batch`.
    pub fn add_batch(&mut self, batch: &[usize]) -> Result<()> {
        if let Some(&bad) = batch.iter().find(|&&i| i >= self.n) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                n: self.n,
            });
        }
        for (a, &u) in batch.iter().enumerate() {
            for &v in &batch[a + 1..] {
                if u != v && !self.adjacency[u * self.n + v] {
                    self.adjacency[u * self.n + v] = true;
                    self.adjacency[v * self.n + u] = true;
                    self.edge_count += 1;
                }
            }
        }
        Ok(())
    }

    /// Edges whose endpoints both belong to class `c`.
    pub fn class_edges(&self, y: &LabelSet, c: usize) -> Vec<(usize, usize)> {
        self.edges()
            .into_iter()
            .filter(|&(u, v)| y.label(u) == c && y.label(v) == c)
            .collect()
    }

    /// Connected components of the subgraph induced by class `c`, each
    /// sorted, ordered by smallest member.
    pub fn class_components(&self, y: &LabelSet, c: usize) -> Vec<Vec<usize>> {
        let members = y.members(c);
        let mut uf = UnionFind::new(self.n);
        for (a, &u) in members.iter().enumerate() {
            for &v in &members[a + 1..] {
                if self.has_edge(u, v) {
                    uf.union(u, v);
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut root_slot = vec![usize::MAX; self.n];
        for &u in &members {
            let r = uf.find(u);
            if root_slot[r] == usize::MAX {
                root_slot[r] = groups.len();
                groups.push(Vec::new());
            }
            groups[root_slot[r]].push(u);
        }
        groups
    }
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns `false` if `a` and `b` were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

pub fn build_graph(batches: &BatchSet, y: &LabelSet) -> Result<InteractionGraph> {
    batches.validate_against(y)?;
    let mut g = InteractionGraph::empty(batches.n());
    for b in batches.batches() {
        g.add_batch(b)?;
    }
    Ok(g)
}

/// Outcome of checking the two graph conditions: every class subgraph is
/// connected, and every pair of classes shares at least one edge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub per_class_connected: Vec<bool>,
    pub missing_cross_pairs: Vec<(usize, usize)>,
    pub satisfied: bool,
}

impl ConditionReport {
    pub fn disconnected_classes(&self) -> Vec<usize> {
        self.per_class_connected
            .iter()
            .enumerate()
            .filter_map(|(c, &ok)| (!ok).then_some(c))
            .collect()
    }
}

pub fn check_cor_conditions(g: &InteractionGraph, y: &LabelSet) -> ConditionReport {
    let k = y.k();
    let mut uf = UnionFind::new(g.n());
    let mut linked = vec![false; k * k];
    for (u, v) in g.edges() {
        let (cu, cv) = (y.label(u), y.label(v));
        if cu == cv {
            uf.union(u, v);
        } else {
            linked[cu.min(cv) * k + cu.max(cv)] = true;
        }
    }
    let per_class_connected: Vec<bool> = (0..k)
        .map(|c| {
            let members = y.members(c);
            let root = uf.find(members[0]);
            members.iter().all(|&m| uf.find(m) == root)
        })
        .collect();
    let mut missing_cross_pairs = Vec::new();
    for c1 in 0..k {
        for c2 in c1 + 1..k {
            if !linked[c1 * k + c2] {
                missing_cross_pairs.push((c1, c2));
            }
        }
    }
    let satisfied = per_class_connected.iter().all(|&b| b) && missing_cross_pairs.is_empty();
    ConditionReport {
        per_class_connected,
        missing_cross_pairs,
        satisfied,
    }
}

/// How the per-class binding examples are chosen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Explicit indices, exactly one per class (any order).
    Given(Vec<usize>),
    /// The lowest index of each class.
    LowestIndex,
    /// A uniformly random member of each class.
    Random { seed: u64 },
}

/// Resolves a [`Binding`] to one example index per class, ordered by class.
pub fn binding_examples(y: &LabelSet, binding: &Binding) -> Result<Vec<usize>> {
    match binding {
        Binding::Given(idx) => {
            if idx.len() != y.k() {
                return Err(Error::InvalidArgument(format!(
                    "binding set has {} examples, expected one per class ({})",
                    idx.len(),
                    y.k()
                )));
            }
            let mut by_class = vec![usize::MAX; y.k()];
            for &i in idx {
                if i >= y.n() {
                    return Err(Error::IndexOutOfRange { index: i, n: y.n() });
                }
                let c = y.label(i);
                if by_class[c] != usize::MAX {
                    return Err(Error::InvalidArgument(format!(
                        "binding set has two examples of class {c}"
                    )));
                }
                by_class[c] = i;
            }
            Ok(by_class)
        }
        Binding::LowestIndex => Ok((0..y.k()).map(|c| y.members(c)[0]).collect()),
        Binding::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..y.k())
                .map(|c| *y.members(c).choose(&mut rng).expect("class is non-empty"))
                .collect())
        }
    }
}

/// Appends the binding examples to every batch, skipping any already
/// present. Original order is kept and the additions follow class order.
pub fn batch_binding(batches: &BatchSet, y: &LabelSet, binding: &Binding) -> Result<BatchSet> {
    batches.validate_against(y)?;
    let bind = binding_examples(y, binding)?;
    let out = batches
        .batches()
        .iter()
        .map(|b| {
            let mut nb = b.clone();
            for &i in &bind {
                if !b.contains(&i) {
                    nb.push(i);
                }
            }
            nb
        })
        .collect();
    BatchSet::new(batches.n(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// One seeded partition reused every epoch.
    Fixed,
    /// A fresh seeded partition per epoch.
    Reshuffle,
}

/// Seeded uniform permutation of `0..n`. The stream is ChaCha8 seeded from
/// `seed` on stream `stream`, consumed by a Fisher-Yates shuffle.
pub fn seeded_permutation(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Consecutive blocks of `batch_size` from a seeded permutation; the last
/// block keeps whatever remains.
pub fn make_partition(
    y: &LabelSet,
    batch_size: usize,
    scheme: Scheme,
    epoch: u64,
    seed: u64,
) -> Result<BatchSet> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let n = y.n();
    let stream = match scheme {
        Scheme::Fixed => 0,
        Scheme::Reshuffle => epoch,
    };
    let perm = seeded_permutation(n, seed, stream);
    let batches = perm
        .chunks(batch_size.min(n))
        .map(<[usize]>::to_vec)
        .collect();
    BatchSet::new(n, batches)
}

/// Union interaction graph over every ordering of `0..n`, each ordering cut
/// into consecutive blocks of `b`.
pub fn all_permutation_batches(n: usize, b: usize) -> Result<InteractionGraph> {
    if n > MAX_ENUMERATION_N {
        return Err(Error::InvalidArgument(format!(
            "n = {n} exceeds the enumeration cap of {MAX_ENUMERATION_N}"
        )));
    }
    if b < 2 || b > n {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= b <= n, got b = {b}, n = {n}"
        )));
    }
    let mut g = InteractionGraph::empty(n);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        for block in perm.chunks(b) {
            g.add_batch(block)?;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(g)
}

/// Advances to the next lexicographic permutation; `false` after the last.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len())
        .rev()
        .find(|&j| p[j] > p[i - 1])
        .expect("pivot exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
