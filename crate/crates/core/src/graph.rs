//! Graph containers, transition-matrix construction, candidate pools, and
//! connectivity analysis.
//!
//! The propagation operator is always the row-stochastic matrix
//! `P = D^-1 (A + eps I)`; the small self-loop keeps rows defined when a node
//! is otherwise isolated or fully gated off.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::rng::DetRng;

/// Default self-loop weight injected at normalization.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Default hard cap on candidate-pool size.
pub const DEFAULT_POOL_CAP: usize = 5_000_000;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("row {row} of A + eps*I sums to zero (isolated node with eps = 0)")]
    ZeroRow { row: usize },
    #[error("matrix entry ({i},{j}) is negative: {value}")]
    NegativeEntry { i: usize, j: usize, value: f64 },
    #[error("edge ({i},{j}) out of range for {n_nodes} nodes")]
    EdgeOutOfRange { i: usize, j: usize, n_nodes: usize },
    #[error("explicit self-loop ({0},{0}) is not allowed; self-loops are injected via eps")]
    SelfLoop(usize),
    #[error("requested candidate pool of {requested} pairs exceeds the hard cap {cap}")]
    PoolOverflow { requested: usize, cap: usize },
    #[error("edge list parse error at line {line}: {msg}")]
    EdgeListParse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Directed graph with optional nonnegative edge weights.
///
/// Edges are stored sorted lexicographically and deduplicated; no explicit
/// self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    weights: Option<Vec<f64>>,
}

impl Graph {
    /// Build from directed edges. Duplicate edges collapse (weights of
    /// duplicates must agree for weighted graphs; last one wins otherwise).
    pub fn new(
        n_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        Self::build(n_nodes, edges.into_iter().map(|e| (e, 1.0)), false)
    }

    pub fn new_weighted(
        n_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self, GraphError> {
        Self::build(n_nodes, edges.into_iter().map(|(i, j, w)| ((i, j), w)), true)
    }

    fn build(
        n_nodes: usize,
        edges: impl Iterator<Item = ((usize, usize), f64)>,
        weighted: bool,
    ) -> Result<Self, GraphError> {
        let mut map: HashMap<(usize, usize), f64> = HashMap::new();
        for ((i, j), w) in edges {
            if i >= n_nodes || j >= n_nodes {
                return Err(GraphError::EdgeOutOfRange { i, j, n_nodes });
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if w < 0.0 {
                return Err(GraphError::NegativeEntry { i, j, value: w });
            }
            map.insert((i, j), w);
        }
        let mut pairs: Vec<_> = map.into_iter().collect();
        pairs.sort_by_key(|&((i, j), _)| (i, j));
        let edges: Vec<_> = pairs.iter().map(|&(e, _)| e).collect();
        let weights = if weighted {
            Some(pairs.iter().map(|&(_, w)| w).collect())
        } else {
            None
        };
        Ok(Self { n_nodes, edges, weights })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn weight_of(&self, k: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[k])
    }

    /// Dense adjacency matrix (1.0 per edge when unweighted).
    pub fn adjacency_matrix(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n_nodes, self.n_nodes));
        for (k, &(i, j)) in self.edges.iter().enumerate() {
            a[[i, j]] = self.weight_of(k);
        }
        a
    }

    /// Out-neighbor lists, sorted by target index.
    pub fn out_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for &(i, j) in &self.edges {
            adj[i].push(j);
        }
        adj
    }

    /// Write as edge-list text: header `n_nodes=<N>`, one `i j [w]` line per edge.
    pub fn write_edge_list(&self, path: &Path) -> Result<(), GraphError> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# directed edge list")?;
        writeln!(w, "n_nodes={}", self.n_nodes)?;
        for (k, &(i, j)) in self.edges.iter().enumerate() {
            match &self.weights {
                Some(ws) => writeln!(w, "{} {} {}", i, j, ws[k])?,
                None => writeln!(w, "{} {}", i, j)?,
            }
        }
        Ok(())
    }

    /// Parse the edge-list format written by [`Graph::write_edge_list`].
    pub fn read_edge_list(path: &Path) -> Result<Self, GraphError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut n_nodes: Option<usize> = None;
        let mut plain = Vec::new();
        let mut weighted = Vec::new();
        let mut any_weight = false;
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            let text = line.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            if let Some(rest) = text.strip_prefix("n_nodes=") {
                let n = rest.trim().parse::<usize>().map_err(|e| GraphError::EdgeListParse {
                    line: lineno,
                    msg: format!("bad n_nodes: {e}"),
                })?;
                n_nodes = Some(n);
                continue;
            }
            let parts: Vec<&str> = text.split_whitespace().collect();
            if parts.len() != 2 && parts.len() != 3 {
                return Err(GraphError::EdgeListParse {
                    line: lineno,
                    msg: format!("expected `i j [w]`, got {:?}", text),
                });
            }
            let i = parts[0].parse::<usize>().map_err(|e| GraphError::EdgeListParse {
                line: lineno,
                msg: format!("bad source index: {e}"),
            })?;
            let j = parts[1].parse::<usize>().map_err(|e| GraphError::EdgeListParse {
                line: lineno,
                msg: format!("bad target index: {e}"),
            })?;
            let w = if parts.len() == 3 {
                any_weight = true;
                parts[2].parse::<f64>().map_err(|e| GraphError::EdgeListParse {
                    line: lineno,
                    msg: format!("bad weight: {e}"),
                })?
            } else {
                1.0
            };
            plain.push((i, j));
            weighted.push((i, j, w));
        }
        let n = n_nodes.ok_or(GraphError::EdgeListParse {
            line: 0,
            msg: "missing `n_nodes=<N>` header".into(),
        })?;
        if any_weight {
            Self::new_weighted(n, weighted)
        } else {
            Self::new(n, plain)
        }
    }
}

/// Nonnegative square matrix with unit row sums: the propagation operator.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStochasticMatrix {
    p: Array2<f64>,
}

impl RowStochasticMatrix {
    /// Validate an existing matrix (rows sum to 1 within 1e-12, entries >= 0).
    pub fn try_new(p: Array2<f64>) -> Result<Self, GraphError> {
        assert_eq!(p.nrows(), p.ncols(), "P must be square");
        for i in 0..p.nrows() {
            let mut sum = 0.0;
            for j in 0..p.ncols() {
                let v = p[[i, j]];
                if v < 0.0 {
                    return Err(GraphError::NegativeEntry { i, j, value: v });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-12 {
                return Err(GraphError::ZeroRow { row: i });
            }
        }
        Ok(Self { p })
    }

    pub(crate) fn from_normalized(p: Array2<f64>) -> Self {
        Self { p }
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.p
    }

    /// Support pairs `(i,j)` with `P_ij > 0`, including diagonal entries.
    pub fn support_edges(&self) -> Vec<(usize, usize)> {
        support(&self.p, 0.0)
    }
}

/// Row-normalize `A + eps*I`.
///
/// Errors with [`GraphError::ZeroRow`] when a row of `A + eps*I` sums to zero
/// (an isolated node with `eps = 0`).
pub fn row_normalize(a: &Array2<f64>, epsilon: f64) -> Result<RowStochasticMatrix, GraphError> {
    assert_eq!(a.nrows(), a.ncols(), "A must be square");
    assert!(epsilon >= 0.0, "epsilon must be nonnegative");
    let n = a.nrows();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let mut sum = epsilon;
        for j in 0..n {
            let v = a[[i, j]];
            if v < 0.0 {
                return Err(GraphError::NegativeEntry { i, j, value: v });
            }
            sum += v;
        }
        if sum == 0.0 {
            return Err(GraphError::ZeroRow { row: i });
        }
        for j in 0..n {
            let tilde = a[[i, j]] + if i == j { epsilon } else { 0.0 };
            p[[i, j]] = tilde / sum;
        }
    }
    Ok(RowStochasticMatrix::from_normalized(p))
}

/// Entries strictly above `threshold`, as sorted directed pairs.
pub fn support(a: &Array2<f64>, threshold: f64) -> Vec<(usize, usize)> {
    assert!(threshold >= 0.0);
    let mut out = Vec::new();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if a[[i, j]] > threshold {
                out.push((i, j));
            }
        }
    }
    out
}

/// Strongly-connected-component decomposition report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityReport {
    pub is_strongly_connected: bool,
    pub n_components: usize,
    /// Component id per node; components numbered by smallest member index.
    pub component_labels: Vec<usize>,
}

/// Tarjan SCC (iterative, so deep graphs cannot overflow the stack).
pub fn strong_connectivity(edges: &[(usize, usize)], n_nodes: usize) -> ConnectivityReport {
    let mut adj = vec![Vec::new(); n_nodes];
    for &(i, j) in edges {
        assert!(i < n_nodes && j < n_nodes, "edge index out of range");
        adj[i].push(j);
    }

    const UNSET: usize = usize::MAX;
    let mut index = vec![UNSET; n_nodes];
    let mut lowlink = vec![0usize; n_nodes];
    let mut on_stack = vec![false; n_nodes];
    let mut stack = Vec::new();
    let mut next_index = 0usize;
    let mut comp_of = vec![UNSET; n_nodes];
    let mut n_components = 0usize;

    // Explicit DFS frames: (node, next child position).
    let mut frames: Vec<(usize, usize)> = Vec::new();
    for root in 0..n_nodes {
        if index[root] != UNSET {
            continue;
        }
        frames.push((root, 0));
        index[root] = next_index;
        lowlink[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut child)) = frames.last_mut() {
            if *child < adj[v].len() {
                let w = adj[v][*child];
                *child += 1;
                if index[w] == UNSET {
                    index[w] = next_index;
                    lowlink[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    frames.push((w, 0));
                } else if on_stack[w] {
                    lowlink[v] = lowlink[v].min(index[w]);
                }
            } else {
                frames.pop();
                if let Some(&mut (parent, _)) = frames.last_mut() {
                    lowlink[parent] = lowlink[parent].min(lowlink[v]);
                }
                if lowlink[v] == index[v] {
                    loop {
                        let w = stack.pop().expect("tarjan stack underflow");
                        on_stack[w] = false;
                        comp_of[w] = n_components;
                        if w == v {
                            break;
                        }
                    }
                    n_components += 1;
                }
            }
        }
    }

    // Renumber components by smallest member node for a stable labeling.
    let mut first_member = vec![usize::MAX; n_components];
    for v in 0..n_nodes {
        let c = comp_of[v];
        first_member[c] = first_member[c].min(v);
    }
    let mut order: Vec<usize> = (0..n_components).collect();
    order.sort_by_key(|&c| first_member[c]);
    let mut relabel = vec![0usize; n_components];
    for (new_id, &c) in order.iter().enumerate() {
        relabel[c] = new_id;
    }
    let component_labels: Vec<usize> = comp_of.iter().map(|&c| relabel[c]).collect();

    ConnectivityReport {
        is_strongly_connected: n_components == 1 && n_nodes > 0,
        n_components,
        component_labels,
    }
}

/// Provenance tag for a candidate pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Observed,
    TwoHop,
    LapRw,
    Random,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Provenance::Observed => "observed",
            Provenance::TwoHop => "two_hop",
            Provenance::LapRw => "lap_rw",
            Provenance::Random => "random",
        };
        f.write_str(s)
    }
}

/// Fixed ordered set of directed candidate pairs.
///
/// The pool is frozen after construction; slot `k` always denotes the same
/// pair (pairs sorted lexicographically). Active-set filtering happens
/// downstream through the annealing gate, never by mutating the pool.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pairs: Vec<(usize, usize)>,
    provenance: Vec<Provenance>,
    index: HashMap<(usize, usize), usize>,
    n_nodes: usize,
}

impl CandidatePool {
    fn from_tagged(n_nodes: usize, tagged: Vec<((usize, usize), Provenance)>) -> Self {
        // First tag wins on duplicates, then lexicographic slot order.
        let mut seen = HashSet::new();
        let mut dedup = Vec::with_capacity(tagged.len());
        for (pair, tag) in tagged {
            if seen.insert(pair) {
                dedup.push((pair, tag));
            }
        }
        dedup.sort_by_key(|&(p, _)| p);
        let pairs: Vec<_> = dedup.iter().map(|&(p, _)| p).collect();
        let provenance: Vec<_> = dedup.iter().map(|&(_, t)| t).collect();
        let index = pairs.iter().enumerate().map(|(k, &p)| (p, k)).collect();
        Self { pairs, provenance, index, n_nodes }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn slot_of(&self, pair: (usize, usize)) -> Option<usize> {
        self.index.get(&pair).copied()
    }

    pub fn contains(&self, pair: (usize, usize)) -> bool {
        self.index.contains_key(&pair)
    }
}

/// Candidate-pool construction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolParams {
    /// Per node, up to this many 2-hop proposals (most length-2 paths first,
    /// ties by ascending index).
    pub k_2hop: usize,
    /// Per node, up to this many distinct nodes visited by one random walk.
    pub k_lap: usize,
    /// Fraction of all N(N-1) ordered pairs added uniformly at random.
    pub random_ratio: f64,
    /// Random-walk length for the `k_lap` proposals.
    pub walk_length: usize,
    /// Self-loop weight for the walk transition matrix.
    pub epsilon: f64,
    /// Hard cap on the requested pool size.
    pub cap: usize,
}

impl Default for PoolParams {
    fn default() -> Self {
        Self {
            k_2hop: 0,
            k_lap: 0,
            random_ratio: 0.0,
            walk_length: 4,
            epsilon: DEFAULT_EPSILON,
            cap: DEFAULT_POOL_CAP,
        }
    }
}

/// Build the candidate pool: observed edges, 2-hop completion proposals,
/// random-walk proposals, and optional random pairs. Deterministic per seed.
pub fn build_candidate_pool(
    graph: &Graph,
    params: &PoolParams,
    seed: u64,
) -> Result<CandidatePool, GraphError> {
    let n = graph.n_nodes();
    assert!((0.0..=1.0).contains(&params.random_ratio), "random_ratio in [0,1]");
    let n_random = if n >= 2 {
        (params.random_ratio * (n * (n - 1)) as f64).floor() as usize
    } else {
        0
    };
    let requested = graph.n_edges() + n * params.k_2hop + n * params.k_lap + n_random;
    if requested > params.cap {
        return Err(GraphError::PoolOverflow { requested, cap: params.cap });
    }

    let mut tagged: Vec<((usize, usize), Provenance)> = Vec::with_capacity(requested);
    for &e in graph.edges() {
        tagged.push((e, Provenance::Observed));
    }

    if params.k_2hop > 0 {
        let adj = graph.out_neighbors();
        for i in 0..n {
            // Count length-2 directed paths i -> x -> j.
            let mut counts: HashMap<usize, usize> = HashMap::new();
            for &x in &adj[i] {
                for &j in &adj[x] {
                    if j != i {
                        *counts.entry(j).or_insert(0) += 1;
                    }
                }
            }
            let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            for &(j, _) in ranked.iter().take(params.k_2hop) {
                tagged.push(((i, j), Provenance::TwoHop));
            }
        }
    }

    if params.k_lap > 0 && graph.n_edges() > 0 {
        let p = row_normalize(&graph.adjacency_matrix(), params.epsilon)?;
        let pm = p.matrix();
        let mut rng = DetRng::new(crate::rng::derive_seed(seed, 0x1a9));
        for i in 0..n {
            let mut visited = Vec::new();
            let mut seen = HashSet::new();
            let mut row: Vec<f64> = (0..n).map(|j| pm[[i, j]]).collect();
            for _ in 0..params.walk_length {
                let next = rng.categorical(&row);
                if next != i && seen.insert(next) {
                    visited.push(next);
                }
                row = (0..n).map(|j| pm[[next, j]]).collect();
            }
            for &j in visited.iter().take(params.k_lap) {
                tagged.push(((i, j), Provenance::LapRw));
            }
        }
    }

    if n_random > 0 {
        let mut rng = DetRng::new(crate::rng::derive_seed(seed, 0x7a9d));
        let picks = rng.sample_without_replacement(n * (n - 1), n_random);
        for idx in picks {
            let i = idx / (n - 1);
            let mut j = idx % (n - 1);
            if j >= i {
                j += 1;
            }
            tagged.push(((i, j), Provenance::Random));
        }
    }

    Ok(CandidatePool::from_tagged(n, tagged))
}
