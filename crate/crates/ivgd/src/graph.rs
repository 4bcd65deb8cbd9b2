//! Directed graphs with per-edge activation probabilities.
//!
//! Storage is a sorted edge list plus CSR adjacency in both directions,
//! so out- and in-neighborhood scans are cache-friendly and every edge
//! has a stable index (its position in the sorted list). Node ids are
//! dense and 0-based. Undirected inputs are expanded to both arcs.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How edge activation probabilities are assigned when the input
/// carries none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbRule {
    /// Every edge gets the same probability.
    Constant(f64),
    /// Weighted cascade: p(u,v) = 1 / indeg(v). Incoming probabilities
    /// of every non-isolated node sum to exactly 1 up to rounding.
    WeightedCascade,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub prob: f64,
}

#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    edges: Vec<Edge>,
    out_ptr: Vec<usize>,
    out_idx: Vec<usize>,
    in_ptr: Vec<usize>,
    in_idx: Vec<usize>,
}

impl Graph {
    /// Builds a graph from directed (src, dst) pairs; probabilities are
    /// assigned afterwards by `rule`. Rejects self-loops, duplicate
    /// arcs, and out-of-range constant probabilities.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)], rule: ProbRule) -> Result<Graph> {
        if n == 0 {
            return Err(Error::validation("graph must have at least one node"));
        }
        let mut sorted: Vec<(usize, usize)> = pairs.to_vec();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(Error::validation(format!(
                    "duplicate edge {} -> {}",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut indeg = vec![0usize; n];
        for &(u, v) in &sorted {
            if u >= n || v >= n {
                return Err(Error::validation(format!(
                    "edge {} -> {} out of range for n={}",
                    u, v, n
                )));
            }
            if u == v {
                return Err(Error::validation(format!("self-loop at node {}", u)));
            }
            indeg[v] += 1;
        }
        let edges: Vec<Edge> = sorted
            .into_iter()
            .map(|(u, v)| {
                let prob = match rule {
                    ProbRule::Constant(p) => p,
                    ProbRule::WeightedCascade => 1.0 / indeg[v] as f64,
                };
                Edge { src: u, dst: v, prob }
            })
            .collect();
        if let ProbRule::Constant(p) = rule {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::validation(format!("edge probability {} outside [0,1]", p)));
            }
        }
        Ok(Self::assemble(n, edges))
    }

    /// Builds a graph from explicit weighted arcs (canonical-dump parsing).
    pub fn from_weighted_edges(n: usize, mut edges: Vec<Edge>) -> Result<Graph> {
        if n == 0 {
            return Err(Error::validation("graph must have at least one node"));
        }
        edges.sort_unstable_by(|a, b| (a.src, a.dst).cmp(&(b.src, b.dst)));
        for w in edges.windows(2) {
            if (w[0].src, w[0].dst) == (w[1].src, w[1].dst) {
                return Err(Error::validation(format!(
                    "duplicate edge {} -> {}",
                    w[0].src, w[0].dst
                )));
            }
        }
        for e in &edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::validation(format!(
                    "edge {} -> {} out of range for n={}",
                    e.src, e.dst, n
                )));
            }
            if e.src == e.dst {
                return Err(Error::validation(format!("self-loop at node {}", e.src)));
            }
            if !(0.0..=1.0).contains(&e.prob) || !e.prob.is_finite() {
                return Err(Error::validation(format!(
                    "edge probability {} outside [0,1]",
                    e.prob
                )));
            }
        }
        Ok(Self::assemble(n, edges))
    }

    fn assemble(n: usize, edges: Vec<Edge>) -> Graph {
        let mut out_ptr = vec![0usize; n + 1];
        let mut in_ptr = vec![0usize; n + 1];
        for e in &edges {
            out_ptr[e.src + 1] += 1;
            in_ptr[e.dst + 1] += 1;
        }
        for i in 0..n {
            out_ptr[i + 1] += out_ptr[i];
            in_ptr[i + 1] += in_ptr[i];
        }
        let mut out_idx = vec![0usize; edges.len()];
        let mut in_idx = vec![0usize; edges.len()];
        let mut out_cur = out_ptr.clone();
        let mut in_cur = in_ptr.clone();
        for (i, e) in edges.iter().enumerate() {
            out_idx[out_cur[e.src]] = i;
            out_cur[e.src] += 1;
            in_idx[in_cur[e.dst]] = i;
            in_cur[e.dst] += 1;
        }
        Graph { n, edges, out_ptr, out_idx, in_ptr, in_idx }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Outgoing arcs of `u` as (edge index, edge).
    pub fn out_edges(&self, u: usize) -> impl Iterator<Item = (usize, &Edge)> {
        self.out_idx[self.out_ptr[u]..self.out_ptr[u + 1]]
            .iter()
            .map(move |&i| (i, &self.edges[i]))
    }

    /// Incoming arcs of `v` as (edge index, edge).
    pub fn in_edges(&self, v: usize) -> impl Iterator<Item = (usize, &Edge)> {
        self.in_idx[self.in_ptr[v]..self.in_ptr[v + 1]]
            .iter()
            .map(move |&i| (i, &self.edges[i]))
    }

    pub fn out_degree(&self, u: usize) -> usize {
        self.out_ptr[u + 1] - self.out_ptr[u]
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.in_ptr[v + 1] - self.in_ptr[v]
    }

    pub fn max_edge_prob(&self) -> f64 {
        self.edges.iter().map(|e| e.prob).fold(0.0, f64::max)
    }

    /// Largest finite BFS eccentricity over all start nodes, following
    /// out-arcs. None when the graph has no edges.
    pub fn diameter_hint(&self) -> Option<usize> {
        if self.edges.is_empty() {
            return None;
        }
        let mut best = 0usize;
        let mut dist = vec![usize::MAX; self.n];
        let mut queue = std::collections::VecDeque::new();
        for s in 0..self.n {
            dist.fill(usize::MAX);
            dist[s] = 0;
            queue.clear();
            queue.push_back(s);
            while let Some(u) = queue.pop_front() {
                for (_, e) in self.out_edges(u) {
                    if dist[e.dst] == usize::MAX {
                        dist[e.dst] = dist[u] + 1;
                        queue.push_back(e.dst);
                    }
                }
            }
            for &d in dist.iter() {
                if d != usize::MAX && d > best {
                    best = d;
                }
            }
        }
        Some(best)
    }

    /// Serializes to the canonical text dump: `n m` header then one
    /// `src dst prob` line per arc in sorted order, probabilities at 17
    /// significant digits.
    pub fn to_canonical_text(&self) -> String {
        let mut s = format!("{} {}\n", self.n, self.edges.len());
        for e in &self.edges {
            s.push_str(&format!("{} {} {:.16e}\n", e.src, e.dst, e.prob));
        }
        s
    }

    /// Parses the canonical dump produced by `to_canonical_text`.
    pub fn from_canonical_text(text: &str) -> Result<Graph> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format("empty canonical graph dump"))?;
        let mut it = header.split_whitespace();
        let n: usize = parse_tok(it.next(), 1, "node count")?;
        let m: usize = parse_tok(it.next(), 1, "edge count")?;
        let mut edges = Vec::with_capacity(m);
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let src: usize = parse_tok(it.next(), lineno + 1, "src")?;
            let dst: usize = parse_tok(it.next(), lineno + 1, "dst")?;
            let prob: f64 = parse_tok(it.next(), lineno + 1, "prob")?;
            edges.push(Edge { src, dst, prob });
        }
        if edges.len() != m {
            return Err(Error::format(format!(
                "canonical dump header promises {} edges, found {}",
                m,
                edges.len()
            )));
        }
        Graph::from_weighted_edges(n, edges)
    }
}

fn parse_tok<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or(Error::Parse { line, msg: format!("missing {}", what) })?;
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse {} from {:?}", what, tok),
    })
}

/// Parses a whitespace edge list: one `u v` pair per line, `#` starts a
/// comment, blank lines ignored. Node count is 1 + max index. With
/// `directed = false` each listed pair is expanded to both arcs.
pub fn load_edge_list(text: &str, directed: bool, rule: ProbRule) -> Result<Graph> {
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut max_id: i64 = -1;
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let u: i64 = parse_tok(it.next(), i + 1, "source node")?;
        let v: i64 = parse_tok(it.next(), i + 1, "target node")?;
        if it.next().is_some() {
            return Err(Error::Parse { line: i + 1, msg: "expected exactly two fields".into() });
        }
        if u < 0 || v < 0 {
            return Err(Error::validation(format!("negative node index at line {}", i + 1)));
        }
        max_id = max_id.max(u).max(v);
        let (u, v) = (u as usize, v as usize);
        pairs.push((u, v));
        if !directed {
            pairs.push((v, u));
        }
    }
    if max_id < 0 {
        return Err(Error::validation("edge list contains no edges"));
    }
    Graph::from_pairs(max_id as usize + 1, &pairs, rule)
}

/// Standard small-graph generators, undirected topologies expanded to
/// directed arcs. Erdos-Renyi samples each unordered pair independently
/// with a ChaCha stream, so a fixed seed gives a fixed graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphKind {
    Path(usize),
    Star(usize),
    Cycle(usize),
    ErdosRenyi { n: usize, p_edge: f64, seed: u64 },
}

pub fn generate_graph(kind: GraphKind, rule: ProbRule) -> Result<Graph> {
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let n = match kind {
        GraphKind::Path(n) => {
            if n < 2 {
                return Err(Error::validation("path needs at least 2 nodes"));
            }
            for i in 0..n - 1 {
                pairs.push((i, i + 1));
                pairs.push((i + 1, i));
            }
            n
        }
        GraphKind::Star(n) => {
            if n < 2 {
                return Err(Error::validation("star needs at least 2 nodes"));
            }
            for i in 1..n {
                pairs.push((0, i));
                pairs.push((i, 0));
            }
            n
        }
        GraphKind::Cycle(n) => {
            if n < 3 {
                return Err(Error::validation("cycle needs at least 3 nodes"));
            }
            for i in 0..n {
                let j = (i + 1) % n;
                pairs.push((i, j));
                pairs.push((j, i));
            }
            n
        }
        GraphKind::ErdosRenyi { n, p_edge, seed } => {
            if n < 2 {
                return Err(Error::validation("random graph needs at least 2 nodes"));
            }
            if !(0.0..=1.0).contains(&p_edge) {
                return Err(Error::validation(format!("p_edge {} outside [0,1]", p_edge)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen::<f64>() < p_edge {
                        pairs.push((i, j));
                        pairs.push((j, i));
                    }
                }
            }
            n
        }
    };
    Graph::from_pairs(n, &pairs, rule)
}

/// One linear equality constraint a'x = b on node scores.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConstraintSpec {
    pub a: Vec<f64>,
    pub b: f64,
}

impl ConstraintSpec {
    /// All-ones row: constrains the number of predicted sources.
    pub fn uniform(n: usize, b: f64) -> ConstraintSpec {
        ConstraintSpec { a: vec![1.0; n], b }
    }
}

/// Spectral radius of a'a for a single constraint row, which is |a|^2.
pub fn spectral_radius_ata(c: &ConstraintSpec) -> f64 {
    c.a.iter().map(|x| x * x).sum()
}
