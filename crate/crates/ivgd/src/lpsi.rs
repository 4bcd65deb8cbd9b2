//! LPSI baseline: label propagation on the symmetrically normalized
//! adjacency, followed by a positive-local-peak source rule.
//!
//! The observation is recoded {0,1} -> {-1,+1} and propagated by
//! e <- alpha * S * e + (1 - alpha) * y with S = D^{-1/2} A D^{-1/2}
//! over the unweighted undirected skeleton of the graph. For
//! alpha < 1 the iteration is a contraction, so it converges to the
//! unique solution of (I - alpha * S) e = (1 - alpha) y.

use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy)]
pub struct LpsiConfig {
    pub alpha: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LpsiConfig {
    fn default() -> Self {
        LpsiConfig { alpha: 0.01, tol: 1e-12, max_iters: 10_000 }
    }
}

/// Undirected unweighted neighbor lists: j is a neighbor of i when an
/// arc exists in either direction.
fn neighbor_lists(g: &Graph) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = vec![Vec::new(); g.n()];
    for e in g.edges() {
        if !sets[e.src].contains(&e.dst) {
            sets[e.src].push(e.dst);
        }
        if !sets[e.dst].contains(&e.src) {
            sets[e.dst].push(e.src);
        }
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    sets
}

/// Propagated scores from a binary observation. Isolated nodes never
/// receive mass, so their score is exactly (1 - alpha) * y_i.
pub fn lpsi_scores(g: &Graph, y: &[u8], cfg: &LpsiConfig) -> Result<Vec<f64>> {
    if y.len() != g.n() {
        return Err(Error::validation(format!(
            "observation length {} does not match node count {}",
            y.len(),
            g.n()
        )));
    }
    if !(0.0 < cfg.alpha && cfg.alpha < 1.0) {
        return Err(Error::validation("propagation weight must lie strictly inside (0,1)"));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::validation("observation entries must be 0 or 1"));
    }
    let signed: Vec<f64> = y.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect();
    let nbrs = neighbor_lists(g);
    let inv_sqrt_deg: Vec<f64> = nbrs
        .iter()
        .map(|s| if s.is_empty() { 0.0 } else { 1.0 / (s.len() as f64).sqrt() })
        .collect();
    let mut e = signed.clone();
    for _ in 0..cfg.max_iters {
        let mut next = vec![0.0; g.n()];
        for i in 0..g.n() {
            let mut acc = 0.0;
            for &j in &nbrs[i] {
                acc += inv_sqrt_deg[i] * inv_sqrt_deg[j] * e[j];
            }
            next[i] = cfg.alpha * acc + (1.0 - cfg.alpha) * signed[i];
        }
        let gap = e
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        e = next;
        if gap <= cfg.tol {
            return Ok(e);
        }
    }
    Err(Error::numeric(format!(
        "label propagation did not converge within {} iterations",
        cfg.max_iters
    )))
}

/// Source rule: positive score that is not exceeded by any neighbor.
/// Ties keep every tied peak.
pub fn lpsi_sources(g: &Graph, scores: &[f64]) -> Result<Vec<u8>> {
    if scores.len() != g.n() {
        return Err(Error::validation("score length does not match node count"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("scores contain non-finite entries"));
    }
    let nbrs = neighbor_lists(g);
    Ok((0..g.n())
        .map(|i| {
            let peak = scores[i] > 0.0 && nbrs[i].iter().all(|&j| scores[i] >= scores[j]);
            u8::from(peak)
        })
        .collect())
}
