//! Monte-Carlo independent-cascade simulation and the grouped dataset
//! it produces.
//!
//! Determinism contract: every run draws from its own ChaCha stream
//! keyed by (seed, group, run), and each edge attempt reads the stream
//! at a fixed word position derived from the edge index. Draws are
//! therefore independent of traversal order, and two runs that share a
//! stream see identical per-edge coin flips, which gives an exact
//! monotone coupling when sources are added.

use crate::error::{Error, Result};
use crate::graph::Graph;
use rand::SeedableRng;
use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Stream for the cascade runs of one (group, run) cell. Run streams
/// start at 1; stream 0 of each group is reserved for source selection.
pub fn run_rng(seed: u64, group: u32, run: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((group as u64) << 32) | (run as u64 + 1));
    rng
}

/// Stream used to draw the source set of one group.
pub fn source_rng(seed: u64, group: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((group as u64) << 32);
    rng
}

fn edge_coin(rng: &mut ChaCha8Rng, edge_idx: usize) -> f64 {
    rng.set_word_pos(2 * edge_idx as u128);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One independent-cascade realization. `sources` is a dense 0/1
/// vector; nodes set in it are active at round zero. Each newly active
/// node gets one chance per out-edge to activate the target with the
/// edge probability; the process runs at most `t_max` rounds.
pub fn simulate_ic(
    g: &Graph,
    sources: &[u8],
    t_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u8>> {
    if sources.len() != g.n() {
        return Err(Error::validation(format!(
            "source vector length {} does not match node count {}",
            sources.len(),
            g.n()
        )));
    }
    if sources.iter().any(|&b| b > 1) {
        return Err(Error::validation("source vector entries must be 0 or 1"));
    }
    let mut active = sources.to_vec();
    let mut frontier: Vec<usize> =
        (0..g.n()).filter(|&i| sources[i] == 1).collect();
    let mut round = 0;
    while !frontier.is_empty() && round < t_max {
        let mut next = Vec::new();
        for &u in &frontier {
            for (ei, e) in g.out_edges(u) {
                if active[e.dst] == 0 && edge_coin(rng, ei) < e.prob {
                    active[e.dst] = 1;
                    next.push(e.dst);
                }
            }
        }
        frontier = next;
        round += 1;
    }
    Ok(active)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CascadeSample {
    pub group: u32,
    pub run: u32,
    /// Sorted indices of source nodes.
    pub x: Vec<u32>,
    /// Sorted indices of nodes active when the cascade stopped.
    pub y: Vec<u32>,
    /// Per-node activation frequency across every run of this sample's
    /// group; identical for all samples sharing a group, and exactly 1
    /// at source nodes.
    pub y_mean: Vec<f64>,
}

pub fn dense_from_indices(indices: &[u32], n: usize) -> Vec<u8> {
    let mut v = vec![0u8; n];
    for &i in indices {
        v[i as usize] = 1;
    }
    v
}

pub fn dense_f64_from_indices(indices: &[u32], n: usize) -> Vec<f64> {
    let mut v = vec![0.0f64; n];
    for &i in indices {
        v[i as usize] = 1.0;
    }
    v
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct DatasetHeader {
    format: String,
    version: u32,
    n: usize,
    n_groups: usize,
    runs: usize,
    source_rate: f64,
    t_max: usize,
    seed: u64,
    train_groups: Vec<u32>,
    test_groups: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

const DATASET_FORMAT: &str = "ivgd-cascade-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeDataset {
    pub n: usize,
    pub n_groups: usize,
    pub runs: usize,
    pub source_rate: f64,
    pub t_max: usize,
    pub seed: u64,
    pub train_groups: Vec<u32>,
    pub test_groups: Vec<u32>,
    pub config_hash: Option<String>,
    pub samples: Vec<CascadeSample>,
}

/// What the localizer observes per unit: one binary cascade
/// realization, or the group's activation-frequency vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Binary,
    Frequency,
}

/// One localization problem: an observation and its true source set.
#[derive(Debug, Clone)]
pub struct ObservationUnit<'a> {
    pub group: u32,
    pub run: u32,
    pub y: Vec<f64>,
    /// Sorted true source indices.
    pub x: &'a [u32],
}

#[derive(Debug, Clone, Copy)]
pub struct CascadeConfig {
    pub n_groups: usize,
    pub source_rate: f64,
    pub runs: usize,
    pub t_max: usize,
    pub seed: u64,
}

impl CascadeDataset {
    /// Sorted source indices of one group.
    pub fn group_sources(&self, group: u32) -> &[u32] {
        &self
            .samples
            .iter()
            .find(|s| s.group == group)
            .expect("group exists")
            .x
    }

    /// Per-node empirical activation frequency of one group: exactly
    /// (number of runs where the node ended active) / runs.
    pub fn group_mean(&self, group: u32) -> Vec<f64> {
        let mut counts = vec![0usize; self.n];
        let mut total = 0usize;
        for s in self.samples.iter().filter(|s| s.group == group) {
            total += 1;
            for &i in &s.y {
                counts[i as usize] += 1;
            }
        }
        counts
            .into_iter()
            .map(|c| c as f64 / total as f64)
            .collect()
    }

    pub fn samples_in(&self, groups: &[u32]) -> Vec<&CascadeSample> {
        self.samples
            .iter()
            .filter(|s| groups.contains(&s.group))
            .collect()
    }

    /// One localization problem per unit: in binary mode every cascade
    /// run is its own unit with its 0/1 activation vector; in frequency
    /// mode each group collapses to a single unit carrying its
    /// activation-frequency vector (run index 0).
    pub fn observation_units(
        &self,
        groups: &[u32],
        kind: ObservationKind,
    ) -> Vec<ObservationUnit<'_>> {
        match kind {
            ObservationKind::Binary => self
                .samples_in(groups)
                .into_iter()
                .map(|s| ObservationUnit {
                    group: s.group,
                    run: s.run,
                    y: dense_f64_from_indices(&s.y, self.n),
                    x: &s.x,
                })
                .collect(),
            ObservationKind::Frequency => groups
                .iter()
                .filter_map(|&gid| {
                    self.samples.iter().find(|s| s.group == gid).map(|s| ObservationUnit {
                        group: gid,
                        run: 0,
                        y: s.y_mean.clone(),
                        x: &s.x,
                    })
                })
                .collect(),
        }
    }

    pub fn save_to_string(&self) -> String {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            n: self.n,
            n_groups: self.n_groups,
            runs: self.runs,
            source_rate: self.source_rate,
            t_max: self.t_max,
            seed: self.seed,
            train_groups: self.train_groups.clone(),
            test_groups: self.test_groups.clone(),
            config_hash: self.config_hash.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<CascadeDataset> {
        let mut lines = text.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format("empty dataset file"))?;
        let header: DatasetHeader = serde_json::from_str(header_line)
            .map_err(|e| Error::format(format!("bad dataset header: {}", e)))?;
        if header.format != DATASET_FORMAT {
            return Err(Error::format(format!(
                "not a cascade dataset: format {:?}",
                header.format
            )));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::format(format!(
                "unsupported dataset version {} (expected {})",
                header.version, DATASET_VERSION
            )));
        }
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: CascadeSample = serde_json::from_str(line).map_err(|e| {
                Error::format(format!("corrupted record {}: {}", i, e))
            })?;
            for &idx in s.x.iter().chain(s.y.iter()) {
                if idx as usize >= header.n {
                    return Err(Error::format(format!(
                        "corrupted record {}: node index {} out of range",
                        i, idx
                    )));
                }
            }
            samples.push(s);
        }
        Ok(CascadeDataset {
            n: header.n,
            n_groups: header.n_groups,
            runs: header.runs,
            source_rate: header.source_rate,
            t_max: header.t_max,
            seed: header.seed,
            train_groups: header.train_groups,
            test_groups: header.test_groups,
            config_hash: header.config_hash,
            samples,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.save_to_string().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<CascadeDataset> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut text = String::new();
        for line in f.lines() {
            text.push_str(&line?);
            text.push('\n');
        }
        Self::parse(&text)
    }
}

/// Grouped train/test split: the first floor(0.8 * n_groups) groups
/// train, the rest test, so all repetitions of a source set land on the
/// same side. Groups are i.i.d. draws, so position carries no bias.
fn split_groups(n_groups: usize) -> (Vec<u32>, Vec<u32>) {
    let mut n_train = (0.8 * n_groups as f64 + 1e-9).floor() as usize;
    if n_groups >= 2 {
        n_train = n_train.clamp(1, n_groups - 1);
    } else {
        n_train = n_groups;
    }
    (
        (0..n_train as u32).collect(),
        (n_train as u32..n_groups as u32).collect(),
    )
}

/// Draws `n_groups` source sets of ceil(source_rate * n) distinct nodes
/// each and simulates `runs` cascades per set.
pub fn generate_dataset(g: &Graph, cfg: &CascadeConfig) -> Result<CascadeDataset> {
    if !(cfg.source_rate > 0.0 && cfg.source_rate < 1.0) {
        return Err(Error::validation(format!(
            "source_rate {} outside (0,1)",
            cfg.source_rate
        )));
    }
    if cfg.n_groups == 0 || cfg.runs == 0 {
        return Err(Error::validation("n_groups and runs must be positive"));
    }
    let n_sources = (cfg.source_rate * g.n() as f64).ceil() as usize;
    if n_sources == 0 || n_sources > g.n() {
        return Err(Error::validation(format!(
            "source count {} invalid for n={}",
            n_sources,
            g.n()
        )));
    }
    let mut samples = Vec::with_capacity(cfg.n_groups * cfg.runs);
    for group in 0..cfg.n_groups as u32 {
        let mut rng = source_rng(cfg.seed, group);
        let mut x: Vec<u32> = rand::seq::index::sample(&mut rng, g.n(), n_sources)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        x.sort_unstable();
        let x_dense = dense_from_indices(&x, g.n());
        let first = samples.len();
        let mut counts = vec![0usize; g.n()];
        for run in 0..cfg.runs as u32 {
            let mut rng = run_rng(cfg.seed, group, run);
            let active = simulate_ic(g, &x_dense, cfg.t_max, &mut rng)?;
            let y: Vec<u32> = (0..g.n() as u32)
                .filter(|&i| active[i as usize] == 1)
                .collect();
            for &i in &y {
                counts[i as usize] += 1;
            }
            samples.push(CascadeSample { group, run, x: x.clone(), y, y_mean: Vec::new() });
        }
        let y_mean: Vec<f64> =
            counts.into_iter().map(|c| c as f64 / cfg.runs as f64).collect();
        for s in &mut samples[first..] {
            s.y_mean = y_mean.clone();
        }
    }
    let (train_groups, test_groups) = split_groups(cfg.n_groups);
    Ok(CascadeDataset {
        n: g.n(),
        n_groups: cfg.n_groups,
        runs: cfg.runs,
        source_rate: cfg.source_rate,
        t_max: cfg.t_max,
        seed: cfg.seed,
        train_groups,
        test_groups,
        config_hash: None,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_graph, GraphKind, ProbRule};

    fn chain(n: usize, p: f64) -> Graph {
        let pairs: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Graph::from_pairs(n, &pairs, ProbRule::Constant(p)).unwrap()
    }

    #[test]
    fn zero_probability_keeps_only_sources() {
        let g = chain(5, 0.0);
        let mut rng = run_rng(1, 0, 0);
        let y = simulate_ic(&g, &[0, 1, 0, 0, 0], 10, &mut rng).unwrap();
        assert_eq!(y, vec![0, 1, 0, 0, 0]);
    }

    #[test]
    fn probability_one_chain_fills_within_t_max() {
        let g = chain(3, 1.0);
        let mut rng = run_rng(1, 0, 0);
        let y = simulate_ic(&g, &[1, 0, 0], 5, &mut rng).unwrap();
        assert_eq!(y, vec![1, 1, 1]);
        let mut rng = run_rng(1, 0, 0);
        let y1 = simulate_ic(&g, &[1, 0, 0], 1, &mut rng).unwrap();
        assert_eq!(y1, vec![1, 1, 0], "one round reaches one hop");
    }

    #[test]
    fn activation_frequency_matches_edge_probability() {
        let g = chain(2, 0.3);
        let mut hits = 0usize;
        let trials = 10_000;
        for run in 0..trials {
            let mut rng = run_rng(7, 0, run as u32);
            let y = simulate_ic(&g, &[1, 0], 1, &mut rng).unwrap();
            hits += y[1] as usize;
        }
        let freq = hits as f64 / trials as f64;
        assert!((0.27..=0.33).contains(&freq), "frequency {}", freq);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let g = chain(4, 0.5);
        let mut rng = run_rng(0, 0, 0);
        assert!(simulate_ic(&g, &[1, 0], 3, &mut rng).is_err());
    }

    #[test]
    fn adding_a_source_never_shrinks_the_cascade() {
        let g = generate_graph(
            GraphKind::ErdosRenyi { n: 16, p_edge: 0.2, seed: 5 },
            ProbRule::WeightedCascade,
        )
        .unwrap();
        for run in 0..50u32 {
            let mut base = vec![0u8; 16];
            base[3] = 1;
            let mut bigger = base.clone();
            bigger[10] = 1;
            let mut r1 = run_rng(9, 0, run);
            let mut r2 = run_rng(9, 0, run);
            let y1 = simulate_ic(&g, &base, 8, &mut r1).unwrap();
            let y2 = simulate_ic(&g, &bigger, 8, &mut r2).unwrap();
            for i in 0..16 {
                assert!(y2[i] >= y1[i], "run {} node {}", run, i);
            }
        }
    }

    #[test]
    fn dataset_shape_and_split_match_config() {
        let g = generate_graph(
            GraphKind::ErdosRenyi { n: 34, p_edge: 0.12, seed: 2 },
            ProbRule::WeightedCascade,
        )
        .unwrap();
        let ds = generate_dataset(
            &g,
            &CascadeConfig { n_groups: 10, source_rate: 0.1, runs: 60, t_max: 5, seed: 42 },
        )
        .unwrap();
        assert_eq!(ds.samples.len(), 600);
        assert_eq!(ds.train_groups, vec![0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(ds.test_groups, vec![8, 9]);
        for s in &ds.samples {
            assert_eq!(s.x.len(), 4, "ceil(0.1 * 34) sources");
        }
    }

    #[test]
    fn sources_always_appear_active_with_mean_one() {
        let g = generate_graph(
            GraphKind::ErdosRenyi { n: 20, p_edge: 0.15, seed: 3 },
            ProbRule::WeightedCascade,
        )
        .unwrap();
        let ds = generate_dataset(
            &g,
            &CascadeConfig { n_groups: 3, source_rate: 0.1, runs: 20, t_max: 6, seed: 1 },
        )
        .unwrap();
        for group in 0..3u32 {
            let mean = ds.group_mean(group);
            for &src in ds.group_sources(group) {
                assert_eq!(mean[src as usize], 1.0);
            }
        }
        for s in &ds.samples {
            for &src in &s.x {
                assert!(s.y.contains(&src));
            }
        }
    }

    #[test]
    fn group_mean_is_exact_count_over_runs() {
        let g = chain(4, 0.5);
        let ds = generate_dataset(
            &g,
            &CascadeConfig { n_groups: 2, source_rate: 0.3, runs: 8, t_max: 4, seed: 11 },
        )
        .unwrap();
        for group in 0..2u32 {
            let mean = ds.group_mean(group);
            let mut counts = vec![0usize; 4];
            for s in ds.samples.iter().filter(|s| s.group == group) {
                for &i in &s.y {
                    counts[i as usize] += 1;
                }
            }
            for i in 0..4 {
                assert_eq!(mean[i], counts[i] as f64 / 8.0);
            }
        }
    }

    #[test]
    fn stored_y_mean_equals_the_recomputed_group_mean() {
        let g = generate_graph(
            GraphKind::ErdosRenyi { n: 12, p_edge: 0.3, seed: 6 },
            ProbRule::WeightedCascade,
        )
        .unwrap();
        let ds = generate_dataset(
            &g,
            &CascadeConfig { n_groups: 3, source_rate: 0.2, runs: 10, t_max: 4, seed: 5 },
        )
        .unwrap();
        for s in &ds.samples {
            assert_eq!(s.y_mean, ds.group_mean(s.group));
            for &src in &s.x {
                assert_eq!(s.y_mean[src as usize], 1.0);
            }
            for &v in &s.y_mean {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn zero_probability_graph_makes_y_mean_equal_x() {
        let g = chain(5, 0.0);
        let ds = generate_dataset(
            &g,
            &CascadeConfig { n_groups: 2, source_rate: 0.3, runs: 6, t_max: 3, seed: 9 },
        )
        .unwrap();
        for s in &ds.samples {
            assert_eq!(s.y, s.x);
            assert_eq!(s.y_mean, dense_f64_from_indices(&s.x, 5));
        }
    }

    #[test]
    fn observation_units_cover_both_granularities() {
        let g = chain(6, 0.5);
        let ds = generate_dataset(
            &g,
            &CascadeConfig { n_groups: 4, source_rate: 0.2, runs: 5, t_max: 3, seed: 21 },
        )
        .unwrap();
        let binary = ds.observation_units(&ds.train_groups, ObservationKind::Binary);
        assert_eq!(binary.len(), 3 * 5, "one unit per run");
        for u in &binary {
            assert!(u.y.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(u.x, ds.group_sources(u.group));
        }
        let freq = ds.observation_units(&ds.train_groups, ObservationKind::Frequency);
        assert_eq!(freq.len(), 3, "one unit per group");
        for u in &freq {
            assert_eq!(u.run, 0);
            assert_eq!(u.y, ds.group_mean(u.group));
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let g = chain(10, 0.4);
        let cfg = CascadeConfig { n_groups: 4, source_rate: 0.2, runs: 15, t_max: 6, seed: 77 };
        let a = generate_dataset(&g, &cfg).unwrap();
        let b = generate_dataset(&g, &cfg).unwrap();
        assert_eq!(a.save_to_string(), b.save_to_string());
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let g = chain(6, 0.5);
        let ds = generate_dataset(
            &g,
            &CascadeConfig { n_groups: 2, source_rate: 0.2, runs: 5, t_max: 3, seed: 5 },
        )
        .unwrap();
        let text = ds.save_to_string();
        let back = CascadeDataset::parse(&text).unwrap();
        assert_eq!(text, back.save_to_string());
        assert_eq!(ds, back);
    }

    #[test]
    fn corrupted_record_names_its_index() {
        let g = chain(6, 0.5);
        let ds = generate_dataset(
            &g,
            &CascadeConfig { n_groups: 1, source_rate: 0.2, runs: 3, t_max: 3, seed: 5 },
        )
        .unwrap();
        let mut lines: Vec<String> = ds.save_to_string().lines().map(String::from).collect();
        lines[2] = "{broken".into();
        let err = CascadeDataset::parse(&lines.join("\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("record 1"), "got {}", msg);
    }

    #[test]
    fn rejects_invalid_rates_and_versions() {
        let g = chain(5, 0.5);
        assert!(generate_dataset(
            &g,
            &CascadeConfig { n_groups: 1, source_rate: 0.0, runs: 1, t_max: 1, seed: 0 }
        )
        .is_err());
        assert!(generate_dataset(
            &g,
            &CascadeConfig { n_groups: 0, source_rate: 0.5, runs: 1, t_max: 1, seed: 0 }
        )
        .is_err());
        let bad = r#"{"format":"ivgd-cascade-dataset","version":9,"n":5,"n_groups":1,"runs":1,"source_rate":0.5,"t_max":1,"seed":0,"train_groups":[0],"test_groups":[]}"#;
        assert!(CascadeDataset::parse(bad).is_err());
    }
}
