//! Experiment harness: configuration, stage orchestration, artifacts.
//!
//! A flat key=value config with [sections] drives a deterministic
//! pipeline: generate -> train-forward -> certify -> train-localizer ->
//! localize -> baseline -> evaluate. Each artifact embeds a hash of the
//! config slice that produced it (plus its upstream hashes), so reruns
//! skip stages whose artifacts are already up to date, and any change
//! upstream invalidates everything downstream. Given the same config
//! and seed, every artifact is byte-for-byte identical across runs.

use crate::cascade::{
    dense_from_indices, generate_dataset, CascadeConfig, CascadeDataset, ObservationKind,
};
use crate::certify::{CertifyConfig, CertifyMethod};
use crate::checkpoint;
use crate::diffusion::{
    calibrate_damping, certify_model, train_forward, ForwardTrainConfig, ICOperator, PerNodeNet,
    ResidualDiffusionModel, TargetKind,
};
use crate::error::{Error, Result};
use crate::grad::OptimKind;
use crate::graph::{generate_graph, load_edge_list, ConstraintSpec, Graph, GraphKind, ProbRule};
use crate::inversion::{invert_p, InversionConfig};
use crate::localizer::{
    inv_softplus, ivgd_head_infer, ivgd_infer, ivgd_train, CompensationNet, HeadTrainConfig,
    IVGDModel, SeedRecovery,
};
use crate::lpsi::{lpsi_scores, lpsi_sources, LpsiConfig};
use crate::metrics::{
    auc, classification_metrics, metrics_csv_row, regression_metrics, MetricsReport,
    METRICS_CSV_HEADER,
};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    File { path: PathBuf, directed: bool },
    Generated(GraphKind),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    // [graph]
    pub graph: GraphSource,
    pub prob_rule: ProbRule,
    // [cascade]
    pub n_groups: usize,
    pub source_rate: f64,
    pub runs: usize,
    pub t_max: usize,
    pub seed: u64,
    // [forward]
    pub hidden: usize,
    pub spectral_scale: f64,
    pub c_g: f64,
    pub t_steps: usize,
    pub forward_epochs: usize,
    pub forward_lr: f64,
    pub forward_optimizer: OptimKind,
    pub forward_target: TargetKind,
    // [certify]
    pub certify_jacobian_points: usize,
    pub certify_pairs: usize,
    pub certify_seed: u64,
    pub certify_domain: (f64, f64),
    pub certify_fd_step: f64,
    pub certify_method: CertifyMethod,
    // [inversion]
    pub inversion_max_iters: usize,
    pub inversion_tol: f64,
    // [localizer]
    pub k_layers: usize,
    pub comp_hidden: usize,
    pub tied: bool,
    pub tau0: f64,
    pub alpha0: f64,
    pub rho0: f64,
    pub head_epochs: usize,
    pub head_lr: f64,
    pub head_optimizer: OptimKind,
    pub head_batch_size: usize,
    pub constraint_in_training: bool,
    pub observation: ObservationKind,
    // [metrics]
    pub threshold: f64,
    // [lpsi]
    pub lpsi_alpha: f64,
    pub lpsi_tol: f64,
    pub lpsi_max_iters: usize,
    // [output]
    pub out_dir: PathBuf,
    pub dataset_name: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            graph: GraphSource::Generated(GraphKind::ErdosRenyi {
                n: 20,
                p_edge: 0.25,
                seed: 1,
            }),
            prob_rule: ProbRule::WeightedCascade,
            n_groups: 10,
            source_rate: 0.1,
            runs: 60,
            t_max: 5,
            seed: 42,
            hidden: 6,
            spectral_scale: 0.9,
            c_g: 1.0,
            t_steps: 2,
            forward_epochs: 100,
            forward_lr: 1e-3,
            forward_optimizer: OptimKind::Sgd,
            forward_target: TargetKind::Mean,
            certify_jacobian_points: 8,
            certify_pairs: 2000,
            certify_seed: 0xCE47,
            certify_domain: (-1.0, 2.0),
            certify_fd_step: 1e-5,
            certify_method: CertifyMethod::Both,
            inversion_max_iters: 20,
            inversion_tol: 1e-6,
            k_layers: 10,
            comp_hidden: 64,
            tied: true,
            tau0: 10.0,
            alpha0: 1.0,
            rho0: 1e-3,
            head_epochs: 100,
            head_lr: 1e-3,
            head_optimizer: OptimKind::Sgd,
            head_batch_size: 1,
            constraint_in_training: true,
            observation: ObservationKind::Binary,
            threshold: 0.5,
            lpsi_alpha: 0.01,
            lpsi_tol: 1e-12,
            lpsi_max_iters: 10_000,
            out_dir: PathBuf::from("runs/out"),
            dataset_name: None,
        }
    }
}

fn bad_key(section: &str, key: &str) -> Error {
    Error::validation(format!("unknown config key [{}] {}", section, key))
}

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::validation(format!("config key [{}] {} has invalid value {:?}", section, key, value))
    })
}

fn parse_optimizer(section: &str, value: &str) -> Result<OptimKind> {
    match value {
        "sgd" => Ok(OptimKind::Sgd),
        "adam" => Ok(OptimKind::Adam),
        other => Err(Error::validation(format!(
            "[{}] optimizer must be sgd or adam, got {:?}",
            section, other
        ))),
    }
}

/// Parses the flat key=value config format. Unknown sections or keys
/// are rejected so typos fail loudly.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut section = String::new();
    // Graph keys are collected first because `kind` decides which of
    // them are meaningful.
    let mut graph_kind = String::from("erdos_renyi");
    let mut graph_path: Option<String> = None;
    let mut graph_directed = false;
    let mut graph_n: usize = 20;
    let mut graph_p_edge: f64 = 0.25;
    let mut graph_seed: u64 = 1;
    let mut prob_rule_name = String::from("weighted_cascade");
    let mut edge_prob: f64 = 0.1;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].trim().to_string();
            const SECTIONS: [&str; 9] = [
                "graph", "cascade", "forward", "certify", "inversion", "localizer", "metrics",
                "lpsi", "output",
            ];
            if !SECTIONS.contains(&section.as_str()) {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("unknown config section [{}]", section),
                });
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno + 1,
            msg: format!("expected key = value, got {:?}", line),
        })?;
        let key = key.trim();
        let value = value.trim();
        let s = section.as_str();
        match (s, key) {
            ("graph", "kind") => graph_kind = value.to_string(),
            ("graph", "path") => graph_path = Some(value.to_string()),
            ("graph", "directed") => graph_directed = parse_value(s, key, value)?,
            ("graph", "n") => graph_n = parse_value(s, key, value)?,
            ("graph", "p_edge") => graph_p_edge = parse_value(s, key, value)?,
            ("graph", "graph_seed") => graph_seed = parse_value(s, key, value)?,
            ("graph", "prob_rule") => prob_rule_name = value.to_string(),
            ("graph", "edge_prob") => edge_prob = parse_value(s, key, value)?,
            ("cascade", "n_groups") => cfg.n_groups = parse_value(s, key, value)?,
            ("cascade", "source_rate") => cfg.source_rate = parse_value(s, key, value)?,
            ("cascade", "runs") => cfg.runs = parse_value(s, key, value)?,
            ("cascade", "t_max") => cfg.t_max = parse_value(s, key, value)?,
            ("cascade", "seed") => cfg.seed = parse_value(s, key, value)?,
            ("forward", "hidden") => cfg.hidden = parse_value(s, key, value)?,
            ("forward", "spectral_scale") => cfg.spectral_scale = parse_value(s, key, value)?,
            ("forward", "c_g") => cfg.c_g = parse_value(s, key, value)?,
            ("forward", "t_steps") => cfg.t_steps = parse_value(s, key, value)?,
            ("forward", "epochs") => cfg.forward_epochs = parse_value(s, key, value)?,
            ("forward", "lr") => cfg.forward_lr = parse_value(s, key, value)?,
            ("forward", "optimizer") => cfg.forward_optimizer = parse_optimizer(s, value)?,
            ("forward", "target") => {
                cfg.forward_target = match value {
                    "mean" => TargetKind::Mean,
                    "binary" => TargetKind::Binary,
                    other => {
                        return Err(Error::validation(format!(
                            "[forward] target must be mean or binary, got {:?}",
                            other
                        )))
                    }
                }
            }
            ("certify", "n_jacobian_points") => {
                cfg.certify_jacobian_points = parse_value(s, key, value)?
            }
            ("certify", "n_pairs") => cfg.certify_pairs = parse_value(s, key, value)?,
            ("certify", "seed") => cfg.certify_seed = parse_value(s, key, value)?,
            ("certify", "domain_lo") => cfg.certify_domain.0 = parse_value(s, key, value)?,
            ("certify", "domain_hi") => cfg.certify_domain.1 = parse_value(s, key, value)?,
            ("certify", "fd_step") => cfg.certify_fd_step = parse_value(s, key, value)?,
            ("certify", "method") => {
                cfg.certify_method = match value {
                    "jacobian" => CertifyMethod::Jacobian,
                    "sampled_pairs" => CertifyMethod::SampledPairs,
                    "both" => CertifyMethod::Both,
                    other => {
                        return Err(Error::validation(format!(
                            "[certify] method must be jacobian, sampled_pairs or both, got {:?}",
                            other
                        )))
                    }
                }
            }
            ("inversion", "max_iters") => cfg.inversion_max_iters = parse_value(s, key, value)?,
            ("inversion", "tol") => cfg.inversion_tol = parse_value(s, key, value)?,
            ("localizer", "k_layers") => cfg.k_layers = parse_value(s, key, value)?,
            ("localizer", "comp_hidden") => cfg.comp_hidden = parse_value(s, key, value)?,
            ("localizer", "tied") => cfg.tied = parse_value(s, key, value)?,
            ("localizer", "tau0") => cfg.tau0 = parse_value(s, key, value)?,
            ("localizer", "alpha0") => cfg.alpha0 = parse_value(s, key, value)?,
            ("localizer", "rho0") => cfg.rho0 = parse_value(s, key, value)?,
            ("localizer", "epochs") => cfg.head_epochs = parse_value(s, key, value)?,
            ("localizer", "lr") => cfg.head_lr = parse_value(s, key, value)?,
            ("localizer", "optimizer") => cfg.head_optimizer = parse_optimizer(s, value)?,
            ("localizer", "batch_size") => cfg.head_batch_size = parse_value(s, key, value)?,
            ("localizer", "constraint_in_training") => {
                cfg.constraint_in_training = parse_value(s, key, value)?
            }
            ("localizer", "observation") => {
                cfg.observation = match value {
                    "binary" => ObservationKind::Binary,
                    "frequency" => ObservationKind::Frequency,
                    other => {
                        return Err(Error::validation(format!(
                            "[localizer] observation must be binary or frequency, got {:?}",
                            other
                        )))
                    }
                }
            }
            ("metrics", "threshold") => cfg.threshold = parse_value(s, key, value)?,
            ("lpsi", "alpha") => cfg.lpsi_alpha = parse_value(s, key, value)?,
            ("lpsi", "tol") => cfg.lpsi_tol = parse_value(s, key, value)?,
            ("lpsi", "max_iters") => cfg.lpsi_max_iters = parse_value(s, key, value)?,
            ("output", "dir") => cfg.out_dir = PathBuf::from(value),
            ("output", "name") => cfg.dataset_name = Some(value.to_string()),
            _ => return Err(bad_key(s, key)),
        }
    }
    cfg.prob_rule = match prob_rule_name.as_str() {
        "weighted_cascade" => ProbRule::WeightedCascade,
        "constant" => ProbRule::Constant(edge_prob),
        other => {
            return Err(Error::validation(format!(
                "[graph] prob_rule must be weighted_cascade or constant, got {:?}",
                other
            )))
        }
    };
    cfg.graph = match graph_kind.as_str() {
        "file" => {
            let path = graph_path.ok_or_else(|| {
                Error::validation("[graph] kind = file requires a path key")
            })?;
            GraphSource::File { path: PathBuf::from(path), directed: graph_directed }
        }
        "erdos_renyi" => GraphSource::Generated(GraphKind::ErdosRenyi {
            n: graph_n,
            p_edge: graph_p_edge,
            seed: graph_seed,
        }),
        "path" => GraphSource::Generated(GraphKind::Path(graph_n)),
        "star" => GraphSource::Generated(GraphKind::Star(graph_n)),
        "cycle" => GraphSource::Generated(GraphKind::Cycle(graph_n)),
        other => {
            return Err(Error::validation(format!(
                "[graph] kind must be file, erdos_renyi, path, star or cycle, got {:?}",
                other
            )))
        }
    };
    Ok(cfg)
}

/// Loads a config file and verifies referenced paths exist.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::validation(format!("cannot read config {}: {}", path.display(), e))
    })?;
    let cfg = parse_config(&text)?;
    if let GraphSource::File { path, .. } = &cfg.graph {
        if !path.exists() {
            return Err(Error::validation(format!(
                "graph file {} does not exist",
                path.display()
            )));
        }
    }
    Ok(cfg)
}

impl ExperimentConfig {
    /// Canonical text of one section with resolved values; the basis
    /// for both the provenance echo and the stage hashes.
    pub fn section_text(&self, section: &str) -> String {
        let mut s = format!("[{}]\n", section);
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{} = {}", k, v);
        };
        match section {
            "graph" => {
                match &self.graph {
                    GraphSource::File { path, directed } => {
                        kv("kind", "file".into());
                        kv("path", path.display().to_string());
                        kv("directed", directed.to_string());
                    }
                    GraphSource::Generated(kind) => match kind {
                        GraphKind::ErdosRenyi { n, p_edge, seed } => {
                            kv("kind", "erdos_renyi".into());
                            kv("n", n.to_string());
                            kv("p_edge", p_edge.to_string());
                            kv("graph_seed", seed.to_string());
                        }
                        GraphKind::Path(n) => {
                            kv("kind", "path".into());
                            kv("n", n.to_string());
                        }
                        GraphKind::Star(n) => {
                            kv("kind", "star".into());
                            kv("n", n.to_string());
                        }
                        GraphKind::Cycle(n) => {
                            kv("kind", "cycle".into());
                            kv("n", n.to_string());
                        }
                    },
                }
                match self.prob_rule {
                    ProbRule::WeightedCascade => kv("prob_rule", "weighted_cascade".into()),
                    ProbRule::Constant(p) => {
                        kv("prob_rule", "constant".into());
                        kv("edge_prob", p.to_string());
                    }
                }
            }
            "cascade" => {
                kv("n_groups", self.n_groups.to_string());
                kv("source_rate", self.source_rate.to_string());
                kv("runs", self.runs.to_string());
                kv("t_max", self.t_max.to_string());
                kv("seed", self.seed.to_string());
            }
            "forward" => {
                kv("hidden", self.hidden.to_string());
                kv("spectral_scale", self.spectral_scale.to_string());
                kv("c_g", self.c_g.to_string());
                kv("t_steps", self.t_steps.to_string());
                kv("epochs", self.forward_epochs.to_string());
                kv("lr", self.forward_lr.to_string());
                kv("optimizer", optimizer_name(self.forward_optimizer).into());
                kv(
                    "target",
                    match self.forward_target {
                        TargetKind::Mean => "mean".into(),
                        TargetKind::Binary => "binary".into(),
                    },
                );
            }
            "certify" => {
                kv("n_jacobian_points", self.certify_jacobian_points.to_string());
                kv("n_pairs", self.certify_pairs.to_string());
                kv("seed", self.certify_seed.to_string());
                kv("domain_lo", self.certify_domain.0.to_string());
                kv("domain_hi", self.certify_domain.1.to_string());
                kv("fd_step", self.certify_fd_step.to_string());
                kv(
                    "method",
                    match self.certify_method {
                        CertifyMethod::Jacobian => "jacobian".into(),
                        CertifyMethod::SampledPairs => "sampled_pairs".into(),
                        CertifyMethod::Both => "both".into(),
                    },
                );
            }
            "inversion" => {
                kv("max_iters", self.inversion_max_iters.to_string());
                kv("tol", self.inversion_tol.to_string());
            }
            "localizer" => {
                kv("k_layers", self.k_layers.to_string());
                kv("comp_hidden", self.comp_hidden.to_string());
                kv("tied", self.tied.to_string());
                kv("tau0", self.tau0.to_string());
                kv("alpha0", self.alpha0.to_string());
                kv("rho0", self.rho0.to_string());
                kv("epochs", self.head_epochs.to_string());
                kv("lr", self.head_lr.to_string());
                kv("optimizer", optimizer_name(self.head_optimizer).into());
                kv("batch_size", self.head_batch_size.to_string());
                kv("constraint_in_training", self.constraint_in_training.to_string());
                kv(
                    "observation",
                    match self.observation {
                        ObservationKind::Binary => "binary".into(),
                        ObservationKind::Frequency => "frequency".into(),
                    },
                );
            }
            "metrics" => kv("threshold", self.threshold.to_string()),
            "lpsi" => {
                kv("alpha", self.lpsi_alpha.to_string());
                kv("tol", self.lpsi_tol.to_string());
                kv("max_iters", self.lpsi_max_iters.to_string());
            }
            "output" => {
                kv("dir", self.out_dir.display().to_string());
                kv("name", self.dataset_name().into());
            }
            _ => {}
        }
        s
    }

    /// Full canonical config text, echoed into every output directory.
    pub fn echo(&self) -> String {
        ["graph", "cascade", "forward", "certify", "inversion", "localizer", "metrics", "lpsi",
            "output"]
        .iter()
        .map(|s| self.section_text(s))
        .collect::<Vec<_>>()
        .join("\n")
    }

    pub fn dataset_name(&self) -> String {
        if let Some(name) = &self.dataset_name {
            return name.clone();
        }
        match &self.graph {
            GraphSource::File { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "graph".into()),
            GraphSource::Generated(kind) => match kind {
                GraphKind::ErdosRenyi { n, .. } => format!("er{}", n),
                GraphKind::Path(n) => format!("path{}", n),
                GraphKind::Star(n) => format!("star{}", n),
                GraphKind::Cycle(n) => format!("cycle{}", n),
            },
        }
    }

    pub fn build_graph(&self) -> Result<Graph> {
        match &self.graph {
            GraphSource::File { path, directed } => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::validation(format!("cannot read graph {}: {}", path.display(), e))
                })?;
                load_edge_list(&text, *directed, self.prob_rule)
            }
            GraphSource::Generated(kind) => generate_graph(*kind, self.prob_rule),
        }
    }

    pub fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            n_groups: self.n_groups,
            source_rate: self.source_rate,
            runs: self.runs,
            t_max: self.t_max,
            seed: self.seed,
        }
    }

    pub fn certify_config(&self) -> CertifyConfig {
        CertifyConfig {
            method: self.certify_method,
            n_jacobian_points: self.certify_jacobian_points,
            n_pairs: self.certify_pairs,
            seed: self.certify_seed,
            domain: self.certify_domain,
            fd_step: self.certify_fd_step,
        }
    }

    pub fn inversion_config(&self) -> InversionConfig {
        InversionConfig { max_iters: self.inversion_max_iters, tol: self.inversion_tol }
    }

    pub fn forward_train_config(&self) -> ForwardTrainConfig {
        ForwardTrainConfig {
            epochs: self.forward_epochs,
            lr: self.forward_lr,
            optimizer: self.forward_optimizer,
            target: self.forward_target,
        }
    }

    pub fn head_train_config(&self) -> HeadTrainConfig {
        HeadTrainConfig {
            epochs: self.head_epochs,
            lr: self.head_lr,
            optimizer: self.head_optimizer,
            batch_size: self.head_batch_size,
            constraint_in_training: self.constraint_in_training,
            recovery: SeedRecovery::Inversion(self.inversion_config()),
            train_compensation: true,
            observation: self.observation,
        }
    }

    pub fn lpsi_config(&self) -> LpsiConfig {
        LpsiConfig { alpha: self.lpsi_alpha, tol: self.lpsi_tol, max_iters: self.lpsi_max_iters }
    }

    pub fn stage_hashes(&self) -> StageHashes {
        let h = |parts: &[&str]| -> String {
            let mut hasher = Sha256::new();
            for p in parts {
                hasher.update(p.as_bytes());
            }
            let digest = hasher.finalize();
            digest.iter().map(|b| format!("{:02x}", b)).collect()
        };
        let dataset = h(&[&self.section_text("graph"), &self.section_text("cascade")]);
        let forward = h(&[&dataset, &self.section_text("forward")]);
        let certified = h(&[&forward, &self.section_text("certify")]);
        let head = h(&[
            &certified,
            &self.section_text("inversion"),
            &self.section_text("localizer"),
        ]);
        StageHashes { dataset, forward, certified, head }
    }
}

fn optimizer_name(kind: OptimKind) -> &'static str {
    match kind {
        OptimKind::Sgd => "sgd",
        OptimKind::Adam => "adam",
    }
}

/// Content hashes identifying each stage's artifact, chained so that a
/// change in any upstream section invalidates all downstream stages.
#[derive(Debug, Clone)]
pub struct StageHashes {
    pub dataset: String,
    pub forward: String,
    pub certified: String,
    pub head: String,
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.echo.cfg"), cfg.echo())?;
    Ok(())
}

/// Simulates cascades and writes the dataset, or reuses an existing
/// dataset whose hash matches.
pub fn stage_generate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    prepare_out_dir(cfg)?;
    let path = cfg.out_dir.join("dataset.jsonl");
    let hashes = cfg.stage_hashes();
    if path.exists() {
        if let Ok(ds) = CascadeDataset::load(&path) {
            if ds.config_hash.as_deref() == Some(hashes.dataset.as_str()) {
                return Ok(path);
            }
        }
    }
    let g = cfg.build_graph()?;
    let mut ds = generate_dataset(&g, &cfg.cascade_config())?;
    ds.config_hash = Some(hashes.dataset);
    ds.save(&path)?;
    Ok(path)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<CascadeDataset> {
    let path = stage_generate(cfg)?;
    CascadeDataset::load(&path)
}

/// Mean-squared and mean-absolute forward prediction error per split.
fn forward_quality_rows(
    model: &ResidualDiffusionModel,
    g: &Graph,
    ds: &CascadeDataset,
    cfg: &ExperimentConfig,
) -> Result<String> {
    let mut out = String::from("dataset,seed,split,mse,mae\n");
    for (split, groups) in [("train", &ds.train_groups), ("test", &ds.test_groups)] {
        if groups.is_empty() {
            continue;
        }
        let units = crate::diffusion::forward_units(ds, groups, cfg.forward_target);
        let mut pred = Vec::new();
        let mut tgt = Vec::new();
        for u in &units {
            pred.extend(model.p_forward(g, &u.x)?);
            tgt.extend(u.target.iter().copied());
        }
        let r = regression_metrics(&pred, &tgt)?;
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            cfg.dataset_name(),
            cfg.seed,
            split,
            r.mse,
            r.mae
        );
    }
    Ok(out)
}

/// Trains the diffusion model (with damping calibrated first, since g
/// has no trainable parameters) and writes the checkpoint plus a
/// forward-quality report.
pub fn stage_train_forward(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let path = cfg.out_dir.join("forward.ckpt");
    let hashes = cfg.stage_hashes();
    if path.exists() {
        if let Ok(saved) = checkpoint::load_forward(&path) {
            if saved.config_hash.as_deref() == Some(hashes.forward.as_str()) {
                return Ok(path);
            }
        }
    }
    let g = cfg.build_graph()?;
    let net = PerNodeNet::random(cfg.hidden, cfg.spectral_scale, cfg.seed ^ FORWARD_INIT_SALT)?;
    let mut model =
        ResidualDiffusionModel::new(net, ICOperator { t_steps: cfg.t_steps, c_g: cfg.c_g });
    calibrate_damping(&mut model, &g, &cfg.certify_config())?;
    train_forward(&mut model, &g, &ds, &cfg.forward_train_config())?;
    checkpoint::save_forward(&model, Some(&hashes.forward), &path)?;
    std::fs::write(
        cfg.out_dir.join("forward_quality.csv"),
        forward_quality_rows(&model, &g, &ds, cfg)?,
    )?;
    Ok(path)
}

const FORWARD_INIT_SALT: u64 = 0xF0A11ED;
const COMP_INIT_SALT: u64 = 0xC0A11ED;

/// Certifies the trained diffusion model and writes the certified
/// checkpoint read by every downstream stage.
pub fn stage_certify(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let trained = stage_train_forward(cfg)?;
    let path = cfg.out_dir.join("forward-certified.ckpt");
    let hashes = cfg.stage_hashes();
    if path.exists() {
        if let Ok(saved) = checkpoint::load_forward(&path) {
            if saved.config_hash.as_deref() == Some(hashes.certified.as_str()) {
                return Ok(path);
            }
        }
    }
    let g = cfg.build_graph()?;
    let mut model = checkpoint::load_forward(&trained)?.model;
    certify_model(&mut model, &g, &cfg.certify_config())?;
    checkpoint::save_forward(&model, Some(&hashes.certified), &path)?;
    Ok(path)
}

fn load_certified(cfg: &ExperimentConfig) -> Result<ResidualDiffusionModel> {
    let path = stage_certify(cfg)?;
    Ok(checkpoint::load_forward(&path)?.model)
}

/// Fixed-point diagnostics over the test split.
pub fn stage_invert(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let model = load_certified(cfg)?;
    let g = cfg.build_graph()?;
    let inv = cfg.inversion_config();
    let mut out = String::from(
        "group,run,converged,label_iters,feature_iters,label_gap,feature_gap,label_residual,feature_residual\n",
    );
    for u in ds.observation_units(&ds.test_groups, cfg.observation) {
        let rep = invert_p(&model, &g, &u.y, &inv)?;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3e},{:.3e},{:.3e},{:.3e}",
            u.group,
            u.run,
            rep.converged,
            rep.label_run.iters,
            rep.feature_run.iters,
            rep.label_run.gaps_inf.last().copied().unwrap_or(0.0),
            rep.feature_run.gaps_inf.last().copied().unwrap_or(0.0),
            rep.label_run.residual_inf,
            rep.feature_run.residual_inf,
        );
    }
    let path = cfg.out_dir.join("inversion.csv");
    std::fs::write(&path, out)?;
    Ok(path)
}

fn build_head(cfg: &ExperimentConfig, diffusion: ResidualDiffusionModel, n: usize) -> Result<IVGDModel> {
    let mut model = IVGDModel::new(diffusion, n, cfg.comp_hidden, cfg.k_layers, cfg.seed ^ COMP_INIT_SALT)?;
    for layer in &mut model.layers {
        layer.s_rho = inv_softplus(cfg.rho0)?;
        layer.s_tau = inv_softplus(cfg.tau0)?;
        layer.s_alpha = inv_softplus(cfg.alpha0)?;
    }
    if !cfg.tied {
        model.untie_layers(cfg.seed ^ COMP_INIT_SALT ^ 0xFF);
    }
    model.constraint = Some(ConstraintSpec::uniform(n, 0.0));
    model.threshold = cfg.threshold;
    Ok(model)
}

/// Trains the localization head on cached inversions of the train split.
pub fn stage_train_localizer(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let diffusion = load_certified(cfg)?;
    let path = cfg.out_dir.join("localizer.ckpt");
    let hashes = cfg.stage_hashes();
    if path.exists() {
        if let Ok(saved) = checkpoint::load_head(&path, diffusion.clone()) {
            if saved.config_hash.as_deref() == Some(hashes.head.as_str()) {
                return Ok(path);
            }
        }
    }
    let g = cfg.build_graph()?;
    let mut model = build_head(cfg, diffusion, ds.n)?;
    let report = ivgd_train(&mut model, &g, &ds, &cfg.head_train_config())?;
    checkpoint::save_head(&model, Some(&hashes.head), &path)?;
    let mut hist = String::from("epoch,loss\n");
    for (i, l) in report.loss_history.iter().enumerate() {
        let _ = writeln!(hist, "{},{:.9}", i + 1, l);
    }
    std::fs::write(cfg.out_dir.join("head_training.csv"), hist)?;
    Ok(path)
}

fn load_head_model(cfg: &ExperimentConfig) -> Result<IVGDModel> {
    let diffusion = load_certified(cfg)?;
    let path = stage_train_localizer(cfg)?;
    Ok(checkpoint::load_head(&path, diffusion)?.model)
}

#[derive(Serialize)]
struct LocalizeRecord<'a> {
    group: u32,
    run: u32,
    scores: &'a [f64],
    labels: &'a [u8],
    lambdas: &'a [f64],
    step_norms: &'a [f64],
    constraint_residuals: &'a [f64],
}

/// Runs trained inference over the test split, one JSON record per
/// sample with scores, labels, and the layer trace.
pub fn stage_localize(
    cfg: &ExperimentConfig,
    known_source_count: Option<usize>,
) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let model = load_head_model(cfg)?;
    let g = cfg.build_graph()?;
    let inv = cfg.inversion_config();
    let mut out = String::new();
    for u in ds.observation_units(&ds.test_groups, cfg.observation) {
        let r = ivgd_infer(&model, &g, &u.y, known_source_count, &inv)?;
        let record = LocalizeRecord {
            group: u.group,
            run: u.run,
            scores: &r.scores,
            labels: &r.labels,
            lambdas: &r.trace.lambdas,
            step_norms: &r.trace.step_norms,
            constraint_residuals: &r.trace.constraint_residuals,
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    let path = cfg.out_dir.join("traces.jsonl");
    std::fs::write(&path, out)?;
    Ok(path)
}

#[derive(Serialize)]
struct BaselineRecord<'a> {
    group: u32,
    run: u32,
    scores: &'a [f64],
    labels: &'a [u8],
}

/// LPSI needs a binary snapshot; a frequency observation becomes its
/// high-confidence activation set (nodes active in at least 80% of the
/// runs). The sparser cut keeps the positive-peak rule competitive on
/// dense cascades; exact 0/1 observations pass through unchanged.
fn lpsi_observation(y: &[f64]) -> Vec<u8> {
    y.iter().map(|&v| u8::from(v >= 0.8)).collect()
}

/// LPSI over the test split, mirroring the localize output format.
pub fn stage_baseline_lpsi(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let g = cfg.build_graph()?;
    let lpsi_cfg = cfg.lpsi_config();
    let mut out = String::new();
    for u in ds.observation_units(&ds.test_groups, cfg.observation) {
        let scores = lpsi_scores(&g, &lpsi_observation(&u.y), &lpsi_cfg)?;
        let labels = lpsi_sources(&g, &scores)?;
        let record = BaselineRecord { group: u.group, run: u.run, scores: &scores, labels: &labels };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    let path = cfg.out_dir.join("baseline_lpsi.jsonl");
    std::fs::write(&path, out)?;
    Ok(path)
}

/// Pooled test metrics for a localization method: concatenates every
/// test sample's labels and scores, then scores them jointly.
fn pooled_metrics(
    labels: &[u8],
    scores: &[f64],
    truth: &[u8],
) -> Result<MetricsReport> {
    let mut report = classification_metrics(labels, truth)?;
    report.auc = Some(auc(scores, truth)?);
    Ok(report)
}

fn eval_ivgd(
    model: &IVGDModel,
    g: &Graph,
    ds: &CascadeDataset,
    observation: ObservationKind,
    recovery: SeedRecovery,
) -> Result<MetricsReport> {
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for u in ds.observation_units(&ds.test_groups, observation) {
        let r = match recovery {
            SeedRecovery::Inversion(inv) => ivgd_infer(model, g, &u.y, None, &inv)?,
            SeedRecovery::Observation => ivgd_head_infer(model, &u.y, None)?,
        };
        labels.extend(r.labels);
        scores.extend(r.scores);
        truth.extend(dense_from_indices(u.x, ds.n));
    }
    pooled_metrics(&labels, &scores, &truth)
}

fn eval_lpsi(cfg: &ExperimentConfig, g: &Graph, ds: &CascadeDataset) -> Result<MetricsReport> {
    let lpsi_cfg = cfg.lpsi_config();
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for u in ds.observation_units(&ds.test_groups, cfg.observation) {
        let sc = lpsi_scores(g, &lpsi_observation(&u.y), &lpsi_cfg)?;
        labels.extend(lpsi_sources(g, &sc)?);
        scores.extend(sc);
        truth.extend(dense_from_indices(u.x, ds.n));
    }
    pooled_metrics(&labels, &scores, &truth)
}

/// Test metrics for the trained model and the LPSI baseline.
pub fn stage_evaluate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let model = load_head_model(cfg)?;
    let g = cfg.build_graph()?;
    let name = cfg.dataset_name();
    let ivgd = eval_ivgd(
        &model,
        &g,
        &ds,
        cfg.observation,
        SeedRecovery::Inversion(cfg.inversion_config()),
    )?;
    let lpsi = eval_lpsi(cfg, &g, &ds)?;
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    out.push_str(&metrics_csv_row("ivgd", &name, cfg.seed, &ivgd));
    out.push('\n');
    out.push_str(&metrics_csv_row("lpsi", &name, cfg.seed, &lpsi));
    out.push('\n');
    let path = cfg.out_dir.join("metrics.csv");
    std::fs::write(&path, out)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// Feed the observation directly to the head instead of inverting.
    NoInversion,
    /// Freeze the correction at Q = 0 (pure clamp).
    NoCompensation,
    /// Remove every validity-aware layer.
    NoValidity,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [
        AblationVariant::NoInversion,
        AblationVariant::NoCompensation,
        AblationVariant::NoValidity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::NoInversion => "no_inversion",
            AblationVariant::NoCompensation => "no_compensation",
            AblationVariant::NoValidity => "no_validity",
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<AblationVariant> {
        match s {
            "no_inversion" => Ok(AblationVariant::NoInversion),
            "no_compensation" => Ok(AblationVariant::NoCompensation),
            "no_validity" => Ok(AblationVariant::NoValidity),
            other => Err(Error::validation(format!(
                "unknown ablation variant {:?} (expected no_inversion, no_compensation or no_validity)",
                other
            ))),
        }
    }
}

/// Trains and evaluates one ablated head, persisting its checkpoint.
pub fn train_ablated_head(
    cfg: &ExperimentConfig,
    variant: AblationVariant,
) -> Result<(IVGDModel, SeedRecovery)> {
    let ds = load_dataset(cfg)?;
    let diffusion = load_certified(cfg)?;
    let g = cfg.build_graph()?;
    let mut model = build_head(cfg, diffusion, ds.n)?;
    let mut train_cfg = cfg.head_train_config();
    match variant {
        AblationVariant::NoInversion => {
            train_cfg.recovery = SeedRecovery::Observation;
        }
        AblationVariant::NoCompensation => {
            model.comp = CompensationNet::zeros(ds.n, cfg.comp_hidden);
            if let Some(nets) = &mut model.layer_nets {
                for net in nets.iter_mut() {
                    *net = CompensationNet::zeros(ds.n, cfg.comp_hidden);
                }
            }
            train_cfg.train_compensation = false;
        }
        AblationVariant::NoValidity => {
            model.layers.clear();
            model.layer_nets = None;
        }
    }
    ivgd_train(&mut model, &g, &ds, &train_cfg)?;
    let path = cfg.out_dir.join(format!("localizer-{}.ckpt", variant.name()));
    checkpoint::save_head(&model, Some(&cfg.stage_hashes().head), &path)?;
    let recovery = match variant {
        AblationVariant::NoInversion => SeedRecovery::Observation,
        _ => SeedRecovery::Inversion(cfg.inversion_config()),
    };
    Ok((model, recovery))
}

/// Retrains the head under each requested ablation and writes their
/// test metrics in the shared CSV schema.
pub fn run_ablation(cfg: &ExperimentConfig, variants: &[AblationVariant]) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let g = cfg.build_graph()?;
    let name = cfg.dataset_name();
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for &variant in variants {
        let (model, recovery) = train_ablated_head(cfg, variant)?;
        let report = eval_ivgd(&model, &g, &ds, cfg.observation, recovery)?;
        let method = format!("ivgd_{}", variant.name());
        out.push_str(&metrics_csv_row(&method, &name, cfg.seed, &report));
        out.push('\n');
    }
    let path = cfg.out_dir.join("ablations.csv");
    std::fs::write(&path, out)?;
    Ok(path)
}

/// Runs every stage in order and returns the artifact paths.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    Ok(vec![
        stage_generate(cfg)?,
        stage_train_forward(cfg)?,
        stage_certify(cfg)?,
        stage_train_localizer(cfg)?,
        stage_localize(cfg, None)?,
        stage_baseline_lpsi(cfg)?,
        stage_evaluate(cfg)?,
    ])
}
