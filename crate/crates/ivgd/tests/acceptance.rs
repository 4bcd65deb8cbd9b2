//! Acceptance gate: ten end-to-end checks, each printing one verdict
//! line (`ACCEPTANCE <k> <name>: PASS|FAIL`) before asserting.
//!
//! Checks 1-3 share a pool of fifty random certified models; checks
//! 7-9 share one five-seed run of the Karate pipeline. Fixtures are
//! built once behind `OnceLock` so the suite stays order-independent.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ivgd::certify::{CertifyConfig, CertifyMethod};
use ivgd::diffusion::{
    calibrate_damping, certify_model, forward_batch_grads, forward_batch_loss,
    load_forward_params, register_forward_params, store_forward_grads, ForwardUnit, ICOperator,
    PerNodeNet, ResidualDiffusionModel,
};
use ivgd::experiment::{parse_config, run_ablation, run_pipeline, AblationVariant, GraphSource};
use ivgd::grad::{finite_diff_check, ParamSet};
use ivgd::graph::{generate_graph, Graph, GraphKind, ConstraintSpec, ProbRule};
use ivgd::inversion::{invert_p, InversionConfig};
use ivgd::localizer::{
    head_loss_and_grads, layer_conditions, layer_forward, layer_gamma, layer_objective,
    register_head_params, run_tied_layers, IVGDModel, LayerParams,
};
use ivgd::metrics::{auc, classification_metrics, roc_points, trapezoid_area};
use ivgd::spectral::max_norm;

fn verdict(k: usize, name: &str, ok: bool, detail: String) {
    println!("ACCEPTANCE {k} {name}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance check {k} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------- 1-3

/// One certified model with the gap traces of every inversion run on it.
struct BuiltModel {
    graph: Graph,
    model: ResidualDiffusionModel,
    l_f: f64,
    l_g: f64,
}

struct RoundTripPool {
    models: Vec<BuiltModel>,
    /// (successive max-norm gaps, certified constant of the inverted op).
    runs: Vec<(Vec<f64>, f64)>,
    worst_error: f64,
    elapsed: Duration,
}

fn round_trip_pool() -> &'static RoundTripPool {
    static POOL: OnceLock<RoundTripPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let start = Instant::now();
        let sizes = [10usize, 20, 34];
        let edge_probs = [0.35, 0.22, 0.16];
        // Dense certification: the decay check in the second criterion
        // compares realized rates against these estimates, so they must
        // sit above the constant realized on any trajectory.
        let certify = CertifyConfig {
            method: CertifyMethod::Both,
            n_jacobian_points: 32,
            n_pairs: 2000,
            seed: 0xCE47,
            domain: (-1.0, 2.0),
            fd_step: 1e-5,
        };
        let inv = InversionConfig { max_iters: 400, tol: 1e-10 };
        let mut models = Vec::new();
        let mut runs = Vec::new();
        let mut worst_error = 0.0f64;
        for i in 0..50u64 {
            let n = sizes[i as usize % 3];
            let kind = GraphKind::ErdosRenyi {
                n,
                p_edge: edge_probs[i as usize % 3],
                seed: 1000 + i,
            };
            let graph = generate_graph(kind, ProbRule::Constant(0.15)).unwrap();
            let net = PerNodeNet::random(4, 0.9, 300 + i).unwrap();
            let ic = ICOperator { t_steps: 2, c_g: 1.0 };
            let mut model = ResidualDiffusionModel::new(net, ic);
            calibrate_damping(&mut model, &graph, &certify).unwrap();
            certify_model(&mut model, &graph, &certify).unwrap();
            let l_f = model.cert_f.as_ref().unwrap().estimate;
            let l_g = model.cert_g.as_ref().unwrap().estimate;
            let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF ^ i);
            let mut inputs: Vec<Vec<f64>> = vec![vec![0.0; n], {
                let mut one_hot = vec![0.0; n];
                one_hot[0] = 1.0;
                one_hot
            }];
            for _ in 0..4 {
                inputs.push((0..n).map(|_| f64::from(rng.gen_bool(0.25))).collect());
            }
            for x in &inputs {
                let y = model.p_forward(&graph, x).unwrap();
                let report = invert_p(&model, &graph, &y, &inv).unwrap();
                let err = max_norm(
                    &report
                        .seed_estimate()
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a - b)
                        .collect::<Vec<_>>(),
                );
                worst_error = worst_error.max(err);
                runs.push((report.label_run.gaps_inf.clone(), l_g));
                runs.push((report.feature_run.gaps_inf.clone(), l_f));
            }
            models.push(BuiltModel { graph, model, l_f, l_g });
        }
        RoundTripPool { models, runs, worst_error, elapsed: start.elapsed() }
    })
}

#[test]
fn acceptance_1_inversion_round_trip() {
    let pool = round_trip_pool();
    let ok = pool.worst_error <= 1e-4 && pool.elapsed < Duration::from_secs(10);
    verdict(
        1,
        "inversion round trip on 50 certified models",
        ok,
        format!(
            "worst max-norm error {:.3e} (bound 1e-4), elapsed {:?} (bound 10s)",
            pool.worst_error, pool.elapsed
        ),
    );
}

#[test]
fn acceptance_2_contraction_rate() {
    let pool = round_trip_pool();
    let mut worst_excess = f64::NEG_INFINITY;
    for (gaps, rate) in &pool.runs {
        if gaps.is_empty() {
            continue;
        }
        let mut bound = gaps[0];
        for &gap in gaps {
            worst_excess = worst_excess.max(gap - bound - 1e-9);
            bound *= rate;
        }
    }
    verdict(
        2,
        "fixed-point gaps decay at the certified rate",
        worst_excess <= 0.0,
        format!("worst excess over L^i * gap_0 + 1e-9 was {worst_excess:.3e}"),
    );
}

#[test]
fn acceptance_3_composite_ratio_bounds() {
    let pool = round_trip_pool();
    let domain = (-1.0f64, 2.0f64);
    let mut worst_fwd = f64::NEG_INFINITY;
    let mut worst_inv = f64::NEG_INFINITY;
    for (i, built) in pool.models.iter().enumerate() {
        let n = built.graph.n();
        let fwd_bound = (1.0 + built.l_f) * (1.0 + built.l_g) / 4.0 + 1e-6;
        let inv_bound = 4.0 / ((1.0 - built.l_f) * (1.0 - built.l_g)) + 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(0xA1FA ^ i as u64);
        let mut point = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| domain.0 + rng.gen::<f64>() * (domain.1 - domain.0)).collect()
        };
        for _ in 0..10_000 {
            let a = point(&mut rng);
            let b = point(&mut rng);
            let dx = max_norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
            if dx == 0.0 {
                continue;
            }
            let pa = built.model.p_forward(&built.graph, &a).unwrap();
            let pb = built.model.p_forward(&built.graph, &b).unwrap();
            let dp = max_norm(&pa.iter().zip(&pb).map(|(x, y)| x - y).collect::<Vec<_>>());
            worst_fwd = worst_fwd.max(dp / dx - fwd_bound);
            if dp > 0.0 {
                worst_inv = worst_inv.max(dx / dp - inv_bound);
            }
        }
    }
    verdict(
        3,
        "composite and inverse ratios respect the certificate bounds",
        worst_fwd <= 0.0 && worst_inv <= 0.0,
        format!("worst forward excess {worst_fwd:.3e}, worst inverse excess {worst_inv:.3e}"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn acceptance_4_layer_minimizer() {
    // Hand-worked case first: the update and multiplier are exact.
    let p = LayerParams { rho: 0.25, tau: 1.0, alpha: 1.0 };
    let cs = ConstraintSpec::uniform(2, 1.0);
    let (x_next, lambda_next) =
        layer_forward(&p, &[1.0, 1.0], &[1.0, 1.0], 0.0, Some((&cs, 1.0))).unwrap();
    let exact = x_next == vec![0.875, 0.875] && lambda_next == 0.1875;

    // Random probes: no perturbation of the closed-form update may
    // reach a lower surrogate value.
    let mut rng = ChaCha8Rng::seed_from_u64(0x4AC3);
    let mut worst_gain = f64::NEG_INFINITY;
    for case in 0..25 {
        let n = 3 + case % 5;
        let p = LayerParams {
            rho: 0.05 + rng.gen::<f64>() * 0.5,
            tau: 0.2 + rng.gen::<f64>() * 3.0,
            alpha: 0.2 + rng.gen::<f64>() * 3.0,
        };
        let c: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let x_k: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 0.5).collect();
        let lambda = rng.gen::<f64>() - 0.5;
        let cs = ConstraintSpec::uniform(n, 0.0);
        let b = rng.gen::<f64>() * n as f64 * 0.5;
        let constraint = (case % 3 != 2).then_some((&cs, b));
        let zeros = vec![0.0; n];
        let a: &[f64] = match constraint {
            Some((cs, _)) => &cs.a,
            None => &zeros,
        };
        let gamma = layer_gamma(&p, &x_k, lambda, constraint);
        let (x_star, _) = layer_forward(&p, &c, &x_k, lambda, constraint).unwrap();
        let h_star = layer_objective(&p, &c, &x_k, gamma, a, &x_star);
        for probe in 0..100 {
            let radius = [1e-3, 1e-2, 1e-1][probe % 3];
            let x_probe: Vec<f64> = x_star
                .iter()
                .map(|v| v + (rng.gen::<f64>() * 2.0 - 1.0) * radius)
                .collect();
            let h_probe = layer_objective(&p, &c, &x_k, gamma, a, &x_probe);
            worst_gain = worst_gain.max(h_star - h_probe - 1e-12);
        }
    }
    verdict(
        4,
        "closed-form layer update minimizes its surrogate",
        exact && worst_gain <= 0.0,
        format!(
            "hand-worked case exact: {exact}, worst probe improvement {worst_gain:.3e}"
        ),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn acceptance_5_tied_layer_convergence_diagnostics() {
    let n = 10;
    let cs = ConstraintSpec::uniform(n, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0x7E0D);
    let x0: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();

    // Margin satisfied: alpha - rho * r(a a') = 1 - 0.08 * 10 > 0.
    let good = LayerParams { rho: 0.08, tau: 1.0, alpha: 1.0 };
    let report = &layer_conditions(&[good], &cs)[0];
    let trace = run_tied_layers(&good, &x0, &cs, 3.0, 500).unwrap();
    let final_residual = *trace.constraint_residuals.last().unwrap();
    let final_step = *trace.step_norms.last().unwrap();
    let converged = report.margin_ok && final_residual < 1e-6 && final_step < 1e-6;

    // Margin violated exactly (alpha = rho * n): the diagnostic must
    // flag the precondition; no statement about the iteration is made.
    let bad = LayerParams { rho: 0.1, tau: 1.0, alpha: 1.0 };
    let flagged = !layer_conditions(&[bad], &cs)[0].margin_ok;

    verdict(
        5,
        "tied-layer diagnostics match the margin condition",
        converged && flagged,
        format!(
            "margin_ok {}, final residual {:.3e}, final step norm {:.3e}, violated margin flagged {}",
            report.margin_ok, final_residual, final_step, flagged
        ),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn acceptance_6_gradient_gate() {
    // Forward-model loss on a 5-node instance.
    let g = generate_graph(
        GraphKind::ErdosRenyi { n: 5, p_edge: 0.5, seed: 11 },
        ProbRule::Constant(0.3),
    )
    .unwrap();
    let net = PerNodeNet::random(3, 0.9, 9).unwrap();
    let model = ResidualDiffusionModel::new(net, ICOperator { t_steps: 1, c_g: 0.8 });
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD5);
    let units: Vec<ForwardUnit> = (0..3)
        .map(|_| ForwardUnit {
            x: (0..5).map(|_| f64::from(rng.gen_bool(0.4))).collect(),
            target: (0..5).map(|_| rng.gen::<f64>()).collect(),
        })
        .collect();
    let mut ps = ParamSet::new();
    register_forward_params(&model.f, &mut ps).unwrap();
    let (_, grads) = forward_batch_grads(&model, &g, &units).unwrap();
    ps.zero_grads();
    store_forward_grads(&grads, &mut ps).unwrap();
    let model_for_loss = model.clone();
    let graph_for_loss = g.clone();
    let units_for_loss = units.clone();
    let forward_err = finite_diff_check(
        &mut |p: &ParamSet| {
            let mut m = model_for_loss.clone();
            load_forward_params(&mut m.f, p)?;
            forward_batch_loss(&m, &graph_for_loss, &units_for_loss)
        },
        &mut ps,
        1e-6,
    )
    .unwrap();

    // Full localizer loss, constrained and unconstrained, 5 nodes.
    let mut head = IVGDModel::new(model, 5, 4, 2, 0x51ED).unwrap();
    head.constraint = Some(ConstraintSpec::uniform(5, 0.0));
    let z: Vec<f64> = (0..5).map(|_| rng.gen::<f64>()).collect();
    let target = vec![1.0, 0.0, 0.0, 1.0, 0.0];
    let mut head_err = 0.0f64;
    for known in [Some(2usize), None] {
        let mut hp = ParamSet::new();
        register_head_params(&head, true, &mut hp).unwrap();
        hp.zero_grads();
        head_loss_and_grads(&head, &z, &target, known, &mut hp).unwrap();
        let head_for_loss = head.clone();
        let z_for_loss = z.clone();
        let target_for_loss = target.clone();
        let err = finite_diff_check(
            &mut |p: &ParamSet| {
                let mut m = head_for_loss.clone();
                ivgd::localizer::load_head_params(&mut m, p)?;
                let mut scratch = ParamSet::new();
                register_head_params(&m, true, &mut scratch)?;
                head_loss_and_grads(&m, &z_for_loss, &target_for_loss, known, &mut scratch)
            },
            &mut hp,
            1e-6,
        )
        .unwrap();
        head_err = head_err.max(err);
    }
    verdict(
        6,
        "finite differences confirm both analytic gradients",
        forward_err <= 1e-4 && head_err <= 1e-4,
        format!(
            "forward loss max relative error {forward_err:.3e}, localizer loss max relative error {head_err:.3e} (bound 1e-4)"
        ),
    );
}

// ---------------------------------------------------------------- 7-9

struct KarateOutcome {
    ivgd_fs: Vec<f64>,
    lpsi_fs: Vec<f64>,
    ablation_fs: BTreeMap<String, Vec<f64>>,
    test_mse: Vec<f64>,
    test_mae: Vec<f64>,
    elapsed: Duration,
    _dirs: Vec<tempfile::TempDir>,
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn karate_outcome() -> &'static KarateOutcome {
    static OUTCOME: OnceLock<KarateOutcome> = OnceLock::new();
    OUTCOME.get_or_init(|| {
        let start = Instant::now();
        let root = repo_root();
        let text = std::fs::read_to_string(root.join("configs/karate.cfg")).unwrap();
        let base = parse_config(&text).unwrap();
        let directed = match &base.graph {
            GraphSource::File { directed, .. } => *directed,
            GraphSource::Generated(_) => panic!("the karate config must point at an edge file"),
        };
        let mut outcome = KarateOutcome {
            ivgd_fs: Vec::new(),
            lpsi_fs: Vec::new(),
            ablation_fs: BTreeMap::new(),
            test_mse: Vec::new(),
            test_mae: Vec::new(),
            elapsed: Duration::ZERO,
            _dirs: Vec::new(),
        };
        for seed in 42..=46u64 {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = base.clone();
            cfg.graph =
                GraphSource::File { path: root.join("data/karate.edges"), directed };
            cfg.seed = seed;
            cfg.out_dir = dir.path().to_path_buf();
            run_pipeline(&cfg).unwrap();
            run_ablation(&cfg, &AblationVariant::ALL).unwrap();
            for row in csv_rows(&cfg.out_dir.join("metrics.csv")) {
                let fs: f64 = row[6].parse().unwrap();
                match row[0].as_str() {
                    "ivgd" => outcome.ivgd_fs.push(fs),
                    "lpsi" => outcome.lpsi_fs.push(fs),
                    other => panic!("unexpected method {other}"),
                }
            }
            for row in csv_rows(&cfg.out_dir.join("ablations.csv")) {
                let fs: f64 = row[6].parse().unwrap();
                outcome.ablation_fs.entry(row[0].clone()).or_default().push(fs);
            }
            for row in csv_rows(&cfg.out_dir.join("forward_quality.csv")) {
                if row[2] == "test" {
                    outcome.test_mse.push(row[3].parse().unwrap());
                    outcome.test_mae.push(row[4].parse().unwrap());
                }
            }
            outcome._dirs.push(dir);
        }
        outcome.elapsed = start.elapsed();
        outcome
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn acceptance_7_karate_beats_the_baseline() {
    let out = karate_outcome();
    let ivgd = mean(&out.ivgd_fs);
    let lpsi = mean(&out.lpsi_fs);
    // Expected operating points for this dataset, each within a 0.15
    // re-simulation envelope, with the ordering preserved.
    let ok = out.ivgd_fs.len() == 5
        && ivgd > lpsi
        && ivgd >= 0.75
        && (ivgd - 0.9213).abs() <= 0.15
        && (lpsi - 0.7970).abs() <= 0.15
        && out.elapsed < Duration::from_secs(300);
    verdict(
        7,
        "five-seed Karate run beats LPSI",
        ok,
        format!(
            "ivgd mean FS {ivgd:.4} (per-seed {:?}), lpsi mean FS {lpsi:.4}, elapsed {:?}",
            out.ivgd_fs, out.elapsed
        ),
    );
}

#[test]
fn acceptance_8_ablations_do_not_improve() {
    let out = karate_outcome();
    let full = mean(&out.ivgd_fs);
    let mut ok = true;
    let mut detail = String::new();
    for variant in ["ivgd_no_inversion", "ivgd_no_validity"] {
        let fs = &out.ablation_fs[variant];
        let m = mean(fs);
        let ties = fs
            .iter()
            .zip(&out.ivgd_fs)
            .filter(|(a, b)| (*a - *b).abs() < 1e-9)
            .count();
        ok = ok && fs.len() == 5 && m <= full && ties <= 1;
        detail.push_str(&format!("{variant}: mean {m:.4} ties {ties}; "));
    }
    verdict(
        8,
        "removing inversion or validity layers does not help",
        ok,
        format!("full mean {full:.4}; {detail}"),
    );
}

#[test]
fn acceptance_9_forward_fit_quality() {
    let out = karate_outcome();
    let worst_mse = out.test_mse.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let worst_mae = out.test_mae.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ok = out.test_mse.len() == 5 && worst_mse <= 0.1 && worst_mae <= 0.25;
    verdict(
        9,
        "trained diffusion model fits held-out cascades",
        ok,
        format!("worst test MSE {worst_mse:.4} (bound 0.1), worst test MAE {worst_mae:.4} (bound 0.25)"),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn acceptance_10_metric_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC10);
    let mut worst = 0.0f64;
    for round in 0..1000 {
        let n = 30;
        let mut scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        if round % 3 == 0 {
            // Coarse scores force tie blocks through both code paths.
            for s in &mut scores {
                *s = (*s * 10.0).round() / 10.0;
            }
        }
        let mut truth: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        truth[0] = 1;
        truth[1] = 0;
        let area = trapezoid_area(&roc_points(&scores, &truth).unwrap());
        let direct = auc(&scores, &truth).unwrap();
        worst = worst.max((area - direct).abs());
    }

    let hand = [
        (vec![1, 1, 0, 0, 1], vec![1, 0, 0, 1, 1], (2, 1, 1, 1), (0.6, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0)),
        (vec![0, 0, 0, 0], vec![1, 0, 1, 0], (0, 0, 2, 2), (0.5, 0.0, 0.0, 0.0)),
        (vec![1, 1, 1], vec![0, 0, 0], (0, 3, 0, 0), (0.0, 0.0, 0.0, 0.0)),
        (vec![1, 0, 1], vec![1, 0, 1], (2, 0, 1, 0), (1.0, 1.0, 1.0, 1.0)),
    ];
    let mut exact = true;
    for (labels, truth, (tp, fp, tn, fn_), (acc, pr, re, fs)) in &hand {
        let r = classification_metrics(labels, truth).unwrap();
        exact = exact
            && (r.tp, r.fp, r.tn, r.fn_) == (*tp, *fp, *tn, *fn_)
            && (r.acc, r.pr, r.re, r.fs) == (*acc, *pr, *re, *fs);
    }
    verdict(
        10,
        "AUC equals the trapezoid ROC area and confusion counts are exact",
        worst <= 1e-12 && exact,
        format!("worst |auc - area| {worst:.3e} (bound 1e-12), hand-counted cases exact: {exact}"),
    );
}
