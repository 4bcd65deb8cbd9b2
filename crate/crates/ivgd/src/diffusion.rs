//! Differentiable forward diffusion model.
//!
//! The model composes two residual blocks: a per-node feature network
//! F_W(x) = (f_W(x) + x) / 2 and a deterministic product-form cascade
//! operator G(z) = (g(z) + z) / 2, giving P = G o F_W. Both halves are
//! built to be contractive: f_W is squashed into (0,1) with spectrally
//! normalized weights, and g carries a damping factor c_g calibrated so
//! its certified Lipschitz estimate stays below 1.
//!
//! Gradients are hand-derived; every backward pass mirrors its forward
//! cache. 64-bit floats throughout.

use crate::certify::{certify_lipschitz, CertifyConfig, LipschitzCertificate};
use crate::error::{Error, Result};
use crate::grad::ParamSet;
use crate::graph::Graph;
use crate::spectral::matrix_spectral_norm;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed for the power iterations inside weight normalization; fixed so
/// normalization is a deterministic function of the weights.
const NORM_SEED: u64 = 0x5EED;

/// Per-node MLP f_W: hidden x 2 weights, tanh activations, output
/// squashed to (0,1) by 0.5 * (1 + tanh(.)). Shared across nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PerNodeNet {
    pub hidden: usize,
    /// hidden x 2, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// 1 x hidden.
    pub w2: Vec<f64>,
    pub b2: f64,
    /// Spectral-norm cap c applied to w1 and w2.
    pub spectral_scale: f64,
}

impl PerNodeNet {
    pub fn random(hidden: usize, spectral_scale: f64, seed: u64) -> Result<PerNodeNet> {
        if hidden == 0 {
            return Err(Error::validation("hidden width must be positive"));
        }
        if !(0.0 < spectral_scale && spectral_scale < 1.0) {
            return Err(Error::validation("spectral scale must lie in (0,1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = |scale: f64| (rng.gen::<f64>() * 2.0 - 1.0) * scale;
        let mut net = PerNodeNet {
            hidden,
            w1: (0..hidden * 2).map(|_| unit(0.7)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden).map(|_| unit(0.7)).collect(),
            b2: 0.0,
            spectral_scale,
        };
        spectral_normalize(&mut net)?;
        Ok(net)
    }
}

/// Rescales w1 and w2 so their largest singular values are at most the
/// net's spectral scale. Matrices already inside the cap are untouched,
/// which makes the operation idempotent.
pub fn spectral_normalize(net: &mut PerNodeNet) -> Result<()> {
    let c = net.spectral_scale;
    for (rows, cols, m) in [
        (net.hidden, 2, &mut net.w1),
        (1, net.hidden, &mut net.w2),
    ] {
        let sigma = matrix_spectral_norm(rows, cols, m, NORM_SEED)?;
        if !sigma.is_finite() {
            return Err(Error::numeric("spectral norm is not finite"));
        }
        let factor = c / sigma.max(c);
        if factor < 1.0 {
            m.iter_mut().for_each(|w| *w *= factor);
        }
    }
    Ok(())
}

/// Two features per node: its own seed mass and normalized incoming
/// seed mass. The normalizer max(1, indeg) * max_edge_prob keeps the
/// map 1-Lipschitz in max-norm; when the graph has no positive edge
/// probability the incoming term is identically zero.
pub fn node_features(g: &Graph, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != g.n() {
        return Err(Error::validation(format!(
            "input length {} does not match node count {}",
            x.len(),
            g.n()
        )));
    }
    let max_p = g.max_edge_prob();
    let mut feats = vec![0.0; g.n() * 2];
    for i in 0..g.n() {
        feats[2 * i] = x[i];
        if max_p > 0.0 {
            let mass: f64 = g.in_edges(i).map(|(_, e)| e.prob * x[e.src]).sum();
            let denom = (g.in_degree(i).max(1)) as f64 * max_p;
            feats[2 * i + 1] = mass / denom;
        }
    }
    Ok(feats)
}

pub(crate) struct FCache {
    feats: Vec<f64>,
    h1: Vec<f64>,
    u: Vec<f64>,
    pub zeta: Vec<f64>,
}

pub(crate) fn f_forward_cached(net: &PerNodeNet, g: &Graph, x: &[f64]) -> Result<FCache> {
    let feats = node_features(g, x)?;
    let n = g.n();
    let h = net.hidden;
    let mut h1 = vec![0.0; n * h];
    let mut u = vec![0.0; n];
    let mut zeta = vec![0.0; n];
    for i in 0..n {
        let (a, b) = (feats[2 * i], feats[2 * i + 1]);
        let mut ui = net.b2;
        for k in 0..h {
            let pre = net.w1[2 * k] * a + net.w1[2 * k + 1] * b + net.b1[k];
            let hk = pre.tanh();
            h1[i * h + k] = hk;
            ui += net.w2[k] * hk;
        }
        u[i] = ui;
        zeta[i] = 0.5 * (1.0 + ui.tanh());
    }
    Ok(FCache { feats, h1, u, zeta })
}

/// zeta_i = 0.5 * (1 + tanh(w2 . tanh(W1 . feat_i + b1) + b2)).
pub fn f_forward(net: &PerNodeNet, g: &Graph, x: &[f64]) -> Result<Vec<f64>> {
    Ok(f_forward_cached(net, g, x)?.zeta)
}

/// Deterministic product-form cascade operator with output damping.
#[derive(Debug, Clone, PartialEq)]
pub struct ICOperator {
    pub t_steps: usize,
    pub c_g: f64,
}

pub(crate) struct GCache {
    /// q^0 .. q^T.
    qs: Vec<Vec<f64>>,
    /// A^t_v = prod over in-edges (1 - p * q^t_u), for t = 0 .. T-1.
    prods: Vec<Vec<f64>>,
}

pub(crate) fn g_forward_cached(ic: &ICOperator, g: &Graph, s: &[f64]) -> Result<GCache> {
    if s.len() != g.n() {
        return Err(Error::validation(format!(
            "input length {} does not match node count {}",
            s.len(),
            g.n()
        )));
    }
    let n = g.n();
    let mut qs = Vec::with_capacity(ic.t_steps + 1);
    let mut prods = Vec::with_capacity(ic.t_steps);
    qs.push(s.to_vec());
    for _ in 0..ic.t_steps {
        let q = qs.last().unwrap();
        let mut prod = vec![1.0; n];
        let mut next = vec![0.0; n];
        for v in 0..n {
            let mut a = 1.0;
            for (_, e) in g.in_edges(v) {
                a *= 1.0 - e.prob * q[e.src];
            }
            prod[v] = a;
            next[v] = 1.0 - (1.0 - s[v]) * a;
        }
        prods.push(prod);
        qs.push(next);
    }
    Ok(GCache { qs, prods })
}

/// g(s) = c_g * q^T where q^0 = s and
/// q^{t+1}_v = 1 - (1 - s_v) * prod_{u in in(v)} (1 - p(u,v) * q^t_u).
pub fn g_forward(ic: &ICOperator, g: &Graph, s: &[f64]) -> Result<Vec<f64>> {
    let cache = g_forward_cached(ic, g, s)?;
    Ok(cache.qs.last().unwrap().iter().map(|q| ic.c_g * q).collect())
}

/// Generic residual half-step (op(x) + x) / 2 used by both blocks.
pub fn residual_block(op: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> Vec<f64> {
    op(x).iter().zip(x).map(|(o, xi)| (o + xi) / 2.0).collect()
}

#[derive(Debug, Clone)]
pub struct ResidualDiffusionModel {
    pub f: PerNodeNet,
    pub ic: ICOperator,
    pub cert_f: Option<LipschitzCertificate>,
    pub cert_g: Option<LipschitzCertificate>,
}

impl ResidualDiffusionModel {
    pub fn new(f: PerNodeNet, ic: ICOperator) -> ResidualDiffusionModel {
        ResidualDiffusionModel { f, ic, cert_f: None, cert_g: None }
    }

    /// F_W(x) = (f_W(x) + x) / 2.
    pub fn residual_f(&self, g: &Graph, x: &[f64]) -> Result<Vec<f64>> {
        let zeta = f_forward(&self.f, g, x)?;
        Ok(zeta.iter().zip(x).map(|(z, xi)| (z + xi) / 2.0).collect())
    }

    /// G(z) = (g(z) + z) / 2.
    pub fn residual_g(&self, g: &Graph, z: &[f64]) -> Result<Vec<f64>> {
        let gz = g_forward(&self.ic, g, z)?;
        Ok(gz.iter().zip(z).map(|(gi, zi)| (gi + zi) / 2.0).collect())
    }

    /// P(x) = G(F_W(x)).
    pub fn p_forward(&self, g: &Graph, x: &[f64]) -> Result<Vec<f64>> {
        let fx = self.residual_f(g, x)?;
        self.residual_g(g, &fx)
    }
}

/// Certifies f_forward and g_forward and stores the certificates on the
/// model. Run after training; inversion refuses models without it.
pub fn certify_model(
    model: &mut ResidualDiffusionModel,
    g: &Graph,
    cfg: &CertifyConfig,
) -> Result<()> {
    let n = g.n();
    let f = model.f.clone();
    let graph = g.clone();
    let cert_f = certify_lipschitz(
        "f_forward",
        &|x| f_forward(&f, &graph, x).expect("dimension fixed"),
        n,
        cfg,
    )?;
    let ic = model.ic.clone();
    let graph2 = g.clone();
    let cert_g = certify_lipschitz(
        "g_forward",
        &|z| g_forward(&ic, &graph2, z).expect("dimension fixed"),
        n,
        cfg,
    )?;
    model.cert_f = Some(cert_f);
    model.cert_g = Some(cert_g);
    Ok(())
}

/// Certifies g at its current damping and rescales c_g to 0.9 / L when
/// the estimate L reaches 0.95, then re-certifies. g has no trainable
/// parameters, so this is done once per (graph, t_steps).
pub fn calibrate_damping(
    model: &mut ResidualDiffusionModel,
    g: &Graph,
    cfg: &CertifyConfig,
) -> Result<()> {
    let ic = model.ic.clone();
    let graph = g.clone();
    let cert = certify_lipschitz(
        "g_forward",
        &|z| g_forward(&ic, &graph, z).expect("dimension fixed"),
        g.n(),
        cfg,
    )?;
    if cert.estimate >= 0.95 {
        model.ic.c_g *= 0.9 / cert.estimate;
    }
    model.cert_g = None;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerNodeNetGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl PerNodeNetGrads {
    fn zeros(net: &PerNodeNet) -> PerNodeNetGrads {
        PerNodeNetGrads {
            w1: vec![0.0; net.w1.len()],
            b1: vec![0.0; net.b1.len()],
            w2: vec![0.0; net.w2.len()],
            b2: 0.0,
        }
    }
}

/// Reverse pass of g_forward. `out_bar` is the gradient with respect to
/// the damped output c_g * q^T; the return value is the gradient with
/// respect to the input s.
pub(crate) fn g_backward(
    ic: &ICOperator,
    g: &Graph,
    s: &[f64],
    cache: &GCache,
    out_bar: &[f64],
) -> Vec<f64> {
    let n = g.n();
    let mut q_bar: Vec<f64> = out_bar.iter().map(|b| ic.c_g * b).collect();
    let mut s_bar = vec![0.0; n];
    for t in (0..ic.t_steps).rev() {
        let q = &cache.qs[t];
        let prod = &cache.prods[t];
        let mut q_prev_bar = vec![0.0; n];
        for v in 0..n {
            let bv = q_bar[v];
            if bv == 0.0 {
                continue;
            }
            s_bar[v] += bv * prod[v];
            let coef = bv * (1.0 - s[v]);
            if coef == 0.0 {
                continue;
            }
            for (_, e) in g.in_edges(v) {
                let factor = 1.0 - e.prob * q[e.src];
                let partial = if factor.abs() > 1e-12 {
                    prod[v] / factor
                } else {
                    // Re-derive the product excluding this in-edge when
                    // its factor vanishes.
                    let mut a = 1.0;
                    for (_, e2) in g.in_edges(v) {
                        if e2.src != e.src {
                            a *= 1.0 - e2.prob * q[e2.src];
                        }
                    }
                    a
                };
                q_prev_bar[e.src] += coef * e.prob * partial;
            }
        }
        q_bar = q_prev_bar;
    }
    // q^0 = s.
    for v in 0..n {
        s_bar[v] += q_bar[v];
    }
    s_bar
}

/// Reverse pass of f_forward: accumulates parameter gradients into
/// `grads` and returns the gradient with respect to x (through both
/// features). `zeta_bar` is the gradient at f's output.
pub(crate) fn f_backward(
    net: &PerNodeNet,
    g: &Graph,
    cache: &FCache,
    zeta_bar: &[f64],
    grads: &mut PerNodeNetGrads,
) -> Vec<f64> {
    let n = zeta_bar.len();
    let h = net.hidden;
    let max_p = g.max_edge_prob();
    let mut feat_bar = vec![0.0; 2 * n];
    for i in 0..n {
        let zb = zeta_bar[i];
        if zb == 0.0 {
            continue;
        }
        let tu = cache.u[i].tanh();
        let u_bar = zb * 0.5 * (1.0 - tu * tu);
        grads.b2 += u_bar;
        let (a, b) = (cache.feats[2 * i], cache.feats[2 * i + 1]);
        for k in 0..h {
            let hk = cache.h1[i * h + k];
            grads.w2[k] += u_bar * hk;
            let pre_bar = u_bar * net.w2[k] * (1.0 - hk * hk);
            grads.b1[k] += pre_bar;
            grads.w1[2 * k] += pre_bar * a;
            grads.w1[2 * k + 1] += pre_bar * b;
            feat_bar[2 * i] += pre_bar * net.w1[2 * k];
            feat_bar[2 * i + 1] += pre_bar * net.w1[2 * k + 1];
        }
    }
    // Features back to x: feat[2i] = x_i, feat[2i+1] = incoming mass.
    let mut x_bar = vec![0.0; n];
    for i in 0..n {
        x_bar[i] += feat_bar[2 * i];
        let fb = feat_bar[2 * i + 1];
        if fb != 0.0 && max_p > 0.0 {
            let denom = (g.in_degree(i).max(1)) as f64 * max_p;
            for (_, e) in g.in_edges(i) {
                x_bar[e.src] += fb * e.prob / denom;
            }
        }
    }
    x_bar
}

/// One (input, target) regression unit for forward training.
#[derive(Debug, Clone)]
pub struct ForwardUnit {
    pub x: Vec<f64>,
    pub target: Vec<f64>,
}

/// Mean over units of per-node mean squared error of P(x) vs target.
pub fn forward_batch_loss(
    model: &ResidualDiffusionModel,
    g: &Graph,
    units: &[ForwardUnit],
) -> Result<f64> {
    if units.is_empty() {
        return Err(Error::validation("forward training batch is empty"));
    }
    let mut loss = 0.0;
    for unit in units {
        let out = model.p_forward(g, &unit.x)?;
        let per: f64 = out
            .iter()
            .zip(&unit.target)
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>()
            / out.len() as f64;
        loss += per;
    }
    Ok(loss / units.len() as f64)
}

/// Loss plus hand-derived gradients for the same batch.
pub fn forward_batch_grads(
    model: &ResidualDiffusionModel,
    g: &Graph,
    units: &[ForwardUnit],
) -> Result<(f64, PerNodeNetGrads)> {
    if units.is_empty() {
        return Err(Error::validation("forward training batch is empty"));
    }
    let n = g.n();
    let mut grads = PerNodeNetGrads::zeros(&model.f);
    let mut loss = 0.0;
    for unit in units {
        if unit.target.len() != n {
            return Err(Error::validation("target length does not match node count"));
        }
        let fcache = f_forward_cached(&model.f, g, &unit.x)?;
        let fres: Vec<f64> = fcache
            .zeta
            .iter()
            .zip(&unit.x)
            .map(|(z, xi)| (z + xi) / 2.0)
            .collect();
        let gcache = g_forward_cached(&model.ic, g, &fres)?;
        let q_last = gcache.qs.last().unwrap();
        let out: Vec<f64> = q_last
            .iter()
            .zip(&fres)
            .map(|(q, f)| (model.ic.c_g * q + f) / 2.0)
            .collect();
        let scale = 1.0 / (n as f64 * units.len() as f64);
        let mut out_bar = vec![0.0; n];
        for i in 0..n {
            let d = out[i] - unit.target[i];
            loss += d * d * scale;
            out_bar[i] = 2.0 * d * scale;
        }
        // out = (c_g * q^T + F) / 2.
        let g_out_bar: Vec<f64> = out_bar.iter().map(|b| b / 2.0).collect();
        let mut fres_bar: Vec<f64> = out_bar.iter().map(|b| b / 2.0).collect();
        let s_bar = g_backward(&model.ic, g, &fres, &gcache, &g_out_bar);
        for i in 0..n {
            fres_bar[i] += s_bar[i];
        }
        // F = (zeta + x) / 2.
        let zeta_bar: Vec<f64> = fres_bar.iter().map(|b| b / 2.0).collect();
        f_backward(&model.f, g, &fcache, &zeta_bar, &mut grads);
    }
    Ok((loss, grads))
}

pub const FORWARD_PARAM_NAMES: [&str; 4] = ["f.w1", "f.b1", "f.w2", "f.b2"];

pub fn register_forward_params(net: &PerNodeNet, ps: &mut ParamSet) -> Result<()> {
    ps.register("f.w1", &[net.hidden, 2], net.w1.clone())?;
    ps.register("f.b1", &[net.hidden], net.b1.clone())?;
    ps.register("f.w2", &[1, net.hidden], net.w2.clone())?;
    ps.register("f.b2", &[1], vec![net.b2])?;
    Ok(())
}

pub fn load_forward_params(net: &mut PerNodeNet, ps: &ParamSet) -> Result<()> {
    let idx = |name: &str| {
        ps.lookup(name)
            .ok_or_else(|| Error::validation(format!("missing parameter {}", name)))
    };
    net.w1.copy_from_slice(ps.values(idx("f.w1")?));
    net.b1.copy_from_slice(ps.values(idx("f.b1")?));
    net.w2.copy_from_slice(ps.values(idx("f.w2")?));
    net.b2 = ps.values(idx("f.b2")?)[0];
    Ok(())
}

pub fn store_forward_grads(grads: &PerNodeNetGrads, ps: &mut ParamSet) -> Result<()> {
    let slices: [(&str, &[f64]); 4] = [
        ("f.w1", &grads.w1),
        ("f.b1", &grads.b1),
        ("f.w2", &grads.w2),
        ("f.b2", std::slice::from_ref(&grads.b2)),
    ];
    for (name, slice) in slices {
        let idx = ps
            .lookup(name)
            .ok_or_else(|| Error::validation(format!("missing parameter {}", name)))?;
        ps.add_grad(idx, slice);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetKind {
    /// Per-group empirical activation frequency.
    Mean,
    /// Per-run binary activation.
    Binary,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: crate::grad::OptimKind,
    pub target: TargetKind,
}

impl Default for ForwardTrainConfig {
    fn default() -> Self {
        ForwardTrainConfig {
            epochs: 100,
            lr: 1e-3,
            optimizer: crate::grad::OptimKind::Sgd,
            target: TargetKind::Mean,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrainReport {
    pub loss_history: Vec<f64>,
    pub test: Option<crate::metrics::RegressionReport>,
}

/// Builds (x, target) units from a dataset split. Mean targets yield
/// one unit per group; binary targets one unit per run.
pub fn forward_units(
    ds: &crate::cascade::CascadeDataset,
    groups: &[u32],
    target: TargetKind,
) -> Vec<ForwardUnit> {
    let mut units = Vec::new();
    match target {
        TargetKind::Mean => {
            for &gid in groups {
                let x = crate::cascade::dense_f64_from_indices(ds.group_sources(gid), ds.n);
                units.push(ForwardUnit { x, target: ds.group_mean(gid) });
            }
        }
        TargetKind::Binary => {
            for s in ds.samples.iter().filter(|s| groups.contains(&s.group)) {
                units.push(ForwardUnit {
                    x: crate::cascade::dense_f64_from_indices(&s.x, ds.n),
                    target: crate::cascade::dense_f64_from_indices(&s.y, ds.n),
                });
            }
        }
    }
    units
}

/// Full-batch gradient training of f_W against the train split, with
/// spectral renormalization after every update. Returns the per-epoch
/// loss history and pooled test regression metrics when a test split
/// exists.
pub fn train_forward(
    model: &mut ResidualDiffusionModel,
    g: &Graph,
    ds: &crate::cascade::CascadeDataset,
    cfg: &ForwardTrainConfig,
) -> Result<ForwardTrainReport> {
    let train_units = forward_units(ds, &ds.train_groups, cfg.target);
    if train_units.is_empty() {
        return Err(Error::Training { epoch: 0, msg: "no training units".into() });
    }
    let mut ps = ParamSet::new();
    register_forward_params(&model.f, &mut ps)?;
    let mut opt = match cfg.optimizer {
        crate::grad::OptimKind::Sgd => crate::grad::OptimizerState::sgd(cfg.lr),
        crate::grad::OptimKind::Adam => crate::grad::OptimizerState::adam(cfg.lr),
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grads) = forward_batch_grads(model, g, &train_units)?;
        if !loss.is_finite() {
            return Err(Error::Training { epoch, msg: "loss is not finite".into() });
        }
        history.push(loss);
        ps.zero_grads();
        store_forward_grads(&grads, &mut ps)?;
        opt.step(&mut ps);
        load_forward_params(&mut model.f, &ps)?;
        spectral_normalize(&mut model.f)?;
        // Keep the registry in sync with the projected weights.
        let mut synced = ParamSet::new();
        register_forward_params(&model.f, &mut synced)?;
        ps.set_flat_values(&synced.flat_values())?;
    }
    let test = if ds.test_groups.is_empty() {
        None
    } else {
        let test_units = forward_units(ds, &ds.test_groups, cfg.target);
        let mut pred = Vec::new();
        let mut tgt = Vec::new();
        for u in &test_units {
            pred.extend(model.p_forward(g, &u.x)?);
            tgt.extend(u.target.iter().copied());
        }
        Some(crate::metrics::regression_metrics(&pred, &tgt)?)
    };
    Ok(ForwardTrainReport { loss_history: history, test })
}
