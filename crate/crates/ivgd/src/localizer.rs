//! Source-localization head: error compensation plus a stack of
//! validity-aware layers.
//!
//! The head refines a recovered seed estimate z in three stages:
//!   1. compensation x^0 = clamp(z + Q(z), 0, 1) with a learned
//!      correction network Q,
//!   2. K closed-form layers, each the exact minimizer of a linearized
//!      augmented-Lagrangian surrogate around the previous iterate,
//!      optionally enforcing a linear budget constraint a'x = b through
//!      a scalar dual variable, and
//!   3. a final clamp to [0,1] and thresholding at 0.5.
//!
//! Every layer's scalars (rho, tau, alpha) are kept positive by a
//! softplus reparameterization. Gradients through the whole head are
//! hand-derived chain rule; the clamp uses the 0/1 subgradient with
//! value 1 on the boundary.

use crate::cascade::{dense_f64_from_indices, CascadeDataset, ObservationKind};
use crate::diffusion::ResidualDiffusionModel;
use crate::error::{Error, Result};
use crate::grad::{OptimKind, OptimizerState, ParamSet};
use crate::graph::{spectral_radius_ata, ConstraintSpec, Graph};
use crate::inversion::{invert_p, InversionConfig, InversionReport};
use crate::spectral::l2_norm;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus on (0, inf): ln(e^y - 1).
pub fn inv_softplus(y: f64) -> Result<f64> {
    if y <= 0.0 {
        return Err(Error::validation("inverse softplus requires a positive value"));
    }
    Ok(y + (-(-y).exp_m1()).ln())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Full-vector correction network Q: three affine layers n -> h -> h -> n
/// with tanh activations. The skip connection and clamp live in
/// `compensate`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensationNet {
    pub n: usize,
    pub hidden: usize,
    /// hidden x n.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// hidden x hidden.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// n x hidden.
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl CompensationNet {
    pub fn zeros(n: usize, hidden: usize) -> CompensationNet {
        CompensationNet {
            n,
            hidden,
            w1: vec![0.0; hidden * n],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
            w3: vec![0.0; n * hidden],
            b3: vec![0.0; n],
        }
    }

    /// Small random correction so training starts near (but not at)
    /// the identity; exactly zero weights have dead tanh gradients.
    pub fn random(n: usize, hidden: usize, seed: u64) -> CompensationNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut small = |len: usize, scale: f64| -> Vec<f64> {
            (0..len).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect()
        };
        CompensationNet {
            n,
            hidden,
            w1: small(hidden * n, 0.05),
            b1: small(hidden, 0.05),
            w2: small(hidden * hidden, 0.05),
            b2: small(hidden, 0.05),
            w3: small(n * hidden, 0.05),
            b3: vec![0.0; n],
        }
    }
}

fn affine(rows: usize, cols: usize, w: &[f64], b: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        out[i] += row.iter().zip(v).map(|(wij, vj)| wij * vj).sum::<f64>();
    }
    out
}

pub(crate) struct CompCache {
    v: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    /// z + Q(z) before the clamp.
    raw: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) fn comp_forward_cached(net: &CompensationNet, v: &[f64]) -> Result<CompCache> {
    if v.len() != net.n {
        return Err(Error::validation(format!(
            "compensation input length {} does not match width {}",
            v.len(),
            net.n
        )));
    }
    let h1: Vec<f64> =
        affine(net.hidden, net.n, &net.w1, &net.b1, v).iter().map(|x| x.tanh()).collect();
    let h2: Vec<f64> =
        affine(net.hidden, net.hidden, &net.w2, &net.b2, &h1).iter().map(|x| x.tanh()).collect();
    let q = affine(net.n, net.hidden, &net.w3, &net.b3, &h2);
    let raw: Vec<f64> = v.iter().zip(&q).map(|(vi, qi)| vi + qi).collect();
    let out: Vec<f64> = raw.iter().map(|x| x.clamp(0.0, 1.0)).collect();
    Ok(CompCache { v: v.to_vec(), h1, h2, raw, out })
}

/// x = clamp(v + Q(v), 0, 1).
pub fn compensate(net: &CompensationNet, v: &[f64]) -> Result<Vec<f64>> {
    Ok(comp_forward_cached(net, v)?.out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl CompGrads {
    fn zeros(net: &CompensationNet) -> CompGrads {
        CompGrads {
            w1: vec![0.0; net.w1.len()],
            b1: vec![0.0; net.b1.len()],
            w2: vec![0.0; net.w2.len()],
            b2: vec![0.0; net.b2.len()],
            w3: vec![0.0; net.w3.len()],
            b3: vec![0.0; net.b3.len()],
        }
    }
}

/// Subgradient of the clamp: 1 inside [0,1] and on the boundary,
/// 0 strictly outside.
fn clamp_mask(raw: f64) -> f64 {
    if (0.0..=1.0).contains(&raw) {
        1.0
    } else {
        0.0
    }
}

/// Reverse pass of `compensate`; returns the input gradient and adds
/// parameter gradients into `grads`.
pub(crate) fn comp_backward(
    net: &CompensationNet,
    cache: &CompCache,
    out_bar: &[f64],
    grads: &mut CompGrads,
) -> Vec<f64> {
    let n = net.n;
    let h = net.hidden;
    let masked: Vec<f64> =
        out_bar.iter().zip(&cache.raw).map(|(b, r)| b * clamp_mask(*r)).collect();
    // q = W3 h2 + b3.
    let mut h2_bar = vec![0.0; h];
    for i in 0..n {
        let qb = masked[i];
        if qb == 0.0 {
            continue;
        }
        grads.b3[i] += qb;
        for j in 0..h {
            grads.w3[i * h + j] += qb * cache.h2[j];
            h2_bar[j] += qb * net.w3[i * h + j];
        }
    }
    // h2 = tanh(W2 h1 + b2).
    let mut h1_bar = vec![0.0; h];
    for i in 0..h {
        let pre = h2_bar[i] * (1.0 - cache.h2[i] * cache.h2[i]);
        if pre == 0.0 {
            continue;
        }
        grads.b2[i] += pre;
        for j in 0..h {
            grads.w2[i * h + j] += pre * cache.h1[j];
            h1_bar[j] += pre * net.w2[i * h + j];
        }
    }
    // h1 = tanh(W1 v + b1).
    let mut v_bar: Vec<f64> = masked.clone();
    for i in 0..h {
        let pre = h1_bar[i] * (1.0 - cache.h1[i] * cache.h1[i]);
        if pre == 0.0 {
            continue;
        }
        grads.b1[i] += pre;
        for j in 0..n {
            grads.w1[i * n + j] += pre * cache.v[j];
            v_bar[j] += pre * net.w1[i * n + j];
        }
    }
    v_bar
}

/// Positive layer scalars in value space, used directly by the pure
/// layer math and diagnostic runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams {
    pub rho: f64,
    pub tau: f64,
    pub alpha: f64,
}

/// One trainable layer; positivity of (rho, tau, alpha) is enforced by
/// construction through softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityLayer {
    pub s_rho: f64,
    pub s_tau: f64,
    pub s_alpha: f64,
}

impl ValidityLayer {
    /// Initialization tau=10, alpha=1, rho=1e-3.
    pub fn init_default() -> ValidityLayer {
        ValidityLayer {
            s_rho: inv_softplus(1e-3).expect("positive"),
            s_tau: inv_softplus(10.0).expect("positive"),
            s_alpha: inv_softplus(1.0).expect("positive"),
        }
    }

    pub fn params(&self) -> LayerParams {
        LayerParams {
            rho: softplus(self.s_rho),
            tau: softplus(self.s_tau),
            alpha: softplus(self.s_alpha),
        }
    }
}

/// Multiplier for the constraint term: gamma = lambda + rho (a'x - b)
/// when the constraint is active, 0 otherwise.
pub fn layer_gamma(
    p: &LayerParams,
    x_k: &[f64],
    lambda_k: f64,
    constraint: Option<(&ConstraintSpec, f64)>,
) -> f64 {
    match constraint {
        Some((cs, b)) => {
            let ax: f64 = cs.a.iter().zip(x_k).map(|(ai, xi)| ai * xi).sum();
            lambda_k + p.rho * (ax - b)
        }
        None => 0.0,
    }
}

/// The layer's quadratic surrogate
/// h(x) = tau/2 ||x-c||^2 + gamma a'(x - x_k) + alpha/2 ||x - x_k||^2;
/// `layer_forward` returns its exact minimizer.
pub fn layer_objective(
    p: &LayerParams,
    c: &[f64],
    x_k: &[f64],
    gamma: f64,
    a: &[f64],
    x: &[f64],
) -> f64 {
    let fit: f64 = x.iter().zip(c).map(|(xi, ci)| (xi - ci) * (xi - ci)).sum();
    let prox: f64 = x.iter().zip(x_k).map(|(xi, ki)| (xi - ki) * (xi - ki)).sum();
    let lin: f64 = a.iter().zip(x.iter().zip(x_k)).map(|(ai, (xi, ki))| ai * (xi - ki)).sum();
    0.5 * p.tau * fit + gamma * lin + 0.5 * p.alpha * prox
}

/// Closed-form layer update. With the constraint active (b supplied),
///   gamma   = lambda + rho (a'x_k - b),
///   x_{k+1} = (tau c + alpha x_k - gamma a) / (tau + alpha),
///   lambda' = lambda + rho (a'x_{k+1} - b);
/// without it, gamma = 0 and lambda is passed through.
pub fn layer_forward(
    p: &LayerParams,
    c: &[f64],
    x_k: &[f64],
    lambda_k: f64,
    constraint: Option<(&ConstraintSpec, f64)>,
) -> Result<(Vec<f64>, f64)> {
    let d = p.tau + p.alpha;
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::numeric("layer denominator tau + alpha is not positive"));
    }
    let gamma = layer_gamma(p, x_k, lambda_k, constraint);
    let x_next: Vec<f64> = match constraint {
        Some((cs, _)) => c
            .iter()
            .zip(x_k.iter().zip(&cs.a))
            .map(|(ci, (xi, ai))| (p.tau * ci + p.alpha * xi - gamma * ai) / d)
            .collect(),
        None => c
            .iter()
            .zip(x_k)
            .map(|(ci, xi)| (p.tau * ci + p.alpha * xi) / d)
            .collect(),
    };
    let lambda_next = match constraint {
        Some((cs, b)) => {
            let ax: f64 = cs.a.iter().zip(&x_next).map(|(ai, xi)| ai * xi).sum();
            lambda_k + p.rho * (ax - b)
        }
        None => lambda_k,
    };
    Ok((x_next, lambda_next))
}

/// Per-layer record of the quantities the convergence theory tracks.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    /// x^0 .. x^K.
    pub xs: Vec<Vec<f64>>,
    /// lambda^0 .. lambda^K.
    pub lambdas: Vec<f64>,
    /// |a'x^k - b| for each k, when the constraint is active.
    pub constraint_residuals: Vec<f64>,
    /// (1/rho_k)(dlambda)^2 + alpha_k ||dx||^2 per layer transition.
    pub step_norms: Vec<f64>,
}

fn step_norm(p: &LayerParams, x0: &[f64], x1: &[f64], l0: f64, l1: f64) -> f64 {
    let dx: Vec<f64> = x1.iter().zip(x0).map(|(a, b)| a - b).collect();
    let dl = l1 - l0;
    dl * dl / p.rho + p.alpha * l2_norm(&dx).powi(2)
}

/// Runs `iters` identical layers with C = identity from x0, lambda = 0,
/// constraint active. This is the diagnostic iteration used to observe
/// the asymptotic behavior of the layer recursion.
pub fn run_tied_layers(
    p: &LayerParams,
    x0: &[f64],
    cs: &ConstraintSpec,
    b: f64,
    iters: usize,
) -> Result<LayerTrace> {
    if cs.a.len() != x0.len() {
        return Err(Error::validation("constraint length does not match state length"));
    }
    let mut trace = LayerTrace::default();
    let ax0: f64 = cs.a.iter().zip(x0).map(|(a, x)| a * x).sum();
    trace.xs.push(x0.to_vec());
    trace.lambdas.push(0.0);
    trace.constraint_residuals.push((ax0 - b).abs());
    for _ in 0..iters {
        let x = trace.xs.last().unwrap().clone();
        let l = *trace.lambdas.last().unwrap();
        let (x_next, l_next) = layer_forward(p, &x, &x, l, Some((cs, b)))?;
        let ax: f64 = cs.a.iter().zip(&x_next).map(|(a, v)| a * v).sum();
        trace.step_norms.push(step_norm(p, &x, &x_next, l, l_next));
        trace.constraint_residuals.push((ax - b).abs());
        trace.xs.push(x_next);
        trace.lambdas.push(l_next);
    }
    Ok(trace)
}

/// The full localization model.
#[derive(Debug, Clone)]
pub struct IVGDModel {
    pub diffusion: ResidualDiffusionModel,
    pub comp: CompensationNet,
    pub layers: Vec<ValidityLayer>,
    /// Per-layer correction nets when untied; the shared `comp` serves
    /// every layer otherwise.
    pub layer_nets: Option<Vec<CompensationNet>>,
    pub constraint: Option<ConstraintSpec>,
    pub threshold: f64,
}

impl IVGDModel {
    pub fn new(
        diffusion: ResidualDiffusionModel,
        n: usize,
        comp_hidden: usize,
        k_layers: usize,
        seed: u64,
    ) -> Result<IVGDModel> {
        if k_layers == 0 {
            return Err(Error::validation("the layer stack needs at least one layer"));
        }
        Ok(IVGDModel {
            diffusion,
            comp: CompensationNet::random(n, comp_hidden, seed),
            layers: vec![ValidityLayer::init_default(); k_layers],
            layer_nets: None,
            constraint: None,
            threshold: 0.5,
        })
    }

    pub fn untie_layers(&mut self, seed: u64) {
        let nets = (0..self.layers.len())
            .map(|k| CompensationNet::random(self.comp.n, self.comp.hidden, seed ^ (k as u64 + 1)))
            .collect();
        self.layer_nets = Some(nets);
    }

    pub fn n(&self) -> usize {
        self.comp.n
    }

    fn layer_net(&self, k: usize) -> &CompensationNet {
        match &self.layer_nets {
            Some(nets) => &nets[k],
            None => &self.comp,
        }
    }

    fn constraint_direction(&self) -> ConstraintSpec {
        self.constraint
            .clone()
            .unwrap_or_else(|| ConstraintSpec::uniform(self.n(), 0.0))
    }
}

pub(crate) struct HeadCache {
    comp0: CompCache,
    layer_comp: Vec<CompCache>,
    xs: Vec<Vec<f64>>,
    lambdas: Vec<f64>,
    params: Vec<LayerParams>,
    /// x^K before the final clamp.
    final_raw: Vec<f64>,
    pub scores: Vec<f64>,
    active_b: Option<f64>,
    a: Vec<f64>,
}

pub(crate) fn head_forward_cached(
    m: &IVGDModel,
    z: &[f64],
    known_source_count: Option<usize>,
) -> Result<HeadCache> {
    if z.len() != m.n() {
        return Err(Error::validation(format!(
            "state length {} does not match model width {}",
            z.len(),
            m.n()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("recovered state contains non-finite entries"));
    }
    let cs = m.constraint_direction();
    let active_b = known_source_count.map(|c| c as f64);
    let comp0 = comp_forward_cached(&m.comp, z)?;
    let mut xs = vec![comp0.out.clone()];
    let mut lambdas = vec![0.0];
    let mut layer_comp = Vec::with_capacity(m.layers.len());
    let mut params = Vec::with_capacity(m.layers.len());
    for (k, layer) in m.layers.iter().enumerate() {
        let p = layer.params();
        let x_k = xs.last().unwrap().clone();
        let l_k = *lambdas.last().unwrap();
        let ck = comp_forward_cached(m.layer_net(k), &x_k)?;
        let constraint = active_b.map(|b| (&cs, b));
        let (x_next, l_next) = layer_forward(&p, &ck.out, &x_k, l_k, constraint)?;
        layer_comp.push(ck);
        params.push(p);
        xs.push(x_next);
        lambdas.push(l_next);
    }
    let final_raw = xs.last().unwrap().clone();
    let scores: Vec<f64> = final_raw.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(HeadCache { comp0, layer_comp, xs, lambdas, params, final_raw, scores, active_b, a: cs.a })
}

fn trace_from_cache(cache: &HeadCache) -> LayerTrace {
    let residuals = match cache.active_b {
        Some(b) => cache
            .xs
            .iter()
            .map(|x| {
                let ax: f64 = cache.a.iter().zip(x).map(|(a, v)| a * v).sum();
                (ax - b).abs()
            })
            .collect(),
        None => Vec::new(),
    };
    let step_norms = (0..cache.params.len())
        .map(|k| {
            step_norm(
                &cache.params[k],
                &cache.xs[k],
                &cache.xs[k + 1],
                cache.lambdas[k],
                cache.lambdas[k + 1],
            )
        })
        .collect();
    LayerTrace {
        xs: cache.xs.clone(),
        lambdas: cache.lambdas.clone(),
        constraint_residuals: residuals,
        step_norms,
    }
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub trace: LayerTrace,
    /// Present when inference started from an observation and ran the
    /// fixed-point inverse.
    pub inversion: Option<InversionReport>,
}

/// Runs the head on an already-recovered seed estimate z. The budget
/// constraint is active exactly when a source count is supplied.
pub fn ivgd_head_infer(
    m: &IVGDModel,
    z: &[f64],
    known_source_count: Option<usize>,
) -> Result<InferenceResult> {
    let cache = head_forward_cached(m, z, known_source_count)?;
    let labels = cache.scores.iter().map(|s| u8::from(*s >= m.threshold)).collect();
    Ok(InferenceResult {
        scores: cache.scores.clone(),
        labels,
        trace: trace_from_cache(&cache),
        inversion: None,
    })
}

/// Full inference: invert the diffusion model on the observation, then
/// refine with the head.
pub fn ivgd_infer(
    m: &IVGDModel,
    g: &Graph,
    y_t: &[f64],
    known_source_count: Option<usize>,
    inv_cfg: &InversionConfig,
) -> Result<InferenceResult> {
    let report = invert_p(&m.diffusion, g, y_t, inv_cfg)?;
    let mut result = ivgd_head_infer(m, report.seed_estimate(), known_source_count)?;
    result.inversion = Some(report);
    Ok(result)
}

/// Gradients for everything trainable in the head; value-space scalar
/// gradients are converted to s-space when stored.
pub(crate) struct HeadGrads {
    comp: CompGrads,
    layer_nets: Option<Vec<CompGrads>>,
    /// Per layer (d rho, d tau, d alpha) in value space.
    scalars: Vec<[f64; 3]>,
}

impl HeadGrads {
    fn zeros(m: &IVGDModel) -> HeadGrads {
        HeadGrads {
            comp: CompGrads::zeros(&m.comp),
            layer_nets: m
                .layer_nets
                .as_ref()
                .map(|nets| nets.iter().map(CompGrads::zeros).collect()),
            scalars: vec![[0.0; 3]; m.layers.len()],
        }
    }
}

/// Mean squared error between final scores and the target, plus the
/// full reverse pass. Returns the per-sample loss.
pub(crate) fn head_backward_mse(
    m: &IVGDModel,
    cache: &HeadCache,
    target: &[f64],
    weight: f64,
    grads: &mut HeadGrads,
) -> Result<f64> {
    let n = m.n();
    if target.len() != n {
        return Err(Error::validation("target length does not match model width"));
    }
    let mut loss = 0.0;
    let mut x_bar = vec![0.0; n];
    for i in 0..n {
        let d = cache.scores[i] - target[i];
        loss += d * d / n as f64;
        x_bar[i] = weight * 2.0 * d / n as f64 * clamp_mask(cache.final_raw[i]);
    }
    let mut lambda_bar = 0.0;
    let a = &cache.a;
    for k in (0..m.layers.len()).rev() {
        let p = &cache.params[k];
        let d = p.tau + p.alpha;
        let x_k = &cache.xs[k];
        let x_next = &cache.xs[k + 1];
        let c = &cache.layer_comp[k].out;
        // lambda_{k+1} = lambda_k + rho (a'x_{k+1} - b).
        if let Some(b) = cache.active_b {
            if lambda_bar != 0.0 {
                let ax: f64 = a.iter().zip(x_next).map(|(ai, xi)| ai * xi).sum();
                grads.scalars[k][0] += lambda_bar * (ax - b);
                for i in 0..n {
                    x_bar[i] += lambda_bar * p.rho * a[i];
                }
            }
        }
        // x_{k+1} = (tau c + alpha x_k - gamma a) / (tau + alpha).
        let mut c_bar = vec![0.0; n];
        let mut x_prev_bar = vec![0.0; n];
        let mut gamma_bar = 0.0;
        for i in 0..n {
            let xb = x_bar[i];
            if xb == 0.0 {
                continue;
            }
            grads.scalars[k][1] += xb * (c[i] - x_next[i]) / d;
            grads.scalars[k][2] += xb * (x_k[i] - x_next[i]) / d;
            c_bar[i] = xb * p.tau / d;
            x_prev_bar[i] = xb * p.alpha / d;
            gamma_bar -= xb * a[i] / d;
        }
        // gamma = lambda_k + rho (a'x_k - b) when active.
        if let Some(b) = cache.active_b {
            if gamma_bar != 0.0 {
                let ax: f64 = a.iter().zip(x_k).map(|(ai, xi)| ai * xi).sum();
                lambda_bar += gamma_bar;
                grads.scalars[k][0] += gamma_bar * (ax - b);
                for i in 0..n {
                    x_prev_bar[i] += gamma_bar * p.rho * a[i];
                }
            }
        }
        // c = compensate(net_k, x_k).
        let net_grads = match (&mut grads.layer_nets, m.layer_nets.as_ref()) {
            (Some(gs), Some(_)) => &mut gs[k],
            _ => &mut grads.comp,
        };
        let through_c = comp_backward(m.layer_net(k), &cache.layer_comp[k], &c_bar, net_grads);
        for i in 0..n {
            x_prev_bar[i] += through_c[i];
        }
        x_bar = x_prev_bar;
    }
    // x^0 = compensate(comp, z); z is fixed input, its gradient is dropped.
    comp_backward(&m.comp, &cache.comp0, &x_bar, &mut grads.comp);
    Ok(loss)
}

const SCALAR_NAMES: [&str; 3] = ["s_rho", "s_tau", "s_alpha"];

fn comp_param_specs(prefix: &str, net: &CompensationNet) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.w1"), vec![net.hidden, net.n]),
        (format!("{prefix}.b1"), vec![net.hidden]),
        (format!("{prefix}.w2"), vec![net.hidden, net.hidden]),
        (format!("{prefix}.b2"), vec![net.hidden]),
        (format!("{prefix}.w3"), vec![net.n, net.hidden]),
        (format!("{prefix}.b3"), vec![net.n]),
    ]
}

fn comp_values(net: &CompensationNet) -> Vec<Vec<f64>> {
    vec![
        net.w1.clone(),
        net.b1.clone(),
        net.w2.clone(),
        net.b2.clone(),
        net.w3.clone(),
        net.b3.clone(),
    ]
}

fn register_comp(prefix: &str, net: &CompensationNet, ps: &mut ParamSet) -> Result<()> {
    for ((name, shape), values) in comp_param_specs(prefix, net).into_iter().zip(comp_values(net))
    {
        ps.register(&name, &shape, values)?;
    }
    Ok(())
}

fn load_comp(prefix: &str, net: &mut CompensationNet, ps: &ParamSet) -> Result<()> {
    let fields: [&mut Vec<f64>; 6] = [
        &mut net.w1,
        &mut net.b1,
        &mut net.w2,
        &mut net.b2,
        &mut net.w3,
        &mut net.b3,
    ];
    for (field, suffix) in fields.into_iter().zip(["w1", "b1", "w2", "b2", "w3", "b3"]) {
        let name = format!("{prefix}.{suffix}");
        let idx = ps
            .lookup(&name)
            .ok_or_else(|| Error::validation(format!("missing parameter {}", name)))?;
        field.copy_from_slice(ps.values(idx));
    }
    Ok(())
}

fn store_comp_grads(prefix: &str, grads: &CompGrads, ps: &mut ParamSet) -> Result<()> {
    let fields: [&Vec<f64>; 6] =
        [&grads.w1, &grads.b1, &grads.w2, &grads.b2, &grads.w3, &grads.b3];
    for (field, suffix) in fields.into_iter().zip(["w1", "b1", "w2", "b2", "w3", "b3"]) {
        let name = format!("{prefix}.{suffix}");
        let idx = ps
            .lookup(&name)
            .ok_or_else(|| Error::validation(format!("missing parameter {}", name)))?;
        ps.add_grad(idx, field);
    }
    Ok(())
}

/// Registers the trainable head parameters. The diffusion model is
/// never part of the registry: it stays frozen during head training.
pub fn register_head_params(
    m: &IVGDModel,
    train_compensation: bool,
    ps: &mut ParamSet,
) -> Result<()> {
    if train_compensation {
        register_comp("comp", &m.comp, ps)?;
        if let Some(nets) = &m.layer_nets {
            for (k, net) in nets.iter().enumerate() {
                register_comp(&format!("layer{k}.comp"), net, ps)?;
            }
        }
    }
    for (k, layer) in m.layers.iter().enumerate() {
        for (name, value) in SCALAR_NAMES
            .iter()
            .zip([layer.s_rho, layer.s_tau, layer.s_alpha])
        {
            ps.register(&format!("layer{k}.{name}"), &[1], vec![value])?;
        }
    }
    Ok(())
}

pub fn load_head_params(m: &mut IVGDModel, ps: &ParamSet) -> Result<()> {
    if ps.lookup("comp.w1").is_some() {
        load_comp("comp", &mut m.comp, ps)?;
        if let Some(nets) = &mut m.layer_nets {
            for (k, net) in nets.iter_mut().enumerate() {
                load_comp(&format!("layer{k}.comp"), net, ps)?;
            }
        }
    }
    for (k, layer) in m.layers.iter_mut().enumerate() {
        for (name, slot) in SCALAR_NAMES.iter().zip([
            &mut layer.s_rho,
            &mut layer.s_tau,
            &mut layer.s_alpha,
        ]) {
            let full = format!("layer{k}.{name}");
            if let Some(idx) = ps.lookup(&full) {
                *slot = ps.values(idx)[0];
            }
        }
    }
    Ok(())
}

/// Stores head gradients, converting value-space scalar gradients to
/// the free parameterization: d/ds softplus(s) = sigmoid(s).
pub(crate) fn store_head_grads(m: &IVGDModel, grads: &HeadGrads, ps: &mut ParamSet) -> Result<()> {
    if ps.lookup("comp.w1").is_some() {
        store_comp_grads("comp", &grads.comp, ps)?;
        if let Some(net_grads) = &grads.layer_nets {
            for (k, gr) in net_grads.iter().enumerate() {
                store_comp_grads(&format!("layer{k}.comp"), gr, ps)?;
            }
        }
    }
    for (k, layer) in m.layers.iter().enumerate() {
        let chained = [
            grads.scalars[k][0] * sigmoid(layer.s_rho),
            grads.scalars[k][1] * sigmoid(layer.s_tau),
            grads.scalars[k][2] * sigmoid(layer.s_alpha),
        ];
        for (name, g) in SCALAR_NAMES.iter().zip(chained) {
            let full = format!("layer{k}.{name}");
            if let Some(idx) = ps.lookup(&full) {
                ps.add_grad(idx, &[g]);
            }
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one sample through the head,
/// accumulated into an already-registered parameter set. Used by
/// training and by external gradient checks.
pub fn head_loss_and_grads(
    m: &IVGDModel,
    z: &[f64],
    target: &[f64],
    known_source_count: Option<usize>,
    ps: &mut ParamSet,
) -> Result<f64> {
    let cache = head_forward_cached(m, z, known_source_count)?;
    let mut grads = HeadGrads::zeros(m);
    let loss = head_backward_mse(m, &cache, target, 1.0, &mut grads)?;
    store_head_grads(m, &grads, ps)?;
    Ok(loss)
}

/// How the head obtains its seed estimate during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SeedRecovery {
    /// Fixed-point inversion of the frozen diffusion model.
    Inversion(InversionConfig),
    /// Use the raw observation directly (inversion ablation).
    Observation,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimKind,
    pub batch_size: usize,
    /// Enforce a'x = |S| per sample while training.
    pub constraint_in_training: bool,
    pub recovery: SeedRecovery,
    /// False freezes the compensation weights (compensation ablation).
    pub train_compensation: bool,
    /// Per-run binary observations or per-group frequency vectors.
    pub observation: ObservationKind,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            epochs: 100,
            lr: 1e-3,
            optimizer: OptimKind::Sgd,
            batch_size: 1,
            constraint_in_training: true,
            recovery: SeedRecovery::Inversion(InversionConfig::default()),
            train_compensation: true,
            observation: ObservationKind::Binary,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadTrainReport {
    /// Mean per-sample loss for each epoch.
    pub loss_history: Vec<f64>,
}

/// Trains compensation and layer scalars against true source vectors.
/// The diffusion model is frozen; each sample's seed estimate is
/// recovered once and cached.
pub fn ivgd_train(
    m: &mut IVGDModel,
    g: &Graph,
    ds: &CascadeDataset,
    cfg: &HeadTrainConfig,
) -> Result<HeadTrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let train = ds.observation_units(&ds.train_groups, cfg.observation);
    if train.is_empty() {
        return Err(Error::Training { epoch: 0, msg: "no training samples".into() });
    }
    let n = m.n();
    let mut cached: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::with_capacity(train.len());
    for u in &train {
        let z = match cfg.recovery {
            SeedRecovery::Inversion(inv_cfg) => {
                invert_p(&m.diffusion, g, &u.y, &inv_cfg)?.feature_run.value
            }
            SeedRecovery::Observation => u.y.clone(),
        };
        let x = dense_f64_from_indices(u.x, n);
        cached.push((z, x, u.x.len()));
    }
    let mut ps = ParamSet::new();
    register_head_params(m, cfg.train_compensation, &mut ps)?;
    let mut opt = match cfg.optimizer {
        OptimKind::Sgd => OptimizerState::sgd(cfg.lr),
        OptimKind::Adam => OptimizerState::adam(cfg.lr),
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for batch in cached.chunks(cfg.batch_size) {
            let mut grads = HeadGrads::zeros(m);
            let weight = 1.0 / batch.len() as f64;
            for (z, x_true, count) in batch {
                let b = cfg.constraint_in_training.then_some(*count);
                let cache = head_forward_cached(m, z, b)?;
                let loss = head_backward_mse(m, &cache, x_true, weight, &mut grads)?;
                if !loss.is_finite() {
                    return Err(Error::Training { epoch, msg: "loss is not finite".into() });
                }
                epoch_loss += loss;
            }
            if !ps.is_empty() {
                ps.zero_grads();
                store_head_grads(m, &grads, &mut ps)?;
                opt.step(&mut ps);
                load_head_params(m, &ps)?;
            }
        }
        history.push(epoch_loss / cached.len() as f64);
    }
    Ok(HeadTrainReport { loss_history: history })
}

/// Per-layer check of the convergence preconditions: positivity of
/// the scalars and a strict margin alpha - rho * r(a a') > 0.
#[derive(Debug, Clone)]
pub struct LayerConditionReport {
    pub alpha: f64,
    pub rho: f64,
    pub margin: f64,
    pub positive: bool,
    pub margin_ok: bool,
}

/// Pure evaluator over explicit layer scalars.
pub fn layer_conditions(params: &[LayerParams], cs: &ConstraintSpec) -> Vec<LayerConditionReport> {
    let r = spectral_radius_ata(cs);
    params
        .iter()
        .map(|p| {
            let margin = p.alpha - p.rho * r;
            LayerConditionReport {
                alpha: p.alpha,
                rho: p.rho,
                margin,
                positive: p.alpha > 0.0 && p.rho > 0.0 && p.tau > 0.0,
                margin_ok: margin > 0.0,
            }
        })
        .collect()
}

pub fn check_convergence_conditions(
    m: &IVGDModel,
    cs: &ConstraintSpec,
) -> Vec<LayerConditionReport> {
    let params: Vec<LayerParams> = m.layers.iter().map(|l| l.params()).collect();
    layer_conditions(&params, cs)
}

#[derive(Debug, Clone)]
pub struct TraceDiagnostics {
    pub step_norms: Vec<f64>,
    pub constraint_residuals: Vec<f64>,
    /// True when both sequences are non-increasing over their last
    /// half (up to 1e-12 slack).
    pub monotone_tail: bool,
}

fn tail_non_increasing(seq: &[f64]) -> bool {
    let tail = &seq[seq.len() / 2..];
    tail.windows(2).all(|w| w[1] <= w[0] + 1e-12)
}

pub fn diagnostics_from_trace(trace: &LayerTrace) -> TraceDiagnostics {
    TraceDiagnostics {
        step_norms: trace.step_norms.clone(),
        constraint_residuals: trace.constraint_residuals.clone(),
        monotone_tail: tail_non_increasing(&trace.step_norms)
            && tail_non_increasing(&trace.constraint_residuals),
    }
}
