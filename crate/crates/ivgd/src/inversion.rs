//! Fixed-point inversion of the residual diffusion blocks.
//!
//! Each residual block B(v) = (op(v) + v) / 2 is inverted by iterating
//! v <- 2t - op(v) from v = t, which contracts whenever op does. The
//! full inverse runs the label-propagation loop first (recovering the
//! intermediate state from the observation) and then the feature loop
//! (recovering the seed vector), mirroring the forward composition in
//! reverse order.
//!
//! Inversion is only offered for models whose certified Lipschitz
//! estimates are below 1 for both halves.

use crate::diffusion::{f_forward, g_forward, ResidualDiffusionModel};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::spectral::{l2_norm, max_norm};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionConfig {
    /// Fixed-point iterations per block.
    pub max_iters: usize,
    /// Early-stop threshold on the max-norm successive gap.
    pub tol: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig { max_iters: 20, tol: 1e-6 }
    }
}

/// Trace of one fixed-point loop.
#[derive(Debug, Clone)]
pub struct FixedPointRun {
    pub value: Vec<f64>,
    /// Iterations actually performed.
    pub iters: usize,
    /// Successive max-norm gaps, one per iteration.
    pub gaps_inf: Vec<f64>,
    /// Successive Euclidean gaps, one per iteration.
    pub gaps_l2: Vec<f64>,
    /// Final fixed-point residual ||v - (2t - op(v))|| in max norm.
    pub residual_inf: f64,
    /// True when the gap dropped below tolerance before the budget.
    pub stopped_early: bool,
}

/// Inverts one residual block: finds v with (op(v) + v) / 2 = target.
/// Three consecutive gap increases are treated as divergence.
pub fn invert_residual_block(
    op: &dyn Fn(&[f64]) -> Vec<f64>,
    target: &[f64],
    cfg: &InversionConfig,
) -> Result<FixedPointRun> {
    if cfg.tol <= 0.0 {
        return Err(Error::validation("inversion tolerance must be positive"));
    }
    let mut v = target.to_vec();
    let mut gaps_inf = Vec::new();
    let mut gaps_l2 = Vec::new();
    let mut stopped_early = false;
    let mut rising = 0usize;
    let mut iters = 0usize;
    for _ in 0..cfg.max_iters {
        let opv = op(&v);
        if opv.len() != v.len() {
            return Err(Error::numeric("operator changed dimension during inversion"));
        }
        let next: Vec<f64> = target.iter().zip(&opv).map(|(t, o)| 2.0 * t - o).collect();
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("fixed-point iterate is not finite"));
        }
        let diff: Vec<f64> = next.iter().zip(&v).map(|(a, b)| a - b).collect();
        let gap = max_norm(&diff);
        if gaps_inf.last().is_some_and(|&prev| gap > prev) {
            rising += 1;
            if rising >= 3 {
                return Err(Error::numeric(format!(
                    "fixed-point iteration diverging: gap grew for 3 straight steps (last {:.3e})",
                    gap
                )));
            }
        } else {
            rising = 0;
        }
        gaps_inf.push(gap);
        gaps_l2.push(l2_norm(&diff));
        v = next;
        iters += 1;
        if gap <= cfg.tol {
            stopped_early = true;
            break;
        }
    }
    let opv = op(&v);
    let residual_inf = max_norm(
        &v.iter()
            .zip(target.iter().zip(&opv))
            .map(|(vi, (t, o))| vi - (2.0 * t - o))
            .collect::<Vec<_>>(),
    );
    Ok(FixedPointRun { value: v, iters, gaps_inf, gaps_l2, residual_inf, stopped_early })
}

fn require_invertible(model: &ResidualDiffusionModel) -> Result<()> {
    for (name, cert) in [("f_forward", &model.cert_f), ("g_forward", &model.cert_g)] {
        match cert {
            None => {
                return Err(Error::Invertibility(format!(
                    "{} has no Lipschitz certificate; certify the model before inverting",
                    name
                )))
            }
            Some(c) if c.estimate >= 1.0 => {
                return Err(Error::Invertibility(format!(
                    "{} certificate estimate {:.6} is not below 1",
                    name, c.estimate
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Recovers the intermediate state from an observation: solves
/// G(zeta) = y_t.
pub fn invert_label_propagation(
    model: &ResidualDiffusionModel,
    g: &Graph,
    y_t: &[f64],
    cfg: &InversionConfig,
) -> Result<FixedPointRun> {
    require_invertible(model)?;
    let ic = model.ic.clone();
    invert_residual_block(&|z| g_forward(&ic, g, z).expect("dimension fixed"), y_t, cfg)
}

/// Recovers the seed vector from an intermediate state: solves
/// F_W(x) = zeta_m.
pub fn invert_feature_construction(
    model: &ResidualDiffusionModel,
    g: &Graph,
    zeta_m: &[f64],
    cfg: &InversionConfig,
) -> Result<FixedPointRun> {
    require_invertible(model)?;
    let net = model.f.clone();
    invert_residual_block(&|x| f_forward(&net, g, x).expect("dimension fixed"), zeta_m, cfg)
}

#[derive(Debug, Clone)]
pub struct InversionReport {
    pub label_run: FixedPointRun,
    pub feature_run: FixedPointRun,
    /// True when both loops stopped early at tolerance.
    pub converged: bool,
}

impl InversionReport {
    pub fn seed_estimate(&self) -> &[f64] {
        &self.feature_run.value
    }
}

/// Full inverse of P: label-propagation loop on the observation, then
/// feature loop on its result.
pub fn invert_p(
    model: &ResidualDiffusionModel,
    g: &Graph,
    y_t: &[f64],
    cfg: &InversionConfig,
) -> Result<InversionReport> {
    if y_t.len() != g.n() {
        return Err(Error::validation(format!(
            "observation length {} does not match node count {}",
            y_t.len(),
            g.n()
        )));
    }
    let label_run = invert_label_propagation(model, g, y_t, cfg)?;
    let feature_run = invert_feature_construction(model, g, &label_run.value, cfg)?;
    let converged = label_run.stopped_early && feature_run.stopped_early;
    Ok(InversionReport { label_run, feature_run, converged })
}
