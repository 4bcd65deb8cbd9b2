//! Flat parameter registry, first-order optimizers, and a
//! finite-difference gradient checker.
//!
//! Gradients in this crate are hand-derived per model (the computation
//! graphs are fixed), so the engine only needs named value/grad buffers
//! it can update and verify. Registration order is the canonical
//! parameter order everywhere: optimizer state, flattening, checking.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { names: Vec::new(), shapes: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    /// Registers one named array; returns its handle. Names must be
    /// unique and the initial data must match the shape volume.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Vec<f64>) -> Result<usize> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::validation(format!("parameter {:?} registered twice", name)));
        }
        let volume: usize = shape.iter().product();
        if init.len() != volume {
            return Err(Error::validation(format!(
                "parameter {:?}: {} values for shape {:?}",
                name,
                init.len(),
                shape
            )));
        }
        let len = init.len();
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.values.push(init);
        self.grads.push(vec![0.0; len]);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i]
    }

    pub fn grads(&self, i: usize) -> &[f64] {
        &self.grads[i]
    }

    pub fn grads_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.grads[i]
    }

    pub fn add_grad(&mut self, i: usize, delta: &[f64]) {
        let g = &mut self.grads[i];
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn total_params(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// All values concatenated in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_params() {
            return Err(Error::validation(format!(
                "flat vector has {} values, registry holds {}",
                flat.len(),
                self.total_params()
            )));
        }
        let mut offset = 0;
        for v in &mut self.values {
            let len = v.len();
            v.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// SGD or Adam with the usual bias-corrected moments
/// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> OptimizerState {
        OptimizerState {
            kind: OptimKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> OptimizerState {
        OptimizerState { kind: OptimKind::Adam, ..OptimizerState::sgd(lr) }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// w -= lr * grad, then zeroes the gradients.
    pub fn sgd_step(&mut self, p: &mut ParamSet) {
        for i in 0..p.len() {
            let lr = self.lr;
            let grads: Vec<f64> = p.grads(i).to_vec();
            let vals = p.values_mut(i);
            for (w, g) in vals.iter_mut().zip(&grads) {
                *w -= lr * g;
            }
        }
        self.step += 1;
        p.zero_grads();
    }

    /// Bias-corrected Adam update, then zeroes the gradients.
    pub fn adam_step(&mut self, p: &mut ParamSet) {
        if self.m.len() != p.len() {
            self.m = (0..p.len()).map(|i| vec![0.0; p.values(i).len()]).collect();
            self.v = (0..p.len()).map(|i| vec![0.0; p.values(i).len()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..p.len() {
            let grads: Vec<f64> = p.grads(i).to_vec();
            for (j, g) in grads.iter().enumerate() {
                let m = &mut self.m[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.v[i][j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                p.values_mut(i)[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        p.zero_grads();
    }

    pub fn step(&mut self, p: &mut ParamSet) {
        match self.kind {
            OptimKind::Sgd => self.sgd_step(p),
            OptimKind::Adam => self.adam_step(p),
        }
    }

    #[cfg(test)]
    fn moment(&self, i: usize, j: usize) -> (f64, f64) {
        (self.m[i][j], self.v[i][j])
    }
}

/// Compares the analytic gradients already stored in `p` against
/// central finite differences of `loss` and returns the worst relative
/// error |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
///
/// `loss` must be a pure function of the parameter values; it is
/// re-evaluated at +/- eps per coordinate and the values are restored.
pub fn finite_diff_check(
    loss: &mut dyn FnMut(&ParamSet) -> Result<f64>,
    p: &mut ParamSet,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::validation("finite-difference step must be positive"));
    }
    let analytic: Vec<Vec<f64>> = (0..p.len()).map(|i| p.grads(i).to_vec()).collect();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        for j in 0..p.values(i).len() {
            let orig = p.values(i)[j];
            p.values_mut(i)[j] = orig + eps;
            let up = loss(p)?;
            p.values_mut(i)[j] = orig - eps;
            let down = loss(p)?;
            p.values_mut(i)[j] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::numeric("loss returned a non-finite value"));
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.register("w", &[1], vec![w]).unwrap();
        p
    }

    #[test]
    fn sgd_moves_against_the_gradient() {
        let mut p = single(1.0);
        p.grads_mut(0)[0] = 2.0;
        let mut opt = OptimizerState::sgd(0.1);
        opt.sgd_step(&mut p);
        assert_eq!(p.values(0)[0], 0.8);
        assert_eq!(p.grads(0)[0], 0.0, "gradients are zeroed after the step");
    }

    #[test]
    fn sgd_zero_gradient_is_a_no_op() {
        let mut p = single(0.3);
        let mut opt = OptimizerState::sgd(0.5);
        opt.sgd_step(&mut p);
        assert_eq!(p.values(0)[0], 0.3);
    }

    #[test]
    fn two_sgd_steps_compound() {
        let mut p = single(1.0);
        let mut opt = OptimizerState::sgd(0.1);
        p.grads_mut(0)[0] = 2.0;
        opt.sgd_step(&mut p);
        p.grads_mut(0)[0] = 2.0 * p.values(0)[0];
        opt.sgd_step(&mut p);
        assert!((p.values(0)[0] - 0.64).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_has_magnitude_near_lr() {
        for &g in &[1.0f64, -3.0, 0.004] {
            let mut p = single(0.0);
            p.grads_mut(0)[0] = g;
            let mut opt = OptimizerState::adam(0.1);
            opt.adam_step(&mut p);
            let expected = 0.1 * g / (g.abs() + 1e-8);
            assert!(
                (p.values(0)[0] + expected).abs() < 1e-12,
                "g={} moved {}",
                g,
                p.values(0)[0]
            );
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let mut p = single(0.7);
        let mut opt = OptimizerState::adam(0.1);
        opt.adam_step(&mut p);
        assert_eq!(p.values(0)[0], 0.7);
    }

    #[test]
    fn adam_moments_after_unit_gradient() {
        let mut p = single(0.0);
        p.grads_mut(0)[0] = 1.0;
        let mut opt = OptimizerState::adam(0.1);
        opt.adam_step(&mut p);
        let (m, v) = opt.moment(0, 0);
        assert!((m - 0.1).abs() < 1e-15);
        assert!((v - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_changes_nothing_bitwise() {
        let mut p = ParamSet::new();
        p.register("w", &[3], vec![0.1, -0.2, 0.3]).unwrap();
        let before = p.flat_values();
        let mut opt = OptimizerState::adam(0.0);
        p.grads_mut(0).copy_from_slice(&[1.0, 2.0, 3.0]);
        opt.adam_step(&mut p);
        assert_eq!(p.flat_values(), before);
    }

    #[test]
    fn optimizer_runs_are_deterministic() {
        let run = || {
            let mut p = ParamSet::new();
            p.register("w", &[2], vec![0.5, -0.5]).unwrap();
            let mut opt = OptimizerState::adam(0.05);
            for k in 0..25 {
                let w = p.values(0).to_vec();
                let g = p.grads_mut(0);
                g[0] = 2.0 * w[0] + k as f64 * 0.01;
                g[1] = w[1].sin();
                opt.adam_step(&mut p);
            }
            p.flat_values()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn finite_diff_agrees_on_a_quadratic() {
        let mut p = ParamSet::new();
        p.register("w", &[2], vec![0.4, -1.2]).unwrap();
        let w = p.values(0).to_vec();
        p.grads_mut(0).copy_from_slice(&[2.0 * w[0], 2.0 * w[1]]);
        let mut loss = |p: &ParamSet| -> Result<f64> {
            Ok(p.values(0).iter().map(|x| x * x).sum())
        };
        let err = finite_diff_check(&mut loss, &mut p, 1e-5).unwrap();
        assert!(err < 1e-8, "relative error {}", err);
    }

    #[test]
    fn finite_diff_of_constant_loss_is_zero_error() {
        let mut p = single(0.9);
        let mut loss = |_: &ParamSet| -> Result<f64> { Ok(5.0) };
        let err = finite_diff_check(&mut loss, &mut p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_catches_a_wrong_gradient() {
        let mut p = single(0.5);
        p.grads_mut(0)[0] = 3.0;
        let mut loss = |p: &ParamSet| -> Result<f64> { Ok(p.values(0)[0].powi(2)) };
        let err = finite_diff_check(&mut loss, &mut p, 1e-5).unwrap();
        assert!(err > 0.3, "should flag the wrong gradient, got {}", err);
    }

    #[test]
    fn flat_round_trip_preserves_registration_order() {
        let mut p = ParamSet::new();
        p.register("a", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        p.register("b", &[1], vec![9.0]).unwrap();
        let flat = p.flat_values();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 9.0]);
        let mut q = ParamSet::new();
        q.register("a", &[2, 2], vec![0.0; 4]).unwrap();
        q.register("b", &[1], vec![0.0]).unwrap();
        q.set_flat_values(&flat).unwrap();
        assert_eq!(q.values(0), p.values(0));
        assert_eq!(q.values(1), p.values(1));
        assert!(q.set_flat_values(&[1.0]).is_err());
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut p = ParamSet::new();
        p.register("w", &[1], vec![0.0]).unwrap();
        assert!(p.register("w", &[1], vec![0.0]).is_err());
        assert!(p.register("bad", &[2], vec![0.0]).is_err());
    }
}
