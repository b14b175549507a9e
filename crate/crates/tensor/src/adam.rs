use crate::error::{Result, TensorError};
use crate::params::ParamSet;

/// Adam hyper-parameters. L2 is added to the gradient (`g + λw`), not decoupled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub l2_lambda: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            alpha: 0.0005,
            epsilon: 1e-8,
            l2_lambda: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..1.0;
        if !unit.contains(&self.beta1) || !unit.contains(&self.beta2) {
            return Err(TensorError::InvalidConfig(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        let non_negative = |v: f64| v >= 0.0 && v.is_finite();
        if !non_negative(self.alpha)
            || !non_negative(self.l2_lambda)
            || !(self.epsilon.is_finite() && self.epsilon > 0.0)
        {
            return Err(TensorError::InvalidConfig(format!(
                "alpha {} / epsilon {} / l2 {} out of range",
                self.alpha, self.epsilon, self.l2_lambda
            )));
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update. `grads` is aligned with `params` iteration order.
///
/// Leaves `params` and `state` untouched if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, t), g) in params.iter().zip(grads) {
        if g.len() != t.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "adam: gradient for `{name}` has {} values, parameter {}",
                g.len(),
                t.numel()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFiniteGradient(name.to_string()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, ((_, param), g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (j, w) in param.data_mut().iter_mut().enumerate() {
            let gj = g[j] + cfg.l2_lambda * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= cfg.alpha * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
