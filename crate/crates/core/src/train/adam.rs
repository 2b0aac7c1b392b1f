use crate::error::{Result, SvaeError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SvaeError::contract(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(SvaeError::contract(format!(
                "betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(SvaeError::contract(format!(
                "adam eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// First/second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update using each tensor's `grad` (absent grads
/// count as zero). Nothing is modified if any gradient is non-finite.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    for (i, p) in params.iter().enumerate() {
        if let Some(g) = &p.grad {
            if g.len() != p.numel() {
                return Err(SvaeError::dim(
                    "adam_step",
                    format!("gradient {i} numel"),
                    p.numel(),
                    g.len(),
                ));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(SvaeError::numeric(format!(
                    "gradient of parameter {i} has {} at element {j}",
                    g[j]
                )));
            }
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(SvaeError::dim(
            "adam_step",
            "parameter tensors",
            state.m.len(),
            params.len(),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.numel() {
            return Err(SvaeError::dim(
                "adam_step",
                format!("moment {i} numel"),
                state.m[i].len(),
                p.numel(),
            ));
        }
    }

    state.step += 1;
    let (b1, b2) = cfg.betas;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (data, grad) = p.data_and_grad_mut();
        let Some(grad) = grad else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..data.len() {
            let g = grad[k];
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            data[k] -= cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}
