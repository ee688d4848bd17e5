use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One decoupled-weight-decay Adam update of a single buffer at step `t` (1-based).
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(AutodiffError::ShapeMismatch {
            op: "adamw",
            detail: format!("param {n}, grad {}, m {}, v {}", grad.len(), m.len(), v.len()),
        });
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for k in 0..n {
        param[k] -= cfg.lr * cfg.weight_decay * param[k];
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad[k];
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        param[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if param.iter().any(|x| !x.is_finite()) {
        return Err(AutodiffError::NonFinite { op: "adamw" });
    }
    Ok(())
}

/// Applies one AdamW step to every parameter using its accumulated gradient
/// (a missing gradient counts as zero). Gradients are left in place.
pub fn adamw_step(params: &mut ParamStore, state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adamw",
            detail: format!("{} params vs {} state buffers", params.len(), state.m.len()),
        });
    }
    state.step += 1;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let t = params.get_mut(id);
        let grad = t.grad.clone().unwrap_or_else(|| vec![0.0; t.data.len()]);
        let k = id.index();
        adamw_update(&mut t.data, &grad, &mut state.m[k], &mut state.v[k], state.step, cfg)?;
    }
    Ok(())
}
