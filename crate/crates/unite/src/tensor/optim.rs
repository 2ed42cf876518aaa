//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use super::ParamSet;
use crate::error::{Result, UniteError};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Global L2-norm over all parameter gradients.
pub fn global_grad_norm(ps: &ParamSet) -> f32 {
    let mut acc = 0.0f64;
    for p in ps.iter() {
        for &g in &p.grad {
            acc += (g as f64) * (g as f64);
        }
    }
    acc.sqrt() as f32
}

/// Scale all gradients so the global norm does not exceed `max_norm`.
/// Returns the scale that was applied (1.0 when under the threshold).
pub fn grad_clip(ps: &mut ParamSet, max_norm: f32) -> f32 {
    assert!(max_norm > 0.0);
    let norm = global_grad_norm(ps);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for p in ps.iter_mut() {
        p.grad.iter_mut().for_each(|g| *g *= scale);
    }
    scale
}

/// One AdamW step with bias correction. `step` is 1-based. Gradients are
/// zeroed afterwards. Refuses the step if any gradient is non-finite.
pub fn adamw_step(ps: &mut ParamSet, lr: f32, cfg: &AdamWConfig, step: u64) -> Result<()> {
    assert!(step >= 1, "adamw step counter is 1-based");
    assert!((0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2));

    for p in ps.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(UniteError::Numeric(format!(
                "non-finite gradient in parameter `{}` (tag {})",
                p.name,
                p.tag.as_str()
            )));
        }
    }

    let bc1 = 1.0 - (cfg.beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(step as i32);

    for p in ps.iter_mut() {
        for i in 0..p.grad.len() {
            let g = p.grad[i];
            p.opt_m[i] = cfg.beta1 * p.opt_m[i] + (1.0 - cfg.beta1) * g;
            p.opt_v[i] = cfg.beta2 * p.opt_v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = p.opt_m[i] as f64 / bc1;
            let vhat = p.opt_v[i] as f64 / bc2;
            let upd = mhat / (vhat.sqrt() + cfg.eps as f64);
            let w = p.value.data[i] as f64;
            p.value.data[i] =
                (w - lr as f64 * (upd + cfg.weight_decay as f64 * w)) as f32;
            p.grad[i] = 0.0;
        }
    }
    Ok(())
}
