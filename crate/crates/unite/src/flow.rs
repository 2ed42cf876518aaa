//! Rectified-flow corruption, the flow-matching loss, timestep shifting,
//! x-start/velocity conversion, classifier-free guidance, and fixed-step ODE
//! samplers.
//!
//! Time convention throughout: t = 1 is clean data, t = 0 is pure noise, and
//! the corruption rule is z_t = t·z0 + (1−t)·ε.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UniteError};
use crate::rng::RngStream;
use crate::tensor::tape::{BufId, Tape};
use crate::tensor::Tensor;

/// Velocity denominators (1−t) are clamped below at this value, so velocity
/// queries at the clean end of the interval stay finite.
pub const DELTA_SING: f32 = 1e-4;

/// Noise level in [0,1]; 1 is clean data, 0 is pure noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel(pub f32);

impl NoiseLevel {
    pub fn new(t: f32) -> Self {
        assert!((0.0..=1.0).contains(&t), "noise level {t} outside [0,1]");
        NoiseLevel(t)
    }
}

/// Corruption rule plus the timestep shift applied to sampled levels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlowSchedule {
    /// Shift strength. 1 is the identity; values below 1 bias sampled levels
    /// toward the noisy end. 0 is accepted as "shift disabled".
    pub shift_alpha: f32,
    /// Optional discretization of the sampled u to this many levels.
    pub t_levels: Option<u32>,
}

impl Default for FlowSchedule {
    fn default() -> Self {
        FlowSchedule { shift_alpha: 0.5, t_levels: None }
    }
}

impl FlowSchedule {
    /// Apply the configured shift (identity when alpha is 0 or 1).
    pub fn shift(&self, u: f32) -> f32 {
        if self.shift_alpha == 0.0 {
            u
        } else {
            shift_time(u, self.shift_alpha)
        }
    }

    /// Draw one training noise level: u ~ U[0,1], optionally discretized,
    /// then shifted.
    pub fn draw_t(&self, rng: &mut RngStream) -> f32 {
        let mut u = rng.uniform();
        if let Some(levels) = self.t_levels {
            let l = levels.max(2);
            let k = ((u * l as f32).floor() as u32).min(l - 1);
            u = k as f32 / (l - 1) as f32;
        }
        self.shift(u)
    }
}

/// Monotone time warp t = α·u / (1 + (α−1)·u). Fixes 0 and 1 for any α > 0.
pub fn shift_time(u: f32, alpha: f32) -> f32 {
    assert!(alpha > 0.0, "shift alpha must be positive");
    alpha * u / (1.0 + (alpha - 1.0) * u)
}

/// z_t = t·z0 + (1−t)·ε, elementwise.
pub fn corrupt(z0: &Tensor, eps: &Tensor, t: NoiseLevel) -> Result<Tensor> {
    if z0.shape != eps.shape {
        return Err(UniteError::ShapeMismatch {
            context: "corrupt",
            lhs: z0.shape.clone(),
            rhs: eps.shape.clone(),
        });
    }
    let t = t.0;
    let data = z0
        .data
        .iter()
        .zip(eps.data.iter())
        .map(|(&a, &e)| t * a + (1.0 - t) * e)
        .collect();
    Ok(Tensor::new(z0.shape.clone(), data))
}

/// The probability-flow velocity implied by an x-start prediction:
/// v = (ẑ0 − z_t) / (1 − t), with the denominator clamped at `DELTA_SING`.
pub fn xstart_to_velocity(zhat: &Tensor, z_t: &Tensor, t: NoiseLevel) -> Tensor {
    assert_eq!(zhat.shape, z_t.shape);
    let denom = (1.0 - t.0).max(DELTA_SING);
    let data = zhat
        .data
        .iter()
        .zip(z_t.data.iter())
        .map(|(&h, &z)| (h - z) / denom)
        .collect();
    Tensor::new(zhat.shape.clone(), data)
}

/// v_uncond + ω·(v_cond − v_uncond), evaluated as (1−ω)·v_uncond + ω·v_cond
/// so ω ∈ {0, 1} reproduces the inputs bit-exactly.
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, omega: f32) -> Tensor {
    assert_eq!(v_cond.shape, v_uncond.shape);
    let data = v_cond
        .data
        .iter()
        .zip(v_uncond.data.iter())
        .map(|(&c, &u)| (1.0 - omega) * u + omega * c)
        .collect();
    Tensor::new(v_cond.shape.clone(), data)
}

/// Flow-matching loss on the tape: mean squared error between the prediction
/// and the clean latents, with the clean branch behind a stop-gradient when
/// `stop_grad` is set.
pub fn flow_loss_on(tape: &mut Tape, zhat: BufId, z0: BufId, stop_grad: bool) -> BufId {
    let target = if stop_grad { tape.stop_gradient(z0) } else { z0 };
    tape.mse(zhat, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Heun,
}

/// Space in which classifier-free guidance combines the two branches.
/// For an x-start model both produce identical trajectories (the velocity
/// map is affine in ẑ0 at fixed z, t); the switch exists to make that
/// checkable rather than assumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfgSpace {
    Velocity,
    Xstart,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub solver: Solver,
    pub steps: usize,
    /// Guidance scale ω ≥ 0. 0 disables the conditional branch entirely.
    pub cfg_scale: f32,
    pub t_start: f32,
    pub t_end: f32,
    pub cfg_space: CfgSpace,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            solver: Solver::Heun,
            steps: 50,
            cfg_scale: 2.0,
            t_start: 0.1,
            t_end: 1.0,
            cfg_space: CfgSpace::Velocity,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_start && self.t_start < self.t_end && self.t_end <= 1.0) {
            return Err(UniteError::Config(format!(
                "sampler interval [{}, {}] violates 0 <= t_start < t_end <= 1",
                self.t_start, self.t_end
            )));
        }
        if self.steps == 0 {
            return Err(UniteError::Config("sampler needs at least one step".into()));
        }
        if self.cfg_scale < 0.0 {
            return Err(UniteError::Config("cfg scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Anything that predicts clean latents from noisy ones. The trainer's model
/// implements this; tests substitute closed-form stubs.
pub trait XStartModel {
    /// (registers K, latent width d)
    fn latent_shape(&self) -> (usize, usize);

    /// Predict ẑ0 for a batch of latents `[B*K, d]` at per-sample noise
    /// levels `t` with optional class conditioning.
    fn predict_xstart(&self, z: &Tensor, t: &[f32], labels: &[Option<usize>]) -> Tensor;
}

pub struct SampleOutput {
    /// Final latents, `[B*K, d]`.
    pub latents: Tensor,
    /// Model evaluations per sample (NFE).
    pub nfe_per_sample: u64,
}

/// One generic Heun step: Euler predictor then trapezoidal correction.
pub fn heun_step(
    z: &Tensor,
    t: f32,
    dt: f32,
    velocity_fn: &mut dyn FnMut(&Tensor, f32) -> Tensor,
) -> Tensor {
    assert!(dt > 0.0);
    let v1 = velocity_fn(z, t);
    let zp = axpy(z, &v1, dt);
    let v2 = velocity_fn(&zp, t + dt);
    let mut out = z.clone();
    for i in 0..out.data.len() {
        out.data[i] += 0.5 * dt * (v1.data[i] + v2.data[i]);
    }
    out
}

/// One Euler step.
pub fn euler_step(
    z: &Tensor,
    t: f32,
    dt: f32,
    velocity_fn: &mut dyn FnMut(&Tensor, f32) -> Tensor,
) -> Tensor {
    let v = velocity_fn(z, t);
    axpy(z, &v, dt)
}

fn axpy(z: &Tensor, v: &Tensor, dt: f32) -> Tensor {
    let data = z
        .data
        .iter()
        .zip(v.data.iter())
        .map(|(&a, &b)| a + dt * b)
        .collect();
    Tensor::new(z.shape.clone(), data)
}

/// Integrate the probability-flow ODE from N(0,I) at `t_start` to `t_end`.
///
/// Per velocity evaluation the model runs twice (conditional and
/// unconditional) when ω > 0 and a label is present, once otherwise. The
/// grid partitions [t_start, t_end] exactly. When a Heun corrector would
/// query the velocity within `DELTA_SING` of t = 1 — where the x-start form
/// is singular — the step instead trusts the endpoint prediction: the
/// corrector velocity is the straight line from the step start to the
/// prediction at the endpoint, which lands the step on the average of the
/// two ẑ0 estimates.
pub fn sample(
    model: &dyn XStartModel,
    labels: &[Option<usize>],
    sc: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<SampleOutput> {
    sc.validate()?;
    let (k, d) = model.latent_shape();
    let batch = labels.len();
    let mut z = Tensor::randn(vec![batch * k, d], rng);
    let mut nfe: u64 = 0;

    let guided = sc.cfg_scale > 0.0 && labels.iter().any(|l| l.is_some());
    let null_labels: Vec<Option<usize>> = vec![None; batch];

    let predict_guided = |z: &Tensor, t: f32, nfe: &mut u64| -> Tensor {
        let tv = vec![t; batch];
        if !guided {
            *nfe += 1;
            return model.predict_xstart(z, &tv, &null_labels);
        }
        let zc = model.predict_xstart(z, &tv, labels);
        let zu = model.predict_xstart(z, &tv, &null_labels);
        *nfe += 2;
        match sc.cfg_space {
            // identical results either way; computed in the configured space
            CfgSpace::Xstart => {
                let data = zc
                    .data
                    .iter()
                    .zip(zu.data.iter())
                    .map(|(&c, &u)| u + sc.cfg_scale * (c - u))
                    .collect();
                Tensor::new(zc.shape.clone(), data)
            }
            CfgSpace::Velocity => {
                let vc = xstart_to_velocity(&zc, z, NoiseLevel(t));
                let vu = xstart_to_velocity(&zu, z, NoiseLevel(t));
                let v = cfg_velocity(&vc, &vu, sc.cfg_scale);
                // materialize the guided prediction back in latent space
                let denom = (1.0 - t).max(DELTA_SING);
                let data = z
                    .data
                    .iter()
                    .zip(v.data.iter())
                    .map(|(&zi, &vi)| zi + denom * vi)
                    .collect();
                Tensor::new(zc.shape.clone(), data)
            }
        }
    };

    let dt = (sc.t_end - sc.t_start) / sc.steps as f32;
    for i in 0..sc.steps {
        let t = sc.t_start + i as f32 * dt;
        let t2 = if i + 1 == sc.steps { sc.t_end } else { sc.t_start + (i + 1) as f32 * dt };
        let h = t2 - t;

        let zhat1 = predict_guided(&z, t, &mut nfe);
        let v1 = xstart_to_velocity(&zhat1, &z, NoiseLevel(t));

        match sc.solver {
            Solver::Euler => {
                z = axpy(&z, &v1, h);
            }
            Solver::Heun => {
                let zp = axpy(&z, &v1, h);
                let zhat2 = predict_guided(&zp, t2, &mut nfe);
                let v2 = if 1.0 - t2 <= DELTA_SING {
                    // endpoint: velocity of the line from the step start to
                    // the predicted clean latent
                    let data = zhat2
                        .data
                        .iter()
                        .zip(z.data.iter())
                        .map(|(&hat, &zi)| (hat - zi) / h)
                        .collect();
                    Tensor::new(z.shape.clone(), data)
                } else {
                    xstart_to_velocity(&zhat2, &zp, NoiseLevel(t2))
                };
                for i in 0..z.data.len() {
                    z.data[i] += 0.5 * h * (v1.data[i] + v2.data[i]);
                }
            }
        }
    }

    Ok(SampleOutput { latents: z, nfe_per_sample: nfe })
}
