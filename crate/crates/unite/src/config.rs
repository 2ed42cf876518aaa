//! Flat run configuration: one JSON document with explicit defaults for
//! every field. Unknown keys are a hard error. Dotted `--set key=value`
//! overrides apply after file load (defaults < file < flags).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synth::SyntheticSpec;
use crate::error::{Result, UniteError};
use crate::flow::{CfgSpace, FlowSchedule, SamplerConfig, Solver};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub registers: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub weight_share: bool,
    pub share_final_norm: bool,

    // training
    pub lr: f32,
    pub min_lr: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Only "cosine" (linear warmup, cosine decay to min_lr) is defined.
    pub schedule: String,
    pub batch: usize,
    /// Denoising passes per reconstruction pass (R).
    pub flow_minibatches: usize,
    pub recon_sigma: f32,
    /// "interpolate": σ·z0 + (1−σ)·ε; "additive": z0 + σ·ε.
    pub recon_noise_form: String,
    pub label_drop: f32,
    pub ema_decay: f32,
    pub grad_clip: f32,
    pub loss_weight_flow: f32,
    /// Steps over which the flow-loss weight ramps linearly from 0 to
    /// loss_weight_flow. Joint training from scratch needs reconstruction to
    /// make the latents informative before the denoising objective gets its
    /// full say, or the shared encoder collapses them to an
    /// input-independent fixed point.
    pub flow_warmup_steps: u64,
    pub stop_grad: bool,
    pub weight_decay: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub checkpoint_every: u64,
    pub sample_every: u64,
    pub perceptual_hook: bool,

    // flow schedule
    pub shift_alpha: f32,
    /// 0 keeps t continuous; otherwise u is discretized to this many levels.
    pub flow_steps_train: u32,
    pub cfg_space: String,

    // sampler defaults
    pub solver: String,
    pub sample_steps: usize,
    pub cfg_scale: f32,
    pub t_start: f32,
    pub t_end: f32,

    // synthetic data
    pub train_size: usize,
    pub heldout_size: usize,
    pub jitter_pos: f32,
    pub jitter_scale: f32,
    pub intensity_lo: f32,
    pub intensity_hi: f32,

    // evaluation
    pub eval_n: usize,
    pub eval_recon_n: usize,

    pub seed: u64,
    pub run_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s = SyntheticSpec::default();
        RunConfig {
            image_size: m.image_size,
            channels: m.channels,
            patch: m.patch,
            hidden: m.hidden,
            layers: m.layers,
            heads: m.heads,
            registers: m.registers,
            latent_dim: m.latent_dim,
            num_classes: m.num_classes,
            weight_share: m.weight_share,
            share_final_norm: m.share_final_norm,

            lr: 2e-3,
            min_lr: 1e-5,
            warmup_steps: 100,
            total_steps: 2000,
            schedule: "cosine".into(),
            batch: 64,
            flow_minibatches: 4,
            recon_sigma: 0.7,
            recon_noise_form: "interpolate".into(),
            label_drop: 0.1,
            ema_decay: 0.9978,
            grad_clip: 3.0,
            loss_weight_flow: 1.0,
            flow_warmup_steps: 300,
            stop_grad: true,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 1000,
            sample_every: 1000,
            perceptual_hook: false,

            shift_alpha: 0.5,
            flow_steps_train: 0,
            cfg_space: "velocity".into(),

            solver: "heun".into(),
            sample_steps: 50,
            cfg_scale: 2.0,
            t_start: 0.1,
            t_end: 1.0,

            train_size: 4096,
            heldout_size: 512,
            jitter_pos: s.jitter_pos,
            jitter_scale: s.jitter_scale,
            intensity_lo: s.intensity_lo,
            intensity_hi: s.intensity_hi,

            eval_n: 500,
            eval_recon_n: 128,

            seed: 0,
            run_dir: String::new(),
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            channels: self.channels,
            patch: self.patch,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            registers: self.registers,
            latent_dim: self.latent_dim,
            num_classes: self.num_classes,
            weight_share: self.weight_share,
            share_final_norm: self.share_final_norm,
        }
    }

    pub fn flow_schedule(&self) -> FlowSchedule {
        FlowSchedule {
            shift_alpha: self.shift_alpha,
            t_levels: if self.flow_steps_train == 0 { None } else { Some(self.flow_steps_train) },
        }
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let sc = SamplerConfig {
            solver: match self.solver.as_str() {
                "euler" => Solver::Euler,
                "heun" => Solver::Heun,
                other => return Err(UniteError::Config(format!("unknown solver `{other}`"))),
            },
            steps: self.sample_steps,
            cfg_scale: self.cfg_scale,
            t_start: self.t_start,
            t_end: self.t_end,
            cfg_space: match self.cfg_space.as_str() {
                "velocity" => CfgSpace::Velocity,
                "xstart" => CfgSpace::Xstart,
                other => return Err(UniteError::Config(format!("unknown cfg_space `{other}`"))),
            },
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn synth_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.image_size,
            channels: self.channels,
            jitter_pos: self.jitter_pos,
            jitter_scale: self.jitter_scale,
            intensity_lo: self.intensity_lo,
            intensity_hi: self.intensity_hi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.schedule != "cosine" {
            return Err(UniteError::Config(format!("unknown schedule `{}`", self.schedule)));
        }
        if !(0.0..=1.0).contains(&self.recon_sigma) {
            return Err(UniteError::Config("recon_sigma must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.label_drop) {
            return Err(UniteError::Config("label_drop must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(UniteError::Config("ema_decay must be in [0,1]".into()));
        }
        if !matches!(self.recon_noise_form.as_str(), "interpolate" | "additive") {
            return Err(UniteError::Config(format!(
                "recon_noise_form must be interpolate|additive, got `{}`",
                self.recon_noise_form
            )));
        }
        if self.shift_alpha < 0.0 {
            return Err(UniteError::Config("shift_alpha must be >= 0".into()));
        }
        if self.batch == 0 {
            return Err(UniteError::Config("batch must be >= 1".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(UniteError::Config("warmup_steps exceeds total_steps".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(UniteError::Config("grad_clip must be positive".into()));
        }
        if self.num_classes != crate::data::synth::NUM_CLASSES {
            return Err(UniteError::Config(format!(
                "the synthetic dataset defines {} classes",
                crate::data::synth::NUM_CLASSES
            )));
        }
        self.sampler_config()?;
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| UniteError::Config(format!("config parse: {e}")))?;
        Ok(cfg)
    }

    /// Apply one `key=value` override. The value is parsed as JSON when
    /// possible, else treated as a string. Unknown keys are rejected.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)
            .map_err(|e| UniteError::Config(format!("config encode: {e}")))?;
        let obj = doc.as_object_mut().unwrap();
        if !obj.contains_key(key) {
            return Err(UniteError::Config(format!("unknown config key `{key}`")));
        }
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        obj.insert(key.to_string(), parsed);
        *self = serde_json::from_value(doc)
            .map_err(|e| UniteError::Config(format!("override `{key}={value}`: {e}")))?;
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
