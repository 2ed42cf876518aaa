//! Single-stage joint training: one tokenization/reconstruction pass plus R
//! denoising passes per iteration through the shared parameters, with
//! warmup+cosine schedule, EMA shadow weights, gradient clipping, and
//! JSON-lines metrics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::synth::Dataset;
use crate::data::{checkpoint, tensor_file};
use crate::error::{Result, UniteError};
use crate::flow::{self, FlowSchedule};
use crate::model::{patch, Model};
use crate::rng::{Purpose, RngStream};
use crate::tensor::optim::{self, AdamWConfig};
use crate::tensor::tape::{BufId, Tape};
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Differentiable image-pair functional added to the reconstruction loss
/// when enabled. Operates on patch-row layouts `[B*Np, C*P²]` and must
/// return a scalar buffer on the same tape.
pub trait PerceptualHook: Send + Sync {
    fn loss(&self, g: &mut Tape, pred_rows: BufId, target_rows: BufId) -> Result<BufId>;
}

/// Exponential moving average of all parameters.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub shadow: Vec<Vec<f32>>,
    pub decay: f32,
}

impl EmaState {
    pub fn new(ps: &ParamSet, decay: f32) -> Self {
        EmaState {
            shadow: ps.iter().map(|p| p.value.data.clone()).collect(),
            decay,
        }
    }

    /// shadow <- decay·shadow + (1−decay)·live
    pub fn update(&mut self, ps: &ParamSet) {
        for (sh, p) in self.shadow.iter_mut().zip(ps.iter()) {
            for (s, &v) in sh.iter_mut().zip(p.value.data.iter()) {
                *s = self.decay * *s + (1.0 - self.decay) * v;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f32,
    pub loss_recon: f32,
    pub loss_flow: f32,
    pub grad_norm: f32,
    pub latent_std: f32,
    pub wall_ms: f64,
}

/// Learning rate at a 0-based step: linear warmup to `lr`, then cosine decay
/// to `min_lr` at `total_steps`.
pub fn lr_at(step: u64, lr: f32, min_lr: f32, warmup: u64, total: u64) -> f32 {
    if warmup > 0 && step < warmup {
        return lr * step as f32 / warmup as f32;
    }
    if step >= total {
        return min_lr;
    }
    let span = (total - warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    (min_lr as f64 + (lr as f64 - min_lr as f64) * cos) as f32
}

/// z̃0 = σ·z0 + (1−σ)·ε (interpolate form; the Appendix-table reading).
pub fn recon_noise(z0: &Tensor, sigma: f32, eps: &Tensor) -> Tensor {
    assert!((0.0..=1.0).contains(&sigma));
    assert_eq!(z0.shape, eps.shape);
    let data = z0
        .data
        .iter()
        .zip(eps.data.iter())
        .map(|(&z, &e)| sigma * z + (1.0 - sigma) * e)
        .collect();
    Tensor::new(z0.shape.clone(), data)
}

/// z̃0 = z0 + σ·ε (the main-text form, kept for study).
pub fn recon_noise_additive(z0: &Tensor, sigma: f32, eps: &Tensor) -> Tensor {
    assert_eq!(z0.shape, eps.shape);
    let data = z0
        .data
        .iter()
        .zip(eps.data.iter())
        .map(|(&z, &e)| z + sigma * e)
        .collect();
    Tensor::new(z0.shape.clone(), data)
}

pub struct StepLosses {
    pub loss_recon: f32,
    pub loss_flow: f32,
    pub latent_std: f32,
    pub total: f32,
}

struct Streams {
    data: RngStream,
    reg: RngStream,
    flow: RngStream,
    recon: RngStream,
    drop: RngStream,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            data: RngStream::new(seed, Purpose::Data),
            reg: RngStream::new(seed, Purpose::RegisterNoise),
            flow: RngStream::new(seed, Purpose::FlowNoise),
            recon: RngStream::new(seed, Purpose::ReconNoise),
            drop: RngStream::new(seed, Purpose::LabelDrop),
        }
    }

    fn positions(&self) -> BTreeMap<String, u128> {
        let mut m = BTreeMap::new();
        m.insert("data".into(), self.data.word_pos());
        m.insert("register_noise".into(), self.reg.word_pos());
        m.insert("flow_noise".into(), self.flow.word_pos());
        m.insert("recon_noise".into(), self.recon.word_pos());
        m.insert("label_drop".into(), self.drop.word_pos());
        m
    }

    fn restore(&mut self, ck: &checkpoint::Checkpoint) -> Result<()> {
        self.data.set_word_pos(ck.rng("data")?);
        self.reg.set_word_pos(ck.rng("register_noise")?);
        self.flow.set_word_pos(ck.rng("flow_noise")?);
        self.recon.set_word_pos(ck.rng("recon_noise")?);
        self.drop.set_word_pos(ck.rng("label_drop")?);
        Ok(())
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub ema: EmaState,
    pub dataset: Dataset,
    pub heldout: Dataset,
    pub step: u64,
    streams: Streams,
    schedule: FlowSchedule,
    adamw: AdamWConfig,
    pub hook: Option<Box<dyn PerceptualHook>>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Trainer> {
        cfg.validate()?;
        if cfg.perceptual_hook {
            return Err(UniteError::Config(
                "perceptual_hook=true but no hook is registered; \
                 construct the trainer in code and set one"
                    .into(),
            ));
        }
        Self::with_hook(cfg, None)
    }

    pub fn with_hook(cfg: &RunConfig, hook: Option<Box<dyn PerceptualHook>>) -> Result<Trainer> {
        let model = Model::new(&cfg.model_config(), cfg.seed)?;
        let ema = EmaState::new(&model.params, cfg.ema_decay);
        let spec = cfg.synth_spec();
        let dataset = Dataset::train(&spec, cfg.seed, cfg.train_size)?;
        let heldout = Dataset::heldout(&spec, cfg.seed, cfg.heldout_size)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            ema,
            dataset,
            heldout,
            step: 0,
            streams: Streams::new(cfg.seed),
            schedule: cfg.flow_schedule(),
            adamw: AdamWConfig {
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                eps: cfg.adam_eps,
                weight_decay: cfg.weight_decay,
            },
            hook,
        })
    }

    /// Rebuild a trainer from a checkpoint for bit-exact continuation.
    pub fn resume(cfg: &RunConfig, ckpt_path: impl AsRef<Path>) -> Result<Trainer> {
        let ck = checkpoint::load(ckpt_path)?;
        let saved: RunConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| UniteError::Config(format!("checkpoint config: {e}")))?;
        if serde_json::to_value(&saved).unwrap() != serde_json::to_value(cfg).unwrap() {
            return Err(UniteError::Config(
                "resume config differs from the checkpointed one".into(),
            ));
        }
        let mut tr = Trainer::new(cfg)?;
        tr.load_state(&ck)?;
        Ok(tr)
    }

    pub fn load_state(&mut self, ck: &checkpoint::Checkpoint) -> Result<()> {
        for i in 0..self.model.params.len() {
            let name = self.model.params.get(ParamId(i)).name.clone();
            let live = ck.tensor(&name)?.data.clone();
            let ema = ck.tensor(&format!("ema/{name}"))?.data.clone();
            let m = ck.tensor(&format!("opt_m/{name}"))?.data.clone();
            let v = ck.tensor(&format!("opt_v/{name}"))?.data.clone();
            let p = self.model.params.get_mut(ParamId(i));
            if live.len() != p.value.data.len() {
                return Err(UniteError::Format(format!("size mismatch for `{name}`")));
            }
            p.value.data = live;
            p.opt_m = m;
            p.opt_v = v;
            self.ema.shadow[i] = ema;
        }
        self.streams.restore(ck)?;
        self.step = ck.step;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors: Vec<(String, crate::tensor::ParamTag, Tensor)> = Vec::new();
        for (i, p) in self.model.params.iter().enumerate() {
            tensors.push((p.name.clone(), p.tag, p.value.clone()));
            tensors.push((
                format!("ema/{}", p.name),
                p.tag,
                Tensor::new(p.value.shape.clone(), self.ema.shadow[i].clone()),
            ));
            tensors.push((
                format!("opt_m/{}", p.name),
                p.tag,
                Tensor::new(p.value.shape.clone(), p.opt_m.clone()),
            ));
            tensors.push((
                format!("opt_v/{}", p.name),
                p.tag,
                Tensor::new(p.value.shape.clone(), p.opt_v.clone()),
            ));
        }
        let refs: Vec<(String, crate::tensor::ParamTag, &Tensor)> =
            tensors.iter().map(|(n, t, v)| (n.clone(), *t, v)).collect();
        let cfg = serde_json::to_value(&self.cfg)
            .map_err(|e| UniteError::Config(format!("config encode: {e}")))?;
        checkpoint::save(path, self.step, &cfg, &self.streams.positions(), &refs)
    }

    /// Model snapshot carrying the EMA weights (evaluation uses this).
    pub fn ema_model(&self) -> Model {
        self.model.with_values(&self.ema.shadow)
    }

    /// Draw the next batch indices from the data stream.
    pub fn draw_batch(&mut self) -> Vec<usize> {
        self.dataset.draw_batch(self.cfg.batch, &mut self.streams.data)
    }

    /// Forward + backward on the given batch: parameter gradients are left
    /// accumulated, no optimizer step is taken.
    pub fn forward_backward(&mut self, idx: &[usize]) -> Result<StepLosses> {
        let cfg = &self.cfg;
        let batch = idx.len();
        let k = cfg.registers;
        let d = cfg.latent_dim;
        let r_passes = cfg.flow_minibatches;

        let (imgs, labels) = self.dataset.gather(idx);
        let patch_rows = patch::patchify_batch(&imgs, cfg.patch)?;

        // Noise draws in a fixed order: register, recon, then per-pass flow
        // draws. The recon branch is therefore identical across runs that
        // differ only in R.
        let reg_noise = Tensor::randn(vec![batch * k, d], &mut self.streams.reg);
        let recon_eps = Tensor::randn(vec![batch * k, d], &mut self.streams.recon);
        let mut pass_draws = Vec::with_capacity(r_passes);
        for _ in 0..r_passes {
            let t: Vec<f32> = (0..batch).map(|_| self.schedule.draw_t(&mut self.streams.flow)).collect();
            let eps = Tensor::randn(vec![batch * k, d], &mut self.streams.flow);
            let dropped: Vec<Option<usize>> = labels
                .iter()
                .map(|&l| {
                    if self.streams.drop.below(cfg.label_drop) {
                        None
                    } else {
                        Some(l)
                    }
                })
                .collect();
            pass_draws.push((t, eps, dropped));
        }

        let mut g = Tape::recording();
        let rows_in = g.input(patch_rows);
        let reg_in = g.input(reg_noise);

        // (1) tokenize + reconstruction
        let z0 = self.model.tokenize_on(&mut g, rows_in, reg_in, batch, None)?;
        let eps_in = g.input(recon_eps);
        let z_noisy = match cfg.recon_noise_form.as_str() {
            "interpolate" => g.lerp(z0, eps_in, vec![cfg.recon_sigma; 1], batch * k),
            "additive" => {
                let scaled = g.scale(eps_in, cfg.recon_sigma);
                g.add(z0, scaled)
            }
            other => return Err(UniteError::Config(format!("recon_noise_form `{other}`"))),
        };
        let xhat_rows = self.model.decode_on(&mut g, z_noisy, batch)?;
        let mut loss_recon = g.mae(xhat_rows, rows_in);
        if let Some(hook) = &self.hook {
            let extra = hook.loss(&mut g, xhat_rows, rows_in)?;
            loss_recon = g.add(loss_recon, extra);
        }

        // (2) R denoising passes against the (optionally detached) latents
        let z_src = if cfg.stop_grad { g.stop_gradient(z0) } else { z0 };
        let mut flow_losses = Vec::with_capacity(r_passes);
        for (t, eps, dropped) in &pass_draws {
            let eps_in = g.input(eps.clone());
            let z_t = g.lerp(z_src, eps_in, t.clone(), k);
            let zhat = self.model.denoise_on(&mut g, z_t, t, dropped, batch, None)?;
            flow_losses.push(g.mse(zhat, z_src));
        }
        let loss_flow = match flow_losses.len() {
            0 => None,
            _ => {
                let mut acc = flow_losses[0];
                for &l in &flow_losses[1..] {
                    acc = g.add(acc, l);
                }
                Some(g.scale(acc, 1.0 / flow_losses.len() as f32))
            }
        };

        // (3) total objective, with the flow weight ramped over early steps
        let ramp = if cfg.flow_warmup_steps == 0 {
            1.0
        } else {
            (self.step as f32 / cfg.flow_warmup_steps as f32).min(1.0)
        };
        let total = match loss_flow {
            Some(lf) => {
                let w = g.scale(lf, cfg.loss_weight_flow * ramp);
                g.add(loss_recon, w)
            }
            None => loss_recon,
        };

        let losses = StepLosses {
            loss_recon: g.data(loss_recon)[0],
            loss_flow: loss_flow.map_or(0.0, |lf| g.data(lf)[0]),
            latent_std: latent_std(g.data(z0), d),
            total: g.data(total)[0],
        };
        if !losses.total.is_finite() {
            self.dump_nan_state(&g, z0, xhat_rows)?;
            return Err(UniteError::Numeric(format!(
                "non-finite loss at step {} (recon {}, flow {})",
                self.step, losses.loss_recon, losses.loss_flow
            )));
        }

        g.backward(total)?;
        g.accumulate_param_grads(&mut self.model.params);
        Ok(losses)
    }

    fn dump_nan_state(&self, g: &Tape, z0: BufId, xhat: BufId) -> Result<()> {
        if self.cfg.run_dir.is_empty() {
            return Ok(());
        }
        let dir = PathBuf::from(&self.cfg.run_dir).join(format!("nan-dump-step-{}", self.step));
        std::fs::create_dir_all(&dir)?;
        tensor_file::write(dir.join("z0.unte"), &g.tensor(z0))?;
        tensor_file::write(dir.join("xhat_rows.unte"), &g.tensor(xhat))?;
        Ok(())
    }

    /// One full optimization step. Returns the metrics record.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let t0 = Instant::now();
        let idx = self.draw_batch();
        let losses = self.forward_backward(&idx)?;

        let lr = lr_at(
            self.step,
            self.cfg.lr,
            self.cfg.min_lr,
            self.cfg.warmup_steps,
            self.cfg.total_steps,
        );
        let grad_norm = optim::global_grad_norm(&self.model.params);
        optim::grad_clip(&mut self.model.params, self.cfg.grad_clip);
        optim::adamw_step(&mut self.model.params, lr, &self.adamw, self.step + 1)?;
        self.ema.update(&self.model.params);
        self.step += 1;

        Ok(MetricsRecord {
            step: self.step,
            lr,
            loss_recon: losses.loss_recon,
            loss_flow: losses.loss_flow,
            grad_norm,
            latent_std: losses.latent_std,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Run to `total_steps`, writing run-directory artifacts when a run dir
    /// is configured. Returns the path of the final checkpoint, if written.
    pub fn run(&mut self) -> Result<Option<PathBuf>> {
        let run_dir = if self.cfg.run_dir.is_empty() {
            None
        } else {
            Some(PathBuf::from(&self.cfg.run_dir))
        };
        let mut metrics = match &run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir.join("checkpoints"))?;
                std::fs::create_dir_all(dir.join("samples"))?;
                std::fs::write(dir.join("config.json"), self.cfg.to_json_pretty())?;
                // fresh runs truncate; resumed runs append after the saved step
                let file = if self.step == 0 {
                    File::create(dir.join("metrics.jsonl"))?
                } else {
                    File::options().create(true).append(true).open(dir.join("metrics.jsonl"))?
                };
                Some(BufWriter::new(file))
            }
            None => None,
        };

        let mut final_ckpt = None;
        while self.step < self.cfg.total_steps {
            let rec = self.step()?;
            if let Some(w) = metrics.as_mut() {
                let line = serde_json::to_string(&rec)
                    .map_err(|e| UniteError::Format(format!("metrics encode: {e}")))?;
                writeln!(w, "{line}")?;
            }
            if let Some(dir) = &run_dir {
                if self.cfg.checkpoint_every > 0
                    && self.step % self.cfg.checkpoint_every == 0
                    && self.step < self.cfg.total_steps
                {
                    self.save_checkpoint(dir.join(format!("checkpoints/step-{:06}.ckpt", self.step)))?;
                }
                if self.cfg.sample_every > 0 && self.step % self.cfg.sample_every == 0 {
                    self.write_sample_grid(dir)?;
                }
            }
        }
        if let Some(w) = metrics.as_mut() {
            w.flush()?;
        }
        if let Some(dir) = &run_dir {
            let path = dir.join("checkpoints/final.ckpt");
            self.save_checkpoint(&path)?;
            final_ckpt = Some(path);
        }
        Ok(final_ckpt)
    }

    fn write_sample_grid(&self, dir: &Path) -> Result<()> {
        let ema = self.ema_model();
        let labels: Vec<Option<usize>> =
            (0..16).map(|i| Some(i % self.cfg.num_classes)).collect();
        let sc = self.cfg.sampler_config()?;
        let mut rng = RngStream::new(self.cfg.seed ^ self.step, Purpose::Sample);
        let out = flow::sample(&ema, &labels, &sc, &mut rng)?;
        let imgs = ema.decode(&out.latents)?;
        tensor_file::write_pgm_grid(
            dir.join(format!("samples/step-{:06}.pgm", self.step)),
            &imgs,
        )?;
        let stacked = Tensor::new(
            vec![imgs.len(), self.cfg.channels, self.cfg.image_size, self.cfg.image_size],
            imgs.iter().flat_map(|t| t.data.iter().copied()).collect(),
        );
        tensor_file::write(dir.join(format!("samples/step-{:06}.unte", self.step)), &stacked)
    }
}

/// Load a model from a checkpoint, using the EMA weights by default (the
/// evaluation-time convention) or the live weights when `use_ema` is false.
/// Returns the run configuration echoed in the checkpoint alongside it.
pub fn load_model(
    ckpt_path: impl AsRef<Path>,
    use_ema: bool,
) -> Result<(RunConfig, Model)> {
    let ck = checkpoint::load(ckpt_path)?;
    let cfg: RunConfig = serde_json::from_value(ck.config.clone())
        .map_err(|e| UniteError::Config(format!("checkpoint config: {e}")))?;
    let mut model = Model::new(&cfg.model_config(), cfg.seed)?;
    for i in 0..model.params.len() {
        let name = model.params.get(ParamId(i)).name.clone();
        let key = if use_ema { format!("ema/{name}") } else { name.clone() };
        let t = ck.tensor(&key)?.data.clone();
        let p = model.params.get_mut(ParamId(i));
        if t.len() != p.value.data.len() {
            return Err(UniteError::Format(format!("size mismatch for `{name}`")));
        }
        p.value.data = t;
    }
    Ok((cfg, model))
}

/// RMS of per-register population std over a `[rows, d]` latent block.
pub fn latent_std(z: &[f32], d: usize) -> f32 {
    let rows = z.len() / d;
    let mut acc = 0.0f64;
    for row in z.chunks(d) {
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var: f64 =
            row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        acc += var;
    }
    ((acc / rows as f64).sqrt()) as f32
}
