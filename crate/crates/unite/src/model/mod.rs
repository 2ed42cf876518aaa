//! The dual-mode generative encoder and the pixel decoder.

pub mod decoder;
pub mod ge;
pub mod patch;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UniteError};
use crate::flow::XStartModel;
use crate::rng::{Purpose, RngStream};
use crate::tensor::tape::{BufId, Tape};
use crate::tensor::{ParamId, ParamSet, Tensor};
use decoder::DecoderStack;
use ge::{FinalNorm, GeStack};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of latent register tokens K.
    pub registers: usize,
    /// Latent width d.
    pub latent_dim: usize,
    pub num_classes: usize,
    /// One parameter set for both modes; false instantiates a separate
    /// denoiser stack.
    pub weight_share: bool,
    /// Keep the output norm shared across modes even with separate stacks,
    /// so both pathways emit latents in one calibrated space.
    pub share_final_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Toy scale: the full pipeline runs on a laptop CPU. Paper-scale
        // values (256px, hidden 768, K=256, d=32, P=16) remain expressible.
        ModelConfig {
            image_size: 32,
            channels: 1,
            patch: 4,
            hidden: 64,
            layers: 4,
            heads: 4,
            registers: 16,
            latent_dim: 8,
            num_classes: 10,
            weight_share: true,
            share_final_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch) * (self.image_size / self.patch)
    }

    /// Decoder patch side: one register decodes one patch, so the grid is
    /// sqrt(K) x sqrt(K).
    pub fn dec_patch(&self) -> usize {
        self.image_size / self.register_grid()
    }

    pub fn register_grid(&self) -> usize {
        (self.registers as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(UniteError::Config(msg));
        if self.image_size % self.patch != 0 {
            return fail(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.registers == 0 || self.latent_dim == 0 {
            return fail("registers and latent_dim must be at least 1".into());
        }
        let g = self.register_grid();
        if g * g != self.registers || self.image_size % g != 0 {
            return fail(format!(
                "registers {} must be a perfect square whose root divides image_size {}",
                self.registers, self.image_size
            ));
        }
        if self.num_classes == 0 {
            return fail("need at least one class".into());
        }
        Ok(())
    }
}

/// Generative encoder + decoder with all parameters in one arena.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub ge: GeStack,
    /// Separate denoiser stack for the weight_share=false ablation.
    pub ge_den: Option<GeStack>,
    pub final_norm: FinalNorm,
    /// Separate output norm, only when share_final_norm is off.
    pub final_norm_den: Option<FinalNorm>,
    pub decoder: DecoderStack,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed, Purpose::Init);
        let mut ps = ParamSet::new();
        let ge = GeStack::new(&mut ps, "ge", cfg, true, &mut rng);
        let ge_den = if cfg.weight_share {
            None
        } else {
            Some(GeStack::new(&mut ps, "ge_den", cfg, false, &mut rng))
        };
        let final_norm = FinalNorm::new(&mut ps, "final_norm", cfg.latent_dim);
        let final_norm_den = if cfg.weight_share || cfg.share_final_norm {
            None
        } else {
            Some(FinalNorm::new(&mut ps, "final_norm_den", cfg.latent_dim))
        };
        let decoder = DecoderStack::new(&mut ps, "dec", cfg, &mut rng);
        Ok(Model { cfg: *cfg, params: ps, ge, ge_den, final_norm, final_norm_den, decoder })
    }

    fn den_stack(&self) -> &GeStack {
        self.ge_den.as_ref().unwrap_or(&self.ge)
    }

    fn den_norm(&self) -> &FinalNorm {
        self.final_norm_den.as_ref().unwrap_or(&self.final_norm)
    }

    /// Parameter ids the tokenization pathway touches.
    pub fn tokenize_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ge.tokenize_ids();
        ids.extend(self.final_norm.ids());
        ids
    }

    /// Parameter ids the denoising pathway touches.
    pub fn denoise_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.den_stack().denoise_ids();
        ids.extend(self.den_norm().ids());
        ids
    }

    // ── Tape-level ops (training composes these on one tape) ─────────

    /// Tokenization pass: patch rows `[B*Np, C·P²]` + latent-space register
    /// noise `[B*K, d]` -> z0 `[B*K, d]`. Conditioning is t=0, NULL class.
    pub fn tokenize_on(
        &self,
        g: &mut Tape,
        patch_rows: BufId,
        reg_noise: BufId,
        batch: usize,
        trace: Option<&mut Vec<Tensor>>,
    ) -> Result<BufId> {
        let t0 = vec![0.0f32; batch];
        let labels = vec![None; batch];
        let reg_out = self.ge.forward(
            &self.params,
            g,
            &self.cfg,
            reg_noise,
            Some(patch_rows),
            &t0,
            &labels,
            batch,
            trace,
        )?;
        let low = g.param(&self.params, self.ge.latent_out_w);
        let lob = g.param(&self.params, self.ge.latent_out_b);
        let lat = g.linear(reg_out, low, lob)?;
        self.final_norm.apply(&self.params, g, lat)
    }

    /// Denoising pass: z_t `[B*K, d]` conditioned on per-sample (t, label).
    pub fn denoise_on(
        &self,
        g: &mut Tape,
        z_t: BufId,
        t: &[f32],
        labels: &[Option<usize>],
        batch: usize,
        trace: Option<&mut Vec<Tensor>>,
    ) -> Result<BufId> {
        let stack = self.den_stack();
        let reg_out =
            stack.forward(&self.params, g, &self.cfg, z_t, None, t, labels, batch, trace)?;
        let low = g.param(&self.params, stack.latent_out_w);
        let lob = g.param(&self.params, stack.latent_out_b);
        let lat = g.linear(reg_out, low, lob)?;
        self.den_norm().apply(&self.params, g, lat)
    }

    /// Decode latents to patch rows `[B*K, C·Pd²]`.
    pub fn decode_on(&self, g: &mut Tape, z: BufId, batch: usize) -> Result<BufId> {
        self.decoder.forward(&self.params, g, &self.cfg, z, batch)
    }

    // ── Convenience (inference tape) ─────────────────────────────────

    /// Tokenize images, drawing fresh register noise from `rng`.
    pub fn tokenize(&self, images: &[&Tensor], rng: &mut RngStream) -> Result<Tensor> {
        let batch = images.len();
        let noise = Tensor::randn(vec![batch * self.cfg.registers, self.cfg.latent_dim], rng);
        self.tokenize_with_noise(images, &noise)
    }

    /// Tokenize with caller-provided register noise (repeat-encoding studies).
    pub fn tokenize_with_noise(&self, images: &[&Tensor], reg_noise: &Tensor) -> Result<Tensor> {
        let batch = images.len();
        let rows = patch::patchify_batch(images, self.cfg.patch)?;
        let mut g = Tape::inference();
        let pr = g.input(rows);
        let rn = g.input(reg_noise.clone());
        let z = self.tokenize_on(&mut g, pr, rn, batch, None)?;
        Ok(g.tensor(z))
    }

    /// Tokenize and also capture register activations per layer.
    pub fn tokenize_traced(
        &self,
        images: &[&Tensor],
        reg_noise: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let batch = images.len();
        let rows = patch::patchify_batch(images, self.cfg.patch)?;
        let mut g = Tape::inference();
        let pr = g.input(rows);
        let rn = g.input(reg_noise.clone());
        let mut trace = Vec::new();
        let z = self.tokenize_on(&mut g, pr, rn, batch, Some(&mut trace))?;
        trace.push(g.tensor(z));
        Ok((g.tensor(z), trace))
    }

    pub fn denoise(&self, z_t: &Tensor, t: &[f32], labels: &[Option<usize>]) -> Result<Tensor> {
        let batch = t.len();
        let mut g = Tape::inference();
        let zb = g.input(z_t.clone());
        let z = self.denoise_on(&mut g, zb, t, labels, batch, None)?;
        Ok(g.tensor(z))
    }

    pub fn denoise_traced(
        &self,
        z_t: &Tensor,
        t: &[f32],
        labels: &[Option<usize>],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let batch = t.len();
        let mut g = Tape::inference();
        let zb = g.input(z_t.clone());
        let mut trace = Vec::new();
        let z = self.denoise_on(&mut g, zb, t, labels, batch, Some(&mut trace))?;
        trace.push(g.tensor(z));
        Ok((g.tensor(z), trace))
    }

    /// Decode latents `[B*K, d]` into images.
    pub fn decode(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        let k = self.cfg.registers;
        if z.shape.len() != 2 || z.shape[0] % k != 0 || z.shape[1] != self.cfg.latent_dim {
            return Err(UniteError::Config(format!(
                "latents {:?} do not match configured K={k}, d={}",
                z.shape, self.cfg.latent_dim
            )));
        }
        let batch = z.shape[0] / k;
        let mut g = Tape::inference();
        let zb = g.input(z.clone());
        let rows = self.decode_on(&mut g, zb, batch)?;
        let rows = g.tensor(rows);
        let pd = self.cfg.dec_patch();
        let per = k * self.cfg.channels * pd * pd;
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let slice = Tensor::new(
                vec![k, self.cfg.channels * pd * pd],
                rows.data[b * per..(b + 1) * per].to_vec(),
            );
            out.push(patch::unpatchify(
                &slice,
                self.cfg.channels,
                self.cfg.image_size,
                self.cfg.image_size,
                pd,
            )?);
        }
        Ok(out)
    }

    /// Copy of this model with a single parameter tensor replaced
    /// (finite-difference probes).
    pub fn with_values_at(&self, idx: usize, values: &[f32]) -> Model {
        let mut m = Model {
            cfg: self.cfg,
            params: self.params.clone(),
            ge: self.ge.clone(),
            ge_den: self.ge_den.clone(),
            final_norm: self.final_norm.clone(),
            final_norm_den: self.final_norm_den.clone(),
            decoder: self.decoder.clone(),
        };
        let p = m.params.get_mut(ParamId(idx));
        assert_eq!(p.value.data.len(), values.len());
        p.value.data.copy_from_slice(values);
        m
    }

    /// Create a copy of this model with parameter values replaced (EMA
    /// snapshots, checkpoint loads). Order must match `params` order.
    pub fn with_values(&self, values: &[Vec<f32>]) -> Model {
        let mut m = Model {
            cfg: self.cfg,
            params: self.params.clone(),
            ge: self.ge.clone(),
            ge_den: self.ge_den.clone(),
            final_norm: self.final_norm.clone(),
            final_norm_den: self.final_norm_den.clone(),
            decoder: self.decoder.clone(),
        };
        assert_eq!(values.len(), m.params.len());
        for (i, v) in values.iter().enumerate() {
            let p = m.params.get_mut(ParamId(i));
            assert_eq!(p.value.data.len(), v.len(), "value length for {}", p.name);
            p.value.data.copy_from_slice(v);
        }
        m
    }
}

impl XStartModel for Model {
    fn latent_shape(&self) -> (usize, usize) {
        (self.cfg.registers, self.cfg.latent_dim)
    }

    fn predict_xstart(&self, z: &Tensor, t: &[f32], labels: &[Option<usize>]) -> Tensor {
        self.denoise(z, t, labels).expect("denoise failed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{Dataset, SyntheticSpec};
    use crate::rng::Purpose;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            channels: 1,
            patch: 4,
            hidden: 16,
            layers: 2,
            heads: 2,
            registers: 4,
            latent_dim: 4,
            num_classes: 3,
            weight_share: true,
            share_final_norm: true,
        }
    }

    fn tiny_images(n: usize) -> Vec<Tensor> {
        let spec = SyntheticSpec { image_size: 8, ..SyntheticSpec::default() };
        let ds = Dataset::train(&spec, 42, n).unwrap();
        ds.images
    }

    #[test]
    fn tokenize_output_shape_and_stats() {
        let m = Model::new(&tiny_cfg(), 1).unwrap();
        let imgs = tiny_images(3);
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut rng = RngStream::new(7, Purpose::RegisterNoise);
        let z = m.tokenize(&refs, &mut rng).unwrap();
        assert_eq!(z.shape, vec![3 * 4, 4]);

        // with default affine (gamma=1, beta=0) each register row has mean 0
        // and unit population variance after the final norm
        for row in z.data.chunks(4) {
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-3, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn tokenize_is_deterministic_given_noise_seed() {
        let m = Model::new(&tiny_cfg(), 1).unwrap();
        let imgs = tiny_images(2);
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut r1 = RngStream::from_seed(5);
        let mut r2 = RngStream::from_seed(5);
        let a = m.tokenize(&refs, &mut r1).unwrap();
        let b = m.tokenize(&refs, &mut r2).unwrap();
        assert_eq!(a.data, b.data);
        // different noise seed -> different latents
        let mut r3 = RngStream::from_seed(6);
        let c = m.tokenize(&refs, &mut r3).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn denoise_shapes_and_label_error() {
        let m = Model::new(&tiny_cfg(), 1).unwrap();
        let mut rng = RngStream::from_seed(3);
        let z = Tensor::randn(vec![2 * 4, 4], &mut rng);
        let out = m.denoise(&z, &[0.3, 0.9], &[Some(1), None]).unwrap();
        assert_eq!(out.shape, vec![8, 4]);

        let err = m.denoise(&z, &[0.3, 0.9], &[Some(3), None]).unwrap_err();
        assert!(matches!(err, UniteError::Index(_)));
    }

    #[test]
    fn weight_share_modes_use_identical_parameter_objects() {
        let m = Model::new(&tiny_cfg(), 1).unwrap();
        let tok: std::collections::HashSet<_> =
            m.tokenize_param_ids().into_iter().collect();
        let den: std::collections::HashSet<_> =
            m.denoise_param_ids().into_iter().collect();
        // denoise ids ⊂ tokenize ids; difference is exactly the patch pieces
        assert!(den.is_subset(&tok));
        let diff: Vec<_> = tok.difference(&den).collect();
        assert_eq!(diff.len(), 3); // patch_embed w+b, pos_patch
    }

    #[test]
    fn separate_stacks_are_disjoint_except_shared_final_norm() {
        let cfg = ModelConfig { weight_share: false, ..tiny_cfg() };
        let m = Model::new(&cfg, 1).unwrap();
        let tok: std::collections::HashSet<_> =
            m.tokenize_param_ids().into_iter().collect();
        let den: std::collections::HashSet<_> =
            m.denoise_param_ids().into_iter().collect();
        let shared: Vec<_> = tok.intersection(&den).collect();
        assert_eq!(shared.len(), 2, "only final norm gamma/beta shared");

        // with the knob off the sets are fully disjoint
        let cfg = ModelConfig { share_final_norm: false, ..cfg };
        let m = Model::new(&cfg, 1).unwrap();
        let tok: std::collections::HashSet<_> =
            m.tokenize_param_ids().into_iter().collect();
        let den: std::collections::HashSet<_> =
            m.denoise_param_ids().into_iter().collect();
        assert_eq!(tok.intersection(&den).count(), 0);
    }

    #[test]
    fn decode_shape_and_finite_on_zero_latent() {
        let m = Model::new(&tiny_cfg(), 1).unwrap();
        let z = Tensor::zeros(vec![2 * 4, 4]);
        let imgs = m.decode(&z).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].shape, vec![1, 8, 8]);
        assert!(imgs.iter().all(|i| i.is_finite()));

        // K mismatch is a configuration error
        let bad = Tensor::zeros(vec![5, 4]);
        assert!(m.decode(&bad).is_err());
    }

    #[test]
    fn condition_embed_distinguishes_time() {
        let m = Model::new(&tiny_cfg(), 1).unwrap();
        let mut g = Tape::inference();
        let c = m
            .ge
            .condition_embed(&m.params, &mut g, &m.cfg, &[0.0, 1.0], &[None, None])
            .unwrap();
        let d = g.data(c);
        let h = m.cfg.hidden;
        let (a, b) = (&d[0..h], &d[h..2 * h]);
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn blocks_are_identity_at_init_via_zero_gates() {
        // With zero-initialized gates the residual stream passes through
        // untouched, so the denoise output depends only on embeddings and
        // the output head. Check: zeroing all block parameters except gates
        // does not change the forward result.
        let cfg = tiny_cfg();
        let m = Model::new(&cfg, 1).unwrap();
        let mut rng = RngStream::from_seed(9);
        let z = Tensor::randn(vec![4, 4], &mut rng);
        let base = m.denoise(&z, &[0.5], &[None]).unwrap();

        let mut wiped = Model::new(&cfg, 1).unwrap();
        for b in &wiped.ge.blocks {
            for id in [b.qkv_w, b.qkv_b, b.proj_w, b.proj_b, b.mlp_w1, b.mlp_b1, b.mlp_w2, b.mlp_b2]
            {
                let p = wiped.params.get_mut(id);
                p.value.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let out = wiped.denoise(&z, &[0.5], &[None]).unwrap();
        assert_eq!(base.data, out.data);
    }

    #[test]
    fn register_permutation_equivariance() {
        // Permuting pos_register rows together with the register noise rows
        // permutes z0 the same way.
        let cfg = tiny_cfg();
        let m = Model::new(&cfg, 2).unwrap();
        let imgs = tiny_images(1);
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut rng = RngStream::from_seed(11);
        let noise = Tensor::randn(vec![4, 4], &mut rng);
        let z = m.tokenize_with_noise(&refs, &noise).unwrap();

        // rotate registers by one
        let perm = [1usize, 2, 3, 0];
        let mut m2 = Model::new(&cfg, 2).unwrap();
        {
            let pos = m2.params.get(m.ge.pos_register).value.clone();
            let h = cfg.hidden;
            let mut rotated = pos.clone();
            for (dst, &src) in perm.iter().enumerate() {
                rotated.data[dst * h..(dst + 1) * h]
                    .copy_from_slice(&pos.data[src * h..(src + 1) * h]);
            }
            m2.params.get_mut(m.ge.pos_register).value = rotated;
        }
        let mut noise2 = noise.clone();
        for (dst, &src) in perm.iter().enumerate() {
            noise2.data[dst * 4..(dst + 1) * 4]
                .copy_from_slice(&noise.data[src * 4..(src + 1) * 4]);
        }
        let z2 = m2.tokenize_with_noise(&refs, &noise2).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            let a = &z2.data[dst * 4..(dst + 1) * 4];
            let b = &z.data[src * 4..(src + 1) * 4];
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.patch = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.registers = 5; // not a perfect square
        assert!(cfg.validate().is_err());
    }
}
