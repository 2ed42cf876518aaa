//! The generative encoder stack: a ViT with adaptive-norm conditioning that
//! runs in two modes. Tokenization ingests patch tokens plus noise-seeded
//! registers; denoising ingests registers only. Both emit latents through
//! the same output projection and final norm.

use super::ModelConfig;
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::tape::{BufId, Tape};
use crate::tensor::{ParamId, ParamSet, ParamTag, Tensor};

pub const LN_EPS: f32 = 1e-5;

pub(crate) fn xavier(shape: [usize; 2], rng: &mut RngStream) -> Tensor {
    let a = (6.0 / (shape[0] + shape[1]) as f32).sqrt();
    let data = (0..shape[0] * shape[1]).map(|_| rng.uniform_in(-a, a)).collect();
    Tensor::new(vec![shape[0], shape[1]], data)
}

pub(crate) fn normal02(shape: Vec<usize>, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| 0.02 * rng.normal()).collect();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone)]
pub struct DitBlock {
    pub adaln_w: ParamId,
    pub adaln_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

impl DitBlock {
    fn new(ps: &mut ParamSet, prefix: &str, h: usize, rng: &mut RngStream) -> Self {
        // Modulation layout: [shift_msa scale_msa gate_msa shift_mlp scale_mlp gate_mlp].
        // Gate columns start at zero so every conditioned residual branch is a
        // no-op at initialization; shift/scale columns start small but nonzero.
        let mut adaln_w = normal02(vec![h, 6 * h], rng);
        for r in 0..h {
            for blk in [2, 5] {
                for j in blk * h..(blk + 1) * h {
                    adaln_w.data[r * 6 * h + j] = 0.0;
                }
            }
        }
        DitBlock {
            adaln_w: ps.add(format!("{prefix}.adaln.w"), ParamTag::Norm, adaln_w),
            adaln_b: ps.add(format!("{prefix}.adaln.b"), ParamTag::Norm, Tensor::zeros(vec![6 * h])),
            qkv_w: ps.add(format!("{prefix}.qkv.w"), ParamTag::Attention, xavier([h, 3 * h], rng)),
            qkv_b: ps.add(format!("{prefix}.qkv.b"), ParamTag::Attention, Tensor::zeros(vec![3 * h])),
            proj_w: ps.add(format!("{prefix}.proj.w"), ParamTag::Attention, xavier([h, h], rng)),
            proj_b: ps.add(format!("{prefix}.proj.b"), ParamTag::Attention, Tensor::zeros(vec![h])),
            mlp_w1: ps.add(format!("{prefix}.mlp.w1"), ParamTag::Mlp, xavier([h, 4 * h], rng)),
            mlp_b1: ps.add(format!("{prefix}.mlp.b1"), ParamTag::Mlp, Tensor::zeros(vec![4 * h])),
            mlp_w2: ps.add(format!("{prefix}.mlp.w2"), ParamTag::Mlp, xavier([4 * h, h], rng)),
            mlp_b2: ps.add(format!("{prefix}.mlp.b2"), ParamTag::Mlp, Tensor::zeros(vec![h])),
        }
    }

    fn ids(&self, out: &mut Vec<ParamId>) {
        out.extend([
            self.adaln_w, self.adaln_b, self.qkv_w, self.qkv_b, self.proj_w, self.proj_b,
            self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2,
        ]);
    }

    /// One conditioned transformer block over `[B*tokens, h]`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        ps: &ParamSet,
        g: &mut Tape,
        x: BufId,
        cond_act: BufId, // silu(cond), [B, h]
        batch: usize,
        tokens: usize,
        heads: usize,
        h: usize,
    ) -> Result<BufId> {
        let aw = g.param(ps, self.adaln_w);
        let ab = g.param(ps, self.adaln_b);
        let c6 = g.linear(cond_act, aw, ab)?;
        let sh1 = g.slice_cols(c6, 0, h);
        let sc1 = g.slice_cols(c6, h, h);
        let g1 = g.slice_cols(c6, 2 * h, h);
        let sh2 = g.slice_cols(c6, 3 * h, h);
        let sc2 = g.slice_cols(c6, 4 * h, h);
        let g2 = g.slice_cols(c6, 5 * h, h);

        let hm = g.ln_modulate(x, sh1, sc1, tokens, LN_EPS)?;
        let qkvw = g.param(ps, self.qkv_w);
        let qkvb = g.param(ps, self.qkv_b);
        let qkv = g.linear(hm, qkvw, qkvb)?;
        let att = g.attention_qkv(qkv, batch, tokens, heads)?;
        let pw = g.param(ps, self.proj_w);
        let pb = g.param(ps, self.proj_b);
        let att = g.linear(att, pw, pb)?;
        let x = g.gate_add(x, att, g1, tokens);

        let hm2 = g.ln_modulate(x, sh2, sc2, tokens, LN_EPS)?;
        let w1 = g.param(ps, self.mlp_w1);
        let b1 = g.param(ps, self.mlp_b1);
        let m = g.linear(hm2, w1, b1)?;
        let m = g.gelu(m);
        let w2 = g.param(ps, self.mlp_w2);
        let b2 = g.param(ps, self.mlp_b2);
        let m = g.linear(m, w2, b2)?;
        Ok(g.gate_add(x, m, g2, tokens))
    }
}

/// Learnable scale/shift applied to latents as the last computation of both
/// modes.
#[derive(Debug, Clone)]
pub struct FinalNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl FinalNorm {
    pub fn new(ps: &mut ParamSet, prefix: &str, d: usize) -> Self {
        FinalNorm {
            gamma: ps.add(
                format!("{prefix}.gamma"),
                ParamTag::Norm,
                Tensor::new(vec![d], vec![1.0; d]),
            ),
            beta: ps.add(format!("{prefix}.beta"), ParamTag::Norm, Tensor::zeros(vec![d])),
        }
    }

    pub fn apply(&self, ps: &ParamSet, g: &mut Tape, x: BufId) -> Result<BufId> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, Some(gamma), Some(beta), LN_EPS)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Parameters of one generative-encoder stack. The patch pieces exist only
/// on stacks that serve the tokenization pathway.
#[derive(Debug, Clone)]
pub struct GeStack {
    pub patch_embed_w: Option<ParamId>,
    pub patch_embed_b: Option<ParamId>,
    pub pos_patch: Option<ParamId>,
    pub pos_register: ParamId,
    pub latent_in_w: ParamId,
    pub latent_in_b: ParamId,
    pub latent_out_w: ParamId,
    pub latent_out_b: ParamId,
    pub time_w1: ParamId,
    pub time_b1: ParamId,
    pub time_w2: ParamId,
    pub time_b2: ParamId,
    pub class_embed: ParamId,
    pub blocks: Vec<DitBlock>,
}

impl GeStack {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        cfg: &ModelConfig,
        with_patch_pathway: bool,
        rng: &mut RngStream,
    ) -> Self {
        let h = cfg.hidden;
        let np = cfg.num_patches();
        let pdim = cfg.channels * cfg.patch * cfg.patch;
        let (pe_w, pe_b, pos_p) = if with_patch_pathway {
            (
                Some(ps.add(
                    format!("{prefix}.patch_embed.w"),
                    ParamTag::Projection,
                    xavier([pdim, h], rng),
                )),
                Some(ps.add(
                    format!("{prefix}.patch_embed.b"),
                    ParamTag::Projection,
                    Tensor::zeros(vec![h]),
                )),
                Some(ps.add(
                    format!("{prefix}.pos_patch"),
                    ParamTag::Embedding,
                    normal02(vec![np, h], rng),
                )),
            )
        } else {
            (None, None, None)
        };
        GeStack {
            patch_embed_w: pe_w,
            patch_embed_b: pe_b,
            pos_patch: pos_p,
            pos_register: ps.add(
                format!("{prefix}.pos_register"),
                ParamTag::Embedding,
                normal02(vec![cfg.registers, h], rng),
            ),
            latent_in_w: ps.add(
                format!("{prefix}.latent_in.w"),
                ParamTag::Projection,
                xavier([cfg.latent_dim, h], rng),
            ),
            latent_in_b: ps.add(
                format!("{prefix}.latent_in.b"),
                ParamTag::Projection,
                Tensor::zeros(vec![h]),
            ),
            latent_out_w: ps.add(
                format!("{prefix}.latent_out.w"),
                ParamTag::Projection,
                xavier([h, cfg.latent_dim], rng),
            ),
            latent_out_b: ps.add(
                format!("{prefix}.latent_out.b"),
                ParamTag::Projection,
                Tensor::zeros(vec![cfg.latent_dim]),
            ),
            time_w1: ps.add(format!("{prefix}.time.w1"), ParamTag::Embedding, normal02(vec![h, h], rng)),
            time_b1: ps.add(format!("{prefix}.time.b1"), ParamTag::Embedding, Tensor::zeros(vec![h])),
            time_w2: ps.add(format!("{prefix}.time.w2"), ParamTag::Embedding, normal02(vec![h, h], rng)),
            time_b2: ps.add(format!("{prefix}.time.b2"), ParamTag::Embedding, Tensor::zeros(vec![h])),
            class_embed: ps.add(
                format!("{prefix}.class_embed"),
                ParamTag::Embedding,
                normal02(vec![cfg.num_classes + 1, h], rng),
            ),
            blocks: (0..cfg.layers)
                .map(|i| DitBlock::new(ps, &format!("{prefix}.blocks.{i}"), h, rng))
                .collect(),
        }
    }

    /// Parameter ids used by the denoising pathway (everything but patch pieces).
    pub fn denoise_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.pos_register,
            self.latent_in_w,
            self.latent_in_b,
            self.latent_out_w,
            self.latent_out_b,
            self.time_w1,
            self.time_b1,
            self.time_w2,
            self.time_b2,
            self.class_embed,
        ];
        for b in &self.blocks {
            b.ids(&mut ids);
        }
        ids
    }

    /// Parameter ids used by the tokenization pathway.
    pub fn tokenize_ids(&self) -> Vec<ParamId> {
        let mut ids = self.denoise_ids();
        ids.extend([
            self.patch_embed_w.expect("tokenize stack has patch pieces"),
            self.patch_embed_b.unwrap(),
            self.pos_patch.unwrap(),
        ]);
        ids
    }

    /// Sinusoidal features of t (scaled by 1000), `[B, h]`: cos half, sin half.
    pub fn time_features(t: &[f32], h: usize) -> Tensor {
        let half = h / 2;
        let mut data = vec![0.0f32; t.len() * h];
        for (b, &tv) in t.iter().enumerate() {
            let x = tv as f64 * 1000.0;
            for i in 0..half {
                let freq = (10000.0f64).powf(-(i as f64) / half as f64);
                data[b * h + i] = (x * freq).cos() as f32;
                data[b * h + half + i] = (x * freq).sin() as f32;
            }
        }
        Tensor::new(vec![t.len(), h], data)
    }

    /// Conditioning vector: time embedding + class embedding (NULL row for
    /// missing labels). Errors on out-of-range labels.
    pub fn condition_embed(
        &self,
        ps: &ParamSet,
        g: &mut Tape,
        cfg: &ModelConfig,
        t: &[f32],
        labels: &[Option<usize>],
    ) -> Result<BufId> {
        let tf = g.input(Self::time_features(t, cfg.hidden));
        let w1 = g.param(ps, self.time_w1);
        let b1 = g.param(ps, self.time_b1);
        let t1 = g.linear(tf, w1, b1)?;
        let t1 = g.silu(t1);
        let w2 = g.param(ps, self.time_w2);
        let b2 = g.param(ps, self.time_b2);
        let temb = g.linear(t1, w2, b2)?;

        let mut idx = Vec::with_capacity(labels.len());
        for l in labels {
            match l {
                Some(c) if *c >= cfg.num_classes => {
                    return Err(crate::error::UniteError::Index(format!(
                        "class label {c} out of range ({} classes)",
                        cfg.num_classes
                    )))
                }
                Some(c) => idx.push(*c),
                None => idx.push(cfg.num_classes),
            }
        }
        let table = g.param(ps, self.class_embed);
        let cemb = g.embed(table, idx)?;
        Ok(g.add(temb, cemb))
    }

    /// Run the stack. `patch_rows` switches tokenization mode on; `reg_in`
    /// holds latent-space register inputs `[B*K, d]` in both modes. Returns
    /// the register stream output `[B*K, h]` (before the latent projection).
    ///
    /// `trace`, when present, receives the register-position activations at
    /// the embedding stage and after every block.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        ps: &ParamSet,
        g: &mut Tape,
        cfg: &ModelConfig,
        reg_in: BufId,
        patch_rows: Option<BufId>,
        t: &[f32],
        labels: &[Option<usize>],
        batch: usize,
        mut trace: Option<&mut Vec<Tensor>>,
    ) -> Result<BufId> {
        let h = cfg.hidden;
        let k = cfg.registers;
        let np = cfg.num_patches();

        let liw = g.param(ps, self.latent_in_w);
        let lib = g.param(ps, self.latent_in_b);
        let reg = g.linear(reg_in, liw, lib)?;
        let posr = g.param(ps, self.pos_register);
        let reg = g.add_position(reg, posr);

        let (mut seq, tokens) = match patch_rows {
            Some(pr) => {
                let pw = g.param(ps, self.patch_embed_w.expect("patch pathway"));
                let pb = g.param(ps, self.patch_embed_b.unwrap());
                let tok = g.linear(pr, pw, pb)?;
                let posp = g.param(ps, self.pos_patch.unwrap());
                let tok = g.add_position(tok, posp);
                (g.concat_tokens(tok, reg, batch), np + k)
            }
            None => (reg, k),
        };
        let reg_start = tokens - k;

        if let Some(tr) = trace.as_deref_mut() {
            let regs = g.slice_tokens(seq, batch, reg_start, k);
            tr.push(g.tensor(regs));
        }

        let cond = self.condition_embed(ps, g, cfg, t, labels)?;
        let cond_act = g.silu(cond);

        for blk in &self.blocks {
            seq = blk.forward(ps, g, seq, cond_act, batch, tokens, cfg.heads, h)?;
            if let Some(tr) = trace.as_deref_mut() {
                let regs = g.slice_tokens(seq, batch, reg_start, k);
                tr.push(g.tensor(regs));
            }
        }

        if reg_start > 0 {
            seq = g.slice_tokens(seq, batch, reg_start, k);
        }
        Ok(seq)
    }
}
