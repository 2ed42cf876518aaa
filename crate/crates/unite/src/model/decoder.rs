//! Plain (unconditioned) ViT decoder: latents in, pixels out through an
//! unpatchification head. One latent register maps to one output patch.

use super::ge::{xavier, normal02, LN_EPS};
use super::ModelConfig;
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::tape::{BufId, Tape};
use crate::tensor::{ParamId, ParamSet, ParamTag, Tensor};

#[derive(Debug, Clone)]
pub struct VitBlock {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

impl VitBlock {
    fn new(ps: &mut ParamSet, prefix: &str, h: usize, rng: &mut RngStream) -> Self {
        VitBlock {
            ln1_g: ps.add(format!("{prefix}.ln1.g"), ParamTag::Norm, Tensor::new(vec![h], vec![1.0; h])),
            ln1_b: ps.add(format!("{prefix}.ln1.b"), ParamTag::Norm, Tensor::zeros(vec![h])),
            qkv_w: ps.add(format!("{prefix}.qkv.w"), ParamTag::Attention, xavier([h, 3 * h], rng)),
            qkv_b: ps.add(format!("{prefix}.qkv.b"), ParamTag::Attention, Tensor::zeros(vec![3 * h])),
            proj_w: ps.add(format!("{prefix}.proj.w"), ParamTag::Attention, xavier([h, h], rng)),
            proj_b: ps.add(format!("{prefix}.proj.b"), ParamTag::Attention, Tensor::zeros(vec![h])),
            ln2_g: ps.add(format!("{prefix}.ln2.g"), ParamTag::Norm, Tensor::new(vec![h], vec![1.0; h])),
            ln2_b: ps.add(format!("{prefix}.ln2.b"), ParamTag::Norm, Tensor::zeros(vec![h])),
            mlp_w1: ps.add(format!("{prefix}.mlp.w1"), ParamTag::Mlp, xavier([h, 4 * h], rng)),
            mlp_b1: ps.add(format!("{prefix}.mlp.b1"), ParamTag::Mlp, Tensor::zeros(vec![4 * h])),
            mlp_w2: ps.add(format!("{prefix}.mlp.w2"), ParamTag::Mlp, xavier([4 * h, h], rng)),
            mlp_b2: ps.add(format!("{prefix}.mlp.b2"), ParamTag::Mlp, Tensor::zeros(vec![h])),
        }
    }

    fn forward(
        &self,
        ps: &ParamSet,
        g: &mut Tape,
        x: BufId,
        batch: usize,
        tokens: usize,
        heads: usize,
    ) -> Result<BufId> {
        let g1 = g.param(ps, self.ln1_g);
        let b1 = g.param(ps, self.ln1_b);
        let hn = g.layer_norm(x, Some(g1), Some(b1), LN_EPS)?;
        let qkvw = g.param(ps, self.qkv_w);
        let qkvb = g.param(ps, self.qkv_b);
        let qkv = g.linear(hn, qkvw, qkvb)?;
        let att = g.attention_qkv(qkv, batch, tokens, heads)?;
        let pw = g.param(ps, self.proj_w);
        let pb = g.param(ps, self.proj_b);
        let att = g.linear(att, pw, pb)?;
        let x = g.add(x, att);

        let g2 = g.param(ps, self.ln2_g);
        let b2 = g.param(ps, self.ln2_b);
        let hn2 = g.layer_norm(x, Some(g2), Some(b2), LN_EPS)?;
        let w1 = g.param(ps, self.mlp_w1);
        let bb1 = g.param(ps, self.mlp_b1);
        let m = g.linear(hn2, w1, bb1)?;
        let m = g.gelu(m);
        let w2 = g.param(ps, self.mlp_w2);
        let bb2 = g.param(ps, self.mlp_b2);
        let m = g.linear(m, w2, bb2)?;
        Ok(g.add(x, m))
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub latent_in_w: ParamId,
    pub latent_in_b: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<VitBlock>,
    pub ln_f_g: ParamId,
    pub ln_f_b: ParamId,
    pub unpatch_w: ParamId,
    pub unpatch_b: ParamId,
}

impl DecoderStack {
    pub fn new(ps: &mut ParamSet, prefix: &str, cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let h = cfg.hidden;
        let out_dim = cfg.channels * cfg.dec_patch() * cfg.dec_patch();
        DecoderStack {
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
            pos: ps.add(
                format!("{prefix}.pos"),
                ParamTag::Embedding,
                normal02(vec![cfg.registers, h], rng),
            ),
            blocks: (0..cfg.layers)
                .map(|i| VitBlock::new(ps, &format!("{prefix}.blocks.{i}"), h, rng))
                .collect(),
            ln_f_g: ps.add(format!("{prefix}.ln_f.g"), ParamTag::Norm, Tensor::new(vec![h], vec![1.0; h])),
            ln_f_b: ps.add(format!("{prefix}.ln_f.b"), ParamTag::Norm, Tensor::zeros(vec![h])),
            unpatch_w: ps.add(
                format!("{prefix}.unpatch.w"),
                ParamTag::Projection,
                xavier([h, out_dim], rng),
            ),
            unpatch_b: ps.add(
                format!("{prefix}.unpatch.b"),
                ParamTag::Projection,
                Tensor::zeros(vec![out_dim]),
            ),
        }
    }

    /// z `[B*K, d]` -> decoded patch rows `[B*K, C·Pd²]`.
    pub fn forward(
        &self,
        ps: &ParamSet,
        g: &mut Tape,
        cfg: &ModelConfig,
        z: BufId,
        batch: usize,
    ) -> Result<BufId> {
        let liw = g.param(ps, self.latent_in_w);
        let lib = g.param(ps, self.latent_in_b);
        let mut x = g.linear(z, liw, lib)?;
        let pos = g.param(ps, self.pos);
        x = g.add_position(x, pos);
        for blk in &self.blocks {
            x = blk.forward(ps, g, x, batch, cfg.registers, cfg.heads)?;
        }
        let fg = g.param(ps, self.ln_f_g);
        let fb = g.param(ps, self.ln_f_b);
        x = g.layer_norm(x, Some(fg), Some(fb), LN_EPS)?;
        let uw = g.param(ps, self.unpatch_w);
        let ub = g.param(ps, self.unpatch_b);
        g.linear(x, uw, ub)
    }
}
