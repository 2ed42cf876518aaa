//! Reverse-mode autodiff on a Wengert tape.
//!
//! Forward builders execute eagerly into a buffer arena and, when the tape
//! records, push one op per primitive. `backward` replays the ops in reverse
//! and accumulates vector-Jacobian products. A tape built with `inference()`
//! runs the exact same kernels without recording, so training and evaluation
//! share one forward implementation.

use std::collections::HashMap;

use super::kernels as kn;
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Result, UniteError};

/// Index into the tape's buffer arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufId(pub usize);

#[derive(Debug)]
enum Op {
    Matmul { a: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    /// Fused x·W + bias.
    Linear { x: BufId, w: BufId, b: Option<BufId>, out: BufId, m: usize, k: usize, n: usize },
    /// Attention over the column blocks of a fused qkv projection.
    AttentionQkv {
        qkv: BufId,
        out: BufId,
        batch: usize,
        tokens: usize,
        heads: usize,
        head_dim: usize,
        probs: Vec<f32>,
    },
    /// Fused no-affine layer norm + per-sample modulation.
    LnModulate {
        x: BufId,
        shift: BufId,
        scale: BufId,
        out: BufId,
        tokens: usize,
        d: usize,
        cache: Vec<(f32, f32)>,
    },
    BiasAdd { x: BufId, bias: BufId, out: BufId, d: usize },
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    Scale { x: BufId, c: f32, out: BufId },
    /// out = w·a + (1−w)·b with one weight per sample block of `rows_per_w` rows.
    Lerp { a: BufId, b: BufId, w: Vec<f32>, rows_per_w: usize, out: BufId },
    Gelu { x: BufId, out: BufId },
    Silu { x: BufId, out: BufId },
    LayerNorm {
        x: BufId,
        gamma: Option<BufId>,
        beta: Option<BufId>,
        out: BufId,
        d: usize,
        cache: Vec<(f32, f32)>,
    },
    Attention {
        q: BufId,
        k: BufId,
        v: BufId,
        out: BufId,
        batch: usize,
        tokens: usize,
        heads: usize,
        head_dim: usize,
        probs: Vec<f32>,
    },
    /// out[b,t,:] = x[b,t,:]·(1+scale[b,:]) + shift[b,:]
    Modulate { x: BufId, shift: BufId, scale: BufId, out: BufId, tokens: usize, d: usize },
    /// out[b,t,:] = x[b,t,:] + gate[b,:]·branch[b,t,:]
    GateAdd { x: BufId, branch: BufId, gate: BufId, out: BufId, tokens: usize, d: usize },
    /// out[b,t,:] = x[b,t,:] + pos[t,:]
    AddPosition { x: BufId, pos: BufId, out: BufId, batch: usize, tokens: usize, d: usize },
    ConcatTokens { a: BufId, b: BufId, out: BufId, batch: usize, ta: usize, tb: usize, d: usize },
    SliceTokens {
        x: BufId,
        out: BufId,
        batch: usize,
        t_total: usize,
        start: usize,
        len: usize,
        d: usize,
    },
    SliceCols { x: BufId, out: BufId, cols: usize, start: usize, len: usize },
    Embed { table: BufId, idx: Vec<usize>, out: BufId, d: usize },
    MeanPoolTokens { x: BufId, out: BufId, tokens: usize, d: usize },
    MeanAll { x: BufId, out: BufId },
    SumAll { x: BufId, out: BufId },
    Mse { a: BufId, b: BufId, out: BufId },
    Mae { a: BufId, b: BufId, out: BufId },
    CrossEntropy { logits: BufId, targets: Vec<usize>, out: BufId, probs: Vec<f32> },
}

/// Wengert tape plus buffer arena.
pub struct Tape {
    bufs: Vec<Tensor>,
    param_of: Vec<Option<ParamId>>,
    ops: Vec<Op>,
    recording: bool,
    frozen: bool,
    param_bufs: HashMap<ParamId, BufId>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    /// A tape that records ops for a later backward pass.
    pub fn recording() -> Self {
        Tape {
            bufs: Vec::new(),
            param_of: Vec::new(),
            ops: Vec::new(),
            recording: true,
            frozen: false,
            param_bufs: HashMap::new(),
            grads: Vec::new(),
        }
    }

    /// A tape that only computes forward values.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::recording()
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn push(&mut self, t: Tensor) -> BufId {
        debug_assert!(
            t.data.iter().all(|v| v.is_finite()),
            "non-finite value produced on tape (shape {:?})",
            t.shape
        );
        self.bufs.push(t);
        self.param_of.push(None);
        self.grads.push(None);
        BufId(self.bufs.len() - 1)
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> BufId {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = requires_grad && self.recording;
        self.push(t)
    }

    fn record(&mut self, op: Op) {
        assert!(!self.frozen, "cannot record on a frozen tape");
        if self.recording {
            self.ops.push(op);
        }
    }

    fn requires(&self, id: BufId) -> bool {
        self.bufs[id.0].requires_grad
    }

    pub fn data(&self, id: BufId) -> &[f32] {
        &self.bufs[id.0].data
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id.0].shape
    }

    pub fn rows(&self, id: BufId) -> usize {
        let t = &self.bufs[id.0];
        t.numel() / t.shape.last().copied().unwrap_or(1)
    }

    pub fn tensor(&self, id: BufId) -> Tensor {
        self.bufs[id.0].clone()
    }

    /// Gradient accumulated for a buffer by `backward`, if any flowed to it.
    pub fn grad(&self, id: BufId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> BufId {
        let mut t = t;
        t.requires_grad = false;
        self.push(t)
    }

    /// Non-parameter leaf that still receives a gradient (tests, probes).
    pub fn leaf(&mut self, t: Tensor) -> BufId {
        let mut t = t;
        t.requires_grad = self.recording;
        self.push(t)
    }

    /// Register a parameter. Repeated registration of the same id returns the
    /// same buffer, which is how weight sharing aggregates gradients from
    /// every pass that touches the parameter.
    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> BufId {
        if let Some(&b) = self.param_bufs.get(&id) {
            return b;
        }
        let p = ps.get(id);
        let mut t = p.value.clone();
        t.requires_grad = self.recording;
        let b = self.push(t);
        self.param_of[b.0] = Some(id);
        self.param_bufs.insert(id, b);
        b
    }

    // ── Forward builders ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(UniteError::ShapeMismatch { context: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kn::matmul_nn(self.data(a), self.data(b), &mut data, m, k, n);
        let rg = self.requires(a) || self.requires(b);
        let out = self.out(vec![m, n], data, rg);
        if rg {
            self.record(Op::Matmul { a, b, out, m, k, n });
        }
        Ok(out)
    }

    pub fn bias_add(&mut self, x: BufId, bias: BufId) -> BufId {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.data(bias).len(), d, "bias length mismatch");
        let bdat = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        data.chunks_mut(d).for_each(|row| {
            for (r, &b) in row.iter_mut().zip(bdat.iter()) {
                *r += b;
            }
        });
        let rg = self.requires(x) || self.requires(bias);
        let shape = self.shape(x).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::BiasAdd { x, bias, out, d });
        }
        out
    }

    /// Fused x·W + b in one op.
    pub fn linear(&mut self, x: BufId, w: BufId, b: BufId) -> Result<BufId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(UniteError::ShapeMismatch { context: "linear", lhs: sx, rhs: sw });
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        assert_eq!(self.data(b).len(), n, "bias length mismatch");
        let mut data = vec![0.0; m * n];
        kn::matmul_nn_bias(self.data(x), self.data(w), Some(self.data(b)), &mut data, m, k, n);
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        let out = self.out(vec![m, n], data, rg);
        if rg {
            self.record(Op::Linear { x, w, b: Some(b), out, m, k, n });
        }
        Ok(out)
    }

    /// Attention over a fused `[B*T, 3d]` qkv buffer (columns q|k|v).
    pub fn attention_qkv(
        &mut self,
        qkv: BufId,
        batch: usize,
        tokens: usize,
        heads: usize,
    ) -> Result<BufId> {
        let d3 = *self.shape(qkv).last().unwrap();
        let d = d3 / 3;
        if d3 % 3 != 0 || d % heads != 0 {
            return Err(UniteError::Config(format!(
                "attention width {d3} not divisible into 3 blocks of {heads} heads"
            )));
        }
        let head_dim = d / heads;
        let rows = self.rows(qkv);
        let mut data = vec![0.0f32; rows * d];
        let probs = kn::attention_fwd_qkv(self.data(qkv), &mut data, batch, tokens, heads, head_dim);
        let rg = self.requires(qkv);
        let out = self.out(vec![rows, d], data, rg);
        if rg {
            self.record(Op::AttentionQkv { qkv, out, batch, tokens, heads, head_dim, probs });
        }
        Ok(out)
    }

    /// Fused no-affine layer norm + modulate: LN(x)·(1+scale) + shift with
    /// per-sample vectors broadcast over tokens.
    pub fn ln_modulate(
        &mut self,
        x: BufId,
        shift: BufId,
        scale: BufId,
        tokens: usize,
        eps: f32,
    ) -> Result<BufId> {
        let d = *self.shape(x).last().unwrap();
        if d == 0 {
            return Err(UniteError::ShapeMismatch {
                context: "ln_modulate empty axis",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut data = vec![0.0f32; self.data(x).len()];
        let cache = kn::ln_modulate_fwd(
            self.data(x),
            self.data(shift),
            self.data(scale),
            &mut data,
            tokens,
            d,
            eps,
        );
        let rg = self.requires(x) || self.requires(shift) || self.requires(scale);
        let shape = self.shape(x).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::LnModulate { x, shift, scale, out, tokens, d, cache });
        }
        Ok(out)
    }

    fn zip_ew(&mut self, a: BufId, b: BufId, f: impl Fn(f32, f32) -> f32 + Sync) -> Vec<f32> {
        assert_eq!(self.data(a).len(), self.data(b).len(), "elementwise shape mismatch");
        kn::zip_ew(self.data(a), self.data(b), f)
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        let data = self.zip_ew(a, b, |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::Add { a, b, out });
        }
        out
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> BufId {
        let data = self.zip_ew(a, b, |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::Sub { a, b, out });
        }
        out
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> BufId {
        let data = self.zip_ew(a, b, |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::Mul { a, b, out });
        }
        out
    }

    pub fn scale(&mut self, x: BufId, c: f32) -> BufId {
        let data: Vec<f32> = self.data(x).iter().map(|&v| v * c).collect();
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::Scale { x, c, out });
        }
        out
    }

    /// w·a + (1−w)·b with one weight per block of `rows_per_w` rows.
    pub fn lerp(&mut self, a: BufId, b: BufId, w: Vec<f32>, rows_per_w: usize) -> BufId {
        let d = *self.shape(a).last().unwrap();
        assert_eq!(self.data(a).len(), self.data(b).len());
        assert_eq!(w.len() * rows_per_w * d, self.data(a).len(), "lerp weight layout");
        let block = rows_per_w * d;
        let mut data = vec![0.0f32; self.data(a).len()];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for (s, &wv) in w.iter().enumerate() {
                for i in s * block..(s + 1) * block {
                    data[i] = wv * ad[i] + (1.0 - wv) * bd[i];
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::Lerp { a, b, w, rows_per_w: rows_per_w * d, out });
        }
        out
    }

    pub fn gelu(&mut self, x: BufId) -> BufId {
        let data = kn::map_ew(self.data(x), kn::gelu);
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::Gelu { x, out });
        }
        out
    }

    pub fn silu(&mut self, x: BufId) -> BufId {
        let data = kn::map_ew(self.data(x), kn::silu);
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::Silu { x, out });
        }
        out
    }

    /// Row-wise layer norm over the trailing dimension.
    pub fn layer_norm(
        &mut self,
        x: BufId,
        gamma: Option<BufId>,
        beta: Option<BufId>,
        eps: f32,
    ) -> Result<BufId> {
        let d = *self.shape(x).last().unwrap();
        if d == 0 {
            return Err(UniteError::ShapeMismatch {
                context: "layer_norm empty axis",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let g = gamma.map(|g| self.data(g).to_vec());
        let b = beta.map(|b| self.data(b).to_vec());
        let mut data = vec![0.0f32; self.data(x).len()];
        let cache = kn::layer_norm_fwd(self.data(x), g.as_deref(), b.as_deref(), &mut data, d, eps);
        let rg = self.requires(x)
            || gamma.map_or(false, |g| self.requires(g))
            || beta.map_or(false, |b| self.requires(b));
        let shape = self.shape(x).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::LayerNorm { x, gamma, beta, out, d, cache });
        }
        Ok(out)
    }

    /// Full (non-causal) multi-head self-attention over `[batch*tokens, d]`.
    pub fn attention(
        &mut self,
        q: BufId,
        k: BufId,
        v: BufId,
        batch: usize,
        tokens: usize,
        heads: usize,
    ) -> Result<BufId> {
        let d = *self.shape(q).last().unwrap();
        if d % heads != 0 {
            return Err(UniteError::Config(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        let head_dim = d / heads;
        let mut data = vec![0.0f32; self.data(q).len()];
        let probs = kn::attention_fwd(
            self.data(q),
            self.data(k),
            self.data(v),
            &mut data,
            batch,
            tokens,
            heads,
            head_dim,
        );
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        let shape = self.shape(q).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::Attention { q, k, v, out, batch, tokens, heads, head_dim, probs });
        }
        Ok(out)
    }

    /// Adaptive-norm modulation: x·(1+scale) + shift, per-sample vectors
    /// broadcast over that sample's tokens.
    pub fn modulate(&mut self, x: BufId, shift: BufId, scale: BufId, tokens: usize) -> BufId {
        let d = *self.shape(x).last().unwrap();
        let batch = self.rows(x) / tokens;
        assert_eq!(self.rows(shift), batch);
        let mut data = vec![0.0f32; self.data(x).len()];
        {
            let (xd, sh, sc) = (self.data(x), self.data(shift), self.data(scale));
            for b in 0..batch {
                for t in 0..tokens {
                    let r = (b * tokens + t) * d;
                    for j in 0..d {
                        data[r + j] = xd[r + j] * (1.0 + sc[b * d + j]) + sh[b * d + j];
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(shift) || self.requires(scale);
        let shape = self.shape(x).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::Modulate { x, shift, scale, out, tokens, d });
        }
        out
    }

    /// Gated residual: x + gate·branch, gate per sample broadcast over tokens.
    pub fn gate_add(&mut self, x: BufId, branch: BufId, gate: BufId, tokens: usize) -> BufId {
        let d = *self.shape(x).last().unwrap();
        let batch = self.rows(x) / tokens;
        let mut data = vec![0.0f32; self.data(x).len()];
        {
            let (xd, br, g) = (self.data(x), self.data(branch), self.data(gate));
            for b in 0..batch {
                for t in 0..tokens {
                    let r = (b * tokens + t) * d;
                    for j in 0..d {
                        data[r + j] = xd[r + j] + g[b * d + j] * br[r + j];
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(branch) || self.requires(gate);
        let shape = self.shape(x).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::GateAdd { x, branch, gate, out, tokens, d });
        }
        out
    }

    /// Add a learned positional table `[tokens, d]` to every sample block.
    pub fn add_position(&mut self, x: BufId, pos: BufId) -> BufId {
        let d = *self.shape(x).last().unwrap();
        let tokens = self.rows(pos);
        let batch = self.rows(x) / tokens;
        assert_eq!(batch * tokens * d, self.data(x).len());
        let mut data = self.data(x).to_vec();
        {
            let pd = self.data(pos);
            for b in 0..batch {
                for t in 0..tokens {
                    let r = (b * tokens + t) * d;
                    for j in 0..d {
                        data[r + j] += pd[t * d + j];
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(pos);
        let shape = self.shape(x).to_vec();
        let out = self.out(shape, data, rg);
        if rg {
            self.record(Op::AddPosition { x, pos, out, batch, tokens, d });
        }
        out
    }

    /// Concatenate two token blocks per sample: [B,ta,d] ++ [B,tb,d].
    pub fn concat_tokens(&mut self, a: BufId, b: BufId, batch: usize) -> BufId {
        let d = *self.shape(a).last().unwrap();
        let ta = self.rows(a) / batch;
        let tb = self.rows(b) / batch;
        let mut data = vec![0.0f32; self.data(a).len() + self.data(b).len()];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for s in 0..batch {
                let dst = s * (ta + tb) * d;
                data[dst..dst + ta * d].copy_from_slice(&ad[s * ta * d..(s + 1) * ta * d]);
                data[dst + ta * d..dst + (ta + tb) * d]
                    .copy_from_slice(&bd[s * tb * d..(s + 1) * tb * d]);
            }
        }
        let rg = self.requires(a) || self.requires(b);
        let out = self.out(vec![batch * (ta + tb), d], data, rg);
        if rg {
            self.record(Op::ConcatTokens { a, b, out, batch, ta, tb, d });
        }
        out
    }

    /// Take tokens [start, start+len) of each sample block.
    pub fn slice_tokens(&mut self, x: BufId, batch: usize, start: usize, len: usize) -> BufId {
        let d = *self.shape(x).last().unwrap();
        let t_total = self.rows(x) / batch;
        assert!(start + len <= t_total);
        let mut data = vec![0.0f32; batch * len * d];
        {
            let xd = self.data(x);
            for s in 0..batch {
                let src = (s * t_total + start) * d;
                data[s * len * d..(s + 1) * len * d].copy_from_slice(&xd[src..src + len * d]);
            }
        }
        let rg = self.requires(x);
        let out = self.out(vec![batch * len, d], data, rg);
        if rg {
            self.record(Op::SliceTokens { x, out, batch, t_total, start, len, d });
        }
        out
    }

    /// Take columns [start, start+len) of a 2-D buffer.
    pub fn slice_cols(&mut self, x: BufId, start: usize, len: usize) -> BufId {
        let cols = *self.shape(x).last().unwrap();
        let rows = self.rows(x);
        assert!(start + len <= cols);
        let mut data = vec![0.0f32; rows * len];
        {
            let xd = self.data(x);
            for r in 0..rows {
                data[r * len..(r + 1) * len]
                    .copy_from_slice(&xd[r * cols + start..r * cols + start + len]);
            }
        }
        let rg = self.requires(x);
        let out = self.out(vec![rows, len], data, rg);
        if rg {
            self.record(Op::SliceCols { x, out, cols, start, len });
        }
        out
    }

    /// Row lookup: out[r] = table[idx[r]].
    pub fn embed(&mut self, table: BufId, idx: Vec<usize>) -> Result<BufId> {
        let d = *self.shape(table).last().unwrap();
        let rows = self.rows(table);
        for &i in &idx {
            if i >= rows {
                return Err(UniteError::Index(format!(
                    "embedding index {i} out of range (table rows {rows})"
                )));
            }
        }
        let mut data = vec![0.0f32; idx.len() * d];
        {
            let td = self.data(table);
            for (r, &i) in idx.iter().enumerate() {
                data[r * d..(r + 1) * d].copy_from_slice(&td[i * d..(i + 1) * d]);
            }
        }
        let rg = self.requires(table);
        let out = self.out(vec![idx.len(), d], data, rg);
        if rg {
            self.record(Op::Embed { table, idx, out, d });
        }
        Ok(out)
    }

    /// Mean over the token axis of each sample block: [B*T, d] -> [B, d].
    pub fn mean_pool_tokens(&mut self, x: BufId, tokens: usize) -> BufId {
        let d = *self.shape(x).last().unwrap();
        let batch = self.rows(x) / tokens;
        let mut data = vec![0.0f32; batch * d];
        {
            let xd = self.data(x);
            for b in 0..batch {
                for t in 0..tokens {
                    let r = (b * tokens + t) * d;
                    for j in 0..d {
                        data[b * d + j] += xd[r + j];
                    }
                }
                for j in 0..d {
                    data[b * d + j] /= tokens as f32;
                }
            }
        }
        let rg = self.requires(x);
        let out = self.out(vec![batch, d], data, rg);
        if rg {
            self.record(Op::MeanPoolTokens { x, out, tokens, d });
        }
        out
    }

    pub fn mean_all(&mut self, x: BufId) -> BufId {
        let n = self.data(x).len() as f64;
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let rg = self.requires(x);
        let out = self.out(vec![1], vec![(s / n) as f32], rg);
        if rg {
            self.record(Op::MeanAll { x, out });
        }
        out
    }

    pub fn sum_all(&mut self, x: BufId) -> BufId {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let rg = self.requires(x);
        let out = self.out(vec![1], vec![s as f32], rg);
        if rg {
            self.record(Op::SumAll { x, out });
        }
        out
    }

    /// Mean squared error.
    pub fn mse(&mut self, a: BufId, b: BufId) -> BufId {
        assert_eq!(self.data(a).len(), self.data(b).len());
        let n = self.data(a).len() as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum();
        let rg = self.requires(a) || self.requires(b);
        let out = self.out(vec![1], vec![(s / n) as f32], rg);
        if rg {
            self.record(Op::Mse { a, b, out });
        }
        out
    }

    /// Mean absolute error.
    pub fn mae(&mut self, a: BufId, b: BufId) -> BufId {
        assert_eq!(self.data(a).len(), self.data(b).len());
        let n = self.data(a).len() as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| ((x - y) as f64).abs())
            .sum();
        let rg = self.requires(a) || self.requires(b);
        let out = self.out(vec![1], vec![(s / n) as f32], rg);
        if rg {
            self.record(Op::Mae { a, b, out });
        }
        out
    }

    /// Mean negative log-likelihood over rows of logits.
    pub fn cross_entropy(&mut self, logits: BufId, targets: Vec<usize>) -> Result<BufId> {
        let c = *self.shape(logits).last().unwrap();
        let rows = self.rows(logits);
        assert_eq!(rows, targets.len());
        for &t in &targets {
            if t >= c {
                return Err(UniteError::Index(format!("target {t} out of range ({c} classes)")));
            }
        }
        let mut probs = vec![0.0f32; rows * c];
        kn::softmax_rows(self.data(logits), &mut probs, c);
        let mut nll = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            nll -= (probs[r * c + t].max(1e-12) as f64).ln();
        }
        let rg = self.requires(logits);
        let out = self.out(vec![1], vec![(nll / rows as f64) as f32], rg);
        if rg {
            self.record(Op::CrossEntropy { logits, targets, out, probs });
        }
        Ok(out)
    }

    /// Forward identity whose backward contributes nothing to `x`.
    pub fn stop_gradient(&mut self, x: BufId) -> BufId {
        let t = Tensor::new(self.shape(x).to_vec(), self.data(x).to_vec());
        // requires_grad=false: no op is recorded, so no backward edge exists.
        self.push(t)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Freezes the tape.
    pub fn backward(&mut self, loss: BufId) -> Result<()> {
        if self.frozen {
            return Err(UniteError::State("backward on a frozen tape".into()));
        }
        if !self.recording {
            return Err(UniteError::State("backward on an inference tape".into()));
        }
        if self.bufs[loss.0].numel() != 1 {
            return Err(UniteError::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.bufs[loss.0].shape
            )));
        }
        self.frozen = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for oi in (0..self.ops.len()).rev() {
            self.backward_op(oi);
        }
        Ok(())
    }

    fn take_out_grad(&mut self, out: BufId) -> Option<Vec<f32>> {
        self.grads[out.0].take()
    }

    fn acc(&mut self, id: BufId, g: &[f32]) {
        if !self.requires(id) {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => kn::add_assign(existing, g),
            None => self.grads[id.0] = Some(g.to_vec()),
        }
    }

    fn acc_with(&mut self, id: BufId, n: usize, f: impl Fn(&mut [f32])) {
        if !self.requires(id) {
            return;
        }
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(vec![0.0; n]);
        }
        f(self.grads[id.0].as_mut().unwrap());
    }

    fn backward_op(&mut self, oi: usize) {
        // Ops are immutable during the sweep; take the output grad up front.
        let op = &self.ops[oi];
        let out = match op {
            Op::Matmul { out, .. }
            | Op::Linear { out, .. }
            | Op::AttentionQkv { out, .. }
            | Op::LnModulate { out, .. }
            | Op::BiasAdd { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::Lerp { out, .. }
            | Op::Gelu { out, .. }
            | Op::Silu { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::Attention { out, .. }
            | Op::Modulate { out, .. }
            | Op::GateAdd { out, .. }
            | Op::AddPosition { out, .. }
            | Op::ConcatTokens { out, .. }
            | Op::SliceTokens { out, .. }
            | Op::SliceCols { out, .. }
            | Op::Embed { out, .. }
            | Op::MeanPoolTokens { out, .. }
            | Op::MeanAll { out, .. }
            | Op::SumAll { out, .. }
            | Op::Mse { out, .. }
            | Op::Mae { out, .. }
            | Op::CrossEntropy { out, .. } => *out,
        };
        let dout = match self.take_out_grad(out) {
            Some(g) => g,
            None => return,
        };

        match &self.ops[oi] {
            &Op::Matmul { a, b, out: _, m, k, n } => {
                if self.requires(a) {
                    let mut da = vec![0.0; m * k];
                    kn::matmul_nt(&dout, self.data(b), &mut da, m, n, k);
                    self.acc(a, &da);
                }
                if self.requires(b) {
                    let mut db = vec![0.0; k * n];
                    kn::matmul_tn(self.data(a), &dout, &mut db, k, m, n);
                    self.acc(b, &db);
                }
            }
            &Op::Linear { x, w, b, out: _, m, k, n } => {
                if self.requires(x) {
                    let mut dxv = vec![0.0; m * k];
                    kn::matmul_nt(&dout, self.data(w), &mut dxv, m, n, k);
                    self.acc(x, &dxv);
                }
                if self.requires(w) {
                    let mut dw = vec![0.0; k * n];
                    kn::matmul_tn(self.data(x), &dout, &mut dw, k, m, n);
                    self.acc(w, &dw);
                }
                if let Some(b) = b {
                    if self.requires(b) {
                        self.acc_with(b, n, |g| kn::col_sum_into(&dout, g, n));
                    }
                }
            }
            Op::AttentionQkv { qkv, out: _, batch, tokens, heads, head_dim, probs } => {
                let qkv = *qkv;
                let (batch, tokens, heads, head_dim) = (*batch, *tokens, *heads, *head_dim);
                let probs = probs.clone();
                let n = self.data(qkv).len();
                let mut dq = vec![0.0f32; n];
                kn::attention_bwd_qkv(
                    self.data(qkv),
                    &probs,
                    &dout,
                    &mut dq,
                    batch,
                    tokens,
                    heads,
                    head_dim,
                );
                self.acc(qkv, &dq);
            }
            Op::LnModulate { x, shift, scale, out: _, tokens, d, cache } => {
                let (x, shift, scale, tokens, d) = (*x, *shift, *scale, *tokens, *d);
                let cache = cache.clone();
                let batch = self.rows(x) / tokens;
                let mut dx = vec![0.0f32; self.data(x).len()];
                let mut dsh = vec![0.0f32; batch * d];
                let mut dsc = vec![0.0f32; batch * d];
                kn::ln_modulate_bwd(
                    self.data(x),
                    self.data(scale),
                    &dout,
                    &cache,
                    &mut dx,
                    &mut dsh,
                    &mut dsc,
                    tokens,
                    d,
                );
                self.acc(x, &dx);
                self.acc(shift, &dsh);
                self.acc(scale, &dsc);
            }
            &Op::BiasAdd { x, bias, out: _, d } => {
                self.acc(x, &dout);
                self.acc_with(bias, d, |g| {
                    for row in dout.chunks(d) {
                        for (gv, &r) in g.iter_mut().zip(row.iter()) {
                            *gv += r;
                        }
                    }
                });
            }
            &Op::Add { a, b, .. } => {
                self.acc(a, &dout);
                self.acc(b, &dout);
            }
            &Op::Sub { a, b, .. } => {
                self.acc(a, &dout);
                let neg: Vec<f32> = dout.iter().map(|&v| -v).collect();
                self.acc(b, &neg);
            }
            &Op::Mul { a, b, .. } => {
                if self.requires(a) {
                    let da: Vec<f32> =
                        dout.iter().zip(self.data(b).iter()).map(|(&g, &y)| g * y).collect();
                    self.acc(a, &da);
                }
                if self.requires(b) {
                    let db: Vec<f32> =
                        dout.iter().zip(self.data(a).iter()).map(|(&g, &x)| g * x).collect();
                    self.acc(b, &db);
                }
            }
            &Op::Scale { x, c, .. } => {
                let dx: Vec<f32> = dout.iter().map(|&v| v * c).collect();
                self.acc(x, &dx);
            }
            Op::Lerp { a, b, w, rows_per_w, .. } => {
                let (a, b, rows_per_w) = (*a, *b, *rows_per_w);
                let w = w.clone();
                if self.requires(a) {
                    let mut da = dout.clone();
                    for (s, &wv) in w.iter().enumerate() {
                        da[s * rows_per_w..(s + 1) * rows_per_w]
                            .iter_mut()
                            .for_each(|v| *v *= wv);
                    }
                    self.acc(a, &da);
                }
                if self.requires(b) {
                    let mut db = dout.clone();
                    for (s, &wv) in w.iter().enumerate() {
                        db[s * rows_per_w..(s + 1) * rows_per_w]
                            .iter_mut()
                            .for_each(|v| *v *= 1.0 - wv);
                    }
                    self.acc(b, &db);
                }
            }
            &Op::Gelu { x, .. } => {
                let dx = kn::zip_ew(&dout, self.data(x), |g, v| g * kn::gelu_grad(v));
                self.acc(x, &dx);
            }
            &Op::Silu { x, .. } => {
                let dx = kn::zip_ew(&dout, self.data(x), |g, v| g * kn::silu_grad(v));
                self.acc(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, out: _, d, cache } => {
                let (x, gamma, beta, d) = (*x, *gamma, *beta, *d);
                let cache = cache.clone();
                let n = self.data(x).len();
                let mut dx = vec![0.0f32; n];
                let mut dg = gamma.map(|_| vec![0.0f32; d]);
                let mut db = beta.map(|_| vec![0.0f32; d]);
                {
                    let gdat = gamma.map(|g| self.data(g).to_vec());
                    kn::layer_norm_bwd(
                        self.data(x),
                        gdat.as_deref(),
                        &dout,
                        &cache,
                        &mut dx,
                        dg.as_deref_mut(),
                        db.as_deref_mut(),
                        d,
                    );
                }
                self.acc(x, &dx);
                if let (Some(g), Some(dgv)) = (gamma, dg) {
                    self.acc(g, &dgv);
                }
                if let (Some(b), Some(dbv)) = (beta, db) {
                    self.acc(b, &dbv);
                }
            }
            Op::Attention { q, k, v, out: _, batch, tokens, heads, head_dim, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let (batch, tokens, heads, head_dim) = (*batch, *tokens, *heads, *head_dim);
                let probs = probs.clone();
                let n = self.data(q).len();
                let mut dq = vec![0.0f32; n];
                let mut dk = vec![0.0f32; n];
                let mut dv = vec![0.0f32; n];
                kn::attention_bwd(
                    self.data(q),
                    self.data(k),
                    self.data(v),
                    &probs,
                    &dout,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                    batch,
                    tokens,
                    heads,
                    head_dim,
                );
                self.acc(q, &dq);
                self.acc(k, &dk);
                self.acc(v, &dv);
            }
            &Op::Modulate { x, shift, scale, out: _, tokens, d } => {
                let batch = self.rows(x) / tokens;
                if self.requires(x) {
                    let sc = self.data(scale).to_vec();
                    let mut dx = dout.clone();
                    for b in 0..batch {
                        for t in 0..tokens {
                            let r = (b * tokens + t) * d;
                            for j in 0..d {
                                dx[r + j] *= 1.0 + sc[b * d + j];
                            }
                        }
                    }
                    self.acc(x, &dx);
                }
                if self.requires(scale) {
                    let xd = self.data(x).to_vec();
                    let mut dsc = vec![0.0f32; batch * d];
                    for b in 0..batch {
                        for t in 0..tokens {
                            let r = (b * tokens + t) * d;
                            for j in 0..d {
                                dsc[b * d + j] += dout[r + j] * xd[r + j];
                            }
                        }
                    }
                    self.acc(scale, &dsc);
                }
                if self.requires(shift) {
                    let mut dsh = vec![0.0f32; batch * d];
                    for b in 0..batch {
                        for t in 0..tokens {
                            let r = (b * tokens + t) * d;
                            for j in 0..d {
                                dsh[b * d + j] += dout[r + j];
                            }
                        }
                    }
                    self.acc(shift, &dsh);
                }
            }
            &Op::GateAdd { x, branch, gate, out: _, tokens, d } => {
                let batch = self.rows(x) / tokens;
                self.acc(x, &dout);
                if self.requires(branch) {
                    let g = self.data(gate).to_vec();
                    let mut dbr = dout.clone();
                    for b in 0..batch {
                        for t in 0..tokens {
                            let r = (b * tokens + t) * d;
                            for j in 0..d {
                                dbr[r + j] *= g[b * d + j];
                            }
                        }
                    }
                    self.acc(branch, &dbr);
                }
                if self.requires(gate) {
                    let br = self.data(branch).to_vec();
                    let mut dg = vec![0.0f32; batch * d];
                    for b in 0..batch {
                        for t in 0..tokens {
                            let r = (b * tokens + t) * d;
                            for j in 0..d {
                                dg[b * d + j] += dout[r + j] * br[r + j];
                            }
                        }
                    }
                    self.acc(gate, &dg);
                }
            }
            &Op::AddPosition { x, pos, out: _, batch, tokens, d } => {
                self.acc(x, &dout);
                self.acc_with(pos, tokens * d, |g| {
                    for b in 0..batch {
                        for t in 0..tokens {
                            let r = (b * tokens + t) * d;
                            for j in 0..d {
                                g[t * d + j] += dout[r + j];
                            }
                        }
                    }
                });
            }
            &Op::ConcatTokens { a, b, out: _, batch, ta, tb, d } => {
                if self.requires(a) {
                    let mut da = vec![0.0f32; batch * ta * d];
                    for s in 0..batch {
                        let src = s * (ta + tb) * d;
                        da[s * ta * d..(s + 1) * ta * d]
                            .copy_from_slice(&dout[src..src + ta * d]);
                    }
                    self.acc(a, &da);
                }
                if self.requires(b) {
                    let mut db = vec![0.0f32; batch * tb * d];
                    for s in 0..batch {
                        let src = s * (ta + tb) * d + ta * d;
                        db[s * tb * d..(s + 1) * tb * d]
                            .copy_from_slice(&dout[src..src + tb * d]);
                    }
                    self.acc(b, &db);
                }
            }
            &Op::SliceTokens { x, out: _, batch, t_total, start, len, d } => {
                self.acc_with(x, batch * t_total * d, |g| {
                    for s in 0..batch {
                        let dst = (s * t_total + start) * d;
                        for (gv, &dv) in g[dst..dst + len * d]
                            .iter_mut()
                            .zip(dout[s * len * d..(s + 1) * len * d].iter())
                        {
                            *gv += dv;
                        }
                    }
                });
            }
            &Op::SliceCols { x, out: _, cols, start, len } => {
                let rows = dout.len() / len;
                self.acc_with(x, rows * cols, |g| {
                    for r in 0..rows {
                        for j in 0..len {
                            g[r * cols + start + j] += dout[r * len + j];
                        }
                    }
                });
            }
            Op::Embed { table, idx, out: _, d } => {
                let (table, d) = (*table, *d);
                let idx = idx.clone();
                let rows = self.rows(table);
                self.acc_with(table, rows * d, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            g[i * d + j] += dout[r * d + j];
                        }
                    }
                });
            }
            &Op::MeanPoolTokens { x, out: _, tokens, d } => {
                let batch = dout.len() / d;
                let inv = 1.0 / tokens as f32;
                self.acc_with(x, batch * tokens * d, |g| {
                    for b in 0..batch {
                        for t in 0..tokens {
                            let r = (b * tokens + t) * d;
                            for j in 0..d {
                                g[r + j] += dout[b * d + j] * inv;
                            }
                        }
                    }
                });
            }
            &Op::MeanAll { x, .. } => {
                let n = self.data(x).len();
                let gv = dout[0] / n as f32;
                self.acc_with(x, n, |g| g.iter_mut().for_each(|v| *v += gv));
            }
            &Op::SumAll { x, .. } => {
                let n = self.data(x).len();
                let gv = dout[0];
                self.acc_with(x, n, |g| g.iter_mut().for_each(|v| *v += gv));
            }
            &Op::Mse { a, b, .. } => {
                let n = self.data(a).len();
                let c = 2.0 * dout[0] / n as f32;
                let diff: Vec<f32> = self
                    .data(a)
                    .iter()
                    .zip(self.data(b).iter())
                    .map(|(&x, &y)| c * (x - y))
                    .collect();
                self.acc(a, &diff);
                let neg: Vec<f32> = diff.iter().map(|&v| -v).collect();
                self.acc(b, &neg);
            }
            &Op::Mae { a, b, .. } => {
                let n = self.data(a).len();
                let c = dout[0] / n as f32;
                let sg: Vec<f32> = self
                    .data(a)
                    .iter()
                    .zip(self.data(b).iter())
                    .map(|(&x, &y)| {
                        if x > y {
                            c
                        } else if x < y {
                            -c
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc(a, &sg);
                let neg: Vec<f32> = sg.iter().map(|&v| -v).collect();
                self.acc(b, &neg);
            }
            Op::CrossEntropy { logits, targets, out: _, probs } => {
                let logits = *logits;
                let rows = targets.len();
                let c = probs.len() / rows;
                let scale = dout[0] / rows as f32;
                let mut dl = vec![0.0f32; rows * c];
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * c + j] = scale * (probs[r * c + j] - onehot);
                    }
                }
                self.acc(logits, &dl);
            }
        }
    }

    /// Pull accumulated gradients into the parameter set: grad += d loss/d p.
    pub fn accumulate_param_grads(&self, ps: &mut ParamSet) {
        for (bi, pid) in self.param_of.iter().enumerate() {
            if let Some(pid) = pid {
                if let Some(g) = &self.grads[bi] {
                    let p = ps.get_mut(*pid);
                    for (pg, &gv) in p.grad.iter_mut().zip(g.iter()) {
                        *pg += gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::ParamTag;

    /// Central finite differences of `f` at `x0`, h = 1e-3 on 32-bit values.
    fn finite_diff(f: &dyn Fn(&[f32]) -> f32, x0: &[f32], h: f32) -> Vec<f32> {
        let mut g = vec![0.0f32; x0.len()];
        let mut x = x0.to_vec();
        for i in 0..x0.len() {
            x[i] = x0[i] + h;
            let fp = f(&x);
            x[i] = x0[i] - h;
            let fm = f(&x);
            x[i] = x0[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn assert_close_grads(ad: &[f32], fd: &[f32], what: &str) {
        // rtol 1e-3 with an atol at the f32 central-difference noise floor
        // (eps_f32 * |loss| / 2h ~ 1e-4 for h = 1e-3 and loss of order one).
        for (i, (&a, &f)) in ad.iter().zip(fd.iter()).enumerate() {
            let tol = 1e-3 * a.abs().max(f.abs()) + 2.5e-4;
            assert!(
                (a - f).abs() < tol,
                "{what}[{i}]: autodiff {a} vs fd {f} (|diff| {} > tol {tol})",
                (a - f).abs()
            );
        }
    }

    /// Check d(scalar_fn)/dx against finite differences for an op graph.
    fn grad_check(what: &str, x0: &[f32], build: &dyn Fn(&mut Tape, BufId) -> BufId) {
        let eval = |x: &[f32]| {
            let mut t = Tape::inference();
            let xb = t.input(Tensor::new(vec![x.len()], x.to_vec()));
            let out = build(&mut t, xb);
            t.data(out)[0]
        };
        let fd = finite_diff(&eval, x0, 1e-3);

        let mut t = Tape::recording();
        let xb = t.leaf(Tensor::new(vec![x0.len()], x0.to_vec()));
        let out = build(&mut t, xb);
        t.backward(out).unwrap();
        let ad = t.grad(xb).expect("gradient flowed").to_vec();
        assert_close_grads(&ad, &fd, what);
    }

    #[test]
    fn grad_linear_form() {
        // loss = sum(w ⊙ x) with fixed x -> grad(w) = x
        let x = vec![0.5, -1.5, 2.0];
        grad_check("linear", &[1.0, 2.0, 3.0], &|t, w| {
            let xb = t.input(Tensor::new(vec![3], x.clone()));
            let prod = t.mul(w, xb);
            t.sum_all(prod)
        });
        // direct identity
        let mut t = Tape::recording();
        let w = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let xb = t.input(Tensor::new(vec![3], x.clone()));
        let prod = t.mul(w, xb);
        let loss = t.sum_all(prod);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &x[..]);
    }

    #[test]
    fn grad_disconnected_is_none() {
        let mut t = Tape::recording();
        let w = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = t.leaf(Tensor::new(vec![2], vec![3.0, 4.0]));
        let loss = t.sum_all(y);
        t.backward(loss).unwrap();
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn backward_twice_is_state_error() {
        let mut t = Tape::recording();
        let w = t.leaf(Tensor::new(vec![1], vec![2.0]));
        let loss = t.sum_all(w);
        t.backward(loss).unwrap();
        let err = t.backward(loss).unwrap_err();
        assert!(matches!(err, UniteError::State(_)));
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut t = Tape::inference();
        let a = t.input(Tensor::zeros(vec![2, 3]));
        let b = t.input(Tensor::zeros(vec![4, 2]));
        match t.matmul(a, b) {
            Err(UniteError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn stop_gradient_is_forward_identity_and_backward_annihilator() {
        let mut rng = RngStream::from_seed(3);
        let xv = rng.normal_vec(6);
        let yv = rng.normal_vec(6);

        let mut t = Tape::recording();
        let x = t.leaf(Tensor::new(vec![6], xv.clone()));
        let y = t.leaf(Tensor::new(vec![6], yv.clone()));
        let sx = t.stop_gradient(x);
        // bit-identical forward
        assert_eq!(t.data(sx), &xv[..]);

        let prod = t.mul(sx, y);
        let loss = t.sum_all(prod);
        t.backward(loss).unwrap();
        // d/dx = 0 (no edge), d/dy = x
        assert!(t.grad(x).is_none());
        let gy = t.grad(y).unwrap().to_vec();
        assert_close_grads(&gy, &xv, "dy");

        // and d/dy matches finite differences
        let fd = finite_diff(
            &|y: &[f32]| {
                let mut t = Tape::inference();
                let xb = t.input(Tensor::new(vec![6], xv.clone()));
                let yb = t.input(Tensor::new(vec![6], y.to_vec()));
                let sx = t.stop_gradient(xb);
                let prod = t.mul(sx, yb);
                let out = t.sum_all(prod);
                t.data(out)[0]
            },
            &yv,
            1e-3,
        );
        assert_close_grads(&gy, &fd, "dy-vs-fd");
    }

    #[test]
    fn grad_matmul_bias_gelu_chain() {
        let mut rng = RngStream::from_seed(7);
        let w = rng.normal_vec(12); // 4x3
        let b = rng.normal_vec(3);
        let x0 = rng.normal_vec(8); // 2x4
        grad_check("mm-chain", &x0, &|t, x| {
            t.bufs[x.0].shape = vec![2, 4];
            let wb = t.input(Tensor::new(vec![4, 3], w.clone()));
            let bb = t.input(Tensor::new(vec![3], b.clone()));
            let y = t.linear(x, wb, bb).unwrap();
            let y = t.gelu(y);
            t.mean_all(y)
        });
    }

    #[test]
    fn grad_layer_norm_affine() {
        let mut rng = RngStream::from_seed(11);
        let x0 = rng.normal_vec(12);
        let g = rng.normal_vec(4);
        let b = rng.normal_vec(4);
        grad_check("layer_norm-x", &x0, &|t, x| {
            t.bufs[x.0].shape = vec![3, 4];
            let gb = t.input(Tensor::new(vec![4], g.clone()));
            let bb = t.input(Tensor::new(vec![4], b.clone()));
            let y = t.layer_norm(x, Some(gb), Some(bb), 1e-5).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        // gamma/beta gradients
        let x = rng.normal_vec(12);
        grad_check("layer_norm-gamma", &g, &|t, gb| {
            let xb = t.input(Tensor::new(vec![3, 4], x.clone()));
            let bb = t.input(Tensor::new(vec![4], b.clone()));
            let y = t.layer_norm(xb, Some(gb), Some(bb), 1e-5).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn grad_attention() {
        let mut rng = RngStream::from_seed(13);
        // batch 2, tokens 3, heads 2, head_dim 2 -> d=4
        let n = 2 * 3 * 4;
        let k = rng.normal_vec(n);
        let v = rng.normal_vec(n);
        let q0 = rng.normal_vec(n);
        grad_check("attention-q", &q0, &|t, q| {
            t.bufs[q.0].shape = vec![6, 4];
            let kb = t.input(Tensor::new(vec![6, 4], k.clone()));
            let vb = t.input(Tensor::new(vec![6, 4], v.clone()));
            let y = t.attention(q, kb, vb, 2, 3, 2).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        let q = rng.normal_vec(n);
        let k0 = rng.normal_vec(n);
        grad_check("attention-k", &k0, &|t, kb| {
            t.bufs[kb.0].shape = vec![6, 4];
            let qb = t.input(Tensor::new(vec![6, 4], q.clone()));
            let vb = t.input(Tensor::new(vec![6, 4], v.clone()));
            let y = t.attention(qb, kb, vb, 2, 3, 2).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        let v0 = rng.normal_vec(n);
        grad_check("attention-v", &v0, &|t, vb| {
            t.bufs[vb.0].shape = vec![6, 4];
            let qb = t.input(Tensor::new(vec![6, 4], q.clone()));
            let kb = t.input(Tensor::new(vec![6, 4], k.clone()));
            let y = t.attention(qb, kb, vb, 2, 3, 2).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn grad_modulate_gate_position_slices() {
        let mut rng = RngStream::from_seed(17);
        // x: [2 samples * 2 tokens, 3]
        let x0 = rng.normal_vec(12);
        let sh = rng.normal_vec(6);
        let sc = rng.normal_vec(6);
        grad_check("modulate-x", &x0, &|t, x| {
            t.bufs[x.0].shape = vec![4, 3];
            let shb = t.input(Tensor::new(vec![2, 3], sh.clone()));
            let scb = t.input(Tensor::new(vec![2, 3], sc.clone()));
            let y = t.modulate(x, shb, scb, 2);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        grad_check("modulate-scale", &sc, &|t, scb| {
            t.bufs[scb.0].shape = vec![2, 3];
            let xb = t.input(Tensor::new(vec![4, 3], x0.clone()));
            let shb = t.input(Tensor::new(vec![2, 3], sh.clone()));
            let y = t.modulate(xb, shb, scb, 2);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        let br = rng.normal_vec(12);
        let gt0 = rng.normal_vec(6);
        grad_check("gate", &gt0, &|t, g| {
            t.bufs[g.0].shape = vec![2, 3];
            let xb = t.input(Tensor::new(vec![4, 3], x0.clone()));
            let bb = t.input(Tensor::new(vec![4, 3], br.clone()));
            let y = t.gate_add(xb, bb, g, 2);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        let pos0 = rng.normal_vec(6);
        grad_check("pos", &pos0, &|t, p| {
            t.bufs[p.0].shape = vec![2, 3];
            let xb = t.input(Tensor::new(vec![4, 3], x0.clone()));
            let y = t.add_position(xb, p);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        // concat + slice roundtrip gradient
        grad_check("concat-slice", &x0, &|t, x| {
            t.bufs[x.0].shape = vec![4, 3];
            let other = t.input(Tensor::new(vec![2, 3], pos0.clone()));
            let cat = t.concat_tokens(x, other, 2); // per sample: 2 + 1 tokens
            let back = t.slice_tokens(cat, 2, 0, 2);
            let sq = t.mul(back, back);
            t.mean_all(sq)
        });
        // slice_cols
        grad_check("slice-cols", &x0, &|t, x| {
            t.bufs[x.0].shape = vec![4, 3];
            let c = t.slice_cols(x, 1, 2);
            let sq = t.mul(c, c);
            t.mean_all(sq)
        });
    }

    #[test]
    fn grad_losses_and_embed() {
        let mut rng = RngStream::from_seed(19);
        let a0 = rng.normal_vec(8);
        let b0: Vec<f32> = rng.normal_vec(8).iter().map(|v| v + 0.3).collect();
        grad_check("mse", &a0, &|t, a| {
            let bb = t.input(Tensor::new(vec![8], b0.clone()));
            t.mse(a, bb)
        });
        grad_check("mae", &a0, &|t, a| {
            let bb = t.input(Tensor::new(vec![8], b0.clone()));
            t.mae(a, bb)
        });
        let logits0 = rng.normal_vec(6);
        grad_check("ce", &logits0, &|t, l| {
            t.bufs[l.0].shape = vec![2, 3];
            t.cross_entropy(l, vec![0, 2]).unwrap()
        });
        let table0 = rng.normal_vec(6);
        grad_check("embed", &table0, &|t, tb| {
            t.bufs[tb.0].shape = vec![3, 2];
            let e = t.embed(tb, vec![2, 0, 2]).unwrap();
            let sq = t.mul(e, e);
            t.mean_all(sq)
        });
        grad_check("mean-pool", &a0, &|t, x| {
            t.bufs[x.0].shape = vec![4, 2];
            let p = t.mean_pool_tokens(x, 2);
            let sq = t.mul(p, p);
            t.mean_all(sq)
        });
        grad_check("lerp", &a0, &|t, a| {
            t.bufs[a.0].shape = vec![8, 1];
            let bb = t.input(Tensor::new(vec![8, 1], b0.clone()));
            let y = t.lerp(a, bb, vec![0.3, 0.8], 4);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        grad_check("silu", &a0, &|t, x| {
            let y = t.silu(x);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn grad_fused_linear_attention_lnmod() {
        let mut rng = RngStream::from_seed(29);
        // fused linear: x, w, b gradients
        let w = rng.normal_vec(12); // 4x3
        let b = rng.normal_vec(3);
        let x0 = rng.normal_vec(8); // 2x4
        grad_check("linear-x", &x0, &|t, x| {
            t.bufs[x.0].shape = vec![2, 4];
            let wb = t.input(Tensor::new(vec![4, 3], w.clone()));
            let bb = t.input(Tensor::new(vec![3], b.clone()));
            let y = t.linear(x, wb, bb).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        grad_check("linear-w", &w, &|t, wb| {
            t.bufs[wb.0].shape = vec![4, 3];
            let xb = t.input(Tensor::new(vec![2, 4], x0.clone()));
            let bb = t.input(Tensor::new(vec![3], b.clone()));
            let y = t.linear(xb, wb, bb).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        grad_check("linear-b", &b, &|t, bb| {
            let xb = t.input(Tensor::new(vec![2, 4], x0.clone()));
            let wb = t.input(Tensor::new(vec![4, 3], w.clone()));
            let y = t.linear(xb, wb, bb).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });

        // fused qkv attention: batch 2, tokens 3, heads 2, d=4 -> qkv cols 12
        let qkv0 = rng.normal_vec(6 * 12);
        grad_check("attention-qkv", &qkv0, &|t, q| {
            t.bufs[q.0].shape = vec![6, 12];
            let y = t.attention_qkv(q, 2, 3, 2).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });

        // fused ln+modulate
        let x1 = rng.normal_vec(12); // 2 samples x 2 tokens x 3
        let sh = rng.normal_vec(6);
        let sc = rng.normal_vec(6);
        grad_check("lnmod-x", &x1, &|t, x| {
            t.bufs[x.0].shape = vec![4, 3];
            let shb = t.input(Tensor::new(vec![2, 3], sh.clone()));
            let scb = t.input(Tensor::new(vec![2, 3], sc.clone()));
            let y = t.ln_modulate(x, shb, scb, 2, 1e-5).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        grad_check("lnmod-shift", &sh, &|t, shb| {
            t.bufs[shb.0].shape = vec![2, 3];
            let xb = t.input(Tensor::new(vec![4, 3], x1.clone()));
            let scb = t.input(Tensor::new(vec![2, 3], sc.clone()));
            let y = t.ln_modulate(xb, shb, scb, 2, 1e-5).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        grad_check("lnmod-scale", &sc, &|t, scb| {
            t.bufs[scb.0].shape = vec![2, 3];
            let xb = t.input(Tensor::new(vec![4, 3], x1.clone()));
            let shb = t.input(Tensor::new(vec![2, 3], sh.clone()));
            let y = t.ln_modulate(xb, shb, scb, 2, 1e-5).unwrap();
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });

        // fused attention agrees with the separate-buffer op
        let mut t = Tape::inference();
        let qkv = t.input(Tensor::new(vec![6, 12], qkv0.clone()));
        let fused = t.attention_qkv(qkv, 2, 3, 2).unwrap();
        let q = t.slice_cols(qkv, 0, 4);
        let k = t.slice_cols(qkv, 4, 4);
        let v = t.slice_cols(qkv, 8, 4);
        let sep = t.attention(q, k, v, 2, 3, 2).unwrap();
        assert_eq!(t.data(fused), t.data(sep));

        // fused linear agrees with matmul + bias_add
        let mut t = Tape::inference();
        let xb = t.input(Tensor::new(vec![2, 4], x0.clone()));
        let wb = t.input(Tensor::new(vec![4, 3], w.clone()));
        let bb = t.input(Tensor::new(vec![3], b.clone()));
        let f = t.linear(xb, wb, bb).unwrap();
        let mm = t.matmul(xb, wb).unwrap();
        let s = t.bias_add(mm, bb);
        // bias is folded in before accumulation, so rounding may differ in
        // the last bit
        for (a, b) in t.data(f).iter().zip(t.data(s).iter()) {
            assert!((a - b).abs() < 1e-6);
        }

        // fused ln_modulate agrees with layer_norm + modulate
        let mut t = Tape::inference();
        let xb = t.input(Tensor::new(vec![4, 3], x1.clone()));
        let shb = t.input(Tensor::new(vec![2, 3], sh.clone()));
        let scb = t.input(Tensor::new(vec![2, 3], sc.clone()));
        let f = t.ln_modulate(xb, shb, scb, 2, 1e-5).unwrap();
        let ln = t.layer_norm(xb, None, None, 1e-5).unwrap();
        let m = t.modulate(ln, shb, scb, 2);
        for (a, b) in t.data(f).iter().zip(t.data(m).iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn weight_sharing_accumulates_grads_through_one_buffer() {
        // Using one parameter in two passes must sum both contributions.
        let mut ps = ParamSet::new();
        let w = ps.add("w", ParamTag::Mlp, Tensor::new(vec![2], vec![1.0, 2.0]));

        let mut t = Tape::recording();
        let wb1 = t.param(&ps, w);
        let wb2 = t.param(&ps, w);
        assert_eq!(wb1, wb2);
        let s1 = t.sum_all(wb1);
        let s2 = t.sum_all(wb2);
        let tot = t.add(s1, s2);
        t.backward(tot).unwrap();
        t.accumulate_param_grads(&mut ps);
        assert_eq!(ps.get(w).grad, vec![2.0, 2.0]);
    }

    #[test]
    fn inference_tape_matches_recording_tape_bitwise() {
        let mut rng = RngStream::from_seed(23);
        let x = rng.normal_vec(12);
        let w = rng.normal_vec(12);
        let run = |recording: bool| -> Vec<f32> {
            let mut t = if recording { Tape::recording() } else { Tape::inference() };
            let xb = t.input(Tensor::new(vec![3, 4], x.clone()));
            let wb = t.leaf(Tensor::new(vec![4, 3], w.clone()));
            let y = t.matmul(xb, wb).unwrap();
            let y = t.gelu(y);
            let y = t.layer_norm(y, None, None, 1e-5).unwrap();
            t.data(y).to_vec()
        };
        assert_eq!(run(true), run(false));
    }
}
