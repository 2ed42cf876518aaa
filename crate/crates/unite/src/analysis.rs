//! Analysis instruments: representation alignment between the tokenization
//! and denoising pathways (linear CKA, mutual-kNN CKNNA, final-latent
//! cosine), denoising-trajectory decoding with PSNR, and per-tensor
//! histogram-entropy description-length reports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::eval::psnr;
use crate::error::{Result, UniteError};
use crate::flow::{corrupt, NoiseLevel};
use crate::model::Model;
use crate::rng::RngStream;
use crate::tensor::{ParamSet, ParamTag, Tensor};

// ── Representation similarity ────────────────────────────────────────

fn center_columns(x: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (n, p) = match x.shape.as_slice() {
        [n, p] => (*n, *p),
        other => {
            return Err(UniteError::ShapeMismatch {
                context: "similarity input must be [N, features]",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    if n < 2 {
        return Err(UniteError::Config("similarity needs N >= 2 rows".into()));
    }
    let mut mu = vec![0.0f64; p];
    for row in x.data.chunks(p) {
        for (m, &v) in mu.iter_mut().zip(row.iter()) {
            *m += v as f64;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = vec![0.0f64; n * p];
    for (i, row) in x.data.chunks(p).enumerate() {
        for j in 0..p {
            out[i * p + j] = row[j] as f64 - mu[j];
        }
    }
    Ok((out, n, p))
}

/// Linear centered kernel alignment between `[N,p]` and `[N,q]`:
/// ‖XcᵀYc‖²_F / (‖XcᵀXc‖_F · ‖YcᵀYc‖_F) with column-centered features.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (xc, n, p) = center_columns(x)?;
    let (yc, ny, q) = center_columns(y)?;
    if n != ny {
        return Err(UniteError::ShapeMismatch {
            context: "linear_cka row counts",
            lhs: x.shape.clone(),
            rhs: y.shape.clone(),
        });
    }
    // cross = XcᵀYc [p,q]; selfx = XcᵀXc; selfy = YcᵀYc
    let mut cross = 0.0f64;
    for a in 0..p {
        for b in 0..q {
            let mut s = 0.0f64;
            for i in 0..n {
                s += xc[i * p + a] * yc[i * q + b];
            }
            cross += s * s;
        }
    }
    let self_norm = |m: &[f64], cols: usize| -> f64 {
        let mut acc = 0.0f64;
        for a in 0..cols {
            for b in 0..cols {
                let mut s = 0.0f64;
                for i in 0..n {
                    s += m[i * cols + a] * m[i * cols + b];
                }
                acc += s * s;
            }
        }
        acc.sqrt()
    };
    let nx = self_norm(&xc, p);
    let nyv = self_norm(&yc, q);
    if nx == 0.0 || nyv == 0.0 {
        return Err(UniteError::Numeric(
            "similarity undefined: zero-variance input (all rows identical)".into(),
        ));
    }
    Ok(cross / (nx * nyv))
}

fn gram(xc: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut g = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0f64;
            for a in 0..p {
                s += xc[i * p + a] * xc[j * p + a];
            }
            g[i * n + j] = s;
            g[j * n + i] = s;
        }
    }
    g
}

/// Row-wise k nearest neighbors by Gram similarity (ties broken by index).
fn knn_sets(g: &[f64], n: usize, k: usize) -> Vec<Vec<bool>> {
    let mut nn = vec![vec![false; n]; n];
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            g[i * n + b]
                .partial_cmp(&g[i * n + a])
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            nn[i][j] = true;
        }
    }
    nn
}

/// CKA restricted to mutual-kNN structure. The mask keeps the diagonal and
/// every off-diagonal pair (i,j) that is a symmetrized kNN pair in *both*
/// spaces: (j ∈ knn_x(i) or i ∈ knn_x(j)) and (j ∈ knn_y(i) or i ∈ knn_y(j)).
/// Masked Gram entries are zeroed before the CKA ratio. At k = N−1 the mask
/// is all ones and the value coincides with `linear_cka`.
pub fn cknna(x: &Tensor, y: &Tensor, k: usize) -> Result<f64> {
    let (xc, n, p) = center_columns(x)?;
    let (yc, ny, q) = center_columns(y)?;
    if n != ny {
        return Err(UniteError::ShapeMismatch {
            context: "cknna row counts",
            lhs: x.shape.clone(),
            rhs: y.shape.clone(),
        });
    }
    if k == 0 || k >= n {
        return Err(UniteError::Config(format!("cknna needs 1 <= k < N (k={k}, N={n})")));
    }
    let gx = gram(&xc, n, p);
    let gy = gram(&yc, n, q);
    let nnx = knn_sets(&gx, n, k);
    let nny = knn_sets(&gy, n, k);

    let (mut dot, mut nx2, mut ny2) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in 0..n {
            let keep = i == j
                || ((nnx[i][j] || nnx[j][i]) && (nny[i][j] || nny[j][i]));
            if keep {
                dot += gx[i * n + j] * gy[i * n + j];
                nx2 += gx[i * n + j] * gx[i * n + j];
                ny2 += gy[i * n + j] * gy[i * n + j];
            }
        }
    }
    if nx2 == 0.0 || ny2 == 0.0 {
        return Err(UniteError::Numeric(
            "similarity undefined: zero-variance input under the mask".into(),
        ));
    }
    Ok(dot / (nx2.sqrt() * ny2.sqrt()))
}

/// Mean cosine similarity between matching rows of `[N,d]` tensors.
pub fn mean_row_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(UniteError::ShapeMismatch {
            context: "mean_row_cosine",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let d = *a.shape.last().unwrap();
    let mut acc = 0.0f64;
    let mut rows = 0usize;
    for (ra, rb) in a.data.chunks(d).zip(b.data.chunks(d)) {
        let dot: f64 = ra.iter().zip(rb.iter()).map(|(&x, &y)| (x as f64) * (y as f64)).sum();
        let na: f64 = ra.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = rb.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if na > 0.0 && nb > 0.0 {
            acc += dot / (na * nb);
            rows += 1;
        }
    }
    Ok(acc / rows.max(1) as f64)
}

// ── Pathway alignment protocol ───────────────────────────────────────

/// One measurement: per-layer similarity at one noise level, or the
/// final-latent cosine. Rows serialize to JSONL and the flat CSV
/// (layer, t, metric, value).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub layer: usize,
    pub t: f32,
    pub metric: String,
    pub value: f64,
}

/// Capture points: 0 = embedding stage, 1..=L = block outputs, L+1 = final
/// norm output. Register-token positions only; rows are samples × K.
pub fn pathway_alignment(
    model: &Model,
    images: &[&Tensor],
    t_list: &[f32],
    cknna_k: Option<usize>,
    rng: &mut RngStream,
) -> Result<Vec<AlignmentRow>> {
    let (k, d) = (model.cfg.registers, model.cfg.latent_dim);
    let noise = Tensor::randn(vec![images.len() * k, d], rng);
    let (z0, tok_trace) = model.tokenize_traced(images, &noise)?;

    let mut rows = Vec::new();
    for &t in t_list {
        let eps = Tensor::randn(vec![images.len() * k, d], rng);
        let z_t = corrupt(&z0, &eps, NoiseLevel::new(t))?;
        let tvec = vec![t; images.len()];
        let labels = vec![None; images.len()];
        let (zhat, den_trace) = model.denoise_traced(&z_t, &tvec, &labels)?;

        assert_eq!(tok_trace.len(), den_trace.len());
        for (layer, (a, b)) in tok_trace.iter().zip(den_trace.iter()).enumerate() {
            rows.push(AlignmentRow {
                layer,
                t,
                metric: "cka".into(),
                value: linear_cka(a, b)?,
            });
            if let Some(kk) = cknna_k {
                let n = a.shape[0];
                let kk = kk.min(n - 1).max(1);
                rows.push(AlignmentRow {
                    layer,
                    t,
                    metric: "cknna".into(),
                    value: cknna(a, b, kk)?,
                });
            }
        }
        rows.push(AlignmentRow {
            layer: tok_trace.len() - 1,
            t,
            metric: "cosine".into(),
            value: mean_row_cosine(&zhat, &z0)?,
        });
    }
    Ok(rows)
}

/// Mean final-latent cosine between denoised predictions and clean latents
/// at one noise level (unconditional denoising).
pub fn final_latent_cosine(
    model: &Model,
    images: &[&Tensor],
    t: f32,
    rng: &mut RngStream,
) -> Result<f64> {
    let (k, d) = (model.cfg.registers, model.cfg.latent_dim);
    let noise = Tensor::randn(vec![images.len() * k, d], rng);
    let z0 = model.tokenize_with_noise(images, &noise)?;
    let eps = Tensor::randn(vec![images.len() * k, d], rng);
    let z_t = corrupt(&z0, &eps, NoiseLevel::new(t))?;
    let zhat = model.denoise(&z_t, &vec![t; images.len()], &vec![None; images.len()])?;
    mean_row_cosine(&zhat, &z0)
}

// ── Trajectory decoding ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    /// None marks the direct decode of the clean latents.
    pub t: Option<f32>,
    pub psnr_mean: f64,
    pub decoded: Vec<Tensor>,
}

/// Corrupt the encoded latents at each level, denoise once, decode, and
/// report PSNR against the inputs. The final entry decodes z0 directly.
pub fn trajectory_decode(
    model: &Model,
    images: &[&Tensor],
    labels: &[Option<usize>],
    t_list: &[f32],
    rng: &mut RngStream,
) -> Result<Vec<TrajectoryPoint>> {
    let (k, d) = (model.cfg.registers, model.cfg.latent_dim);
    let noise = Tensor::randn(vec![images.len() * k, d], rng);
    let z0 = model.tokenize_with_noise(images, &noise)?;

    let mut points = Vec::with_capacity(t_list.len() + 1);
    for &t in t_list {
        let eps = Tensor::randn(vec![images.len() * k, d], rng);
        let z_t = corrupt(&z0, &eps, NoiseLevel::new(t))?;
        let zhat = model.denoise(&z_t, &vec![t; images.len()], labels)?;
        let decoded = model.decode(&zhat)?;
        let mean = decoded
            .iter()
            .zip(images.iter())
            .map(|(a, b)| psnr(a, b))
            .sum::<f64>()
            / images.len() as f64;
        points.push(TrajectoryPoint { t: Some(t), psnr_mean: mean, decoded });
    }
    let decoded = model.decode(&z0)?;
    let mean = decoded
        .iter()
        .zip(images.iter())
        .map(|(a, b)| psnr(a, b))
        .sum::<f64>()
        / images.len() as f64;
    points.push(TrajectoryPoint { t: None, psnr_mean: mean, decoded });
    Ok(points)
}

// ── Entropy / description length ─────────────────────────────────────

/// Histogram entropy in bits per element over `bins` equal-width cells
/// spanning the tensor's own [min, max]. Constant tensors are 0 bits.
pub fn tensor_entropy(values: &[f32], bins: usize) -> f64 {
    assert!(bins >= 2, "need at least 2 bins");
    assert!(!values.is_empty(), "entropy of an empty tensor");
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo >= hi {
        return 0.0;
    }
    let width = (hi - lo) as f64 / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = (((v - lo) as f64 / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    let mut h = 0.0f64;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntropyRow {
    pub name: String,
    pub tag: String,
    pub count: usize,
    pub bits_per_element: f64,
    pub bytes: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyReport {
    pub bins: usize,
    pub per_tensor: Vec<TensorEntropyRow>,
    pub group_norm_bytes: f64,
    pub group_attention_mlp_bytes: f64,
    pub group_embedding_projection_bytes: f64,
    pub total_bytes: f64,
}

/// Histogram-entropy description length of every parameter, grouped by tag.
/// The grand total is the sum of the three group totals by construction.
pub fn model_description_length(params: &ParamSet, bins: usize) -> EntropyReport {
    let mut per_tensor = Vec::with_capacity(params.len());
    let (mut norm, mut attn_mlp, mut embed_proj) = (0.0f64, 0.0f64, 0.0f64);
    for p in params.iter() {
        let bits = tensor_entropy(&p.value.data, bins);
        let bytes = p.value.numel() as f64 * bits / 8.0;
        match p.tag {
            ParamTag::Norm => norm += bytes,
            ParamTag::Attention | ParamTag::Mlp => attn_mlp += bytes,
            ParamTag::Embedding | ParamTag::Projection => embed_proj += bytes,
        }
        per_tensor.push(TensorEntropyRow {
            name: p.name.clone(),
            tag: p.tag.as_str().into(),
            count: p.value.numel(),
            bits_per_element: bits,
            bytes,
        });
    }
    EntropyReport {
        bins,
        per_tensor,
        group_norm_bytes: norm,
        group_attention_mlp_bytes: attn_mlp,
        group_embedding_projection_bytes: embed_proj,
        total_bytes: norm + attn_mlp + embed_proj,
    }
}

// ── Report writers ───────────────────────────────────────────────────

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        let line =
            serde_json::to_string(r).map_err(|e| UniteError::Format(format!("jsonl: {e}")))?;
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// Flat CSV: layer, t, metric, value.
pub fn write_alignment_csv(path: impl AsRef<Path>, rows: &[AlignmentRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "layer,t,metric,value")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.layer, r.t, r.metric, r.value)?;
    }
    f.flush()?;
    Ok(())
}
