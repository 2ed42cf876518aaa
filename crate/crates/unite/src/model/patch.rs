//! Image <-> patch-token layout changes.
//!
//! A `[C, H, W]` image becomes `[(H/P)·(W/P), C·P²]` rows: patch i is the
//! i-th patch in raster order, flattened channel-major then row-major.

use crate::error::{Result, UniteError};
use crate::tensor::Tensor;

pub fn patchify(img: &Tensor, p: usize) -> Result<Tensor> {
    let (c, h, w) = match img.shape.as_slice() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(UniteError::ShapeMismatch {
                context: "patchify expects [C,H,W]",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    if h % p != 0 || w % p != 0 {
        return Err(UniteError::Config(format!(
            "image {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0f32; gh * gw * c * p * p];
    for pr in 0..gh {
        for pc in 0..gw {
            let row = (pr * gw + pc) * c * p * p;
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        out[row + ch * p * p + y * p + x] =
                            img.data[ch * h * w + (pr * p + y) * w + pc * p + x];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, c * p * p], out))
}

pub fn unpatchify(rows: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let (gh, gw) = (h / p, w / p);
    if rows.shape != vec![gh * gw, c * p * p] {
        return Err(UniteError::ShapeMismatch {
            context: "unpatchify",
            lhs: rows.shape.clone(),
            rhs: vec![gh * gw, c * p * p],
        });
    }
    let mut out = vec![0.0f32; c * h * w];
    for pr in 0..gh {
        for pc in 0..gw {
            let row = (pr * gw + pc) * c * p * p;
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        out[ch * h * w + (pr * p + y) * w + pc * p + x] =
                            rows.data[row + ch * p * p + y * p + x];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, h, w], out))
}

/// Stack per-image patch rows into one `[B·Np, C·P²]` tensor.
pub fn patchify_batch(imgs: &[&Tensor], p: usize) -> Result<Tensor> {
    assert!(!imgs.is_empty());
    let mut rows: Option<Tensor> = None;
    let mut data = Vec::new();
    for img in imgs {
        let r = patchify(img, p)?;
        if let Some(first) = &rows {
            assert_eq!(first.shape, r.shape, "mixed image sizes in one batch");
        } else {
            rows = Some(r.clone());
        }
        data.extend_from_slice(&r.data);
    }
    let shape = rows.unwrap().shape;
    Ok(Tensor::new(vec![imgs.len() * shape[0], shape[1]], data))
}
