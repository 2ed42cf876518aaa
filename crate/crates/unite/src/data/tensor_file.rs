//! Binary tensor file format.
//!
//! Layout (all little-endian):
//!   magic   4 bytes  "UNTE"
//!   version u16      currently 1
//!   dtype   u8       0 = f32
//!   ndim    u8
//!   dims    ndim × u32
//!   payload row-major f32
//!
//! Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, UniteError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UNTE";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn write_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    if t.shape.len() > u8::MAX as usize {
        return Err(UniteError::Format(format!("too many dims: {}", t.shape.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, t.shape.len() as u8])?;
    for &d in &t.shape {
        if d > u32::MAX as usize {
            return Err(UniteError::Format(format!("dim {d} exceeds u32")));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(UniteError::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut h = [0u8; 4];
    r.read_exact(&mut h)?;
    let version = u16::from_le_bytes([h[0], h[1]]);
    if version != VERSION {
        return Err(UniteError::Format(format!("unsupported version {version}")));
    }
    if h[2] != DTYPE_F32 {
        return Err(UniteError::Format(format!("unsupported dtype {}", h[2])));
    }
    let ndim = h[3] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::new(shape, data))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r)
}

/// Minimal binary PGM (P5) export of an image batch laid out as a grid,
/// for eyeballing samples without an image codec. Values are mapped from
/// [−1, 1] to [0, 255].
pub fn write_pgm_grid(path: impl AsRef<Path>, images: &[Tensor]) -> Result<()> {
    if images.is_empty() {
        return Err(UniteError::Format("empty image list".into()));
    }
    let (h, w) = match images[0].shape.as_slice() {
        [_, h, w] => (*h, *w),
        other => return Err(UniteError::Format(format!("expected [C,H,W], got {other:?}"))),
    };
    let cols = images.len().min(16);
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * h, cols * w);
    let mut pix = vec![0u8; gh * gw];
    for (i, img) in images.iter().enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let v = img.data[y * w + x]; // first channel
                let b = (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8;
                pix[(gr * h + y) * gw + gc * w + x] = b;
            }
        }
    }
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{gw} {gh}\n255\n")?;
    f.write_all(&pix)?;
    f.flush()?;
    Ok(())
}
