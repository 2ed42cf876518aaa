//! Fréchet distance between feature distributions.
//!
//! d² = ‖μa−μb‖² + Tr(Σa + Σb − 2·(Σa·Σb)^½). The matrix square root is
//! taken through the symmetric product S = Σa^½·Σb·Σa^½ whose eigenvalues
//! are clipped at zero, which is robust for the small feature widths used
//! here. All linear algebra runs in f64.

use crate::error::{Result, UniteError};
use crate::tensor::Tensor;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n×n).
/// Returns (eigenvalues, eigenvectors as columns of V).
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| m[i * n + i]).collect();
    (eig, v)
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        for r in 0..n {
            let air = a[i * n + r];
            if air == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += air * b[r * n + j];
            }
        }
    }
    out
}

/// Principal square root of a symmetric PSD matrix, negative eigenvalues
/// clipped to zero.
fn sqrt_psd(a: &[f64], n: usize) -> Vec<f64> {
    let (eig, v) = symmetric_eigen(a, n);
    // V · diag(sqrt(max(eig,0))) · Vᵀ
    let mut out = vec![0.0f64; n * n];
    for k in 0..n {
        let s = eig[k].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            let vik = v[i * n + k] * s;
            for j in 0..n {
                out[i * n + j] += vik * v[j * n + k];
            }
        }
    }
    out
}

/// Mean and regularized covariance of features `[N, f]`.
pub fn mean_cov(feats: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, f) = match feats.shape.as_slice() {
        [n, f] => (*n, *f),
        other => {
            return Err(UniteError::ShapeMismatch {
                context: "features must be [N, f]",
                lhs: other.to_vec(),
                rhs: vec![],
            })
        }
    };
    if n < 2 {
        return Err(UniteError::Config("need at least 2 feature rows".into()));
    }
    if feats.data.iter().any(|v| !v.is_finite()) {
        return Err(UniteError::Numeric("non-finite feature values".into()));
    }
    let mut mu = vec![0.0f64; f];
    for row in feats.data.chunks(f) {
        for (m, &x) in mu.iter_mut().zip(row.iter()) {
            *m += x as f64;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0f64; f * f];
    for row in feats.data.chunks(f) {
        for i in 0..f {
            let di = row[i] as f64 - mu[i];
            for j in i..f {
                cov[i * f + j] += di * (row[j] as f64 - mu[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..f {
        for j in i..f {
            let v = cov[i * f + j] / denom;
            cov[i * f + j] = v;
            cov[j * f + i] = v;
        }
        cov[i * f + i] += 1e-6;
    }
    Ok((mu, cov))
}

/// Fréchet distance between the empirical Gaussians of two feature sets.
pub fn frechet_distance(feats_a: &Tensor, feats_b: &Tensor) -> Result<f64> {
    let (mu_a, cov_a) = mean_cov(feats_a)?;
    let (mu_b, cov_b) = mean_cov(feats_b)?;
    let f = mu_a.len();
    if mu_b.len() != f {
        return Err(UniteError::ShapeMismatch {
            context: "feature widths differ",
            lhs: feats_a.shape.clone(),
            rhs: feats_b.shape.clone(),
        });
    }

    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();

    let sqrt_a = sqrt_psd(&cov_a, f);
    let inner = matmul(&matmul(&sqrt_a, &cov_b, f), &sqrt_a, f);
    // symmetrize against rounding before the second square root
    let mut sym = inner.clone();
    for i in 0..f {
        for j in 0..f {
            sym[i * f + j] = 0.5 * (inner[i * f + j] + inner[j * f + i]);
        }
    }
    let (eig, _) = symmetric_eigen(&sym, f);
    let tr_sqrt: f64 = eig.iter().map(|&e| e.max(0.0).sqrt()).sum();

    let tr_a: f64 = (0..f).map(|i| cov_a[i * f + i]).sum();
    let tr_b: f64 = (0..f).map(|i| cov_b[i * f + i]).sum();

    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn rand_feats(n: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::from_seed(seed);
        Tensor::randn(vec![n, f], &mut rng)
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let (mut eig, _) = symmetric_eigen(&[2.0, 1.0, 1.0, 2.0], 2);
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((eig[0] - 1.0).abs() < 1e-10);
        assert!((eig[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn self_distance_is_zero() {
        let a = rand_feats(200, 8, 3);
        let d = frechet_distance(&a, &a).unwrap();
        assert!(d < 1e-6, "self distance {d}");
    }

    #[test]
    fn mean_shift_with_equal_cov_is_norm_squared() {
        let a = rand_feats(300, 6, 4);
        let shift: Vec<f32> = (0..6).map(|i| 0.25 * (i as f32 + 1.0)).collect();
        let mut b = a.clone();
        for row in b.data.chunks_mut(6) {
            for (x, &s) in row.iter_mut().zip(shift.iter()) {
                *x += s;
            }
        }
        let d = frechet_distance(&a, &b).unwrap();
        let expect: f64 = shift.iter().map(|&s| (s as f64) * (s as f64)).sum();
        assert!((d - expect).abs() < 1e-4, "{d} vs {expect}");
    }

    #[test]
    fn diagonal_gaussians_match_closed_form() {
        // With diagonal covariances the trace term is Σ (σa+σb−2√(σaσb)).
        // Construct exact empirical moments: use ±σ patterns with mean 0.
        // f = 2, N = 4 rows: [±a1, ±a2] gives mean 0, cov diag(a²·4/3)
        let mk = |a1: f32, a2: f32| {
            Tensor::new(
                vec![4, 2],
                vec![a1, a2, -a1, -a2, a1, -a2, -a1, a2],
            )
        };
        let fa = mk(0.9, 0.4);
        let fb = mk(0.5, 1.2);
        let d = frechet_distance(&fa, &fb).unwrap();

        let var = |a: f32| (4.0 * (a as f64).powi(2)) / 3.0 + 1e-6; // unbiased + reg
        let closed: f64 = [(0.9f32, 0.5f32), (0.4, 1.2)]
            .iter()
            .map(|&(x, y)| {
                let (sx, sy) = (var(x), var(y));
                sx + sy - 2.0 * (sx * sy).sqrt()
            })
            .sum();
        assert!((d - closed).abs() < 1e-6, "{d} vs {closed}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let a = rand_feats(150, 5, 7);
        let b = rand_feats(170, 5, 8);
        let dab = frechet_distance(&a, &b).unwrap();
        let dba = frechet_distance(&b, &a).unwrap();
        assert!(dab >= 0.0);
        assert!((dab - dba).abs() < 1e-8 * (1.0 + dab), "{dab} vs {dba}");
    }

    #[test]
    fn invariant_under_common_orthogonal_transform() {
        let a = rand_feats(250, 4, 9);
        let b = rand_feats(260, 4, 10);
        let d0 = frechet_distance(&a, &b).unwrap();

        // random orthogonal via Gram-Schmidt on a Gaussian matrix
        let mut rng = RngStream::from_seed(11);
        let mut q = vec![[0.0f64; 4]; 4];
        for row in q.iter_mut() {
            for x in row.iter_mut() {
                *x = rng.normal() as f64;
            }
        }
        for i in 0..4 {
            for j in 0..i {
                let dot: f64 = (0..4).map(|k| q[i][k] * q[j][k]).sum();
                for k in 0..4 {
                    q[i][k] -= dot * q[j][k];
                }
            }
            let norm: f64 = (0..4).map(|k| q[i][k] * q[i][k]).sum::<f64>().sqrt();
            for k in 0..4 {
                q[i][k] /= norm;
            }
        }
        let rotate = |t: &Tensor| {
            let mut out = t.clone();
            for (orow, irow) in out.data.chunks_mut(4).zip(t.data.chunks(4)) {
                for i in 0..4 {
                    orow[i] = (0..4).map(|k| q[i][k] * irow[k] as f64).sum::<f64>() as f32;
                }
            }
            out
        };
        let d1 = frechet_distance(&rotate(&a), &rotate(&b)).unwrap();
        assert!((d0 - d1).abs() < 1e-4, "{d0} vs {d1}");
    }

    #[test]
    fn non_finite_features_rejected() {
        let mut a = rand_feats(10, 3, 12);
        a.data[5] = f32::NAN;
        assert!(matches!(
            frechet_distance(&a, &a),
            Err(UniteError::Numeric(_))
        ));
    }
}
