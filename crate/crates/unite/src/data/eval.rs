//! Reconstruction and generation evaluation on probe features.

use serde::{Deserialize, Serialize};

use super::frechet::frechet_distance;
use super::probe::Probe;
use super::synth::{Dataset, NUM_CLASSES};
use crate::error::Result;
use crate::flow::{sample, SamplerConfig};
use crate::model::Model;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Zero-MSE sentinel: identical images report this instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

/// PSNR between images stored in [−1,1], computed on the [0,1] rescale.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape);
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| {
            let d = ((x - y) as f64) * 0.5; // [-1,1] -> [0,1] halves the gap
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconReport {
    pub mode: String,
    pub n: usize,
    pub psnr_mean: f64,
    pub frechet_recon: f64,
    /// Measured per-element RMS difference between two encodings of the same
    /// images under different register noise (logged, not asserted).
    pub register_noise_rms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenReport {
    pub mode: String,
    pub n: usize,
    pub per_class: usize,
    pub probe_accuracy: f64,
    pub frechet_gen: f64,
    pub nfe_per_sample: u64,
    pub solver: String,
    pub steps: usize,
    pub cfg_scale: f32,
}

/// Exactly n/num_classes labels per class, in class-major order.
pub fn balanced_labels(n: usize) -> Vec<usize> {
    let per = n / NUM_CLASSES;
    let mut out = Vec::with_capacity(per * NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        out.extend(std::iter::repeat_n(c, per));
    }
    out
}

const EVAL_BATCH: usize = 64;

/// Tokenize+decode held-out images; PSNR plus probe-feature Fréchet of the
/// reconstructions against the same real images.
pub fn evaluate_recon(
    model: &Model,
    heldout: &Dataset,
    probe: &Probe,
    n: usize,
    rng: &mut RngStream,
) -> Result<ReconReport> {
    let n = n.min(heldout.len());
    let reals: Vec<&Tensor> = heldout.images[..n].iter().collect();

    let mut psnr_sum = 0.0f64;
    let mut recons: Vec<Tensor> = Vec::with_capacity(n);
    let mut rms_acc = 0.0f64;
    let mut rms_count = 0usize;
    for chunk in reals.chunks(EVAL_BATCH) {
        let z = model.tokenize(chunk, rng)?;
        // repeat-encoding with fresh register noise, for the logged bound
        let z2 = model.tokenize(chunk, rng)?;
        for (a, b) in z.data.iter().zip(z2.data.iter()) {
            rms_acc += ((a - b) as f64).powi(2);
        }
        rms_count += z.data.len();
        let decoded = model.decode(&z)?;
        for (img, real) in decoded.iter().zip(chunk.iter()) {
            psnr_sum += psnr(img, real);
        }
        recons.extend(decoded);
    }

    let recon_refs: Vec<&Tensor> = recons.iter().collect();
    let f_recon = probe.features(&recon_refs)?;
    let f_real = probe.features(&reals)?;
    let fd = frechet_distance(&f_recon, &f_real)?;

    Ok(ReconReport {
        mode: "recon".into(),
        n,
        psnr_mean: psnr_sum / n as f64,
        frechet_recon: fd,
        register_noise_rms: (rms_acc / rms_count as f64).sqrt(),
    })
}

/// Class-balanced sampling; probe accuracy on the requested labels and
/// probe-feature Fréchet against held-out real features.
pub fn evaluate_gen(
    model: &Model,
    heldout: &Dataset,
    probe: &Probe,
    n: usize,
    sc: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<GenReport> {
    let labels = balanced_labels(n);
    let n = labels.len();

    let mut images: Vec<Tensor> = Vec::with_capacity(n);
    let mut nfe = 0u64;
    for chunk in labels.chunks(EVAL_BATCH) {
        let opts: Vec<Option<usize>> = chunk.iter().map(|&c| Some(c)).collect();
        let out = sample(model, &opts, sc, rng)?;
        nfe = out.nfe_per_sample;
        images.extend(model.decode(&out.latents)?);
    }

    let refs: Vec<&Tensor> = images.iter().collect();
    let acc = probe.accuracy(&refs, &labels)?;
    let f_gen = probe.features(&refs)?;
    let real_refs: Vec<&Tensor> = heldout.images.iter().collect();
    let f_real = probe.features(&real_refs)?;
    let fd = frechet_distance(&f_gen, &f_real)?;

    Ok(GenReport {
        mode: "gen".into(),
        n,
        per_class: n / NUM_CLASSES,
        probe_accuracy: acc,
        frechet_gen: fd,
        nfe_per_sample: nfe,
        solver: format!("{:?}", sc.solver).to_lowercase(),
        steps: sc.steps,
        cfg_scale: sc.cfg_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_identical_images_hits_the_cap() {
        let a = Tensor::new(vec![1, 2, 2], vec![0.1, -0.5, 0.9, 0.0]);
        assert_eq!(psnr(&a, &a), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_known_offset() {
        // constant offset of 0.2 in [-1,1] is 0.1 in [0,1]: mse = 0.01 -> 20 dB
        let a = Tensor::new(vec![1, 1, 4], vec![0.0; 4]);
        let b = Tensor::new(vec![1, 1, 4], vec![0.2; 4]);
        let p = psnr(&a, &b);
        assert!((p - 20.0).abs() < 1e-5, "{p}");
    }

    #[test]
    fn balanced_labels_are_exactly_uniform() {
        let labels = balanced_labels(100);
        let mut counts = [0usize; NUM_CLASSES];
        for &l in &labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
        // non-multiples truncate down
        assert_eq!(balanced_labels(13).len(), 10);
    }
}
