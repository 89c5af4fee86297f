//! Evaluation metrics: PSNR, SSIM (shared with the loss), the HDR
//! inconsistency score over exposure-compensated consecutive frames, and
//! the standard deviation of per-frame luminance.

use crate::image::ImageBuf;
use crate::photometric::{luminance_bt601, srgb_oetf_inverse};

/// Peak signal-to-noise ratio on [0,1] images, MSE over all pixels and
/// channels. Identical images return +infinity.
/// Mean squared error over pixels and channels.
pub fn mse(a: &ImageBuf, b: &ImageBuf) -> f64 {
    assert!(a.same_dims(b), "mse inputs differ in size");
    let n = (a.n_pixels() * 3) as f64;
    let mut acc = 0.0;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            acc += d * d;
        }
    }
    acc / n
}

/// PSNR from a mean squared error, peak 1. Identical inputs give +inf.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> f64 {
    psnr_from_mse(mse(a, b))
}

/// Structural similarity, the same implementation the photometric loss
/// differentiates.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> f64 {
    crate::ssim::ssim(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HisNorm {
    /// Root mean square over pixels and channels; resolution independent.
    Rms,
    /// Plain L2 norm over all pixels and channels.
    Raw,
}

fn his_pair(a: &ImageBuf, b: &ImageBuf, ea: f64, eb: f64, norm: HisNorm) -> f64 {
    assert!(a.same_dims(b), "consecutive frames differ in size");
    let mut sum = 0.0;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        for c in 0..3 {
            let d = srgb_oetf_inverse(pa[c]) * ea - srgb_oetf_inverse(pb[c]) * eb;
            sum += d * d;
        }
    }
    match norm {
        HisNorm::Rms => (sum / (a.n_pixels() * 3) as f64).sqrt(),
        HisNorm::Raw => sum.sqrt(),
    }
}

/// HDR inconsistency score: mean over consecutive frame pairs of the norm
/// of sRGB-decoded, exposure-compensated differences. Frames must be
/// time-ordered and belong to one camera.
pub fn his(frames: &[ImageBuf], exposures: &[f64], norm: HisNorm) -> f64 {
    assert!(frames.len() >= 2, "HIS needs at least two frames");
    assert_eq!(frames.len(), exposures.len(), "one exposure per frame");
    let mut total = 0.0;
    for t in 0..frames.len() - 1 {
        total += his_pair(
            &frames[t],
            &frames[t + 1],
            exposures[t],
            exposures[t + 1],
            norm,
        );
    }
    total / (frames.len() - 1) as f64
}

/// HIS over several per-camera sequences, averaging every consecutive pair
/// with equal weight. Each group is one camera's time-ordered frames.
pub fn his_grouped(groups: &[(&[ImageBuf], &[f64])], norm: HisNorm) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (frames, exposures) in groups {
        assert!(
            frames.len() >= 2,
            "HIS needs at least two frames per camera"
        );
        assert_eq!(frames.len(), exposures.len());
        for t in 0..frames.len() - 1 {
            total += his_pair(
                &frames[t],
                &frames[t + 1],
                exposures[t],
                exposures[t + 1],
                norm,
            );
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Population standard deviation of per-frame mean BT.601 luminance.
pub fn std_luminance(frames: &[ImageBuf]) -> f64 {
    assert!(!frames.is_empty(), "need at least one frame");
    let means: Vec<f64> = frames
        .iter()
        .map(|f| f.data.iter().map(|p| luminance_bt601(*p)).sum::<f64>() / f.n_pixels() as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / means.len() as f64;
    var.sqrt()
}

/// Robustness drop: PSNR on the harder split minus PSNR on the easier one.
/// Negative values mean degradation.
pub fn delta_psnr(psnr_hard: f64, psnr_easy: f64) -> f64 {
    assert!(psnr_hard.is_finite() && psnr_easy.is_finite());
    psnr_hard - psnr_easy
}
