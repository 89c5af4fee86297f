//! Training objective: photometric term (L1 + DSSIM), exposure-consistency
//! pair term in linear radiance, and the exposure/tone regularizers.
//!
//! Every term returns analytic gradients. L1-style subgradients treat
//! residuals inside [-TIE_EPS, TIE_EPS] as exact ties (gradient 0) so that
//! floating-point reassociation noise cannot leak signs into the gradient.

use rayon::prelude::*;

use crate::image::ImageBuf;
use crate::optimizer::{Batch, TrainState};
use crate::photometric::{expose_active, expose_value, tone_dgamma, tone_dx, tone_value};
use crate::rasterizer::{render_hdr, render_hdr_backward, RenderOptions};
use crate::ssim::{ssim_with_grad, WINDOW};
use thiserror::Error;

pub const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("non-finite loss in component '{0}'")]
    NonFinite(String),
    #[error("view {0} has no observation")]
    MissingObservation(u32),
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_dssim: f64,
    pub lambda_exp: f64,
    pub lambda_escale: f64,
    pub lambda_evar: f64,
    pub lambda_gamma: f64,
    pub gamma_prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dssim: 0.2,
            lambda_exp: 0.1,
            lambda_escale: 0.01,
            lambda_evar: 0.1,
            lambda_gamma: 0.1,
            gamma_prior: 2.2,
        }
    }
}

#[inline]
fn tie_sign(d: f64) -> f64 {
    if d > TIE_EPS {
        1.0
    } else if d < -TIE_EPS {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct PhotoLoss {
    pub value: f64,
    pub l1: f64,
    pub dssim: f64,
    /// d value / d pred pixel.
    pub grad: Vec<[f64; 3]>,
}

/// (1 - w) * L1 + w * (1 - SSIM) between a tone-mapped prediction and its
/// observation. Mean L1 over all pixels and channels.
pub fn loss_photo(pred: &ImageBuf, obs: &ImageBuf, lambda_dssim: f64) -> PhotoLoss {
    assert!(
        pred.same_dims(obs),
        "prediction and observation differ in size"
    );
    let n = (pred.n_pixels() * 3) as f64;
    let mut l1 = 0.0;
    let mut grad = vec![[0.0f64; 3]; pred.n_pixels()];
    for (i, (p, o)) in pred.data.iter().zip(&obs.data).enumerate() {
        for c in 0..3 {
            let d = p[c] - o[c];
            l1 += d.abs();
            grad[i][c] = (1.0 - lambda_dssim) * tie_sign(d) / n;
        }
    }
    l1 /= n;
    let mut dssim = 0.0;
    if lambda_dssim != 0.0 {
        assert!(
            pred.width >= WINDOW && pred.height >= WINDOW,
            "images smaller than the SSIM window need lambda_dssim = 0"
        );
        let (s, sgrad) = ssim_with_grad(pred, obs);
        dssim = 1.0 - s;
        for (g, sg) in grad.iter_mut().zip(&sgrad) {
            for c in 0..3 {
                g[c] -= lambda_dssim * sg[c];
            }
        }
    }
    PhotoLoss {
        value: (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim,
        l1,
        dssim,
        grad,
    }
}

#[derive(Debug, Clone)]
pub struct ExpLoss {
    pub value: f64,
    /// d value / d render pixel, one gradient image per input render.
    pub d_renders: Vec<Vec<[f64; 3]>>,
    /// d value / d exposure, through the ratio e_j / e_i.
    pub d_exposures: Vec<f64>,
}

/// Mean absolute deviation from exposure-ratio consistency over pairs:
/// mean |(e_j/e_i) * R_i - R_j|. Inputs are linear-radiance images of the
/// same target view.
pub fn loss_exp(renders: &[&ImageBuf], exposures: &[f64], pairs: &[(usize, usize)]) -> ExpLoss {
    assert_eq!(renders.len(), exposures.len());
    assert!(!pairs.is_empty(), "need at least one pair");
    let m = pairs.len() as f64;
    let mut value = 0.0;
    let mut d_renders: Vec<Vec<[f64; 3]>> = renders
        .iter()
        .map(|r| vec![[0.0f64; 3]; r.n_pixels()])
        .collect();
    let mut d_exposures = vec![0.0f64; exposures.len()];
    for &(i, j) in pairs {
        let (ri, rj) = (renders[i], renders[j]);
        assert!(
            ri.same_dims(rj),
            "pair images must share the target view size"
        );
        let (ei, ej) = (exposures[i], exposures[j]);
        let alpha = ej / ei;
        let n = (ri.n_pixels() * 3) as f64;
        let mut pair_sum = 0.0;
        let mut d_alpha = 0.0;
        for (px, (a, b)) in ri.data.iter().zip(&rj.data).enumerate() {
            for c in 0..3 {
                let d = alpha * a[c] - b[c];
                pair_sum += d.abs();
                let s = tie_sign(d);
                if s != 0.0 {
                    d_renders[i][px][c] += s * alpha / (n * m);
                    d_renders[j][px][c] -= s / (n * m);
                    d_alpha += s * a[c] / (n * m);
                }
            }
        }
        value += pair_sum / n;
        d_exposures[j] += d_alpha / ei;
        d_exposures[i] -= d_alpha * ej / (ei * ei);
    }
    ExpLoss {
        value: value / m,
        d_renders,
        d_exposures,
    }
}

#[derive(Debug, Clone)]
pub struct RegLoss {
    /// Weighted contributions, ready to add into the total.
    pub escale: f64,
    pub evar: f64,
    pub gamma: f64,
    pub d_exposures: Vec<f64>,
    pub d_gammas: Vec<f64>,
}

/// lambda_escale * E[(e-1)^2] + lambda_evar * Var(e) + lambda_gamma *
/// E[(gamma - prior)^2]. Population variance.
pub fn loss_reg(exposures: &[f64], gammas: &[f64], w: &LossWeights) -> RegLoss {
    assert!(!exposures.is_empty());
    assert_eq!(exposures.len(), gammas.len());
    let n = exposures.len() as f64;
    let mean_e = exposures.iter().sum::<f64>() / n;
    let escale_raw = exposures.iter().map(|e| (e - 1.0) * (e - 1.0)).sum::<f64>() / n;
    let evar_raw = exposures
        .iter()
        .map(|e| (e - mean_e) * (e - mean_e))
        .sum::<f64>()
        / n;
    let gamma_raw = gammas
        .iter()
        .map(|g| (g - w.gamma_prior) * (g - w.gamma_prior))
        .sum::<f64>()
        / n;
    let d_exposures = exposures
        .iter()
        .map(|e| w.lambda_escale * 2.0 * (e - 1.0) / n + w.lambda_evar * 2.0 * (e - mean_e) / n)
        .collect();
    let d_gammas = gammas
        .iter()
        .map(|g| w.lambda_gamma * 2.0 * (g - w.gamma_prior) / n)
        .collect();
    RegLoss {
        escale: w.lambda_escale * escale_raw,
        evar: w.lambda_evar * evar_raw,
        gamma: w.lambda_gamma * gamma_raw,
        d_exposures,
        d_gammas,
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossReport {
    pub total: f64,
    pub photo: f64,
    pub l1: f64,
    pub dssim: f64,
    pub exp: f64,
    pub reg_escale: f64,
    pub reg_evar: f64,
    pub reg_gamma: f64,
}

#[derive(Debug, Clone)]
pub struct TotalGrads {
    pub d_color: Vec<[f64; 3]>,
    pub d_opacity_logit: Vec<f64>,
    pub d_log_e: Vec<f64>,
    pub d_log_gamma: Vec<f64>,
}

impl TotalGrads {
    fn zeros(n_gauss: usize, n_views: usize) -> Self {
        TotalGrads {
            d_color: vec![[0.0; 3]; n_gauss],
            d_opacity_logit: vec![0.0; n_gauss],
            d_log_e: vec![0.0; n_views],
            d_log_gamma: vec![0.0; n_views],
        }
    }
}

struct ViewForward {
    hdr: ImageBuf,
    photo: PhotoLoss,
    /// dLoss/d hdr pixel, all terms folded in before the raster backward.
    upstream: ImageBuf,
    d_log_e: f64,
    d_log_gamma: f64,
}

fn check_finite(name: &str, v: f64) -> Result<f64, LossError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LossError::NonFinite(name.to_string()))
    }
}

/// Full objective over one batch: photometric term averaged over batch
/// views, exposure pairs on the first view of each pair as the shared
/// target, and the regularizers over all trainable views. Returns gradients
/// in the optimizer's log/logit parameterization.
pub fn loss_total(
    state: &TrainState,
    batch: &Batch,
) -> Result<(LossReport, TotalGrads), LossError> {
    assert!(!batch.views.is_empty(), "empty batch");
    let scene = state.render_scene();
    let w = state.weights;
    let opts = RenderOptions {
        background: state.background,
    };
    let n_views = scene.views.len();
    let b = batch.views.len() as f64;

    let mut forwards: Vec<ViewForward> = batch
        .views
        .par_iter()
        .map(|&vi| {
            let view = &scene.views[vi];
            let obs = view
                .observation
                .as_ref()
                .ok_or(LossError::MissingObservation(view.id))?;
            let hdr = render_hdr(&scene, view, &opts);
            let e = state.exposure(vi);
            let gamma = state.gamma(vi);
            let pred = hdr.map(|x| tone_value(expose_value(x, e), gamma));
            let photo = loss_photo(&pred, obs, w.lambda_dssim);
            let mut upstream = ImageBuf::new(hdr.width, hdr.height);
            let mut d_e = 0.0;
            let mut d_gamma = 0.0;
            let photo_scale = 1.0 / b;
            for (idx, px) in hdr.data.iter().enumerate() {
                let mut up = [0.0f64; 3];
                for c in 0..3 {
                    let g_pred = photo.grad[idx][c] * photo_scale;
                    if g_pred == 0.0 {
                        continue;
                    }
                    let x = expose_value(px[c], e);
                    let dx_d = g_pred * tone_dx(x, gamma);
                    if expose_active(px[c], e) {
                        up[c] = dx_d * e;
                        d_e += dx_d * px[c];
                    }
                    d_gamma += g_pred * tone_dgamma(x, gamma);
                }
                upstream.data[idx] = up;
            }
            Ok(ViewForward {
                hdr,
                photo,
                upstream,
                d_log_e: d_e * e,
                d_log_gamma: d_gamma * gamma,
            })
        })
        .collect::<Result<Vec<_>, LossError>>()?;

    let photo_mean = forwards.iter().map(|f| f.photo.value).sum::<f64>() / b;
    let l1_mean = forwards.iter().map(|f| f.photo.l1).sum::<f64>() / b;
    let dssim_mean = forwards.iter().map(|f| f.photo.dssim).sum::<f64>() / b;
    check_finite("photo", photo_mean)?;

    let mut grads = TotalGrads::zeros(scene.gaussians.len(), n_views);

    // Exposure-consistency pairs: both exposures applied to the first
    // view's radiance so the pixelwise comparison is aligned.
    let mut exp_mean = 0.0;
    if !batch.pairs.is_empty() && w.lambda_exp != 0.0 {
        let m = batch.pairs.len() as f64;
        for &(pa, pb) in &batch.pairs {
            let (via, vib) = (batch.views[pa], batch.views[pb]);
            let (ea, eb) = (state.exposure(via), state.exposure(vib));
            let f = &mut forwards[pa];
            let xa = f.hdr.map(|r| expose_value(r, ea));
            let xb = f.hdr.map(|r| expose_value(r, eb));
            let pair = loss_exp(&[&xa, &xb], &[ea, eb], &[(0, 1)]);
            exp_mean += pair.value / m;
            let scale = w.lambda_exp / m;
            let mut d_ea = pair.d_exposures[0] * scale;
            let mut d_eb = pair.d_exposures[1] * scale;
            for (idx, r) in f.hdr.data.iter().enumerate() {
                for c in 0..3 {
                    let (ga, gb) = (pair.d_renders[0][idx][c], pair.d_renders[1][idx][c]);
                    if ga != 0.0 && expose_active(r[c], ea) {
                        f.upstream.data[idx][c] += ga * ea * scale;
                        d_ea += ga * r[c] * scale;
                    }
                    if gb != 0.0 && expose_active(r[c], eb) {
                        f.upstream.data[idx][c] += gb * eb * scale;
                        d_eb += gb * r[c] * scale;
                    }
                }
            }
            grads.d_log_e[via] += d_ea * ea;
            grads.d_log_e[vib] += d_eb * eb;
        }
        check_finite("exp", exp_mean)?;
    }

    for (pos, f) in forwards.iter().enumerate() {
        let vi = batch.views[pos];
        let view = &scene.views[vi];
        let raster = render_hdr_backward(&scene, view, &opts, &f.upstream);
        for (g, d) in grads.d_color.iter_mut().zip(&raster.d_color) {
            for c in 0..3 {
                g[c] += d[c];
            }
        }
        for (gi, d) in raster.d_opacity.iter().enumerate() {
            // chain through the logit: d alpha / d logit = op (1 - op)
            let op = state.opacity(gi);
            grads.d_opacity_logit[gi] += d * op * (1.0 - op);
        }
        grads.d_log_e[vi] += f.d_log_e;
        grads.d_log_gamma[vi] += f.d_log_gamma;
    }

    let exposures: Vec<f64> = (0..n_views).map(|i| state.exposure(i)).collect();
    let gammas: Vec<f64> = (0..n_views).map(|i| state.gamma(i)).collect();
    let reg = loss_reg(&exposures, &gammas, &w);
    check_finite("reg_escale", reg.escale)?;
    check_finite("reg_evar", reg.evar)?;
    check_finite("reg_gamma", reg.gamma)?;
    for i in 0..n_views {
        grads.d_log_e[i] += reg.d_exposures[i] * exposures[i];
        grads.d_log_gamma[i] += reg.d_gammas[i] * gammas[i];
    }

    let total = photo_mean + w.lambda_exp * exp_mean + reg.escale + reg.evar + reg.gamma;
    check_finite("total", total)?;
    Ok((
        LossReport {
            total,
            photo: photo_mean,
            l1: l1_mean,
            dssim: dssim_mean,
            exp: exp_mean,
            reg_escale: reg.escale,
            reg_evar: reg.evar,
            reg_gamma: reg.gamma,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patterned(w: usize, h: usize, seed: f64) -> ImageBuf {
        let mut img = ImageBuf::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let f = (x as f64 * 0.7 + y as f64 * 1.3 + seed).sin() * 0.35 + 0.5;
                img.set(x, y, [f, (f * 1.7).fract(), (f * 2.9).fract()]);
            }
        }
        img
    }

    #[test]
    fn photo_constant_offset_pure_l1() {
        let obs = patterned(16, 16, 0.0);
        let pred = obs.map(|v| v + 0.1);
        let loss = loss_photo(&pred, &obs, 0.0);
        assert!((loss.value - 0.1).abs() < 1e-12);
        assert!((loss.l1 - 0.1).abs() < 1e-12);
        assert_eq!(loss.dssim, 0.0);
    }

    #[test]
    fn photo_identical_is_zero_with_zero_grad() {
        let obs = patterned(16, 16, 2.0);
        let loss = loss_photo(&obs.clone(), &obs, 0.2);
        assert!(loss.value.abs() < 1e-12);
        // the L1 side is exactly zero by the tie deadband; the structural
        // side cancels only up to roundoff of its quotient terms
        for g in &loss.grad {
            for c in 0..3 {
                assert!(g[c].abs() < 1e-12, "grad {g:?}");
            }
        }
    }

    #[test]
    fn photo_grad_matches_finite_differences() {
        let obs = patterned(16, 16, 1.0);
        let pred = patterned(16, 16, 4.0);
        let loss = loss_photo(&pred, &obs, 0.2);
        let h = 1e-5;
        for &(px, py, ch) in &[(0usize, 0usize, 0usize), (8, 8, 1), (15, 15, 2), (3, 12, 0)] {
            let mut plus = pred.clone();
            let mut v = plus.get(px, py);
            v[ch] += h;
            plus.set(px, py, v);
            let mut minus = pred.clone();
            let mut v = minus.get(px, py);
            v[ch] -= h;
            minus.set(px, py, v);
            let fd = (loss_photo(&plus, &obs, 0.2).value - loss_photo(&minus, &obs, 0.2).value)
                / (2.0 * h);
            let an = loss.grad[py * 16 + px][ch];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-3 * fd.abs().max(an.abs()),
                "({px},{py},{ch}): fd={fd} an={an}"
            );
        }
    }

    #[test]
    fn exp_consistent_pair_is_zero() {
        let a = patterned(8, 8, 0.5).map(|v| v + 0.1);
        let b = a.map(|v| 2.0 * v);
        let loss = loss_exp(&[&a, &b], &[1.0, 2.0], &[(0, 1)]);
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn exp_identical_images_equal_exposure_zero() {
        let a = patterned(8, 8, 3.0);
        let loss = loss_exp(&[&a, &a.clone()], &[1.3, 1.3], &[(0, 1)]);
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn exp_unit_images_ratio_example() {
        let a = ImageBuf::filled(8, 8, [1.0; 3]);
        let b = ImageBuf::filled(8, 8, [1.0; 3]);
        let loss = loss_exp(&[&a, &b], &[1.0, 1.5], &[(0, 1)]);
        assert!((loss.value - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exp_grads_match_finite_differences() {
        let a = patterned(8, 8, 1.0).map(|v| v + 0.2);
        let b = patterned(8, 8, 2.0).map(|v| v + 0.3);
        let (ea, eb) = (0.9, 1.7);
        let base = loss_exp(&[&a, &b], &[ea, eb], &[(0, 1)]);
        let h = 1e-6;
        // exposure gradients
        let plus = loss_exp(&[&a, &b], &[ea + h, eb], &[(0, 1)]).value;
        let minus = loss_exp(&[&a, &b], &[ea - h, eb], &[(0, 1)]).value;
        let fd = (plus - minus) / (2.0 * h);
        assert!((fd - base.d_exposures[0]).abs() < 1e-6 + 1e-4 * fd.abs());
        let plus = loss_exp(&[&a, &b], &[ea, eb + h], &[(0, 1)]).value;
        let minus = loss_exp(&[&a, &b], &[ea, eb - h], &[(0, 1)]).value;
        let fd = (plus - minus) / (2.0 * h);
        assert!((fd - base.d_exposures[1]).abs() < 1e-6 + 1e-4 * fd.abs());
        // image gradients
        for &(px, ch, which) in &[(5usize, 0usize, 0usize), (20, 2, 1), (63, 1, 0)] {
            let mut ap = a.clone();
            let mut bp = b.clone();
            let target = if which == 0 { &mut ap } else { &mut bp };
            target.data[px][ch] += h;
            let plus = loss_exp(&[&ap, &bp], &[ea, eb], &[(0, 1)]).value;
            let mut am = a.clone();
            let mut bm = b.clone();
            let target = if which == 0 { &mut am } else { &mut bm };
            target.data[px][ch] -= h;
            let minus = loss_exp(&[&am, &bm], &[ea, eb], &[(0, 1)]).value;
            let fd = (plus - minus) / (2.0 * h);
            let an = base.d_renders[which][px][ch];
            assert!(
                (fd - an).abs() < 1e-6 + 1e-4 * fd.abs(),
                "img{which} px{px} ch{ch}: fd={fd} an={an}"
            );
        }
    }

    #[test]
    fn reg_reference_values() {
        let w = LossWeights::default();
        let reg = loss_reg(&[0.5, 1.5], &[2.2, 2.2], &w);
        // E[(e-1)^2] = 0.25, Var = 0.25, gamma exactly at prior
        assert!((reg.escale - w.lambda_escale * 0.25).abs() < 1e-15);
        assert!((reg.evar - w.lambda_evar * 0.25).abs() < 1e-15);
        assert_eq!(reg.gamma, 0.0);
    }

    #[test]
    fn reg_equal_exposures_zero_variance() {
        let w = LossWeights::default();
        let reg = loss_reg(&[1.2, 1.2, 1.2], &[2.0, 2.4, 2.2], &w);
        assert!(reg.evar.abs() < 1e-15);
        assert!(reg.gamma > 0.0);
    }

    #[test]
    fn reg_grads_match_finite_differences() {
        let w = LossWeights::default();
        let es = [0.8, 1.1, 1.4];
        let gs = [2.0, 2.3, 2.1];
        let reg = loss_reg(&es, &gs, &w);
        let h = 1e-6;
        let value = |es: &[f64], gs: &[f64]| {
            let r = loss_reg(es, gs, &w);
            r.escale + r.evar + r.gamma
        };
        for i in 0..3 {
            let mut ep = es;
            ep[i] += h;
            let mut em = es;
            em[i] -= h;
            let fd = (value(&ep, &gs) - value(&em, &gs)) / (2.0 * h);
            assert!((fd - reg.d_exposures[i]).abs() < 1e-8);
            let mut gp = gs;
            gp[i] += h;
            let mut gm = gs;
            gm[i] -= h;
            let fd = (value(&es, &gp) - value(&es, &gm)) / (2.0 * h);
            assert!((fd - reg.d_gammas[i]).abs() < 1e-8);
        }
    }
}
