//! Per-view image formation: exposure gain, tone curve, and the sRGB
//! transfer functions used when scoring in linear light.
//!
//! The forward chain for a view with exposure `e` and tone exponent `gamma`:
//!
//! ```text
//! ldr = clamp01( clamp(e * hdr, 1e-6, 10) ^ (1/gamma) )
//! ```
//!
//! Derivatives follow the chain with subgradient 0 wherever a clamp is
//! active, matching what the trainer backpropagates.

use crate::image::ImageBuf;
use crate::scene::CameraView;

/// Exposed radiance is clamped to this range before tone mapping.
pub const LINEAR_LO: f64 = 1e-6;
pub const LINEAR_HI: f64 = 10.0;

#[inline]
pub fn expose_value(x: f64, e: f64) -> f64 {
    (e * x).clamp(LINEAR_LO, LINEAR_HI)
}

/// True when the exposure clamp passes the derivative through.
#[inline]
pub fn expose_active(x: f64, e: f64) -> bool {
    let y = e * x;
    y > LINEAR_LO && y < LINEAR_HI
}

pub fn expose(hdr: &ImageBuf, e: f64) -> ImageBuf {
    hdr.map(|x| expose_value(x, e))
}

/// Gamma tone curve on exposed radiance, output clamped to [0, 1].
#[inline]
pub fn tone_value(x: f64, gamma: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    x.powf(1.0 / gamma).min(1.0)
}

/// d tone / d x. Zero once the output clamp engages (x >= 1).
#[inline]
pub fn tone_dx(x: f64, gamma: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    x.powf(1.0 / gamma - 1.0) / gamma
}

/// d tone / d gamma. Zero once the output clamp engages.
#[inline]
pub fn tone_dgamma(x: f64, gamma: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -(x.ln() / (gamma * gamma)) * x.powf(1.0 / gamma)
}

pub fn tone_map(exposed: &ImageBuf, gamma: f64) -> ImageBuf {
    exposed.map(|x| tone_value(x, gamma))
}

/// Full LDR formation for one view: expose then tone map.
pub fn form_ldr(hdr: &ImageBuf, e: f64, gamma: f64) -> ImageBuf {
    hdr.map(|x| tone_value(expose_value(x, e), gamma))
}

/// Render-time photometric parameters for novel or eval views: the
/// arithmetic means of the trained per-view values.
pub fn render_params_for_eval(views: &[CameraView]) -> (f64, f64) {
    assert!(!views.is_empty(), "need at least one view");
    let n = views.len() as f64;
    let e = views.iter().map(|v| v.exposure).sum::<f64>() / n;
    let g = views.iter().map(|v| v.gamma).sum::<f64>() / n;
    (e, g)
}

/// sRGB encode (IEC 61966-2-1), linear -> display.
#[inline]
pub fn srgb_oetf(l: f64) -> f64 {
    let l = l.clamp(0.0, 1.0);
    if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

/// sRGB decode, display -> linear.
#[inline]
pub fn srgb_oetf_inverse(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// BT.601 luma of linear-free RGB in [0,1]. Grouping keeps white at 1.0
/// exactly in f64.
#[inline]
pub fn luminance_bt601(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + (0.587 * rgb[1] + 0.114 * rgb[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{intrinsics_from_fov, CameraPose};

    #[test]
    fn expose_multiplies_then_clamps() {
        assert_eq!(expose_value(0.25, 2.0), 0.5);
        assert_eq!(expose_value(3.0, 4.0), LINEAR_HI);
        assert_eq!(expose_value(1e-9, 1.0), LINEAR_LO);
        assert_eq!(expose_value(0.0, 5.0), LINEAR_LO);
    }

    #[test]
    fn expose_clamp_gates_derivative() {
        assert!(expose_active(0.25, 2.0));
        assert!(!expose_active(3.0, 4.0));
        assert!(!expose_active(1e-9, 1.0));
    }

    #[test]
    fn tone_reference_values() {
        assert!((tone_value(0.5, 2.2) - 0.7297400528407231).abs() < 1e-15);
        assert_eq!(tone_value(1.0, 2.2), 1.0);
        assert_eq!(tone_value(4.0, 2.0), 1.0);
        assert_eq!(tone_value(0.0, 2.2), 0.0);
    }

    #[test]
    fn tone_dgamma_reference_values() {
        assert!((tone_dgamma(0.25, 2.0) - 0.17328679513998632).abs() < 1e-15);
        let x = (-1.0f64).exp();
        assert!((tone_dgamma(x, 1.0) - 0.36787944117144233).abs() < 1e-15);
        // ln 1 = 0
        assert_eq!(tone_dgamma(1.0, 2.2), 0.0);
        // clamp region
        assert_eq!(tone_dgamma(4.0, 2.0), 0.0);
    }

    #[test]
    fn tone_dx_matches_finite_difference() {
        let h = 1e-7;
        for &(x, g) in &[(0.1, 1.8), (0.5, 2.2), (0.9, 3.0)] {
            let fd = (tone_value(x + h, g) - tone_value(x - h, g)) / (2.0 * h);
            assert!(
                (tone_dx(x, g) - fd).abs() < 1e-6,
                "x={x} g={g}: {} vs {}",
                tone_dx(x, g),
                fd
            );
        }
        assert_eq!(tone_dx(1.5, 2.2), 0.0);
    }

    #[test]
    fn tone_dgamma_matches_finite_difference() {
        let h = 1e-6;
        for &(x, g) in &[(0.1, 1.8), (0.5, 2.2), (0.9, 3.0)] {
            let fd = (tone_value(x, g + h) - tone_value(x, g - h)) / (2.0 * h);
            assert!((tone_dgamma(x, g) - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn form_ldr_chains_both_stages() {
        let hdr = ImageBuf::filled(2, 2, [0.25, 0.25, 0.25]);
        let ldr = form_ldr(&hdr, 2.0, 2.0);
        assert!((ldr.get(0, 0)[0] - 0.7071067811865476).abs() < 1e-15);
    }

    #[test]
    fn eval_params_are_means() {
        let mk = |e: f64, g: f64| CameraView {
            id: 0,
            pose: CameraPose::identity(),
            intrinsics: intrinsics_from_fov(4, 4, 60.0),
            exposure: e,
            gamma: g,
            iso: None,
            observation: None,
        };
        let views = vec![mk(1.0, 2.0), mk(2.0, 2.2), mk(3.0, 2.4)];
        let (e, g) = render_params_for_eval(&views);
        assert!((e - 2.0).abs() < 1e-15);
        assert!((g - 2.2).abs() < 1e-15);
    }

    #[test]
    fn srgb_reference_values() {
        assert!((srgb_oetf_inverse(0.5) - 0.21404114048223255).abs() < 1e-15);
        assert!((srgb_oetf_inverse(0.04045) - 0.0031308049535603713).abs() < 1e-15);
        assert_eq!(srgb_oetf_inverse(0.0), 0.0);
        assert_eq!(srgb_oetf_inverse(1.0), 1.0);
        // 1.055 - 0.055 lands one ulp under 1
        assert!((srgb_oetf(1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn srgb_round_trip() {
        for i in 0..=100 {
            let v = i as f64 / 100.0;
            let rt = srgb_oetf(srgb_oetf_inverse(v));
            assert!((rt - v).abs() < 1e-12, "v={v} rt={rt}");
        }
    }

    #[test]
    fn luminance_white_is_exactly_one() {
        assert_eq!(luminance_bt601([1.0, 1.0, 1.0]), 1.0);
        assert_eq!(luminance_bt601([0.0, 0.0, 0.0]), 0.0);
        assert!((luminance_bt601([1.0, 0.0, 0.0]) - 0.299).abs() < 1e-15);
    }

    #[test]
    fn tone_monotone_in_x() {
        let g = 2.2;
        let mut prev = tone_value(1e-6, g);
        for i in 1..200 {
            let x = 1e-6 + (i as f64 / 200.0) * 1.2;
            let t = tone_value(x, g);
            assert!(t >= prev);
            prev = t;
        }
    }
}
