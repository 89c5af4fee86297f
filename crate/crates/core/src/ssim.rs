//! SSIM with the standard 11x11 Gaussian window (sigma 1.5), valid-window
//! mode, averaged over channels. One implementation serves both the loss
//! term and the eval metric so the two agree bit for bit.

use crate::image::ImageBuf;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Horizontal valid convolution: (w, h) -> (w - 10, h).
fn conv_h(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let wv = w - (WINDOW - 1);
    let mut out = vec![0.0; wv * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let orow = &mut out[y * wv..(y + 1) * wv];
        for x in 0..wv {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * row[x + t];
            }
            orow[x] = acc;
        }
    }
    out
}

/// Vertical valid convolution: (w, h) -> (w, h - 10).
fn conv_v(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let hv = h - (WINDOW - 1);
    let mut out = vec![0.0; w * hv];
    for y in 0..hv {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * src[(y + t) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn conv_valid(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    conv_v(&conv_h(src, w, h, k), w - (WINDOW - 1), h, k)
}

/// Adjoint of `conv_valid`: spreads window-grid values back onto the full
/// pixel grid through the same separable kernel.
fn scatter_full(src: &[f64], wv: usize, hv: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let w = wv + WINDOW - 1;
    let h = hv + WINDOW - 1;
    let mut tmp = vec![0.0; w * hv];
    for y in 0..hv {
        for px in 0..wv {
            let v = src[y * wv + px];
            if v == 0.0 {
                continue;
            }
            for (t, &kv) in k.iter().enumerate() {
                tmp[y * w + px + t] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for py in 0..hv {
        for x in 0..w {
            let v = tmp[py * w + x];
            if v == 0.0 {
                continue;
            }
            for (t, &kv) in k.iter().enumerate() {
                out[(py + t) * w + x] += kv * v;
            }
        }
    }
    out
}

fn plane(img: &ImageBuf, ch: usize) -> Vec<f64> {
    img.data.iter().map(|p| p[ch]).collect()
}

struct WindowStats {
    s_map: Vec<f64>,
    g0: Vec<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

fn channel_stats(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> WindowStats {
    let n = x.len();
    let xx: Vec<f64> = (0..n).map(|i| x[i] * x[i]).collect();
    let yy: Vec<f64> = (0..n).map(|i| y[i] * y[i]).collect();
    let xy: Vec<f64> = (0..n).map(|i| x[i] * y[i]).collect();
    let mx = conv_valid(x, w, h, k);
    let my = conv_valid(y, w, h, k);
    let mxx = conv_valid(&xx, w, h, k);
    let myy = conv_valid(&yy, w, h, k);
    let mxy = conv_valid(&xy, w, h, k);
    let nv = mx.len();
    let mut s_map = vec![0.0; nv];
    let mut g0 = vec![0.0; nv];
    let mut g1 = vec![0.0; nv];
    let mut g2 = vec![0.0; nv];
    for i in 0..nv {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let vxy = mxy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + C1;
        let a2 = 2.0 * vxy + C2;
        let b1 = ux * ux + uy * uy + C1;
        let b2 = vx + vy + C2;
        let s = (a1 * a2) / (b1 * b2);
        s_map[i] = s;
        let inv_b1b2 = 1.0 / (b1 * b2);
        g1[i] = 2.0 * a1 * inv_b1b2;
        g2[i] = -2.0 * s / b2;
        g0[i] = 2.0 * uy * (a2 - a1) * inv_b1b2 - 2.0 * s * ux * (1.0 / b1 - 1.0 / b2);
    }
    WindowStats { s_map, g0, g1, g2 }
}

fn check_dims(a: &ImageBuf, b: &ImageBuf) {
    assert!(a.same_dims(b), "image dimensions differ");
    assert!(
        a.width >= WINDOW && a.height >= WINDOW,
        "images must be at least {WINDOW}x{WINDOW} for SSIM"
    );
}

/// Mean SSIM over valid windows and channels.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> f64 {
    check_dims(a, b);
    let k = kernel();
    let mut total = 0.0;
    for ch in 0..3 {
        let stats = channel_stats(&plane(a, ch), &plane(b, ch), a.width, a.height, &k);
        total += stats.s_map.iter().sum::<f64>() / stats.s_map.len() as f64;
    }
    total / 3.0
}

/// Mean SSIM plus its gradient with respect to `pred`.
pub fn ssim_with_grad(pred: &ImageBuf, obs: &ImageBuf) -> (f64, Vec<[f64; 3]>) {
    check_dims(pred, obs);
    let k = kernel();
    let (w, h) = (pred.width, pred.height);
    let (wv, hv) = (w - (WINDOW - 1), h - (WINDOW - 1));
    let nv = (wv * hv) as f64;
    let mut total = 0.0;
    let mut grad = vec![[0.0f64; 3]; w * h];
    for ch in 0..3 {
        let x = plane(pred, ch);
        let y = plane(obs, ch);
        let stats = channel_stats(&x, &y, w, h, &k);
        total += stats.s_map.iter().sum::<f64>() / nv;
        let z0 = scatter_full(&stats.g0, wv, hv, &k);
        let z1 = scatter_full(&stats.g1, wv, hv, &k);
        let z2 = scatter_full(&stats.g2, wv, hv, &k);
        let scale = 1.0 / (nv * 3.0);
        for i in 0..w * h {
            grad[i][ch] = (z0[i] + z1[i] * y[i] + z2[i] * x[i]) * scale;
        }
    }
    (total / 3.0, grad)
}
