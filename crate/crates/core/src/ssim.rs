//! Structural similarity with an 11×11 Gaussian window (σ = 1.5) and zero padding.

use crate::image::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable "same" filtering of one plane with zero padding.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

/// Mean SSIM over all pixels and channels.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    ssim_impl(a, b, false).0
}

/// Mean SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> (f64, Image) {
    let (v, g) = ssim_impl(a, b, true);
    (v, g.unwrap())
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Image>) {
    assert!(a.same_shape(b), "ssim inputs differ in shape");
    let (w, h, ch) = (a.width, a.height, a.channels);
    let n = (w * h * ch) as f64;
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::zeros(w, h, ch));
    for c in 0..ch {
        let x = plane(a, c);
        let y = plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter(&x, w, h, &k);
        let my = filter(&y, w, h, &k);
        let exx = filter(&xx, w, h, &k);
        let eyy = filter(&yy, w, h, &k);
        let exy = filter(&xy, w, h, &k);
        let mut d_mx = vec![0.0; w * h];
        let mut d_exx = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for p in 0..w * h {
            let sxx = exx[p] - mx[p] * mx[p];
            let syy = eyy[p] - my[p] * my[p];
            let sxy = exy[p] - mx[p] * my[p];
            let a1 = 2.0 * mx[p] * my[p] + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = mx[p] * mx[p] + my[p] * my[p] + C1;
            let b2 = sxx + syy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let da1 = 2.0 * my[p];
                let da2 = -2.0 * my[p];
                let db1 = 2.0 * mx[p];
                let db2 = -2.0 * mx[p];
                d_mx[p] = (da1 * a2 + a1 * da2) / (b1 * b2) - s * (db1 / b1 + db2 / b2);
                d_exx[p] = -s / b2;
                d_exy[p] = 2.0 * a1 / (b1 * b2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let f_mx = filter(&d_mx, w, h, &k);
            let f_exx = filter(&d_exx, w, h, &k);
            let f_exy = filter(&d_exy, w, h, &k);
            for p in 0..w * h {
                g.data[p * ch + c] = (f_mx[p] + 2.0 * x[p] * f_exx[p] + y[p] * f_exy[p]) / n;
            }
        }
    }
    (total / n, grad)
}
