//! Luma-channel PSNR and SSIM.

use super::Image;
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

const KY: [f64; 3] = [65.481, 128.553, 24.966];

/// Studio-swing luma of a `(n, 3, h, w)` tensor in `[0, 1]`; the result lies
/// in `[16, 235]` and has one channel.
pub fn rgb_to_y<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if t.c() != 3 {
        return Err(Error::Invalid(format!(
            "rgb_to_y needs 3 channels, got {}",
            t.c()
        )));
    }
    Ok(Tensor::from_fn([t.n(), 1, t.h(), t.w()], |n, _, y, x| {
        let v = 16.0
            + KY[0] * t.get(n, 0, y, x).as_f64()
            + KY[1] * t.get(n, 1, y, x).as_f64()
            + KY[2] * t.get(n, 2, y, x).as_f64();
        T::from_f64(v)
    }))
}

/// Luma of every pixel, row-major.
pub fn y_channel(img: &Image) -> Vec<f64> {
    img.pixels()
        .chunks_exact(3)
        .map(|p| {
            16.0 + (KY[0] * p[0] as f64 + KY[1] * p[1] as f64 + KY[2] * p[2] as f64) / 255.0
        })
        .collect()
}

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Luma planes with `shave` pixels removed from every border.
fn shaved_y(a: &Image, shave: usize) -> Result<(Vec<f64>, usize, usize)> {
    let (w, h) = (a.width(), a.height());
    if w <= 2 * shave || h <= 2 * shave {
        return Err(Error::Invalid(format!(
            "{w}x{h} image is too small to shave {shave} pixels"
        )));
    }
    let y = y_channel(a);
    let (sw, sh) = (w - 2 * shave, h - 2 * shave);
    let mut out = Vec::with_capacity(sw * sh);
    for row in shave..h - shave {
        out.extend_from_slice(&y[row * w + shave..row * w + w - shave]);
    }
    Ok((out, sw, sh))
}

/// Mean squared luma difference after shaving `shave` border pixels.
pub fn y_mse(a: &Image, b: &Image, shave: usize) -> Result<f64> {
    same_dims(a, b)?;
    let (ya, _, _) = shaved_y(a, shave)?;
    let (yb, _, _) = shaved_y(b, shave)?;
    let sum: f64 = ya.iter().zip(&yb).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(sum / ya.len() as f64)
}

/// `10 log10(255^2 / mse)`, infinite for `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

pub fn psnr(a: &Image, b: &Image, scale: usize) -> Result<f64> {
    Ok(psnr_from_mse(y_mse(a, b, scale)?))
}

const WIN: usize = 11;

fn gaussian_window() -> [f64; WIN] {
    let sigma = 1.5f64;
    let mut g = [0.0; WIN];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - (WIN / 2) as f64;
        *v = (-(d * d) / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filter over valid windows only.
fn filter(src: &[f64], w: usize, h: usize, g: &[f64; WIN]) -> Vec<f64> {
    let (ow, oh) = (w - WIN + 1, h - WIN + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..WIN).map(|k| g[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WIN).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity on luma with an 11x11 Gaussian window
/// (sigma 1.5), after shaving `scale` border pixels.
pub fn ssim(a: &Image, b: &Image, scale: usize) -> Result<f64> {
    same_dims(a, b)?;
    let (x, w, h) = shaved_y(a, scale)?;
    let (y, _, _) = shaved_y(b, scale)?;
    if w < WIN || h < WIN {
        return Err(Error::Invalid(format!(
            "{w}x{h} after shaving is smaller than the {WIN}x{WIN} window"
        )));
    }
    if x == y {
        return Ok(1.0);
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(a, b)| a * b).collect() };
    let mx = filter(&x, w, h, &g);
    let my = filter(&y, w, h, &g);
    let sxx = filter(&prod(&x, &x), w, h, &g);
    let syy = filter(&prod(&y, &y), w, h, &g);
    let sxy = filter(&prod(&x, &y), w, h, &g);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}
