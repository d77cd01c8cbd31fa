//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use mcan_core::data::Image;
use mcan_core::tensor::{ConvSpec, Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook grouped cross-correlation in `f64`, one output at a time.
pub fn conv_oracle<T: Element>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Tensor<f64> {
    let [n, _, h, wd] = x.shape();
    let (kh, kw) = spec.kernel;
    let p = spec.padding as isize;
    let ho = h + 2 * spec.padding + 1 - kh;
    let wo = wd + 2 * spec.padding + 1 - kw;
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    Tensor::from_fn([n, spec.out_channels, ho, wo], |bn, oc, oy, ox| {
        let g = oc / ocg;
        let mut acc = b.map_or(0.0, |b| b.data()[oc].as_f64());
        for i in 0..icg {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = oy as isize + ky as isize - p;
                    let ix = ox as isize + kx as isize - p;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    acc += w.get(oc, i, ky, kx).as_f64()
                        * x.get(bn, g * icg + i, iy as usize, ix as usize).as_f64();
                }
            }
        }
        acc
    })
}

/// Half-pixel bilinear upscaling by `s`, source coordinates clamped at 0.
pub fn bilinear_oracle<T: Element>(x: &Tensor<T>, s: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let src = |o: usize, len: usize| {
        let f = ((o as f64 + 0.5) / s as f64 - 0.5).max(0.0);
        let i0 = (f.floor() as usize).min(len - 1);
        (i0, (i0 + 1).min(len - 1), f - i0 as f64)
    };
    Tensor::from_fn([n, c, h * s, w * s], |b, ch, oy, ox| {
        let (y0, y1, fy) = src(oy, h);
        let (x0, x1, fx) = src(ox, w);
        let g = |y, xx| x.get(b, ch, y, xx).as_f64();
        let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
        let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

pub fn max_abs_diff<T: Element>(a: &Tensor<T>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p.as_f64() - q).abs())
        .fold(0.0, f64::max)
}

/// `max |a - b| / max |b|`.
pub fn normwise_rel_error<T: Element>(a: &Tensor<T>, b: &Tensor<f64>) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    max_abs_diff(a, b) / scale.max(1e-30)
}

pub fn random_tensor<T: Element>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64(rng.gen_range(lo..hi)))
}

/// Piecewise-constant rectangles over a sinusoidal background.
pub fn synthetic_image(seed: u64, w: usize, h: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rects: Vec<(usize, usize, usize, usize, [u8; 3])> = (0..6)
        .map(|_| {
            let x = rng.gen_range(0..w - 8);
            let y = rng.gen_range(0..h - 8);
            let (rw, rh) = (rng.gen_range(4..w / 2), rng.gen_range(4..h / 2));
            (x, y, x + rw, y + rh, [rng.gen(), rng.gen(), rng.gen()])
        })
        .collect();
    let f = rng.gen_range(0.15..0.5f64);
    Image::from_fn(w, h, |x, y| {
        let mut p = [
            ((x as f64 * f).sin() * 60.0 + 128.0) as u8,
            90,
            ((y as f64 * f).cos() * 60.0 + 128.0) as u8,
        ];
        for &(x0, y0, x1, y1, c) in &rects {
            if x >= x0 && x < x1 && y >= y0 && y < y1 {
                p = c;
            }
        }
        p
    })
}
