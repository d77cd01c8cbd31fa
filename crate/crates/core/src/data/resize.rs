//! Separable bicubic resampling with an antialiased kernel when shrinking.

use super::Image;
use crate::{Error, Result};

const A: f32 = -0.5;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(x: f32) -> f32 {
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and normalized weights for every output position.
struct Taps {
    start: Vec<isize>,
    weights: Vec<Vec<f32>>,
}

fn taps(in_len: usize, out_len: usize) -> Taps {
    let factor = out_len as f32 / in_len as f32;
    // widen the kernel when shrinking so it also low-pass filters
    let stretch = if factor < 1.0 { factor } else { 1.0 };
    let half = 2.0 / stretch;
    let mut start = Vec::with_capacity(out_len);
    let mut weights = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let center = (i as f32 + 0.5) / factor - 0.5;
        let first = (center - half).floor() as isize;
        let last = (center + half).ceil() as isize;
        let mut w: Vec<f32> = (first..=last)
            .map(|j| cubic_weight((center - j as f32) * stretch))
            .collect();
        let sum: f32 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
        start.push(first);
        weights.push(w);
    }
    Taps { start, weights }
}

fn clamp_index(j: isize, len: usize) -> usize {
    j.clamp(0, len as isize - 1) as usize
}

fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Resizes to `out_w x out_h`. Borders replicate the edge pixels.
pub fn bicubic_resize(image: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 || out_w == 0 || out_h == 0 {
        return Err(Error::Invalid(format!(
            "cannot resize {w}x{h} to {out_w}x{out_h}"
        )));
    }
    let px = image.pixels();
    let tx = taps(w, out_w);
    let ty = taps(h, out_h);

    // horizontal pass into f32 rows
    let mut mid = vec![0f32; 3 * out_w * h];
    for y in 0..h {
        for (i, (&s, ws)) in tx.start.iter().zip(&tx.weights).enumerate() {
            for c in 0..3 {
                let mut acc = 0f32;
                for (t, &wt) in ws.iter().enumerate() {
                    let x = clamp_index(s + t as isize, w);
                    acc += wt * px[3 * (y * w + x) + c] as f32;
                }
                mid[3 * (y * out_w + i) + c] = acc;
            }
        }
    }
    let mut out = vec![0u8; 3 * out_w * out_h];
    for (j, (&s, ws)) in ty.start.iter().zip(&ty.weights).enumerate() {
        for i in 0..out_w {
            for c in 0..3 {
                let mut acc = 0f32;
                for (t, &wt) in ws.iter().enumerate() {
                    let y = clamp_index(s + t as isize, h);
                    acc += wt * mid[3 * (y * out_w + i) + c];
                }
                out[3 * (j * out_w + i) + c] = quantize(acc);
            }
        }
    }
    Image::new(out_w, out_h, out)
}

/// Bicubic degradation by an integer factor. The image is first center
/// cropped to a multiple of `scale`.
pub fn bicubic_downscale(hr: &Image, scale: usize) -> Result<Image> {
    if scale == 0 {
        return Err(Error::Invalid("scale must be positive".into()));
    }
    let hr = hr.crop_to_multiple(scale);
    if scale == 1 {
        return Ok(hr);
    }
    bicubic_resize(&hr, hr.width() / scale, hr.height() / scale)
}
