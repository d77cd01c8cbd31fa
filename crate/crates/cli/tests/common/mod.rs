#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use mcan_core::data::{self, Image};
use mcan_core::format;
use mcan_core::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mcan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
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

pub fn write_weights(path: &Path, preset: &str, seed: Option<u64>) {
    let cfg = ModelConfig::named(preset, 2).unwrap();
    let model = match seed {
        Some(s) => Model::build(cfg, s).unwrap(),
        None => Model::zeroed(cfg).unwrap(),
    };
    format::save_weights(path, &model.weights, None).unwrap();
}

pub fn write_image(path: &Path, img: &Image) {
    data::save_png(img, path).unwrap();
}

/// Half-pixel bilinear upscaling of 8-bit pixels, rounded half away from
/// zero; the reference for a zero-weight network.
pub fn bilinear_image(img: &Image, s: usize) -> Image {
    let (w, h) = (img.width(), img.height());
    let src = |o: usize, len: usize| {
        let f = ((o as f64 + 0.5) / s as f64 - 0.5).max(0.0);
        let i0 = (f.floor() as usize).min(len - 1);
        (i0, (i0 + 1).min(len - 1), f - i0 as f64)
    };
    Image::from_fn(w * s, h * s, |ox, oy| {
        let (y0, y1, fy) = src(oy, h);
        let (x0, x1, fx) = src(ox, w);
        let mut out = [0u8; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let g = |x: usize, y: usize| img.pixel(x, y)[c] as f64 / 255.0;
            let top = g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx;
            let bot = g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx;
            *o = ((top * (1.0 - fy) + bot * fy) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        out
    })
}

/// Largest per-channel difference between two same-sized images.
pub fn max_pixel_diff(a: &Image, b: &Image) -> u8 {
    assert_eq!((a.width(), a.height()), (b.width(), b.height()));
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| x.abs_diff(*y))
        .max()
        .unwrap_or(0)
}
