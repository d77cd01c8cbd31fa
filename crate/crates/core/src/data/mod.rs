//! Images, degradation, quality metrics, self-ensemble and dataset
//! evaluation.

mod ensemble;
mod eval;
mod metrics;
mod resize;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use thiserror::Error as ThisError;

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

pub use ensemble::{dihedral, dihedral_inverse, self_ensemble, self_ensemble_with, DIHEDRAL_ORDER};
pub use eval::{evaluate, evaluate_with, EvalOptions, EvalReport, ImageScore, SkippedFile};
pub use metrics::{psnr, psnr_from_mse, rgb_to_y, ssim, y_channel, y_mse};
pub use resize::{bicubic_downscale, bicubic_resize, cubic_weight};

#[derive(Debug, ThisError)]
pub enum ImageError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: cannot decode PNG: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },
    #[error("{}: unsupported image format: {what}", path.display())]
    Unsupported { path: PathBuf, what: String },
}

/// 8-bit RGB image, pixels interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(Error::Invalid(format!(
                "{width}x{height} image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// The `w x h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Invalid(format!(
                "crop {w}x{h}+{x}+{y} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(3 * w * h);
        for row in y..y + h {
            let start = 3 * (row * self.width + x);
            pixels.extend_from_slice(&self.pixels[start..start + 3 * w]);
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    /// Center crop so both sides are multiples of `m`.
    pub fn crop_to_multiple(&self, m: usize) -> Self {
        let w = self.width / m * m;
        let h = self.height / m * m;
        if w == self.width && h == self.height {
            return self.clone();
        }
        self.crop((self.width - w) / 2, (self.height - h) / 2, w, h)
            .expect("window lies inside the image")
    }
}

/// Reads an 8-bit PNG. Grayscale is replicated to RGB, alpha is dropped and
/// palettes are expanded; 16-bit images are rejected.
pub fn load_png(path: &Path) -> Result<Image, ImageError> {
    let file = File::open(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let decode_err = |e: png::DecodingError| match e {
        png::DecodingError::IoError(source) => ImageError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => ImageError::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(decode_err)?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(ImageError::Unsupported {
            path: path.to_path_buf(),
            what: "16-bit samples".into(),
        });
    }
    let size = reader.output_buffer_size().ok_or_else(|| ImageError::Decode {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(ImageError::Unsupported {
                path: path.to_path_buf(),
                what: "unexpanded palette".into(),
            })
        }
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::Unsupported {
            path: path.to_path_buf(),
            what: format!("{:?} bit depth", info.bit_depth),
        });
    }
    let mut pixels = Vec::with_capacity(3 * w * h);
    for row in 0..h {
        let line = &buf[row * info.line_size..row * info.line_size + w * channels];
        for px in line.chunks_exact(channels) {
            match channels {
                1 | 2 => pixels.extend_from_slice(&[px[0]; 3]),
                _ => pixels.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok(Image {
        width: w,
        height: h,
        pixels,
    })
}

pub fn save_png(image: &Image, path: &Path) -> Result<(), ImageError> {
    let io_err = |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    };
    let enc_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(source) => io_err(source),
        other => ImageError::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let file = File::create(path).map_err(io_err)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(enc_err)?;
    writer.write_image_data(&image.pixels).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

/// `(1, 3, h, w)` tensor with values in `[0, 1]`.
pub fn to_tensor<T: Element>(image: &Image) -> Tensor<T> {
    Tensor::from_fn([1, 3, image.height, image.width], |_, c, y, x| {
        T::from_f64(image.pixels[3 * (y * image.width + x) + c] as f64 / 255.0)
    })
}

/// Scales by 255, rounds half away from zero and clamps to `[0, 255]`.
/// Only the first item of a batch is converted.
pub fn to_image<T: Element>(t: &Tensor<T>) -> Result<Image> {
    if t.c() != 3 || t.n() == 0 {
        return Err(Error::Invalid(format!(
            "to_image needs a 3-channel tensor, got shape {:?}",
            t.shape()
        )));
    }
    let (h, w) = (t.h(), t.w());
    Ok(Image::from_fn(w, h, |x, y| {
        let q = |c| {
            let v = (t.get(0, c, y, x).as_f64() * 255.0).round();
            if v.is_nan() {
                0
            } else {
                v.clamp(0.0, 255.0) as u8
            }
        };
        [q(0), q(1), q(2)]
    }))
}
