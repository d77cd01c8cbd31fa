//! Dataset-level PSNR/SSIM evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{bicubic_downscale, load_png, psnr, self_ensemble_with, ssim, to_image, to_tensor, Image};
use crate::arch::Model;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub scale: usize,
    pub ensemble: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedFile {
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scale: usize,
    /// Border pixels excluded from both metrics.
    pub shave: usize,
    pub ensemble: bool,
    pub rows: Vec<ImageScore>,
    pub skipped: Vec<SkippedFile>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|source| Error::Io {
        context: format!("listing {}", dir.display()),
        source,
    })?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// HR files and, for paired layouts, the directory holding LR inputs.
///
/// `dir/HR` + `dir/LR` (optionally `dir/LR/x{scale}`) is a paired layout;
/// anything else is a flat directory of HR images.
fn resolve_layout(dir: &Path, scale: usize) -> Result<(Vec<PathBuf>, Option<PathBuf>)> {
    let hr_dir = dir.join("HR");
    if hr_dir.is_dir() {
        let lr_root = dir.join("LR");
        let scaled = lr_root.join(format!("x{scale}"));
        let lr = if scaled.is_dir() {
            Some(scaled)
        } else if lr_root.is_dir() {
            Some(lr_root)
        } else {
            None
        };
        Ok((list_pngs(&hr_dir)?, lr))
    } else {
        Ok((list_pngs(dir)?, None))
    }
}

/// Ground truth and network input for one file.
fn load_pair(hr_path: &Path, lr_dir: Option<&Path>, scale: usize) -> Result<(Image, Image)> {
    let hr = load_png(hr_path)?.crop_to_multiple(scale);
    let paired = lr_dir
        .map(|d| d.join(hr_path.file_name().expect("listed files have names")))
        .filter(|p| p.is_file());
    let lr = match paired {
        Some(p) => {
            let lr = load_png(&p)?;
            if lr.width() * scale != hr.width() || lr.height() * scale != hr.height() {
                return Err(Error::Invalid(format!(
                    "LR {}x{} does not match HR {}x{} at x{scale}",
                    lr.width(),
                    lr.height(),
                    hr.width(),
                    hr.height()
                )));
            }
            lr
        }
        None => bicubic_downscale(&hr, scale)?,
    };
    Ok((hr, lr))
}

/// Scores `upscale` on every PNG under `dir`, in filename order.
pub fn evaluate_with(
    dir: &Path,
    opts: EvalOptions,
    mut upscale: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<EvalReport> {
    let (files, lr_dir) = resolve_layout(dir, opts.scale)?;
    if files.is_empty() {
        return Err(Error::Invalid(format!("no PNG images in {}", dir.display())));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for path in files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let scored = load_pair(&path, lr_dir.as_deref(), opts.scale).and_then(|(hr, lr)| {
            let sr = to_image(&upscale(&to_tensor(&lr))?)?;
            Ok((psnr(&sr, &hr, opts.scale)?, ssim(&sr, &hr, opts.scale)?))
        });
        match scored {
            Ok((p, s)) => rows.push(ImageScore { name, psnr: p, ssim: s }),
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                skipped.push(SkippedFile {
                    name,
                    reason: e.to_string(),
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Invalid(format!(
            "no image in {} could be evaluated",
            dir.display()
        )));
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        scale: opts.scale,
        shave: opts.scale,
        ensemble: opts.ensemble,
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
        skipped,
    })
}

pub fn evaluate(model: &Model, dir: &Path, opts: EvalOptions) -> Result<EvalReport> {
    if opts.ensemble {
        let all: Vec<u8> = (0..super::DIHEDRAL_ORDER).collect();
        evaluate_with(dir, opts, |x| {
            self_ensemble_with(x, &all, |t| model.forward_at(t, opts.scale))
        })
    } else {
        evaluate_with(dir, opts, |x| model.forward_at(x, opts.scale))
    }
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(std::iter::once(5))
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scale x{}  shave {}  self-ensemble {}",
            self.scale,
            self.shave,
            if self.ensemble { "on" } else { "off" }
        );
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>7}", "image", "PSNR", "SSIM");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.5}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>7.5}",
            "MEAN", self.mean_psnr, self.mean_ssim
        );
        for k in &self.skipped {
            let _ = writeln!(s, "skipped {}: {}", k.name, k.reason);
        }
        s
    }

    /// `name,psnr,ssim` per image followed by a `MEAN` line.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "MEAN,{:.6},{:.6}", self.mean_psnr, self.mean_ssim);
        s
    }
}
