//! Reverse-mode gradients, the Adam optimizer and the training loop.

mod adam;
mod autodiff;
mod gradcheck;

use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{Model, SUPPORTED_SCALES};
use crate::data::{bicubic_downscale, dihedral, load_png, to_tensor, Image, DIHEDRAL_ORDER};
use crate::tensor::Tensor;
use crate::weights::WeightStore;
use crate::{Error, Result};

pub use adam::{adam_step, AdamParams, AdamState};
pub use autodiff::{backward_graph, l1_grad, l1_loss, GradStore};
pub use gradcheck::{
    grad_check, grad_check_graph, grad_check_linear, linear_micro_graph, micro_config,
    GradCheckReport,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// The learning rate halves every this many steps.
    pub halve_every: u64,
    pub adam: AdamParams,
    pub batch: usize,
    pub max_steps: u64,
    /// LR patch side in pixels.
    pub patch: usize,
    /// One of these is drawn uniformly for every batch.
    pub scales: Vec<usize>,
    pub seed: u64,
    /// Steps between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    /// Assemble batches on a helper thread.
    pub prefetch: bool,
}

impl Default for TrainConfig {
    /// The published recipe with the schedule shortened a hundredfold.
    fn default() -> Self {
        Self {
            lr: 2e-4,
            halve_every: 4_000,
            adam: AdamParams::default(),
            batch: 64,
            max_steps: 12_000,
            patch: 64,
            scales: SUPPORTED_SCALES.to_vec(),
            seed: 0,
            checkpoint_every: 0,
            prefetch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.halve_every == 0 {
            return bad("learning rate and halving interval must be positive");
        }
        let a = &self.adam;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0 && a.eps > 0.0) {
            return bad("Adam betas must lie in (0, 1) and eps must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if self.patch < 8 {
            return bad("patch must be at least 8");
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !SUPPORTED_SCALES.contains(s)) {
            return bad("scales must be a non-empty subset of {2, 3, 4}");
        }
        Ok(())
    }
}

/// `lr * 2^-floor(step / halve_every)`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    let halvings = (step / cfg.halve_every.max(1)).min(1074) as i32;
    cfg.lr * 0.5f64.powi(halvings)
}

/// HR/LR training pairs for each scale.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    per_scale: Vec<(usize, Vec<(Image, Image)>)>,
}

impl TrainingSet {
    /// Degrades every HR image for each scale. Images too small for a
    /// `patch`-pixel LR crop are skipped with a warning.
    pub fn from_images(images: &[Image], scales: &[usize], patch: usize) -> Result<Self> {
        let mut per_scale = Vec::new();
        for &s in scales {
            let mut pairs = Vec::new();
            for (i, img) in images.iter().enumerate() {
                if img.width() < patch * s || img.height() < patch * s {
                    log::warn!(
                        "image {i} ({}x{}) is smaller than a {patch}-pixel patch at x{s}; skipped",
                        img.width(),
                        img.height()
                    );
                    continue;
                }
                let hr = img.crop_to_multiple(s);
                let lr = bicubic_downscale(&hr, s)?;
                pairs.push((hr, lr));
            }
            if pairs.is_empty() {
                return Err(Error::Invalid(format!(
                    "no training image is large enough for a {patch}-pixel patch at x{s}"
                )));
            }
            per_scale.push((s, pairs));
        }
        if per_scale.is_empty() {
            return Err(Error::Invalid("no training scales".into()));
        }
        Ok(Self { per_scale })
    }

    /// Loads every PNG in `dir`, in filename order.
    pub fn load_dir(dir: &Path, scales: &[usize], patch: usize) -> Result<Self> {
        let rd = std::fs::read_dir(dir).map_err(|source| Error::Io {
            context: format!("listing {}", dir.display()),
            source,
        })?;
        let mut paths: Vec<_> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let mut images = Vec::with_capacity(paths.len());
        for p in paths {
            match load_png(&p) {
                Ok(img) => images.push(img),
                Err(e) => log::warn!("skipping {}: {e}", p.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::Invalid(format!("no readable PNG images in {}", dir.display())));
        }
        Self::from_images(&images, scales, patch)
    }

    pub fn pairs(&self, scale: usize) -> Option<&[(Image, Image)]> {
        self.per_scale
            .iter()
            .find(|(s, _)| *s == scale)
            .map(|(_, p)| p.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub lr: Tensor,
    pub hr: Tensor,
    pub scale: usize,
    /// Dihedral element applied to each item.
    pub transforms: Vec<u8>,
}

/// Random aligned LR/HR crops with dihedral augmentation at one uniformly
/// drawn scale.
pub fn sample_batch(set: &TrainingSet, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    let scale = cfg.scales[rng.gen_range(0..cfg.scales.len())];
    let pairs = set
        .pairs(scale)
        .ok_or_else(|| Error::Config(format!("training set has no pairs for x{scale}")))?;
    let p = cfg.patch;
    let mut lrs = Vec::with_capacity(cfg.batch);
    let mut hrs = Vec::with_capacity(cfg.batch);
    let mut transforms = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let (hr, lr) = &pairs[rng.gen_range(0..pairs.len())];
        if lr.width() < p || lr.height() < p {
            return Err(Error::Invalid(format!(
                "LR image {}x{} smaller than patch {p}",
                lr.width(),
                lr.height()
            )));
        }
        let x = rng.gen_range(0..=lr.width() - p);
        let y = rng.gen_range(0..=lr.height() - p);
        let g = rng.gen_range(0..DIHEDRAL_ORDER);
        let lr_crop = lr.crop(x, y, p, p)?;
        let hr_crop = hr.crop(x * scale, y * scale, p * scale, p * scale)?;
        lrs.push(dihedral(&to_tensor(&lr_crop), g));
        hrs.push(dihedral(&to_tensor(&hr_crop), g));
        transforms.push(g);
    }
    Ok(Batch {
        lr: Tensor::stack(&lrs)?,
        hr: Tensor::stack(&hrs)?,
        scale,
        transforms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Hooks called from [`train_loop`].
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}

    /// Called after `step` updates when checkpointing is enabled.
    fn on_checkpoint(&mut self, _step: u64, _weights: &WeightStore, _state: &AdamState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    pub state: AdamState,
}

/// Batch for `step`. Every step has its own random stream so runs can be
/// resumed and batches assembled ahead of time without changing results.
fn batch_for_step(set: &TrainingSet, cfg: &TrainConfig, step: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    sample_batch(set, cfg, &mut rng)
}

/// Loss and gradients of one batch.
pub fn backward(model: &Model, lr: &Tensor, hr: &Tensor, scale: usize) -> Result<(f64, GradStore)> {
    let tail = model.tail_nodes(scale)?;
    backward_graph(
        &model.graph,
        &model.weights,
        vec![(model.layout.input, lr.clone())],
        tail.output,
        hr,
    )
}

/// Runs sample, forward, backward and Adam from `state.step` (or 0) up to
/// `cfg.max_steps`.
///
/// A non-finite loss stops training before the offending update is applied,
/// so `model` still holds the last finite weights.
pub fn train_loop(
    model: &mut Model,
    set: &TrainingSet,
    cfg: &TrainConfig,
    state: Option<AdamState>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for &s in &cfg.scales {
        model.tail_nodes(s)?;
        set.pairs(s)
            .ok_or_else(|| Error::Config(format!("training set has no pairs for x{s}")))?;
    }
    let mut state = state.unwrap_or_else(|| AdamState::new(&model.weights));
    if !state.matches(&model.weights) {
        return Err(Error::Invalid("optimizer state does not match the model".into()));
    }
    let start = state.step;
    let mut history = Vec::new();

    let mut step_fn = |step: u64, batch: Batch, state: &mut AdamState| -> Result<()> {
        let lr = lr_schedule(step, cfg);
        let (loss, grads) = backward(model, &batch.lr, &batch.hr, batch.scale)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, loss });
        }
        adam_step(&mut model.weights, &grads, state, lr, &cfg.adam)?;
        let rec = StepRecord { step, loss, lr };
        observer.on_step(&rec);
        history.push(rec);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(state.step, &model.weights, state)?;
        }
        Ok(())
    };

    if cfg.prefetch {
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Batch>>(2);
            scope.spawn(move || {
                for step in start..cfg.max_steps {
                    if tx.send(batch_for_step(set, cfg, step)).is_err() {
                        break;
                    }
                }
            });
            for step in start..cfg.max_steps {
                let batch = rx
                    .recv()
                    .map_err(|_| Error::Invalid("batch loader stopped early".into()))??;
                step_fn(step, batch, &mut state)?;
            }
            Ok(())
        })?;
    } else {
        for step in start..cfg.max_steps {
            step_fn(step, batch_for_step(set, cfg, step)?, &mut state)?;
        }
    }
    Ok(TrainOutcome { history, state })
}

/// Trailing moving average of the loss over `window` steps.
pub fn smoothed_losses(history: &[StepRecord], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(history.len());
    let mut sum = 0.0;
    for (i, r) in history.iter().enumerate() {
        sum += r.loss;
        if i >= window {
            sum -= history[i - window].loss;
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
