//! TOML run files for `count` and `train`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use mcan_core::train::{AdamParams, TrainConfig};
use mcan_core::{ModelConfig, SigmoidVariant};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

/// A preset plus optional overrides.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_scale")]
    pub scale: usize,
    pub sigmoid: Option<String>,
    pub mim_connections: Option<bool>,
    pub eff_enabled: Option<bool>,
}

fn default_preset() -> String {
    "MCAN".into()
}

fn default_scale() -> usize {
    2
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: default_preset(),
            scale: default_scale(),
            sigmoid: None,
            mim_connections: None,
            eff_enabled: None,
        }
    }
}

/// Unset fields keep [`TrainConfig::default`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub halve_every: Option<u64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub batch: Option<usize>,
    pub max_steps: Option<u64>,
    pub patch: Option<usize>,
    pub scales: Option<Vec<usize>>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub prefetch: Option<bool>,
}

pub fn parse_sigmoid(s: &str) -> Result<SigmoidVariant> {
    match s.to_ascii_lowercase().as_str() {
        "standard" => Ok(SigmoidVariant::Standard),
        "fast" => Ok(SigmoidVariant::Fast),
        other => bail!("unknown sigmoid `{other}`, expected `standard` or `fast`"),
    }
}

impl RunFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::named(&m.preset, m.scale)?;
        if let Some(s) = &m.sigmoid {
            cfg.sigmoid = parse_sigmoid(s)?;
        }
        if let Some(v) = m.mim_connections {
            cfg.mim_connections = v;
        }
        if let Some(v) = m.eff_enabled {
            cfg.eff_enabled = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr: t.lr.unwrap_or(d.lr),
            halve_every: t.halve_every.unwrap_or(d.halve_every),
            adam: AdamParams {
                beta1: t.beta1.unwrap_or(d.adam.beta1),
                beta2: t.beta2.unwrap_or(d.adam.beta2),
                eps: t.eps.unwrap_or(d.adam.eps),
            },
            batch: t.batch.unwrap_or(d.batch),
            max_steps: t.max_steps.unwrap_or(d.max_steps),
            patch: t.patch.unwrap_or(d.patch),
            scales: t.scales.clone().unwrap_or(vec![self.model.scale]),
            seed: t.seed.unwrap_or(d.seed),
            checkpoint_every: t.checkpoint_every.unwrap_or(d.checkpoint_every),
            prefetch: t.prefetch.unwrap_or(d.prefetch),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_uses_defaults() {
        let f = RunFile::parse("").unwrap();
        let m = f.model_config().unwrap();
        assert_eq!(m, ModelConfig::named("MCAN", 2).unwrap());
        let t = f.train_config().unwrap();
        assert_eq!(t.scales, vec![2]);
        assert_eq!(t.lr, TrainConfig::default().lr);
    }

    #[test]
    fn overrides_apply() {
        let f = RunFile::parse(
            r#"
            [model]
            preset = "mcan-t"
            scale = 3
            sigmoid = "fast"
            eff_enabled = false
            [train]
            max_steps = 10
            batch = 2
            patch = 16
            "#,
        )
        .unwrap();
        let m = f.model_config().unwrap();
        assert_eq!(m.scale, 3);
        assert_eq!(m.sigmoid, SigmoidVariant::Fast);
        assert!(!m.eff_enabled && m.mim_connections);
        let t = f.train_config().unwrap();
        assert_eq!((t.max_steps, t.batch, t.patch), (10, 2, 16));
        assert_eq!(t.scales, vec![3]);
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        assert!(RunFile::parse("[model]\nwidth = 3\n").is_err());
        let f = RunFile::parse("[model]\nsigmoid = \"tanh\"\n").unwrap();
        assert!(f.model_config().is_err());
        let f = RunFile::parse("[train]\nbatch = 0\n").unwrap();
        assert!(f.train_config().is_err());
    }
}
