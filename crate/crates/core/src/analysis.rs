//! Static cost accounting: parameters, multiply-accumulates and gate counts.
//!
//! Only convolutions are counted. Bias additions, activations, pooling,
//! pixel shuffles and the bilinear skip are free.

use std::fmt::Write as _;

use crate::arch::graph::{Extent, Graph, NodeId};
use crate::arch::{Model, ModelConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub mult_adds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub model: String,
    pub scale: usize,
    pub hr_size: (usize, usize),
    pub params: u64,
    pub mult_adds: u64,
    pub sigmoid_count: u64,
    pub per_layer: Vec<LayerCost>,
}

/// Parameters (weights and biases) of every convolution in the graph.
pub fn graph_params(graph: &Graph) -> u64 {
    graph.convs().map(|(_, _, s)| s.param_count()).sum()
}

/// Per-conv MACs for producing `target` from an input of `input_area`
/// pixels. Convs that do not feed `target` cost nothing.
pub fn graph_layer_costs(graph: &Graph, target: NodeId, input_area: u64) -> Vec<LayerCost> {
    let live = graph.ancestors(target);
    graph
        .convs()
        .map(|(id, node, spec)| {
            let pixels = match node.extent {
                Extent::Grid(f) => input_area * (f * f) as u64,
                // size-independent 1x1 work on pooled statistics is not counted
                Extent::Pooled => 0,
            };
            LayerCost {
                name: node.name.clone(),
                params: spec.param_count(),
                mult_adds: if live[id] {
                    spec.macs_per_pixel() * pixels
                } else {
                    0
                },
            }
        })
        .collect()
}

pub fn graph_mult_adds(graph: &Graph, target: NodeId, input_area: u64) -> u64 {
    graph_layer_costs(graph, target, input_area)
        .iter()
        .map(|l| l.mult_adds)
        .sum()
}

pub fn count_params(model: &Model) -> u64 {
    graph_params(&model.graph)
}

/// Pixels of the low-resolution input whose upscaled output covers
/// `hr_h x hr_w`.
pub fn lr_area(hr_size: (usize, usize), scale: usize) -> Result<u64> {
    let area = (hr_size.0 * hr_size.1) as u64;
    let s2 = (scale * scale) as u64;
    if scale == 0 || area == 0 || area % s2 != 0 {
        return Err(Error::Invalid(format!(
            "HR size {}x{} does not cover a whole number of LR pixels at scale {scale}",
            hr_size.1, hr_size.0
        )));
    }
    Ok(area / s2)
}

/// MACs of one forward pass at the model's scale producing an
/// `hr_h x hr_w` output.
pub fn count_mult_adds(model: &Model, hr_size: (usize, usize)) -> Result<u64> {
    Ok(report(model, hr_size)?.mult_adds)
}

/// Gate activations per forward pass: one gate of `n_mim` channels per RCAB.
pub fn count_sigmoids(config: &ModelConfig) -> u64 {
    (config.d * config.k * config.m * config.n_mim) as u64
}

pub fn report(model: &Model, hr_size: (usize, usize)) -> Result<CostReport> {
    let scale = model.config.scale;
    let area = lr_area(hr_size, scale)?;
    let tail = model.tail_nodes(scale)?;
    let per_layer = graph_layer_costs(&model.graph, tail.output, area);
    Ok(CostReport {
        model: String::new(),
        scale,
        hr_size,
        params: per_layer.iter().map(|l| l.params).sum(),
        mult_adds: per_layer.iter().map(|l| l.mult_adds).sum(),
        sigmoid_count: count_sigmoids(&model.config),
        per_layer,
    })
}

fn human(v: u64, unit: char) -> String {
    match unit {
        'G' => format!("{:.2}G", v as f64 / 1e9),
        _ => format!("{:.1}K", v as f64 / 1e3),
    }
}

impl CostReport {
    pub fn with_model_name(mut self, name: impl Into<String>) -> Self {
        self.model = name.into();
        self
    }

    /// Aligned text table with a per-layer breakdown.
    pub fn to_table(&self, per_layer: bool) -> String {
        let mut s = String::new();
        let (h, w) = self.hr_size;
        if !self.model.is_empty() {
            let _ = writeln!(s, "model        {}", self.model);
        }
        let _ = writeln!(s, "scale        x{}", self.scale);
        let _ = writeln!(s, "hr size      {w}x{h}");
        let _ = writeln!(s, "params       {} ({})", self.params, human(self.params, 'K'));
        let _ = writeln!(
            s,
            "mult-adds    {} ({})",
            self.mult_adds,
            human(self.mult_adds, 'G')
        );
        let _ = writeln!(s, "sigmoids     {}", self.sigmoid_count);
        if per_layer {
            let width = self.per_layer.iter().map(|l| l.name.len()).max().unwrap_or(5);
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<width$}  {:>10}  {:>14}", "layer", "params", "mult-adds");
            for l in &self.per_layer {
                let _ = writeln!(s, "{:<width$}  {:>10}  {:>14}", l.name, l.params, l.mult_adds);
            }
        }
        s
    }

    /// One `key=value` pair per line.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        if !self.model.is_empty() {
            let _ = writeln!(s, "model={}", self.model);
        }
        let _ = writeln!(s, "scale={}", self.scale);
        let _ = writeln!(s, "hr_width={}", self.hr_size.1);
        let _ = writeln!(s, "hr_height={}", self.hr_size.0);
        let _ = writeln!(s, "params={}", self.params);
        let _ = writeln!(s, "mult_adds={}", self.mult_adds);
        let _ = writeln!(s, "sigmoids={}", self.sigmoid_count);
        for l in &self.per_layer {
            let _ = writeln!(s, "layer={},{},{}", l.name, l.params, l.mult_adds);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::graph::GraphBuilder;
    use crate::tensor::ConvSpec;

    #[test]
    fn single_conv_params() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", 3).unwrap();
        let c = b.conv("c", x, ConvSpec::same(3, 64, 3)).unwrap();
        let g = b.finish();
        assert_eq!(graph_params(&g), 1792);
        assert_eq!(graph_mult_adds(&g, c, 10), 9 * 3 * 64 * 10);
    }

    #[test]
    fn sigmoid_count_formula() {
        let cfg = ModelConfig::named("MCAN", 2).unwrap();
        assert_eq!(count_sigmoids(&cfg), 864);
        let mut one = cfg.clone();
        (one.d, one.k, one.m, one.n_mim) = (1, 1, 1, 1);
        assert_eq!(count_sigmoids(&one), 1);
    }

    #[test]
    fn mult_adds_are_linear_in_area() {
        let m = Model::build(ModelConfig::named("MCAN-T", 2).unwrap(), 0).unwrap();
        let a = count_mult_adds(&m, (64, 64)).unwrap();
        let b = count_mult_adds(&m, (64, 128)).unwrap();
        assert_eq!(2 * a, b);
        assert!(count_mult_adds(&m, (63, 63)).is_err());
    }

    #[test]
    fn per_layer_rows_sum_to_totals() {
        let m = Model::build(ModelConfig::named("MCAN-S", 4).unwrap(), 0).unwrap();
        let r = report(&m, (720, 1280)).unwrap();
        assert_eq!(r.params, count_params(&m));
        assert_eq!(r.params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.mult_adds, r.per_layer.iter().map(|l| l.mult_adds).sum::<u64>());
        assert!(r.to_table(true).contains("mim.d2.k2.m3.fuse"));
        assert!(r.to_records().contains("sigmoids=432"));
    }

    #[test]
    fn params_do_not_depend_on_selected_scale() {
        let p: Vec<u64> = [2, 3, 4]
            .iter()
            .map(|&s| count_params(&Model::build(ModelConfig::named("MCAN", s).unwrap(), 0).unwrap()))
            .collect();
        assert!(p.windows(2).all(|w| w[0] == w[1]));
    }
}
