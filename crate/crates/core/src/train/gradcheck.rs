//! Central-difference verification of the analytic gradients, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::autodiff::{backward_graph, l1_loss};
use crate::arch::graph::{Graph, GraphBuilder, NodeId};
use crate::arch::{Model, ModelConfig, SigmoidVariant};
use crate::tensor::{ConvSpec, Tensor};
use crate::weights::WeightStore;
use crate::{Error, Result};

/// Largest model the check accepts.
pub const MAX_PARAMS: usize = 5_000;
const STEP: f64 = 1e-3;
/// Each failing scalar is retried this many times with the step divided by
/// ten, which resolves kink crossings and curvature error.
const REFINEMENTS: usize = 3;
/// Absolute floor of the relative-error denominator.
const FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter with the largest error, as `name[index]`.
    pub worst: String,
    pub checked: usize,
    /// Scalars that needed a smaller step.
    pub refined: usize,
}

/// One cell, one block, one RCAB at width 4; about 1.5K parameters.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        scale: 2,
        tail_scales: vec![2],
        d: 1,
        k: 1,
        m: 1,
        n_fe: (8, 4),
        n_mim: 4,
        n_eff: (4, 4),
        n_l: 8,
        reduction: 2,
        rcab_groups: 1,
        sigmoid: SigmoidVariant::Standard,
        mim_connections: true,
        eff_enabled: true,
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compares every analytic gradient of the L1 loss with central differences.
pub fn grad_check_graph(
    graph: &Graph,
    weights: &WeightStore<f64>,
    input_node: NodeId,
    input: &Tensor<f64>,
    output: NodeId,
    target: &Tensor<f64>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if weights.scalar_count() > MAX_PARAMS {
        return Err(Error::Invalid(format!(
            "{} parameters is too many for a finite-difference check",
            weights.scalar_count()
        )));
    }
    let seeds = || vec![(input_node, input.clone())];
    let (_, analytic) = backward_graph(graph, weights, seeds(), output, target)?;
    let mut w = weights.clone();
    let mut loss_at = |name: &str, i: usize, v: f64| -> Result<f64> {
        let old = w.get(name).expect("known name").data()[i];
        w.get_mut(name).expect("known name").data_mut()[i] = v;
        let ev = graph.evaluate(&w, seeds(), &[output], false);
        w.get_mut(name).expect("known name").data_mut()[i] = old;
        let ev = ev?;
        l1_loss(ev.value(output).expect("target computed"), target)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        refined: 0,
    };
    let names: Vec<String> = weights.names().map(str::to_string).collect();
    for name in &names {
        let base = weights.get(name).expect("listed").data().to_vec();
        let grad = analytic.get(name).expect("gradient for every weight").data().to_vec();
        for (i, (&w0, &a)) in base.iter().zip(&grad).enumerate() {
            let mut h = STEP;
            let mut err = f64::INFINITY;
            for attempt in 0..=REFINEMENTS {
                let n = (loss_at(name, i, w0 + h)? - loss_at(name, i, w0 - h)?) / (2.0 * h);
                err = err.min(rel_error(a, n));
                if err <= tolerance {
                    if attempt > 0 {
                        report.refined += 1;
                    }
                    break;
                }
                h /= 10.0;
            }
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
}

/// Gradient check of a full model built from `config` on a random
/// `patch x patch` input against a random target.
pub fn grad_check(config: &ModelConfig, seed: u64, patch: usize) -> Result<GradCheckReport> {
    let model = Model::build(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let input = random_tensor([1, 3, patch, patch], &mut rng);
    let s = config.scale;
    let target = random_tensor([1, 3, patch * s, patch * s], &mut rng);
    grad_check_graph(
        &model.graph,
        &model.weights.cast(),
        model.layout.input,
        &input,
        model.tail_nodes(s)?.output,
        &target,
        1e-3,
    )
}

/// A graph whose output is linear in its input: convolutions, a
/// concatenation, a residual sum and a pixel shuffle.
pub fn linear_micro_graph(seed: u64) -> Result<(Graph, WeightStore<f64>, NodeId, NodeId)> {
    let mut b = GraphBuilder::new();
    let x = b.input("input", 3)?;
    let a = b.conv("lin.a", x, ConvSpec::same(3, 4, 3))?;
    let p = b.conv("lin.b", a, ConvSpec::same(4, 4, 1))?;
    let cat = b.concat("lin.cat", &[a, p])?;
    let q = b.conv("lin.c", cat, ConvSpec::same(8, 4, 3).with_groups(2))?;
    let sum = b.add("lin.sum", q, a)?;
    let up = b.conv("lin.up", sum, ConvSpec::same(4, 12, 3))?;
    let out = b.pixel_shuffle("lin.shuffle", up, 2)?;
    let g = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = WeightStore::new();
    for (_, node, spec) in g.convs() {
        let fan_in = spec.in_channels / spec.groups * spec.kernel.0 * spec.kernel.1;
        let k = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |shape: [usize; 4]| Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-k..k));
        w.insert(format!("{}.weight", node.name), draw(spec.weight_shape()));
        w.insert(format!("{}.bias", node.name), draw(spec.bias_shape()));
    }
    Ok((g, w, x, out))
}

pub fn grad_check_linear(seed: u64) -> Result<GradCheckReport> {
    let (g, w, x, out) = linear_micro_graph(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11ea);
    let input = random_tensor([1, 3, 8, 8], &mut rng);
    let target = random_tensor([1, 3, 16, 16], &mut rng);
    grad_check_graph(&g, &w, x, &input, out, &target, 1e-5)
}
