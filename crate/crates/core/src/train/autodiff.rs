//! Reverse-mode differentiation over [`Graph`].

use crate::arch::graph::{conv_params, Graph, NodeId, Op};
use crate::tensor::{self, Element, Tensor};
use crate::weights::WeightStore;
use crate::{Error, Result};

/// Gradients keyed like the weights they belong to.
pub type GradStore<T = f32> = WeightStore<T>;

/// Mean absolute error, accumulated in `f64`.
pub fn l1_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    tensor::ensure_same_shape("l1_loss", pred, target)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p.as_f64() - t.as_f64()).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `d loss / d pred` for [`l1_loss`]; the subgradient at zero residual is 0.
pub fn l1_grad<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    tensor::ensure_same_shape("l1_grad", pred, target)?;
    let inv = T::from_f64(1.0 / pred.len().max(1) as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if p > t {
                inv
            } else if p < t {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(Tensor::new(pred.shape(), data)?)
}

/// `mask[i]` is true when node `i` depends on some parameter.
fn depends_on_params(graph: &Graph) -> Vec<bool> {
    let mut mask = vec![false; graph.len()];
    for (i, n) in graph.nodes().iter().enumerate() {
        mask[i] = matches!(n.op, Op::Conv(_)) || n.inputs.iter().any(|&p| mask[p]);
    }
    mask
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

/// Forward pass from `seeds` to `output`, L1 loss against `target`, and the
/// gradient of that loss with respect to every weight in `weights`.
///
/// Weights the output does not depend on get zero gradients, so the result
/// always has the same key set as `weights`.
pub fn backward_graph<T: Element>(
    graph: &Graph,
    weights: &WeightStore<T>,
    seeds: Vec<(NodeId, Tensor<T>)>,
    output: NodeId,
    target: &Tensor<T>,
) -> Result<(f64, GradStore<T>)> {
    let ev = graph.evaluate(weights, seeds, &[output], true)?;
    let pred = ev
        .value(output)
        .ok_or_else(|| Error::Invalid("output was not computed".into()))?;
    let loss = l1_loss(pred, target)?;

    let trainable = depends_on_params(graph);
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; graph.len()];
    grads[output] = Some(l1_grad(pred, target)?);
    let mut out = GradStore::new();

    for id in (0..=output).rev() {
        let Some(g) = grads[id].take() else { continue };
        if !trainable[id] {
            continue;
        }
        let node = graph.node(id);
        let arg = |i: usize| -> Result<&Tensor<T>> {
            ev.value(node.inputs[i])
                .ok_or_else(|| Error::Invalid(format!("`{}` has no retained input", node.name)))
        };
        let wants = |i: usize| trainable[node.inputs[i]];
        match &node.op {
            Op::Input => {}
            Op::Identity => accumulate(&mut grads[node.inputs[0]], g),
            Op::Conv(spec) => {
                let (w, _) = conv_params(&node.name, spec, weights)?;
                let cg = tensor::conv2d_backward(arg(0)?, spec, w, &g, wants(0))?;
                out.insert(format!("{}.weight", node.name), cg.weight);
                if let Some(b) = cg.bias {
                    out.insert(format!("{}.bias", node.name), b);
                }
                if let Some(dx) = cg.input {
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
            }
            Op::Relu => {
                let x = arg(0)?;
                let dx = zip_map(&g, x, |g, x| if x > T::zero() { g } else { T::zero() });
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            Op::Sigmoid => {
                let y = ev.value(id).expect("retained");
                let dx = zip_map(&g, y, |g, y| g * y * (T::one() - y));
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            Op::FastSigmoid => {
                let x = arg(0)?;
                let dx = zip_map(&g, x, |g, x| {
                    let d = T::one() + x.abs();
                    g / (d * d)
                });
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            Op::GlobalAvgPool => {
                let x = arg(0)?;
                let [n, c, h, w] = x.shape();
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let dx = Tensor::from_fn([n, c, h, w], |b, ch, _, _| g.get(b, ch, 0, 0) * inv);
                accumulate(&mut grads[node.inputs[0]], dx);
            }
            Op::ScaleChannels => {
                let (x, s) = (arg(0)?, arg(1)?);
                if wants(0) {
                    accumulate(&mut grads[node.inputs[0]], tensor::scale_channels(&g, s)?);
                }
                if wants(1) {
                    let [n, c, _, _] = x.shape();
                    let ds = Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| {
                        x.plane(b, ch)
                            .iter()
                            .zip(g.plane(b, ch))
                            .map(|(&a, &b)| a * b)
                            .fold(T::zero(), |acc, v| acc + v)
                    });
                    accumulate(&mut grads[node.inputs[1]], ds);
                }
            }
            Op::Add => {
                if wants(1) {
                    accumulate(&mut grads[node.inputs[1]], g.clone());
                }
                if wants(0) {
                    accumulate(&mut grads[node.inputs[0]], g);
                }
            }
            Op::Concat => {
                let widths: Vec<usize> = node.inputs.iter().map(|&p| graph.node(p).channels).collect();
                let parts = tensor::split_channels(&g, &widths)?;
                for (i, part) in parts.into_iter().enumerate() {
                    if wants(i) {
                        accumulate(&mut grads[node.inputs[i]], part);
                    }
                }
            }
            Op::PixelShuffle(s) => {
                accumulate(&mut grads[node.inputs[0]], tensor::pixel_unshuffle(&g, *s)?);
            }
            Op::Bilinear(_) => {
                return Err(Error::Invalid(format!(
                    "`{}`: bilinear resize is only differentiable as a parameter-free skip",
                    node.name
                )));
            }
        }
    }

    for (name, w) in weights.iter() {
        if !out.contains(name) {
            out.insert(name, Tensor::zeros(w.shape()));
        }
    }
    Ok((loss, out))
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}
