//! The eight-element dihedral group acting on tensors, and test-time
//! averaging over it.

use crate::arch::Model;
use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

pub const DIHEDRAL_ORDER: u8 = 8;

/// Applies group element `g`: bit 2 transposes, then bit 1 flips rows and
/// bit 0 flips columns.
pub fn dihedral<T: Element>(t: &Tensor<T>, g: u8) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    let (tr, fv, fh) = (g & 4 != 0, g & 2 != 0, g & 1 != 0);
    let (oh, ow) = if tr { (w, h) } else { (h, w) };
    Tensor::from_fn([n, c, oh, ow], |b, ch, y, x| {
        let y1 = if fv { oh - 1 - y } else { y };
        let x1 = if fh { ow - 1 - x } else { x };
        if tr {
            t.get(b, ch, x1, y1)
        } else {
            t.get(b, ch, y1, x1)
        }
    })
}

/// Undoes [`dihedral`] with the same `g`.
pub fn dihedral_inverse<T: Element>(t: &Tensor<T>, g: u8) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    let (tr, fv, fh) = (g & 4 != 0, g & 2 != 0, g & 1 != 0);
    let (oh, ow) = if tr { (w, h) } else { (h, w) };
    Tensor::from_fn([n, c, oh, ow], |b, ch, y, x| {
        let (a, bb) = if tr { (x, y) } else { (y, x) };
        let a = if fv { h - 1 - a } else { a };
        let bb = if fh { w - 1 - bb } else { bb };
        t.get(b, ch, a, bb)
    })
}

/// Averages `f(g(x))` mapped back by `g^-1` over the given group elements.
pub fn self_ensemble_with<T: Element>(
    x: &Tensor<T>,
    transforms: &[u8],
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if transforms.is_empty() {
        return Err(Error::Invalid("self-ensemble over no transforms".into()));
    }
    let mut acc: Option<(Vec<f64>, [usize; 4])> = None;
    for &g in transforms {
        let y = dihedral_inverse(&f(&dihedral(x, g))?, g);
        match &mut acc {
            None => acc = Some((y.data().iter().map(|v| v.as_f64()).collect(), y.shape())),
            Some((sum, shape)) => {
                if *shape != y.shape() {
                    return Err(Error::Invalid("ensemble outputs differ in shape".into()));
                }
                sum.iter_mut().zip(y.data()).for_each(|(s, v)| *s += v.as_f64());
            }
        }
    }
    let (sum, shape) = acc.expect("at least one transform");
    let inv = 1.0 / transforms.len() as f64;
    Ok(Tensor::new(shape, sum.into_iter().map(|v| T::from_f64(v * inv)).collect())?)
}

/// The model's output averaged over all eight dihedral transforms.
pub fn self_ensemble(model: &Model, lr: &Tensor, scale: usize) -> Result<Tensor> {
    let all: Vec<u8> = (0..DIHEDRAL_ORDER).collect();
    self_ensemble_with(lr, &all, |x| model.forward_at(x, scale))
}
