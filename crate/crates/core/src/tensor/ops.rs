use super::{ensure_same_shape, Element, Result, Tensor, TensorError};

pub fn relu<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Logistic function, evaluated in the branch that cannot overflow.
pub fn sigmoid<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

/// `x / (1 + |x|)`.
pub fn fast_sigmoid<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v / (T::one() + v.abs()))
}

/// Spatial mean per channel, `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.shape();
    if h * w == 0 {
        return Err(TensorError::Invalid {
            op: "global_avg_pool",
            reason: "empty spatial extent".into(),
        });
    }
    let denom = T::from_f64((h * w) as f64);
    let data = t
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() / denom)
        .collect();
    Tensor::new([n, c, 1, 1], data)
}

/// Multiplies every channel of `t` by the matching entry of `s` (`(n, c, 1, 1)`).
pub fn scale_channels<T: Element>(t: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.shape();
    if s.shape() != [n, c, 1, 1] {
        return Err(TensorError::ShapeMismatch {
            op: "scale_channels",
            lhs: [n, c, 1, 1],
            rhs: s.shape(),
        });
    }
    let mut out = t.clone();
    for (plane, &k) in out.data_mut().chunks_mut(h * w).zip(s.data()) {
        plane.iter_mut().for_each(|v| *v = *v * k);
    }
    Ok(out)
}

/// Periodic shuffle `(n, c*s*s, h, w) -> (n, c, h*s, w*s)`:
/// `out[b, ch, y*s+i, x*s+j] = in[b, ch*s*s + i*s + j, y, x]`.
pub fn pixel_shuffle<T: Element>(t: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.shape();
    if s == 0 || c % (s * s) != 0 {
        return Err(TensorError::Invalid {
            op: "pixel_shuffle",
            reason: format!("{c} channels not divisible by {s}^2"),
        });
    }
    let co = c / (s * s);
    let (ho, wo) = (h * s, w * s);
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..co {
            for i in 0..s {
                for j in 0..s {
                    let ic = ch * s * s + i * s + j;
                    let plane = &src[(b * c + ic) * h * w..][..h * w];
                    for y in 0..h {
                        let row = ((b * co + ch) * ho + y * s + i) * wo;
                        for x in 0..w {
                            out[row + x * s + j] = plane[y * w + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, co, ho, wo], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(t: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.shape();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(TensorError::Invalid {
            op: "pixel_unshuffle",
            reason: format!("{h}x{w} not divisible by {s}"),
        });
    }
    let (hi, wi) = (h / s, w / s);
    let ci = c * s * s;
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let oc = ch * s * s + i * s + j;
                    let dst = (b * ci + oc) * hi * wi;
                    for y in 0..hi {
                        let row = ((b * c + ch) * h + y * s + i) * w;
                        for x in 0..wi {
                            out[dst + y * wi + x] = src[row + x * s + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, ci, hi, wi], out)
}

/// Source taps for half-pixel bilinear sampling along one axis.
fn bilinear_taps(len: usize, s: usize) -> Vec<(usize, usize, f64)> {
    (0..len * s)
        .map(|o| {
            let src = ((o as f64 + 0.5) / s as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Integer-factor bilinear upscaling with half-pixel centres (align-corners off).
pub fn bilinear_resize<T: Element>(t: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.shape();
    if s == 0 {
        return Err(TensorError::Invalid {
            op: "bilinear_resize",
            reason: "scale must be at least 1".into(),
        });
    }
    if s == 1 || h == 0 || w == 0 {
        return Ok(t.clone());
    }
    let ys = bilinear_taps(h, s);
    let xs = bilinear_taps(w, s);
    let (ho, wo) = (h * s, w * s);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in t.data().chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            let fy = T::from_f64(fy);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for &(x0, x1, fx) in &xs {
                let fx = T::from_f64(fx);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

/// Concatenates along the channel axis, preserving part order.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| TensorError::Invalid {
        op: "concat_channels",
        reason: "no inputs".into(),
    })?;
    let [n, _, h, w] = first.shape();
    for p in parts {
        let [pn, _, ph, pw] = p.shape();
        if (pn, ph, pw) != (n, h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: first.shape(),
                rhs: p.shape(),
            });
        }
    }
    if parts.len() == 1 {
        return Ok((*first).clone());
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut out = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            let chw = p.c() * h * w;
            out.extend_from_slice(&p.data()[b * chw..(b + 1) * chw]);
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Splits along channels into pieces of the given widths; inverse of
/// [`concat_channels`].
pub fn split_channels<T: Element>(t: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [n, c, h, w] = t.shape();
    let total: usize = widths.iter().sum();
    if total != c {
        return Err(TensorError::DimMismatch {
            op: "split_channels",
            dim: "channel total",
            expected: c,
            found: total,
        });
    }
    let hw = h * w;
    let mut out: Vec<Vec<T>> = widths.iter().map(|wd| Vec::with_capacity(n * wd * hw)).collect();
    for b in 0..n {
        let mut off = (b * c) * hw;
        for (dst, &wd) in out.iter_mut().zip(widths) {
            dst.extend_from_slice(&t.data()[off..off + wd * hw]);
            off += wd * hw;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &wd)| Tensor::new([n, wd, h, w], d))
        .collect()
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}
