use rayon::prelude::*;

use super::{Element, Result, Tensor, TensorError};

/// Stride-1 grouped 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    /// Zero padding applied to every side.
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square `k x k` kernel with shape-preserving padding and a bias.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            kernel: (k, k),
            in_channels,
            out_channels,
            groups: 1,
            padding: k / 2,
            has_bias: true,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn bias_shape(&self) -> [usize; 4] {
        [self.out_channels, 1, 1, 1]
    }

    /// Learnable scalars: `kh*kw*c_in*c_out/groups (+ c_out)`.
    pub fn param_count(&self) -> u64 {
        let w = (self.kernel.0 * self.kernel.1 * self.in_channels / self.groups
            * self.out_channels) as u64;
        w + if self.has_bias {
            self.out_channels as u64
        } else {
            0
        }
    }

    /// Multiply-accumulates per output pixel.
    pub fn macs_per_pixel(&self) -> u64 {
        (self.kernel.0 * self.kernel.1 * (self.in_channels / self.groups) * self.out_channels) as u64
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ho = (h + 2 * self.padding + 1).checked_sub(self.kernel.0)?;
        let wo = (w + 2 * self.padding + 1).checked_sub(self.kernel.1)?;
        (ho > 0 && wo > 0).then_some((ho, wo))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(TensorError::Invalid { op: "conv2d", reason });
        if self.groups == 0 {
            return bad("groups must be at least 1".into());
        }
        if self.in_channels % self.groups != 0 {
            return bad(format!(
                "in_channels {} not divisible by groups {}",
                self.in_channels, self.groups
            ));
        }
        if self.out_channels % self.groups != 0 {
            return bad(format!(
                "out_channels {} not divisible by groups {}",
                self.out_channels, self.groups
            ));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad("kernel dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Geometry shared by the forward and backward kernels.
///
/// Outputs are computed on a buffer whose rows have the padded input width
/// `wp`; the trailing `kw - 1` columns of each row are scratch. This turns
/// every `(ic, ky, kx)` tap into a single contiguous axpy.
struct Geometry {
    n: usize,
    c_in: usize,
    c_out: usize,
    icg: usize,
    ocg: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    hp: usize,
    wp: usize,
    pad: usize,
}

impl Geometry {
    fn new<T: Element>(input: &Tensor<T>, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let [n, c, h, w] = input.shape();
        if c != spec.in_channels {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                dim: "input channels",
                expected: spec.in_channels,
                found: c,
            });
        }
        let (ho, wo) = spec.output_hw(h, w).ok_or_else(|| TensorError::Invalid {
            op: "conv2d",
            reason: format!(
                "kernel {:?} with padding {} does not fit a {h}x{w} input",
                spec.kernel, spec.padding
            ),
        })?;
        Ok(Self {
            n,
            c_in: c,
            c_out: spec.out_channels,
            icg: c / spec.groups,
            ocg: spec.out_channels / spec.groups,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            h,
            w,
            ho,
            wo,
            hp: h + 2 * spec.padding,
            wp: w + 2 * spec.padding,
            pad: spec.padding,
        })
    }

    /// Length of the strided output span touched by one tap.
    #[inline]
    fn span(&self) -> usize {
        (self.ho - 1) * self.wp + self.wo
    }

    fn padded_plane_len(&self) -> usize {
        self.hp * self.wp
    }

    /// Zero-padded copy of the input, `(n, c, hp, wp)`.
    fn pad_input<T: Element>(&self, input: &Tensor<T>) -> Vec<T> {
        if self.pad == 0 {
            return input.data().to_vec();
        }
        let plane = self.padded_plane_len();
        let mut out = vec![T::zero(); self.n * self.c_in * plane];
        out.par_chunks_mut(plane)
            .zip(input.data().par_chunks(self.h * self.w))
            .for_each(|(dst, src)| {
                for y in 0..self.h {
                    let d = (y + self.pad) * self.wp + self.pad;
                    dst[d..d + self.w].copy_from_slice(&src[y * self.w..(y + 1) * self.w]);
                }
            });
        out
    }
}

fn check_params<T: Element>(
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<()> {
    if weight.shape() != spec.weight_shape() {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d weight",
            lhs: spec.weight_shape(),
            rhs: weight.shape(),
        });
    }
    match (spec.has_bias, bias) {
        (true, Some(b)) if b.len() != spec.out_channels => Err(TensorError::DimMismatch {
            op: "conv2d",
            dim: "bias length",
            expected: spec.out_channels,
            found: b.len(),
        }),
        (true, None) => Err(TensorError::Invalid {
            op: "conv2d",
            reason: "spec declares a bias but none was supplied".into(),
        }),
        (false, Some(_)) => Err(TensorError::Invalid {
            op: "conv2d",
            reason: "bias supplied for a bias-free spec".into(),
        }),
        _ => Ok(()),
    }
}

#[inline]
fn axpy<T: Element>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + a * s;
    }
}

/// Direct convolution. Each output element accumulates bias first, then taps
/// in `(ic, ky, kx)` order.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input, spec)?;
    check_params(spec, weight, bias)?;
    let padded = g.pad_input(input);
    let plane_in = g.padded_plane_len();
    let span = g.span();
    let wdata = weight.data();
    let taps = g.icg * g.kh * g.kw;

    let mut out = vec![T::zero(); g.n * g.c_out * g.ho * g.wo];
    out.par_chunks_mut(g.ho * g.wo)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); g.ho * g.wp],
            |acc, (idx, dst)| {
                let (b, oc) = (idx / g.c_out, idx % g.c_out);
                let group = oc / g.ocg;
                let b0 = bias.map_or(T::zero(), |t| t.data()[oc]);
                acc.fill(b0);
                let wrow = &wdata[oc * taps..(oc + 1) * taps];
                for icl in 0..g.icg {
                    let ic = group * g.icg + icl;
                    let src = &padded[(b * g.c_in + ic) * plane_in..][..plane_in];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = wrow[(icl * g.kh + ky) * g.kw + kx];
                            let off = ky * g.wp + kx;
                            axpy(&mut acc[..span], &src[off..off + span], wv);
                        }
                    }
                }
                for y in 0..g.ho {
                    dst[y * g.wo..(y + 1) * g.wo].copy_from_slice(&acc[y * g.wp..y * g.wp + g.wo]);
                }
            },
        );
    Tensor::new([g.n, g.c_out, g.ho, g.wo], out)
}

/// Gradients of a convolution with respect to its three operands.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Element> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Reverse-mode rule for [`conv2d`]. `want_input` skips the input gradient
/// when nothing upstream needs it.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(input, spec)?;
    if weight.shape() != spec.weight_shape() {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward weight",
            lhs: spec.weight_shape(),
            rhs: weight.shape(),
        });
    }
    let expect = [g.n, g.c_out, g.ho, g.wo];
    if grad_out.shape() != expect {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward grad",
            lhs: expect,
            rhs: grad_out.shape(),
        });
    }
    let plane_in = g.padded_plane_len();
    let span = g.span();
    let taps = g.icg * g.kh * g.kw;

    // Output gradient laid out at the padded row stride, scratch columns zero.
    let plane_out = g.ho * g.wp;
    let mut dy = vec![T::zero(); g.n * g.c_out * plane_out];
    dy.par_chunks_mut(plane_out)
        .zip(grad_out.data().par_chunks(g.ho * g.wo))
        .for_each(|(dst, src)| {
            for y in 0..g.ho {
                dst[y * g.wp..y * g.wp + g.wo].copy_from_slice(&src[y * g.wo..(y + 1) * g.wo]);
            }
        });

    let padded = g.pad_input(input);

    // Weight gradient: one dot product per tap, batch-major then position order.
    let mut dw = vec![T::zero(); weight.len()];
    dw.par_chunks_mut(taps).enumerate().for_each(|(oc, row)| {
        let group = oc / g.ocg;
        for icl in 0..g.icg {
            let ic = group * g.icg + icl;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let off = ky * g.wp + kx;
                    let mut acc = T::zero();
                    for b in 0..g.n {
                        let src = &padded[(b * g.c_in + ic) * plane_in + off..][..span];
                        let d = &dy[(b * g.c_out + oc) * plane_out..][..span];
                        for (&x, &e) in src.iter().zip(d) {
                            acc = acc + x * e;
                        }
                    }
                    row[(icl * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });

    let db = spec.has_bias.then(|| {
        let hw = g.ho * g.wo;
        let data: Vec<T> = (0..g.c_out)
            .map(|oc| {
                let mut acc = T::zero();
                for b in 0..g.n {
                    let p = &grad_out.data()[(b * g.c_out + oc) * hw..][..hw];
                    acc = acc + p.iter().copied().sum::<T>();
                }
                acc
            })
            .collect();
        Tensor {
            shape: spec.bias_shape(),
            data,
        }
    });

    let dx = if want_input {
        let wdata = weight.data();
        let mut dx = vec![T::zero(); g.n * g.c_in * g.h * g.w];
        dx.par_chunks_mut(g.h * g.w).enumerate().for_each_init(
            || vec![T::zero(); plane_in],
            |acc, (idx, dst)| {
                let (b, ic) = (idx / g.c_in, idx % g.c_in);
                let group = ic / g.icg;
                let icl = ic % g.icg;
                acc.fill(T::zero());
                for ocl in 0..g.ocg {
                    let oc = group * g.ocg + ocl;
                    let d = &dy[(b * g.c_out + oc) * plane_out..][..span];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let wv = wdata[oc * taps + (icl * g.kh + ky) * g.kw + kx];
                            let off = ky * g.wp + kx;
                            axpy(&mut acc[off..off + span], d, wv);
                        }
                    }
                }
                for y in 0..g.h {
                    let s = (y + g.pad) * g.wp + g.pad;
                    dst[y * g.w..(y + 1) * g.w].copy_from_slice(&acc[s..s + g.w]);
                }
            },
        );
        Some(Tensor {
            shape: input.shape(),
            data: dx,
        })
    } else {
        None
    };

    Ok(ConvGrads {
        input: dx,
        weight: Tensor {
            shape: weight.shape(),
            data: dw,
        },
        bias: db,
    })
}
