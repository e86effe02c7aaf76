//! Circular 2-d convolution kernels shared by the autodiff graph and the
//! power-iteration norm estimator.
//!
//! Layout conventions: images are `[channels, h, w]`, weights are
//! `[c_out, c_in, k, k]` with odd `k`, biases `[c_out]`. Circular padding
//! keeps every layer exactly linear-shift-invariant, so adjoints are again
//! circular convolutions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn check_shapes(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<ConvShape> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::ShapeMismatch {
            op: "conv2d(weight)",
            lhs: ws.to_vec(),
            rhs: vec![],
        });
    }
    let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
    if k % 2 == 0 {
        return Err(Error::invalid(format!("conv2d kernel must be odd-sized, got {k}")));
    }
    let xs = x.shape();
    if xs.len() != 3 || xs[0] != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d(input)",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d(bias)",
                lhs: b.shape().to_vec(),
                rhs: vec![c_out],
            });
        }
    }
    Ok(ConvShape {
        c_in,
        c_out,
        k,
        h: xs[1],
        w: xs[2],
    })
}

/// `out[co,y,x] = bias[co] + sum_{ci,dy,dx} w[co,ci,dy,dx] * x[ci, (y+dy-p)%h, (x+dx-p)%w]`
pub(crate) fn forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let s = check_shapes(x, weight, bias)?;
    let (h, w, k, p) = (s.h, s.w, s.k, s.k / 2);
    let hw = h * w;
    let mut out = vec![0.0; s.c_out * hw];
    if let Some(b) = bias {
        for (co, bv) in b.data().iter().enumerate() {
            out[co * hw..(co + 1) * hw].fill(*bv);
        }
    }
    let xd = x.data();
    let wd = weight.data();
    for co in 0..s.c_out {
        let out_c = &mut out[co * hw..(co + 1) * hw];
        for ci in 0..s.c_in {
            let x_c = &xd[ci * hw..(ci + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    let wv = wd[((co * s.c_in + ci) * k + dy) * k + dx];
                    for y in 0..h {
                        let sy = (y + dy + h - p) % h;
                        let src = &x_c[sy * w..sy * w + w];
                        let dst = &mut out_c[y * w..y * w + w];
                        shifted_axpy(dst, src, wv, dx as isize - p as isize, w);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[s.c_out, h, w], out)
}

/// `dst[x] += wv * src[(x + off) mod w]`, written as two contiguous passes.
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], wv: f64, off: isize, w: usize) {
    if off >= 0 {
        let o = off as usize;
        let split = w - o;
        for (d, s) in dst[..split].iter_mut().zip(&src[o..]) {
            *d += wv * s;
        }
        for (d, s) in dst[split..].iter_mut().zip(&src[..o]) {
            *d += wv * s;
        }
    } else {
        let o = (-off) as usize;
        for (d, s) in dst[..o].iter_mut().zip(&src[w - o..]) {
            *d += wv * s;
        }
        for (d, s) in dst[o..].iter_mut().zip(&src[..w - o]) {
            *d += wv * s;
        }
    }
}

/// Channel-transposed, spatially flipped copy of `weight`: the kernel of the
/// adjoint convolution.
pub(crate) fn adjoint_weight(weight: &Tensor) -> Tensor {
    let ws = weight.shape();
    let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
    let wd = weight.data();
    let mut out = vec![0.0; wd.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for dy in 0..k {
                for dx in 0..k {
                    out[((ci * c_out + co) * k + (k - 1 - dy)) * k + (k - 1 - dx)] =
                        wd[((co * c_in + ci) * k + dy) * k + dx];
                }
            }
        }
    }
    Tensor::from_vec(&[c_in, c_out, k, k], out).expect("same element count")
}

/// Adjoint of `forward` in the input argument: maps a `[c_out,h,w]` cotangent
/// to a `[c_in,h,w]` gradient. Bias does not appear.
pub(crate) fn input_adjoint(cot: &Tensor, weight: &Tensor) -> Result<Tensor> {
    forward(cot, &adjoint_weight(weight), None)
}

/// Gradient of `forward` with respect to the weights.
pub(crate) fn weight_grad(x: &Tensor, cot: &Tensor, k: usize) -> Result<Tensor> {
    let xs = x.shape();
    let cs = cot.shape();
    if xs.len() != 3 || cs.len() != 3 || xs[1..] != cs[1..] {
        return Err(Error::ShapeMismatch {
            op: "conv2d weight grad",
            lhs: xs.to_vec(),
            rhs: cs.to_vec(),
        });
    }
    let (c_in, c_out, h, w, p) = (xs[0], cs[0], xs[1], xs[2], k / 2);
    let hw = h * w;
    let xd = x.data();
    let cd = cot.data();
    let mut g = vec![0.0; c_out * c_in * k * k];
    for co in 0..c_out {
        let cot_c = &cd[co * hw..(co + 1) * hw];
        for ci in 0..c_in {
            let x_c = &xd[ci * hw..(ci + 1) * hw];
            for dy in 0..k {
                for dx in 0..k {
                    let mut acc = 0.0f64;
                    for y in 0..h {
                        let sy = (y + dy + h - p) % h;
                        let src = &x_c[sy * w..sy * w + w];
                        let crow = &cot_c[y * w..y * w + w];
                        acc += shifted_dot(crow, src, dx as isize - p as isize, w);
                    }
                    g[((co * c_in + ci) * k + dy) * k + dx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[c_out, c_in, k, k], g)
}

#[inline]
fn shifted_dot(a: &[f64], src: &[f64], off: isize, w: usize) -> f64 {
    let mut acc = 0.0f64;
    if off >= 0 {
        let o = off as usize;
        let split = w - o;
        for (d, s) in a[..split].iter().zip(&src[o..]) {
            acc = d.mul_add(*s, acc);
        }
        for (d, s) in a[split..].iter().zip(&src[..o]) {
            acc = d.mul_add(*s, acc);
        }
    } else {
        let o = (-off) as usize;
        for (d, s) in a[..o].iter().zip(&src[w - o..]) {
            acc = d.mul_add(*s, acc);
        }
        for (d, s) in a[o..].iter().zip(&src[..w - o]) {
            acc = d.mul_add(*s, acc);
        }
    }
    acc
}

/// Per-output-channel sum of the cotangent: gradient of the bias.
pub(crate) fn bias_grad(cot: &Tensor) -> Tensor {
    let cs = cot.shape();
    let (c_out, hw) = (cs[0], cs[1] * cs[2]);
    let cd = cot.data();
    let g: Vec<f64> = (0..c_out)
        .map(|co| cd[co * hw..(co + 1) * hw].iter().sum())
        .collect();
    Tensor::from_vec(&[c_out], g).expect("c_out entries")
}
