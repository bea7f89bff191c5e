//! Dense kernels shared by the forward and backward passes.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Per-pixel affine map `out[p,:] = x[p,:]ᵀ·weight + bias`.
///
/// `x` is any tensor whose last axis is the input channel axis; the leading
/// axes are preserved in the output.
pub fn conv1x1_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (cin, cout) = weight.rows_cols()?;
    let (pixels, xc) = x.as_rows();
    if xc != cin {
        return Err(Error::dim(format!(
            "conv1x1: input has {xc} channels, weight expects {cin}"
        )));
    }
    if bias.dims() != [cout] {
        return Err(Error::dim(format!(
            "conv1x1: bias dims {:?}, expected [{cout}]",
            bias.dims()
        )));
    }
    let w = weight.data();
    let b = bias.data();
    let xd = x.data();
    let mut out = Vec::with_capacity(pixels * cout);
    for p in 0..pixels {
        let row = &xd[p * cin..(p + 1) * cin];
        let start = out.len();
        out.extend_from_slice(b);
        let acc = &mut out[start..];
        for (i, &xi) in row.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let wrow = &w[i * cout..(i + 1) * cout];
            for (o, &wv) in acc.iter_mut().zip(wrow) {
                *o = *o + xi * wv;
            }
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().expect("rank >= 1") = cout;
    Tensor::new(&dims, out)
}

/// Gradients of [`conv1x1_forward`].
pub struct Conv1x1Grads<T> {
    pub grad_x: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

pub fn conv1x1_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv1x1Grads<T>> {
    let (cin, cout) = weight.rows_cols()?;
    let (pixels, xc) = x.as_rows();
    let (gp, gc) = grad_out.as_rows();
    if xc != cin || gc != cout || gp != pixels {
        return Err(Error::dim(format!(
            "conv1x1 backward: x {:?}, weight {:?}, grad_out {:?}",
            x.dims(),
            weight.dims(),
            grad_out.dims()
        )));
    }
    let w = weight.data();
    let xd = x.data();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); pixels * cin];
    let mut gw = vec![T::zero(); cin * cout];
    let mut gb = vec![T::zero(); cout];
    for p in 0..pixels {
        let g = &gd[p * cout..(p + 1) * cout];
        let xr = &xd[p * cin..(p + 1) * cin];
        for (b, &gv) in gb.iter_mut().zip(g) {
            *b = *b + gv;
        }
        let gxr = &mut gx[p * cin..(p + 1) * cin];
        for i in 0..cin {
            let wrow = &w[i * cout..(i + 1) * cout];
            let mut acc = T::zero();
            for (&wv, &gv) in wrow.iter().zip(g) {
                acc = acc + wv * gv;
            }
            gxr[i] = acc;
            let xi = xr[i];
            if xi != T::zero() {
                let gwr = &mut gw[i * cout..(i + 1) * cout];
                for (o, &gv) in gwr.iter_mut().zip(g) {
                    *o = *o + xi * gv;
                }
            }
        }
    }
    Ok(Conv1x1Grads {
        grad_x: Tensor::new(x.dims(), gx)?,
        grad_weight: Tensor::new(weight.dims(), gw)?,
        grad_bias: Tensor::new(&[cout], gb)?,
    })
}

/// Align-corners source coordinate and interpolation weight along one axis.
fn axis_sample(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    if dst_len == 1 || src_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let lo = (pos.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Align-corners bilinear resize of an `H×W×C` map to `target = (H0, W0)`.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc()?;
    let (h0, w0) = target;
    if h0 == 0 || w0 == 0 {
        return Err(Error::dim(format!("zero target extent {h0}×{w0}")));
    }
    if (h0, w0) == (h, w) {
        return Ok(x.clone());
    }
    let xd = x.data();
    let cols: Vec<_> = (0..w0).map(|j| axis_sample(j, w0, w)).collect();
    let mut out = Vec::with_capacity(h0 * w0 * c);
    for i in 0..h0 {
        let (y0, y1, fy) = axis_sample(i, h0, h);
        let fy = T::lit(fy);
        for &(x0, x1, fx) in &cols {
            let fx = T::lit(fx);
            let w00 = (T::one() - fy) * (T::one() - fx);
            let w01 = (T::one() - fy) * fx;
            let w10 = fy * (T::one() - fx);
            let w11 = fy * fx;
            let a = &xd[(y0 * w + x0) * c..][..c];
            let b = &xd[(y0 * w + x1) * c..][..c];
            let d = &xd[(y1 * w + x0) * c..][..c];
            let e = &xd[(y1 * w + x1) * c..][..c];
            for ch in 0..c {
                out.push(w00 * a[ch] + w01 * b[ch] + w10 * d[ch] + w11 * e[ch]);
            }
        }
    }
    Tensor::new(&[h0, w0, c], out)
}

/// Euclidean distances between the rows of `a` (P×C) and `b` (Q×C).
pub fn pairwise_dist<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, ca) = a.as_rows();
    let (q, cb) = b.as_rows();
    if ca != cb {
        return Err(Error::dim(format!(
            "pairwise_dist: channel mismatch {ca} vs {cb}"
        )));
    }
    let mut out = Vec::with_capacity(p * q);
    for i in 0..p {
        let ra = a.row(i);
        for j in 0..q {
            out.push(euclidean(ra, b.row(j)));
        }
    }
    Tensor::new(&[p, q], out)
}

pub fn squared_euclidean<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .fold(T::zero(), |acc, v| acc + v)
}

pub fn euclidean<T: Real>(a: &[T], b: &[T]) -> T {
    squared_euclidean(a, b).sqrt()
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward<T: Real>(pre: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    pre.same_dims(grad)?;
    let data = pre
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&p, &g)| if p > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(pre.dims(), data)
}
