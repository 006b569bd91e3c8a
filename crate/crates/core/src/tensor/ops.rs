//! Forward and backward kernels. Image tensors are NCHW.
//!
//! Each `*_backward` returns the gradients of the op's inputs given the
//! gradient of its output. The tape in [`super::Graph`] wires them together.

use super::{expect_rank, Result, Scalar, Tensor, TensorError};

fn mismatch<T>(msg: String) -> Result<T> {
    Err(TensorError::ShapeMismatch(msg))
}

/// Output length of a strided, padded window sweep.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output positions `o` whose input index `o * stride + k - pad` is in range.
fn valid_out(k: usize, stride: usize, pad: usize, input: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    depthwise: bool,
) -> Result<ConvGeom> {
    expect_rank(x, 4, "conv input")?;
    expect_rank(w, 4, "conv weight")?;
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, i, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    if depthwise {
        if o != c || i != 1 {
            return mismatch(format!(
                "depthwise weight {:?} does not match {c} input channels",
                w.shape()
            ));
        }
    } else if i != c {
        return mismatch(format!(
            "weight {:?} expects {i} input channels, input has {c}",
            w.shape()
        ));
    }
    let (Some(oh), Some(ow)) = (conv_out_len(h, kh, stride, pad), conv_out_len(wd, kw, stride, pad))
    else {
        return mismatch(format!(
            "kernel {kh}x{kw} with stride {stride} pad {pad} does not fit {h}x{wd}"
        ));
    };
    Ok(ConvGeom {
        n,
        c,
        h,
        w: wd,
        o,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Accumulates one kernel tap of a single-channel plane into `out`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn tap_forward<T: Scalar>(
    out: &mut [T],
    plane: &[T],
    wv: T,
    g: &ConvGeom,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) {
    let (y0, y1) = valid_out(ky, stride, pad, g.h, g.oh);
    let (x0, x1) = valid_out(kx, stride, pad, g.w, g.ow);
    for oy in y0..y1 {
        let iy = oy * stride + ky - pad;
        let row = &plane[iy * g.w..(iy + 1) * g.w];
        let orow = &mut out[oy * g.ow..(oy + 1) * g.ow];
        for ox in x0..x1 {
            let ix = ox * stride + kx - pad;
            orow[ox] += wv * row[ix];
        }
    }
}

/// Backward of one tap: scatters into `gplane` and returns the weight gradient.
#[allow(clippy::too_many_arguments)]
#[inline]
fn tap_backward<T: Scalar>(
    gplane: &mut [T],
    plane: &[T],
    gout: &[T],
    wv: T,
    g: &ConvGeom,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) -> T {
    let (y0, y1) = valid_out(ky, stride, pad, g.h, g.oh);
    let (x0, x1) = valid_out(kx, stride, pad, g.w, g.ow);
    let mut gw = T::zero();
    for oy in y0..y1 {
        let iy = oy * stride + ky - pad;
        for ox in x0..x1 {
            let ix = ox * stride + kx - pad;
            let go = gout[oy * g.ow + ox];
            gw += go * plane[iy * g.w + ix];
            gplane[iy * g.w + ix] += wv * go;
        }
    }
    gw
}

/// Cross-correlation of `x` (N×C×H×W) with `w` (O×C×KH×KW).
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, stride, pad, false)?;
    let mut out = Tensor::zeros(&[g.n, g.o, g.oh, g.ow]);
    let plane = g.h * g.w;
    let oplane = g.oh * g.ow;
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    for n in 0..g.n {
        for o in 0..g.o {
            let dst = &mut od[(n * g.o + o) * oplane..(n * g.o + o + 1) * oplane];
            for c in 0..g.c {
                let src = &xd[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wd[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        tap_forward(dst, src, wv, &g, ky, kx, stride, pad);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geom(x, w, stride, pad, false)?;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let plane = g.h * g.w;
    let oplane = g.oh * g.ow;
    let (xd, wd, gyd) = (x.data(), w.data(), gy.data());
    for n in 0..g.n {
        for o in 0..g.o {
            let gout = &gyd[(n * g.o + o) * oplane..(n * g.o + o + 1) * oplane];
            for c in 0..g.c {
                let src = &xd[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                let gsrc = &mut gx.data_mut()[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wi = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                        let d = tap_backward(gsrc, src, gout, wd[wi], &g, ky, kx, stride, pad);
                        gw.data_mut()[wi] += d;
                    }
                }
            }
        }
    }
    Ok((gx, gw))
}

/// Per-channel convolution; `w` is C×1×KH×KW.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, stride, pad, true)?;
    let mut out = Tensor::zeros(&[g.n, g.c, g.oh, g.ow]);
    let plane = g.h * g.w;
    let oplane = g.oh * g.ow;
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    for n in 0..g.n {
        for c in 0..g.c {
            let dst = &mut od[(n * g.c + c) * oplane..(n * g.c + c + 1) * oplane];
            let src = &xd[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wd[(c * g.kh + ky) * g.kw + kx];
                    tap_forward(dst, src, wv, &g, ky, kx, stride, pad);
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = conv_geom(x, w, stride, pad, true)?;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let plane = g.h * g.w;
    let oplane = g.oh * g.ow;
    let (xd, wd, gyd) = (x.data(), w.data(), gy.data());
    for n in 0..g.n {
        for c in 0..g.c {
            let gout = &gyd[(n * g.c + c) * oplane..(n * g.c + c + 1) * oplane];
            let src = &xd[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
            let gsrc = &mut gx.data_mut()[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wi = (c * g.kh + ky) * g.kw + kx;
                    let d = tap_backward(gsrc, src, gout, wd[wi], &g, ky, kx, stride, pad);
                    gw.data_mut()[wi] += d;
                }
            }
        }
    }
    Ok((gx, gw))
}

fn pointwise_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    expect_rank(x, 4, "pointwise input")?;
    expect_rank(w, 4, "pointwise weight")?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let p = x.shape()[2] * x.shape()[3];
    let o = w.shape()[0];
    if w.shape()[1] != c || w.shape()[2] != 1 || w.shape()[3] != 1 {
        return mismatch(format!(
            "pointwise weight {:?} does not fit {c} input channels",
            w.shape()
        ));
    }
    Ok((n, c, p, o))
}

/// 1×1 convolution; `w` is O×I×1×1.
pub fn pointwise_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, p, o) = pointwise_dims(x, w)?;
    let mut out = Tensor::zeros(&[n, o, x.shape()[2], x.shape()[3]]);
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    for b in 0..n {
        for oc in 0..o {
            let dst = &mut od[(b * o + oc) * p..(b * o + oc + 1) * p];
            for ic in 0..c {
                let wv = wd[oc * c + ic];
                let src = &xd[(b * c + ic) * p..(b * c + ic + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    Ok(out)
}

pub fn pointwise_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, p, o) = pointwise_dims(x, w)?;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let (xd, wd, gyd) = (x.data(), w.data(), gy.data());
    for b in 0..n {
        for oc in 0..o {
            let gout = &gyd[(b * o + oc) * p..(b * o + oc + 1) * p];
            for ic in 0..c {
                let src = &xd[(b * c + ic) * p..(b * c + ic + 1) * p];
                let gsrc = &mut gx.data_mut()[(b * c + ic) * p..(b * c + ic + 1) * p];
                let wv = wd[oc * c + ic];
                let mut acc = T::zero();
                for ((gs, &s), &go) in gsrc.iter_mut().zip(src).zip(gout) {
                    *gs += wv * go;
                    acc += go * s;
                }
                gw.data_mut()[oc * c + ic] += acc;
            }
        }
    }
    Ok((gx, gw))
}

/// Adds a per-channel bias to an N×C×H×W tensor.
pub fn bias_add<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 4, "bias input")?;
    let c = x.shape()[1];
    if b.numel() != c {
        return mismatch(format!("bias of {} values for {c} channels", b.numel()));
    }
    let p = x.shape()[2] * x.shape()[3];
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
        let bv = b.data()[i % c];
        chunk.iter_mut().for_each(|v| *v += bv);
    }
    Ok(out)
}

pub fn bias_add_backward<T: Scalar>(gy: &Tensor<T>, channels: usize) -> Tensor<T> {
    let p = gy.shape()[2] * gy.shape()[3];
    let mut gb = Tensor::zeros(&[channels]);
    for (i, chunk) in gy.data().chunks(p).enumerate() {
        let s: T = chunk.iter().copied().sum();
        gb.data_mut()[i % channels] += s;
    }
    gb
}

/// `x·w + b` for x N×F, w F×G, b G.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 2, "dense input")?;
    expect_rank(w, 2, "dense weight")?;
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let g = w.shape()[1];
    if w.shape()[0] != f || b.numel() != g {
        return mismatch(format!(
            "dense x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let mut out = Tensor::zeros(&[n, g]);
    for i in 0..n {
        let row = &mut out.data_mut()[i * g..(i + 1) * g];
        row.copy_from_slice(b.data());
        for k in 0..f {
            let xv = x.data()[i * f + k];
            let wrow = &w.data()[k * g..(k + 1) * g];
            for (r, &wv) in row.iter_mut().zip(wrow) {
                *r += xv * wv;
            }
        }
    }
    Ok(out)
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let g = w.shape()[1];
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[g]);
    for i in 0..n {
        let grow = &gy.data()[i * g..(i + 1) * g];
        for (j, &gv) in grow.iter().enumerate() {
            gb.data_mut()[j] += gv;
        }
        for k in 0..f {
            let xv = x.data()[i * f + k];
            let wrow = &w.data()[k * g..(k + 1) * g];
            let mut acc = T::zero();
            for j in 0..g {
                acc += grow[j] * wrow[j];
                gw.data_mut()[k * g + j] += xv * grow[j];
            }
            gx.data_mut()[i * f + k] = acc;
        }
    }
    (gx, gw, gb)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let mut g = gy.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// Mean over the spatial dims: N×C×H×W to N×C.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 4, "pool input")?;
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let p = x.shape()[2] * x.shape()[3];
    let inv = T::of_f64(1.0 / p as f64);
    let data = x.data().chunks(p).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(x_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let p = x_shape[2] * x_shape[3];
    let inv = T::of_f64(1.0 / p as f64);
    let mut g = Tensor::zeros(x_shape);
    for (chunk, &gv) in g.data_mut().chunks_mut(p).zip(gy.data()) {
        chunk.iter_mut().for_each(|v| *v = gv * inv);
    }
    g
}

/// Non-overlapping k×k mean pooling (kernel = stride = k, floor on edges).
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    expect_rank(x, 4, "pool input")?;
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if k == 0 || h < k || w < k {
        return mismatch(format!("pool {k} does not fit {h}x{w}"));
    }
    let (oh, ow) = (h / k, w / k);
    let inv = T::of_f64(1.0 / (k * k) as f64);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (plane, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        s += plane[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = s * inv;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<T: Scalar>(x_shape: &[usize], gy: &Tensor<T>, k: usize) -> Tensor<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let inv = T::of_f64(1.0 / (k * k) as f64);
    let mut g = Tensor::zeros(x_shape);
    for (dst, src) in g.data_mut().chunks_mut(h * w).zip(gy.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        dst[(oy * k + dy) * w + ox * k + dx] = v;
                    }
                }
            }
        }
    }
    g
}

/// Joins tensors that agree on every dim except `axis`.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| TensorError::ShapeMismatch("concat of nothing".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return mismatch(format!("axis {axis} out of range for rank {rank}"));
    }
    for x in xs {
        let ok = x.rank() == rank
            && (0..rank).all(|d| d == axis || x.shape()[d] == first.shape()[d]);
        if !ok {
            return mismatch(format!(
                "concat along {axis}: {:?} vs {:?}",
                first.shape(),
                x.shape()
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let len = x.shape()[axis] * inner;
            data.extend_from_slice(&x.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::new(shape, data)
}

/// Splits an output gradient back into the concatenated pieces.
pub fn concat_backward<T: Scalar>(shapes: &[Vec<usize>], axis: usize, gy: &Tensor<T>) -> Vec<Tensor<T>> {
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let total = gy.shape()[axis];
    let mut out: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    for o in 0..outer {
        let mut offset = 0;
        for (piece, s) in out.iter_mut().zip(shapes) {
            let len = s[axis] * inner;
            let start = o * total * inner + offset;
            piece.extend_from_slice(&gy.data()[start..start + len]);
            offset += len;
        }
    }
    out.into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::new(s.clone(), d).expect("split matches input shape"))
        .collect()
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return mismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Elementwise sum, used for residual and hub connections.
pub fn residual_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Mean absolute error; the subgradient at a tie is zero.
pub fn mae_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(pred, target, "mae")?;
    let n = T::of_f64(pred.numel() as f64);
    let s: T = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum();
    Ok(Tensor::scalar(s / n))
}

/// Gradient of the MAE with respect to the prediction.
pub fn mae_loss_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, gy: T) -> Tensor<T> {
    let inv = gy / T::of_f64(pred.numel() as f64);
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
    Tensor::new(pred.shape().to_vec(), data).expect("same shape as prediction")
}
