//! Forward kernels and their reverse-mode counterparts.
//!
//! Every operation here is a pure function of tensors: `xxx` computes the
//! forward value, `xxx_backward` maps the upstream gradient to input
//! gradients. The [`Tape`](crate::tape::Tape) wires these pairs together;
//! code that does not need gradients (pyramid construction, inference-time
//! fusing) calls the forward functions directly.
//!
//! Convolution uses the cross-correlation convention (no kernel flip) and is
//! lowered to im2col + GEMM per batch item.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Variance guard for batch normalization.
pub const BN_EPSILON: f64 = 1e-5;
/// Running-statistics update rate for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities are clamped to this floor before `log` in the loss.
pub const PROB_FLOOR: f64 = 1e-7;

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Output spatial size of a convolution along one axis.
fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn conv_check<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let x = input.shape();
    let k = kernel.shape();
    if x.c != k.c {
        return Err(Error::dim(
            "channel",
            format!(
                "input has {} channels but kernel expects {} (kernel shape {k})",
                x.c, k.c
            ),
        ));
    }
    if bias.shape() != Shape::new(1, k.n, 1, 1) {
        return Err(Error::dim(
            "channel",
            format!("bias must have shape (1,{},1,1), got {}", k.n, bias.shape()),
        ));
    }
    if stride < 1 {
        return Err(Error::Contract("stride must be >= 1".into()));
    }
    let oh = conv_out_dim(x.h, k.h, stride, pad);
    let ow = conv_out_dim(x.w, k.w, stride, pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
        (None, _) | (Some(0), _) => Err(Error::dim(
            "h",
            format!("conv output height < 1 for input {x}, kernel {k}, pad {pad}"),
        )),
        _ => Err(Error::dim(
            "w",
            format!("conv output width < 1 for input {x}, kernel {k}, pad {pad}"),
        )),
    }
}

/// Writes the im2col matrix for one batch item: rows are `(c, ki, kj)`
/// kernel taps, columns are `(oy, ox)` output positions.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    x: &Tensor<E>,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    let s = x.shape();
    let ncols = oh * ow;
    for c in 0..s.c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= s.h as isize {
                        dst.iter_mut().for_each(|v| *v = E::zero());
                        continue;
                    }
                    let base = x.idx(n, c, iy as usize, 0);
                    let src = &x.data()[base..base + s.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= s.w as isize {
                            E::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds an im2col-shaped gradient back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<E: Element>(
    dcols: &[E],
    dx: &mut Tensor<E>,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let s = dx.shape();
    let ncols = oh * ow;
    for c in 0..s.c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &dcols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let base = dx.idx(n, c, iy as usize, 0);
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        dx.data_mut()[base + ix as usize] =
                            dx.data_mut()[base + ix as usize] + src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation of `input (n,cin,h,w)` with `kernel (cout,cin,kh,kw)`
/// plus a per-output-channel bias.
fn is_pointwise(k: Shape, stride: usize, pad: usize) -> bool {
    k.h == 1 && k.w == 1 && stride == 1 && pad == 0
}

pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (oh, ow) = conv_check(input, kernel, bias, stride, pad)?;
    let x = input.shape();
    let k = kernel.shape();
    let (cout, kdim) = (k.n, k.c * k.h * k.w);
    let ncols = oh * ow;
    let mut out = Tensor::zeros(Shape::new(x.n, cout, oh, ow));
    if is_pointwise(k, stride, pad) {
        // 1x1 convs contract channels directly, no im2col needed
        for n in 0..x.n {
            let src = input.idx(n, 0, 0, 0);
            let dst = out.idx(n, 0, 0, 0);
            E::gemm(
                cout,
                kdim,
                ncols,
                E::one(),
                kernel.data(),
                kdim as isize,
                1,
                &input.data()[src..src + kdim * ncols],
                ncols as isize,
                1,
                E::zero(),
                &mut out.data_mut()[dst..dst + cout * ncols],
            );
        }
        for n in 0..x.n {
            for co in 0..cout {
                let b = bias.data()[co];
                let base = out.idx(n, co, 0, 0);
                out.data_mut()[base..base + ncols]
                    .iter_mut()
                    .for_each(|v| *v = *v + b);
            }
        }
        return Ok(out);
    }
    let mut cols = vec![E::zero(); kdim * ncols];
    for n in 0..x.n {
        im2col(input, n, k.h, k.w, stride, pad, oh, ow, &mut cols);
        let dst_base = out.idx(n, 0, 0, 0);
        E::gemm(
            cout,
            kdim,
            ncols,
            E::one(),
            kernel.data(),
            kdim as isize,
            1,
            &cols,
            ncols as isize,
            1,
            E::zero(),
            &mut out.data_mut()[dst_base..dst_base + cout * ncols],
        );
    }
    // bias per output channel
    for n in 0..x.n {
        for co in 0..cout {
            let b = bias.data()[co];
            let base = out.idx(n, co, 0, 0);
            out.data_mut()[base..base + ncols]
                .iter_mut()
                .for_each(|v| *v = *v + b);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel, and bias.
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    grad_out: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let x = input.shape();
    let k = kernel.shape();
    let o = grad_out.shape();
    let (cout, kdim) = (k.n, k.c * k.h * k.w);
    let (oh, ow) = (o.h, o.w);
    let ncols = oh * ow;

    let mut dx = Tensor::zeros(x);
    let mut dw = Tensor::zeros(k);
    let mut db = Tensor::zeros(Shape::new(1, cout, 1, 1));
    let pointwise = is_pointwise(k, stride, pad);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![E::zero(); kdim * ncols]
    };
    let mut dcols = cols.clone();

    for n in 0..x.n {
        let gbase = grad_out.idx(n, 0, 0, 0);
        let gy = &grad_out.data()[gbase..gbase + cout * ncols];

        // dW += gy @ cols^T
        let src = input.idx(n, 0, 0, 0);
        let cols_n: &[E] = if pointwise {
            &input.data()[src..src + kdim * ncols]
        } else {
            im2col(input, n, k.h, k.w, stride, pad, oh, ow, &mut cols);
            &cols
        };
        E::gemm(
            cout,
            ncols,
            kdim,
            E::one(),
            gy,
            ncols as isize,
            1,
            cols_n,
            1,
            ncols as isize,
            E::one(),
            dw.data_mut(),
        );

        // dcols = W^T @ gy, then scatter back to dx
        if pointwise {
            let dst = dx.idx(n, 0, 0, 0);
            E::gemm(
                kdim,
                cout,
                ncols,
                E::one(),
                kernel.data(),
                1,
                kdim as isize,
                gy,
                ncols as isize,
                1,
                E::zero(),
                &mut dx.data_mut()[dst..dst + kdim * ncols],
            );
        } else {
            E::gemm(
                kdim,
                cout,
                ncols,
                E::one(),
                kernel.data(),
                1,
                kdim as isize,
                gy,
                ncols as isize,
                1,
                E::zero(),
                &mut dcols,
            );
            col2im_acc(&dcols, &mut dx, n, k.h, k.w, stride, pad, oh, ow);
        }

        for co in 0..cout {
            let sum = gy[co * ncols..(co + 1) * ncols]
                .iter()
                .fold(E::zero(), |a, &b| a + b);
            db.data_mut()[co] = db.data()[co] + sum;
        }
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

/// 2x2 average pooling; spatial dimensions must be even.
pub fn avg_pool2<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let s = input.shape();
    if s.h % 2 != 0 {
        return Err(Error::dim("h", format!("height {} is odd", s.h)));
    }
    if s.w % 2 != 0 {
        return Err(Error::dim("w", format!("width {} is odd", s.w)));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let quarter = E::from_f64_c(0.25);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                let r0 = input.idx(n, c, 2 * oy, 0);
                let r1 = input.idx(n, c, 2 * oy + 1, 0);
                let dst = out.idx(n, c, oy, 0);
                for ox in 0..ow {
                    let sum = input.data()[r0 + 2 * ox]
                        + input.data()[r0 + 2 * ox + 1]
                        + input.data()[r1 + 2 * ox]
                        + input.data()[r1 + 2 * ox + 1];
                    out.data_mut()[dst + ox] = sum * quarter;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`avg_pool2`]: each input cell receives a quarter of its
/// window's upstream gradient.
pub fn avg_pool2_backward<E: Element>(grad_out: &Tensor<E>, in_shape: Shape) -> Tensor<E> {
    let o = grad_out.shape();
    let quarter = E::from_f64_c(0.25);
    let mut dx = Tensor::zeros(in_shape);
    for n in 0..o.n {
        for c in 0..o.c {
            for oy in 0..o.h {
                for ox in 0..o.w {
                    let g = grad_out.at(n, c, oy, ox) * quarter;
                    for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = dx.idx(n, c, 2 * oy + dy, 2 * ox + dxx);
                        dx.data_mut()[i] = dx.data_mut()[i] + g;
                    }
                }
            }
        }
    }
    dx
}

/// Per-axis sampling plan for 2x bilinear upsampling with half-pixel centers:
/// destination index -> (lo index, hi index, hi weight).
fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// 2x bilinear upsampling with half-pixel centers, clamped at borders.
pub fn upsample2_bilinear<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let s = input.shape();
    let (oh, ow) = (2 * s.h, 2 * s.w);
    let ys = bilinear_axis(s.h, oh);
    let xs = bilinear_axis(s.w, ow);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = E::from_f64_c(fy);
                let gy = E::one() - fy;
                let r0 = input.idx(n, c, y0, 0);
                let r1 = input.idx(n, c, y1, 0);
                let dst = out.idx(n, c, oy, 0);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = E::from_f64_c(fx);
                    let gx = E::one() - fx;
                    let v = gy * (gx * input.data()[r0 + x0] + fx * input.data()[r0 + x1])
                        + fy * (gx * input.data()[r1 + x0] + fx * input.data()[r1 + x1]);
                    out.data_mut()[dst + ox] = v;
                }
            }
        }
    }
    out
}

/// Gradient of [`upsample2_bilinear`]: transpose of the interpolation.
pub fn upsample2_bilinear_backward<E: Element>(grad_out: &Tensor<E>, in_shape: Shape) -> Tensor<E> {
    let o = grad_out.shape();
    let ys = bilinear_axis(in_shape.h, o.h);
    let xs = bilinear_axis(in_shape.w, o.w);
    let mut dx = Tensor::zeros(in_shape);
    for n in 0..o.n {
        for c in 0..o.c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = E::from_f64_c(fy);
                let gy = E::one() - fy;
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = E::from_f64_c(fx);
                    let gx = E::one() - fx;
                    let g = grad_out.at(n, c, oy, ox);
                    for (yy, wy) in [(y0, gy), (y1, fy)] {
                        for (xx, wx) in [(x0, gx), (x1, fx)] {
                            let i = dx.idx(n, c, yy, xx);
                            dx.data_mut()[i] = dx.data_mut()[i] + g * wy * wx;
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch statistics saved by the training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats<E: Element> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

fn bn_check<E: Element>(input: &Tensor<E>, gamma: &Tensor<E>, beta: &Tensor<E>) -> Result<()> {
    let c = input.shape().c;
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != Shape::new(1, c, 1, 1) {
            return Err(Error::dim(
                "channel",
                format!("{name} must have shape (1,{c},1,1), got {}", t.shape()),
            ));
        }
    }
    Ok(())
}

/// Training-mode batch norm: normalizes by per-channel batch statistics
/// (biased variance) and returns them so the caller can update running
/// state with [`BN_MOMENTUM`].
pub fn batch_norm_train<E: Element>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<(Tensor<E>, BatchStats<E>)> {
    bn_check(input, gamma, beta)?;
    let s = input.shape();
    let m = E::from_f64_c((s.n * s.h * s.w) as f64);
    let eps = E::from_f64_c(BN_EPSILON);
    let mut mean = vec![E::zero(); s.c];
    let mut var = vec![E::zero(); s.c];
    for c in 0..s.c {
        let mut sum = E::zero();
        for n in 0..s.n {
            let base = input.idx(n, c, 0, 0);
            for &v in &input.data()[base..base + s.h * s.w] {
                sum = sum + v;
            }
        }
        let mu = sum / m;
        let mut sq = E::zero();
        for n in 0..s.n {
            let base = input.idx(n, c, 0, 0);
            for &v in &input.data()[base..base + s.h * s.w] {
                let d = v - mu;
                sq = sq + d * d;
            }
        }
        mean[c] = mu;
        var[c] = sq / m;
    }
    let mut out = Tensor::zeros(s);
    for c in 0..s.c {
        let inv_std = (var[c] + eps).sqrt().recip();
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for n in 0..s.n {
            let base = input.idx(n, c, 0, 0);
            for i in base..base + s.h * s.w {
                out.data_mut()[i] = g * (input.data()[i] - mean[c]) * inv_std + b;
            }
        }
    }
    Ok((out, BatchStats { mean, var }))
}

/// Gradients of [`batch_norm_train`] through the batch statistics.
pub fn batch_norm_train_backward<E: Element>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    stats: &BatchStats<E>,
    grad_out: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let s = input.shape();
    let m = E::from_f64_c((s.n * s.h * s.w) as f64);
    let eps = E::from_f64_c(BN_EPSILON);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    let mut dbeta = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for c in 0..s.c {
        let inv_std = (stats.var[c] + eps).sqrt().recip();
        let mu = stats.mean[c];
        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for n in 0..s.n {
            let base = input.idx(n, c, 0, 0);
            for i in base..base + s.h * s.w {
                let xhat = (input.data()[i] - mu) * inv_std;
                let dy = grad_out.data()[i];
                sum_dy = sum_dy + dy;
                sum_dy_xhat = sum_dy_xhat + dy * xhat;
            }
        }
        dbeta.data_mut()[c] = sum_dy;
        dgamma.data_mut()[c] = sum_dy_xhat;
        let g_inv = gamma.data()[c] * inv_std;
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for n in 0..s.n {
            let base = input.idx(n, c, 0, 0);
            for i in base..base + s.h * s.w {
                let xhat = (input.data()[i] - mu) * inv_std;
                dx.data_mut()[i] = g_inv * (grad_out.data()[i] - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Inference-mode batch norm using frozen running statistics.
pub fn batch_norm_eval<E: Element>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &[E],
    running_var: &[E],
) -> Result<Tensor<E>> {
    bn_check(input, gamma, beta)?;
    let s = input.shape();
    if running_mean.len() != s.c || running_var.len() != s.c {
        return Err(Error::dim(
            "channel",
            format!("running stats must have {} entries", s.c),
        ));
    }
    let eps = E::from_f64_c(BN_EPSILON);
    let mut out = Tensor::zeros(s);
    for c in 0..s.c {
        let inv_std = (running_var[c] + eps).sqrt().recip();
        let (g, b, mu) = (gamma.data()[c], beta.data()[c], running_mean[c]);
        for n in 0..s.n {
            let base = input.idx(n, c, 0, 0);
            for i in base..base + s.h * s.w {
                out.data_mut()[i] = g * (input.data()[i] - mu) * inv_std + b;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`batch_norm_eval`]; running statistics are constants.
pub fn batch_norm_eval_backward<E: Element>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    running_mean: &[E],
    running_var: &[E],
    grad_out: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let s = input.shape();
    let eps = E::from_f64_c(BN_EPSILON);
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    let mut dbeta = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for c in 0..s.c {
        let inv_std = (running_var[c] + eps).sqrt().recip();
        let g_inv = gamma.data()[c] * inv_std;
        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for n in 0..s.n {
            let base = input.idx(n, c, 0, 0);
            for i in base..base + s.h * s.w {
                let dy = grad_out.data()[i];
                let xhat = (input.data()[i] - running_mean[c]) * inv_std;
                sum_dy = sum_dy + dy;
                sum_dy_xhat = sum_dy_xhat + dy * xhat;
                dx.data_mut()[i] = dy * g_inv;
            }
        }
        dbeta.data_mut()[c] = sum_dy;
        dgamma.data_mut()[c] = sum_dy_xhat;
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// elementwise and channel ops
// ---------------------------------------------------------------------------

pub fn relu<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let mut out = input.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.max(E::zero()));
    out
}

/// Gradient of [`relu`]; the subgradient at 0 is 0.
pub fn relu_backward<E: Element>(input: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    let mut dx = grad_out.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        if x <= E::zero() {
            *d = E::zero();
        }
    }
    dx
}

pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "all",
            format!("add requires equal shapes, got {} vs {}", a.shape(), b.shape()),
        ));
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o + v;
    }
    Ok(out)
}

pub fn scale<E: Element>(input: &Tensor<E>, factor: E) -> Tensor<E> {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = *v * factor);
    out
}

/// Stacks tensors along the channel axis; `n`, `h`, `w` must agree.
pub fn concat_channels<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let s0 = first.shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
            return Err(Error::dim(
                "channel",
                format!("concat requires matching n/h/w, got {s} vs {s0}"),
            ));
        }
        c_total += s.c;
    }
    let mut out = Tensor::zeros(Shape::new(s0.n, c_total, s0.h, s0.w));
    let plane = s0.h * s0.w;
    for n in 0..s0.n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape().c;
            let src = p.idx(n, 0, 0, 0);
            let dst = out.idx(n, c_off, 0, 0);
            out.data_mut()[dst..dst + pc * plane]
                .copy_from_slice(&p.data()[src..src + pc * plane]);
            c_off += pc;
        }
    }
    Ok(out)
}

/// Splits an upstream gradient back into the concatenated parts.
pub fn concat_channels_backward<E: Element>(
    grad_out: &Tensor<E>,
    part_channels: &[usize],
) -> Vec<Tensor<E>> {
    let s = grad_out.shape();
    let plane = s.h * s.w;
    let mut grads = Vec::with_capacity(part_channels.len());
    let mut c_off = 0;
    for &pc in part_channels {
        let mut g = Tensor::zeros(Shape::new(s.n, pc, s.h, s.w));
        for n in 0..s.n {
            let src = grad_out.idx(n, c_off, 0, 0);
            let dst = g.idx(n, 0, 0, 0);
            g.data_mut()[dst..dst + pc * plane]
                .copy_from_slice(&grad_out.data()[src..src + pc * plane]);
        }
        c_off += pc;
        grads.push(g);
    }
    grads
}

/// Softmax across the channel axis, independently per voxel. Numerically
/// stabilized by subtracting the per-voxel maximum.
pub fn softmax_channels<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let s = input.shape();
    let plane = s.h * s.w;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for p in 0..plane {
            let mut mx = input.data()[input.idx(n, 0, 0, 0) + p];
            for c in 1..s.c {
                mx = mx.max(input.data()[input.idx(n, c, 0, 0) + p]);
            }
            let mut sum = E::zero();
            for c in 0..s.c {
                let i = input.idx(n, c, 0, 0) + p;
                let e = (input.data()[i] - mx).exp();
                out.data_mut()[i] = e;
                sum = sum + e;
            }
            let inv = sum.recip();
            for c in 0..s.c {
                let i = input.idx(n, c, 0, 0) + p;
                out.data_mut()[i] = out.data_mut()[i] * inv;
            }
        }
    }
    out
}

/// Gradient of [`softmax_channels`] given its output.
pub fn softmax_channels_backward<E: Element>(
    output: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> Tensor<E> {
    let s = output.shape();
    let plane = s.h * s.w;
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for p in 0..plane {
            let mut dot = E::zero();
            for c in 0..s.c {
                let i = output.idx(n, c, 0, 0) + p;
                dot = dot + grad_out.data()[i] * output.data()[i];
            }
            for c in 0..s.c {
                let i = output.idx(n, c, 0, 0) + p;
                dx.data_mut()[i] = output.data()[i] * (grad_out.data()[i] - dot);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// loss kernels
// ---------------------------------------------------------------------------

/// Weighted two-class cross-entropy over one pyramid level, averaged over
/// voxels: `probs` is `(n,2,h,w)`, `labels` is a binary `(n,1,h,w)` mask.
/// Probabilities are clamped at [`PROB_FLOOR`] before `log`.
pub fn wce_level<E: Element>(
    probs: &Tensor<E>,
    labels: &Tensor<E>,
    w_background: E,
    w_foreground: E,
) -> Result<Tensor<E>> {
    let ps = probs.shape();
    let ls = labels.shape();
    if ps.c != 2 {
        return Err(Error::dim(
            "channel",
            format!("expected 2-channel probabilities, got {ps}"),
        ));
    }
    if (ps.n, ps.h, ps.w) != (ls.n, ls.h, ls.w) || ls.c != 1 {
        return Err(Error::dim(
            "all",
            format!("probabilities {ps} do not match labels {ls}"),
        ));
    }
    if !labels.is_binary() {
        return Err(Error::Validation(
            "labels must contain only 0 and 1".into(),
        ));
    }
    let floor = E::from_f64_c(PROB_FLOOR);
    let plane = ps.h * ps.w;
    let mut acc = E::zero();
    for n in 0..ps.n {
        for p in 0..plane {
            let y = labels.data()[labels.idx(n, 0, 0, 0) + p];
            let p_bg = probs.data()[probs.idx(n, 0, 0, 0) + p].max(floor);
            let p_fg = probs.data()[probs.idx(n, 1, 0, 0) + p].max(floor);
            acc = acc - w_background * (E::one() - y) * p_bg.ln() - w_foreground * y * p_fg.ln();
        }
    }
    let n_vox = E::from_f64_c((ps.n * plane) as f64);
    Ok(Tensor::scalar(acc / n_vox))
}

/// Gradient of [`wce_level`] with respect to the probabilities.
pub fn wce_level_backward<E: Element>(
    probs: &Tensor<E>,
    labels: &Tensor<E>,
    w_background: E,
    w_foreground: E,
    grad_out: E,
) -> Tensor<E> {
    let ps = probs.shape();
    let floor = E::from_f64_c(PROB_FLOOR);
    let plane = ps.h * ps.w;
    let n_vox = E::from_f64_c((ps.n * plane) as f64);
    let g = grad_out / n_vox;
    let mut dp = Tensor::zeros(ps);
    for n in 0..ps.n {
        for p in 0..plane {
            let y = labels.data()[labels.idx(n, 0, 0, 0) + p];
            let i_bg = probs.idx(n, 0, 0, 0) + p;
            let i_fg = probs.idx(n, 1, 0, 0) + p;
            if probs.data()[i_bg] >= floor {
                dp.data_mut()[i_bg] =
                    -g * w_background * (E::one() - y) / probs.data()[i_bg].max(floor);
            }
            if probs.data()[i_fg] >= floor {
                dp.data_mut()[i_fg] = -g * w_foreground * y / probs.data()[i_fg].max(floor);
            }
        }
    }
    dp
}

/// Sum of all elements as a scalar tensor.
pub fn sum_all<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    Tensor::scalar(input.data().iter().fold(E::zero(), |a, &b| a + b))
}

/// Dot product with a constant coefficient tensor of the same shape,
/// producing a scalar.
pub fn weighted_sum<E: Element>(input: &Tensor<E>, coeffs: &Tensor<E>) -> Result<Tensor<E>> {
    if input.shape() != coeffs.shape() {
        return Err(Error::dim(
            "all",
            format!(
                "weighted_sum requires equal shapes, got {} vs {}",
                input.shape(),
                coeffs.shape()
            ),
        ));
    }
    let acc = input
        .data()
        .iter()
        .zip(coeffs.data())
        .fold(E::zero(), |a, (&x, &c)| a + x * c);
    Ok(Tensor::scalar(acc))
}
