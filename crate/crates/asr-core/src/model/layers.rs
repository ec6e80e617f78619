//! Layer primitives: 1D convolutions (full, depthwise, separable),
//! batch normalization, ReLU, and dropout, each with a hand-written
//! backward pass.
//!
//! Activations are `channels x time` matrices. Convolutions use
//! "same"-style zero padding of `(kernel - 1) / 2 * dilation` per side,
//! so the output length is `ceil(T / stride)`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use rand::Rng;

use super::ModelError;

fn check_conv_geometry(kernel: usize, stride: usize, dilation: usize) -> Result<(), ModelError> {
    if kernel % 2 == 0 {
        return Err(ModelError::BadConfig(format!(
            "kernel width must be odd, got {kernel}"
        )));
    }
    if stride == 0 || dilation == 0 {
        return Err(ModelError::BadConfig(format!(
            "stride and dilation must be >= 1, got stride {stride}, dilation {dilation}"
        )));
    }
    Ok(())
}

/// `y[o, t] = bias[o] + sum_{i,j} weight[o, i, j] * x_padded[i, t*stride + j*dilation]`.
pub fn conv1d_forward(
    x: &Array2<f64>,
    weight: ArrayView3<f64>,
    bias: ArrayView1<f64>,
    stride: usize,
    dilation: usize,
) -> Result<Array2<f64>, ModelError> {
    let (in_ch, t_in) = x.dim();
    let (out_ch, w_in, kernel) = weight.dim();
    check_conv_geometry(kernel, stride, dilation)?;
    if w_in != in_ch {
        return Err(ModelError::ShapeMismatch {
            context: "conv1d input channels".into(),
            expected: vec![w_in, t_in],
            got: vec![in_ch, t_in],
        });
    }
    if bias.len() != out_ch {
        return Err(ModelError::ShapeMismatch {
            context: "conv1d bias".into(),
            expected: vec![out_ch],
            got: vec![bias.len()],
        });
    }

    let pad = (kernel - 1) / 2 * dilation;
    let t_out = t_in.div_ceil(stride);
    let mut y = Array2::zeros((out_ch, t_out));
    if t_in == 0 {
        return Ok(y);
    }
    for o in 0..out_ch {
        let mut row = y.row_mut(o);
        row.fill(bias[o]);
        for i in 0..in_ch {
            let x_row = x.row(i);
            for j in 0..kernel {
                let w = weight[(o, i, j)];
                let off = j * dilation;
                // t*stride + off - pad must land in [0, t_in)
                let t_lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
                if off >= t_in + pad || t_lo >= t_out {
                    continue;
                }
                let t_hi = ((t_in - 1 + pad - off) / stride).min(t_out - 1);
                let mut u = t_lo * stride + off - pad;
                for t in t_lo..=t_hi {
                    row[t] += w * x_row[u];
                    u += stride;
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv1d_forward`] with respect to input, weight, and bias.
pub fn conv1d_backward(
    x: &Array2<f64>,
    weight: ArrayView3<f64>,
    stride: usize,
    dilation: usize,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array3<f64>, Array1<f64>) {
    let (in_ch, t_in) = x.dim();
    let (out_ch, _, kernel) = weight.dim();
    let t_out = dy.ncols();
    let pad = (kernel - 1) / 2 * dilation;

    let mut dx = Array2::zeros((in_ch, t_in));
    let mut dw = Array3::zeros((out_ch, in_ch, kernel));
    let mut db = Array1::zeros(out_ch);
    for o in 0..out_ch {
        db[o] = dy.row(o).sum();
    }
    if t_in == 0 || t_out == 0 {
        return (dx, dw, db);
    }
    for o in 0..out_ch {
        let dy_row = dy.row(o);
        for i in 0..in_ch {
            let x_row = x.row(i);
            let mut dx_row = dx.row_mut(i);
            for j in 0..kernel {
                let off = j * dilation;
                let t_lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
                if off >= t_in + pad || t_lo >= t_out {
                    continue;
                }
                let t_hi = ((t_in - 1 + pad - off) / stride).min(t_out - 1);
                let w = weight[(o, i, j)];
                let mut grad_w = 0.0;
                let mut u = t_lo * stride + off - pad;
                for t in t_lo..=t_hi {
                    grad_w += dy_row[t] * x_row[u];
                    dx_row[u] += w * dy_row[t];
                    u += stride;
                }
                dw[(o, i, j)] += grad_w;
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel convolution: `weight` is `channels x kernel` and channel
/// `i` of the output only sees channel `i` of the input. No bias; the
/// separable composition applies one after its pointwise stage.
pub fn depthwise_conv1d_forward(
    x: &Array2<f64>,
    weight: ArrayView2<f64>,
    stride: usize,
    dilation: usize,
) -> Result<Array2<f64>, ModelError> {
    let (in_ch, t_in) = x.dim();
    let (w_ch, kernel) = weight.dim();
    check_conv_geometry(kernel, stride, dilation)?;
    if w_ch != in_ch {
        return Err(ModelError::ShapeMismatch {
            context: "depthwise channels".into(),
            expected: vec![w_ch],
            got: vec![in_ch],
        });
    }

    let pad = (kernel - 1) / 2 * dilation;
    let t_out = t_in.div_ceil(stride);
    let mut y = Array2::zeros((in_ch, t_out));
    if t_in == 0 {
        return Ok(y);
    }
    for i in 0..in_ch {
        let x_row = x.row(i);
        let mut row = y.row_mut(i);
        for j in 0..kernel {
            let w = weight[(i, j)];
            let off = j * dilation;
            let t_lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
            if off >= t_in + pad || t_lo >= t_out {
                continue;
            }
            let t_hi = ((t_in - 1 + pad - off) / stride).min(t_out - 1);
            let mut u = t_lo * stride + off - pad;
            for t in t_lo..=t_hi {
                row[t] += w * x_row[u];
                u += stride;
            }
        }
    }
    Ok(y)
}

pub fn depthwise_conv1d_backward(
    x: &Array2<f64>,
    weight: ArrayView2<f64>,
    stride: usize,
    dilation: usize,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (in_ch, t_in) = x.dim();
    let kernel = weight.ncols();
    let t_out = dy.ncols();
    let pad = (kernel - 1) / 2 * dilation;

    let mut dx = Array2::zeros((in_ch, t_in));
    let mut dw = Array2::zeros((in_ch, kernel));
    if t_in == 0 || t_out == 0 {
        return (dx, dw);
    }
    for i in 0..in_ch {
        let x_row = x.row(i);
        let dy_row = dy.row(i);
        let mut dx_row = dx.row_mut(i);
        for j in 0..kernel {
            let off = j * dilation;
            let t_lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
            if off >= t_in + pad || t_lo >= t_out {
                continue;
            }
            let t_hi = ((t_in - 1 + pad - off) / stride).min(t_out - 1);
            let w = weight[(i, j)];
            let mut grad_w = 0.0;
            let mut u = t_lo * stride + off - pad;
            for t in t_lo..=t_hi {
                grad_w += dy_row[t] * x_row[u];
                dx_row[u] += w * dy_row[t];
                u += stride;
            }
            dw[(i, j)] += grad_w;
        }
    }
    (dx, dw)
}

/// Time-channel separable convolution: a depthwise pass over time
/// followed by a width-1 pointwise mix across channels, equal to a full
/// convolution whose weight factorizes as
/// `weight[o, i, k] = pointwise[o, i] * depthwise[i, k]`.
///
/// Returns the output and the depthwise intermediate needed by the
/// backward pass.
pub fn separable_conv1d_forward(
    x: &Array2<f64>,
    depthwise: ArrayView2<f64>,
    pointwise: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    stride: usize,
    dilation: usize,
) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
    let z = depthwise_conv1d_forward(x, depthwise, stride, dilation)?;
    let (out_ch, p_in) = pointwise.dim();
    if p_in != z.nrows() {
        return Err(ModelError::ShapeMismatch {
            context: "pointwise input channels".into(),
            expected: vec![p_in],
            got: vec![z.nrows()],
        });
    }
    if bias.len() != out_ch {
        return Err(ModelError::ShapeMismatch {
            context: "separable bias".into(),
            expected: vec![out_ch],
            got: vec![bias.len()],
        });
    }
    let mut y = pointwise.dot(&z);
    for (o, mut row) in y.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v + bias[o]);
    }
    Ok((y, z))
}

/// Gradients of [`separable_conv1d_forward`]; `z` is the cached
/// depthwise intermediate.
#[allow(clippy::too_many_arguments)]
pub fn separable_conv1d_backward(
    x: &Array2<f64>,
    z: &Array2<f64>,
    depthwise: ArrayView2<f64>,
    pointwise: ArrayView2<f64>,
    stride: usize,
    dilation: usize,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array1<f64>) {
    let out_ch = pointwise.nrows();
    let mut db = Array1::zeros(out_ch);
    for o in 0..out_ch {
        db[o] = dy.row(o).sum();
    }
    let d_pointwise = dy.dot(&z.t());
    let dz = pointwise.t().dot(dy);
    let (dx, d_depthwise) = depthwise_conv1d_backward(x, depthwise, stride, dilation, &dz);
    (dx, d_depthwise, d_pointwise, db)
}

/// What the batch-norm backward pass needs: normalized activations and
/// the per-channel inverse standard deviation of the batch.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub x_hat: Vec<Array2<f64>>,
    pub inv_std: Array1<f64>,
}

/// Training-mode batch normalization over the joint (batch, time) axis.
///
/// Normalizes by the epsilon-stabilized biased batch statistics, then
/// folds them into the running statistics:
/// `running = (1 - momentum) * running + momentum * batch`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward_train(
    xs: &[Array2<f64>],
    gain: ArrayView1<f64>,
    shift: ArrayView1<f64>,
    running_mean: &mut [f64],
    running_var: &mut [f64],
    momentum: f64,
    eps: f64,
) -> (Vec<Array2<f64>>, BatchNormCache) {
    let channels = gain.len();
    let n: usize = xs.iter().map(|x| x.ncols()).sum();
    let n = n as f64;

    let mut mean = Array1::<f64>::zeros(channels);
    for x in xs {
        for c in 0..channels {
            mean[c] += x.row(c).sum();
        }
    }
    mean.mapv_inplace(|v| v / n);

    let mut var = Array1::<f64>::zeros(channels);
    for x in xs {
        for c in 0..channels {
            var[c] += x.row(c).iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
        }
    }
    var.mapv_inplace(|v| v / n);

    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let mut x_hat = Vec::with_capacity(xs.len());
    let mut ys = Vec::with_capacity(xs.len());
    for x in xs {
        let mut h = x.clone();
        for c in 0..channels {
            let (m, s) = (mean[c], inv_std[c]);
            h.row_mut(c).mapv_inplace(|v| (v - m) * s);
        }
        let mut y = h.clone();
        for c in 0..channels {
            let (g, b) = (gain[c], shift[c]);
            y.row_mut(c).mapv_inplace(|v| g * v + b);
        }
        x_hat.push(h);
        ys.push(y);
    }

    for c in 0..channels {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c];
    }

    (ys, BatchNormCache { x_hat, inv_std })
}

/// Inference-mode batch normalization against running statistics.
pub fn batchnorm_forward_eval(
    xs: &[Array2<f64>],
    gain: ArrayView1<f64>,
    shift: ArrayView1<f64>,
    running_mean: ArrayView1<f64>,
    running_var: ArrayView1<f64>,
    eps: f64,
) -> Vec<Array2<f64>> {
    let channels = gain.len();
    xs.iter()
        .map(|x| {
            let mut y = x.clone();
            for c in 0..channels {
                let inv = 1.0 / (running_var[c] + eps).sqrt();
                let (m, g, b) = (running_mean[c], gain[c], shift[c]);
                y.row_mut(c).mapv_inplace(|v| g * (v - m) * inv + b);
            }
            y
        })
        .collect()
}

/// Backward of training-mode batch norm; returns per-item input
/// gradients plus gain and shift gradients.
pub fn batchnorm_backward(
    cache: &BatchNormCache,
    gain: ArrayView1<f64>,
    dys: &[Array2<f64>],
) -> (Vec<Array2<f64>>, Array1<f64>, Array1<f64>) {
    let channels = gain.len();
    let n: usize = dys.iter().map(|dy| dy.ncols()).sum();
    let n = n as f64;

    let mut d_gain = Array1::<f64>::zeros(channels);
    let mut d_shift = Array1::<f64>::zeros(channels);
    // Per-channel sums of dx_hat and dx_hat * x_hat across the batch.
    let mut sum_dh = Array1::<f64>::zeros(channels);
    let mut sum_dh_h = Array1::<f64>::zeros(channels);
    for (dy, h) in dys.iter().zip(&cache.x_hat) {
        for c in 0..channels {
            let dy_row = dy.row(c);
            let h_row = h.row(c);
            let g = gain[c];
            for (&d, &hv) in dy_row.iter().zip(h_row.iter()) {
                d_gain[c] += d * hv;
                d_shift[c] += d;
                sum_dh[c] += d * g;
                sum_dh_h[c] += d * g * hv;
            }
        }
    }

    let dxs = dys
        .iter()
        .zip(&cache.x_hat)
        .map(|(dy, h)| {
            let mut dx = Array2::zeros(dy.dim());
            for c in 0..channels {
                let g = gain[c];
                let s = cache.inv_std[c];
                let (mdh, mdhh) = (sum_dh[c] / n, sum_dh_h[c] / n);
                let dy_row = dy.row(c);
                let h_row = h.row(c);
                let mut dx_row = dx.row_mut(c);
                for t in 0..dy_row.len() {
                    let dh = dy_row[t] * g;
                    dx_row[t] = s * (dh - mdh - h_row[t] * mdhh);
                }
            }
            dx
        })
        .collect();

    (dxs, d_gain, d_shift)
}

/// Elementwise `max(0, x)`.
pub fn relu_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the forward *output*: the gradient passes
/// wherever the output is strictly positive.
pub fn relu_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| {
        if yv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Inverted dropout. In training mode each entry is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`; the
/// returned mask holds those factors for the backward pass. Eval mode is
/// the identity and consumes no randomness, as is `rate == 0`.
pub fn dropout_forward<R: Rng>(
    x: &Array2<f64>,
    rate: f64,
    rng: &mut R,
    train: bool,
) -> Result<(Array2<f64>, Option<Array2<f64>>), ModelError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(ModelError::BadDropoutRate(rate));
    }
    if !train || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let scale = 1.0 / (1.0 - rate);
    let mask = Array2::from_shape_simple_fn(x.dim(), || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            scale
        }
    });
    Ok((x * &mask, Some(mask)))
}

/// Backward through dropout: multiply by the saved mask (identity when
/// no mask was drawn).
pub fn dropout_backward(mask: Option<&Array2<f64>>, dy: &Array2<f64>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}
