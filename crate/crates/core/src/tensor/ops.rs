//! Forward and backward kernels. Each backward takes the upstream gradient
//! plus whatever the forward saved and returns gradients for every input.

use super::{gauss_cdf, gauss_pdf, Result, Tensor, TensorError};

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::RankMismatch {
            op,
            expected: rank,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    Ok(Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]))
}

pub(crate) fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("mul", a, b)?;
    Ok(Tensor::from_fn(a.shape(), |i| a.data()[i] * b.data()[i]))
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub(crate) fn relu_backward(grad: &Tensor, x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| {
        if x.data()[i] > 0.0 {
            grad.data()[i]
        } else {
            0.0
        }
    })
}

pub(crate) fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub(crate) fn sigmoid_backward(grad: &Tensor, y: &Tensor) -> Tensor {
    Tensor::from_fn(y.shape(), |i| {
        let s = y.data()[i];
        grad.data()[i] * s * (1.0 - s)
    })
}

/// GELU in the exact Gaussian-CDF form x * Phi(x).
pub(crate) fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * gauss_cdf(v))
}

pub(crate) fn gelu_backward(grad: &Tensor, x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| {
        let v = x.data()[i];
        grad.data()[i] * (gauss_cdf(v) + v * gauss_pdf(v))
    })
}

// ---------------------------------------------------------------------------
// matmul and friends (2-D)
// ---------------------------------------------------------------------------

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_rank("matmul", a, 2)?;
    check_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor> {
    check_rank("transpose", a, 2)?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

/// x[T x D] + bias[D] broadcast across rows.
pub(crate) fn add_bias_rows(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_rank("add_bias_rows", x, 2)?;
    check_rank("add_bias_rows", bias, 1)?;
    let d = x.shape()[1];
    if bias.shape()[0] != d {
        return Err(TensorError::ShapeMismatch {
            op: "add_bias_rows",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    Ok(Tensor::from_fn(x.shape(), |i| {
        x.data()[i] + bias.data()[i % d]
    }))
}

pub(crate) fn col_sums(grad: &Tensor) -> Tensor {
    let (t, d) = (grad.shape()[0], grad.shape()[1]);
    let mut out = vec![0.0; d];
    for i in 0..t {
        for j in 0..d {
            out[j] += grad.data()[i * d + j];
        }
    }
    Tensor::new(&[d], out).unwrap()
}

pub(crate) fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    check_rank("slice_cols", x, 2)?;
    let (t, d) = (x.shape()[0], x.shape()[1]);
    if start + len > d {
        return Err(TensorError::Unsupported {
            op: "slice_cols",
            msg: format!("columns {start}..{} exceed width {d}", start + len),
        });
    }
    let mut out = Vec::with_capacity(t * len);
    for i in 0..t {
        out.extend_from_slice(&x.data()[i * d + start..i * d + start + len]);
    }
    Tensor::new(&[t, len], out)
}

pub(crate) fn scatter_cols(grad: &Tensor, full_width: usize, start: usize) -> Tensor {
    let (t, len) = (grad.shape()[0], grad.shape()[1]);
    let mut out = vec![0.0; t * full_width];
    for i in 0..t {
        out[i * full_width + start..i * full_width + start + len]
            .copy_from_slice(&grad.data()[i * len..(i + 1) * len]);
    }
    Tensor::new(&[t, full_width], out).unwrap()
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let t = parts[0].shape()[0];
    for p in parts {
        check_rank("concat_cols", p, 2)?;
        if p.shape()[0] != t {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(t * total);
    for i in 0..t {
        for p in parts {
            let d = p.shape()[1];
            out.extend_from_slice(&p.data()[i * d..(i + 1) * d]);
        }
    }
    Tensor::new(&[t, total], out)
}

// ---------------------------------------------------------------------------
// token/grid layout moves
// ---------------------------------------------------------------------------

/// [C x H x W] -> [(H*W) x C], token t = h*W + w.
pub(crate) fn tokens_from_grid(x: &Tensor) -> Result<Tensor> {
    check_rank("tokens_from_grid", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[(i * w + j) * c + ch] = x.at3(ch, i, j);
            }
        }
    }
    Tensor::new(&[h * w, c], out)
}

/// [(H*W) x C] -> [C x H x W], inverse of [`tokens_from_grid`].
pub(crate) fn grid_from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    check_rank("grid_from_tokens", x, 2)?;
    let (t, c) = (x.shape()[0], x.shape()[1]);
    if t != h * w {
        return Err(TensorError::Unsupported {
            op: "grid_from_tokens",
            msg: format!("{t} tokens cannot fill a {h}x{w} grid"),
        });
    }
    let mut out = vec![0.0; c * h * w];
    for tok in 0..t {
        for ch in 0..c {
            out[(ch * h + tok / w) * w + tok % w] = x.data()[tok * c + ch];
        }
    }
    Tensor::new(&[c, h, w], out)
}

// ---------------------------------------------------------------------------
// softmax over the last axis
// ---------------------------------------------------------------------------

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x.data()[r * n..(r + 1) * n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - m).exp();
            out[r * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            out[r * n + j] /= sum;
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

pub(crate) fn softmax_last_backward(grad: &Tensor, y: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let rows = y.len() / n;
    let mut out = vec![0.0; y.len()];
    for r in 0..rows {
        let yr = &y.data()[r * n..(r + 1) * n];
        let gr = &grad.data()[r * n..(r + 1) * n];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            out[r * n + j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::new(y.shape(), out).unwrap()
}

// ---------------------------------------------------------------------------
// convolution (cross-correlation, same padding, k in {1,3})
// ---------------------------------------------------------------------------

pub(crate) fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_rank("conv2d", x, 3)?;
    check_rank("conv2d", w, 4)?;
    check_rank("conv2d", bias, 1)?;
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, c_in2, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if c_in != c_in2 || k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if k != 1 && k != 3 {
        return Err(TensorError::Unsupported {
            op: "conv2d",
            msg: format!("kernel size {k} not supported (1 or 3)"),
        });
    }
    if bias.shape()[0] != c_out {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: w.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; c_out * h * wd];
    for co in 0..c_out {
        let b = bias.data()[co];
        for i in 0..h {
            for j in 0..wd {
                let mut acc = b;
                for ci in 0..c_in {
                    for dy in 0..k {
                        let iy = i as isize + dy as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = j as isize + dx as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += x.at3(ci, iy as usize, ix as usize)
                                * w.data()[((co * c_in + ci) * k + dy) * k + dx];
                        }
                    }
                }
                out[(co * h + i) * wd + j] = acc;
            }
        }
    }
    Tensor::new(&[c_out, h, wd], out)
}

pub(crate) fn conv2d_backward(
    grad: &Tensor,
    x: &Tensor,
    w: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let pad = (k - 1) / 2;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = vec![0.0; c_out];
    for co in 0..c_out {
        for i in 0..h {
            for j in 0..wd {
                let g = grad.at3(co, i, j);
                if g == 0.0 {
                    continue;
                }
                gb[co] += g;
                for ci in 0..c_in {
                    for dy in 0..k {
                        let iy = i as isize + dy as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let ix = j as isize + dx as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let widx = ((co * c_in + ci) * k + dy) * k + dx;
                            let xidx = (ci * h + iy as usize) * wd + ix as usize;
                            gw.data_mut()[widx] += g * x.data()[xidx];
                            gx.data_mut()[xidx] += g * w.data()[widx];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, Tensor::new(&[c_out], gb).unwrap())
}

// ---------------------------------------------------------------------------
// resized grids
// ---------------------------------------------------------------------------

pub(crate) fn upsample_nearest_2x(x: &Tensor) -> Result<Tensor> {
    check_rank("upsample_nearest_2x", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                out[(ch * 2 * h + i) * 2 * w + j] = x.at3(ch, i / 2, j / 2);
            }
        }
    }
    Tensor::new(&[c, 2 * h, 2 * w], out)
}

pub(crate) fn upsample_nearest_2x_backward(grad: &Tensor) -> Tensor {
    let (c, h2, w2) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let idx = (ch * h + i / 2) * w + j / 2;
                out.data_mut()[idx] += grad.at3(ch, i, j);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_2x2(x: &Tensor) -> Result<Tensor> {
    check_rank("avg_pool_2x2", x, 3)?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Unsupported {
            op: "avg_pool_2x2",
            msg: format!("spatial dims {h}x{w} must be even"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                out[(ch * oh + i) * ow + j] = 0.25
                    * (x.at3(ch, 2 * i, 2 * j)
                        + x.at3(ch, 2 * i, 2 * j + 1)
                        + x.at3(ch, 2 * i + 1, 2 * j)
                        + x.at3(ch, 2 * i + 1, 2 * j + 1));
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub(crate) fn avg_pool_2x2_backward(grad: &Tensor) -> Tensor {
    let (c, oh, ow) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let mut out = Tensor::zeros(&[c, 2 * oh, 2 * ow]);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * grad.at3(ch, i, j);
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    out.set3(ch, 2 * i + di, 2 * j + dj, g);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

pub const NORM_EPS: f64 = 1e-5;

pub(crate) struct NormSaved {
    /// Normalized values before the affine, one per element.
    pub xhat: Tensor,
    /// 1/sqrt(var + eps), one per normalization group.
    pub inv_std: Vec<f64>,
}

/// Batch norm over N x C x H x W with per-channel statistics across N, H, W.
/// In train mode the caller supplies no stats; eval mode normalizes with the
/// running statistics instead.
pub(crate) fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, NormSaved, Vec<f64>, Vec<f64>)> {
    check_rank("batch_norm", x, 4)?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    check_bn_affine(c, gamma, beta)?;
    let m = n * h * w;
    if m < 2 {
        return Err(TensorError::Unsupported {
            op: "batch_norm",
            msg: format!("train mode needs N*H*W >= 2 per channel, got {m}"),
        });
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for_each_bn(n, c, h, w, ch, |idx| s += x.data()[idx]);
        let mu = s / m as f64;
        let mut v = 0.0;
        for_each_bn(n, c, h, w, ch, |idx| {
            let d = x.data()[idx] - mu;
            v += d * d;
        });
        mean[ch] = mu;
        var[ch] = v / m as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        for_each_bn(n, c, h, w, ch, |idx| {
            let xh = (x.data()[idx] - mean[ch]) * inv_std[ch];
            xhat.data_mut()[idx] = xh;
            out.data_mut()[idx] = gamma.data()[ch] * xh + beta.data()[ch];
        });
    }
    Ok((out, NormSaved { xhat, inv_std }, mean, var))
}

pub(crate) fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<Tensor> {
    check_rank("batch_norm", x, 4)?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    check_bn_affine(c, gamma, beta)?;
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        let inv = 1.0 / (running_var[ch] + NORM_EPS).sqrt();
        for_each_bn(n, c, h, w, ch, |idx| {
            out.data_mut()[idx] =
                gamma.data()[ch] * (x.data()[idx] - running_mean[ch]) * inv + beta.data()[ch];
        });
    }
    Ok(out)
}

fn check_bn_affine(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            lhs: gamma.shape().to_vec(),
            rhs: beta.shape().to_vec(),
        });
    }
    Ok(())
}

fn for_each_bn(n: usize, c: usize, h: usize, w: usize, ch: usize, mut f: impl FnMut(usize)) {
    for b in 0..n {
        let base = (b * c + ch) * h * w;
        for s in 0..h * w {
            f(base + s);
        }
    }
}

/// Standard batch-norm gradient for train-mode statistics.
pub(crate) fn batch_norm_train_backward(
    grad: &Tensor,
    gamma: &Tensor,
    saved: &NormSaved,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (
        grad.shape()[0],
        grad.shape()[1],
        grad.shape()[2],
        grad.shape()[3],
    );
    let m = (n * h * w) as f64;
    let mut gx = Tensor::zeros(grad.shape());
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ch in 0..c {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for_each_bn(n, c, h, w, ch, |idx| {
            let dy = grad.data()[idx];
            let xh = saved.xhat.data()[idx];
            ggamma[ch] += dy * xh;
            gbeta[ch] += dy;
            let dxhat = dy * gamma.data()[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh;
        });
        for_each_bn(n, c, h, w, ch, |idx| {
            let dxhat = grad.data()[idx] * gamma.data()[ch];
            let xh = saved.xhat.data()[idx];
            gx.data_mut()[idx] =
                saved.inv_std[ch] * (dxhat - sum_dxhat / m - xh * sum_dxhat_xhat / m);
        });
    }
    (
        gx,
        Tensor::new(&[c], ggamma).unwrap(),
        Tensor::new(&[c], gbeta).unwrap(),
    )
}

pub(crate) fn batch_norm_eval_backward(
    grad: &Tensor,
    gamma: &Tensor,
    running_var: &[f64],
    xhat: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (
        grad.shape()[0],
        grad.shape()[1],
        grad.shape()[2],
        grad.shape()[3],
    );
    let mut gx = Tensor::zeros(grad.shape());
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / (running_var[ch] + NORM_EPS).sqrt();
        for_each_bn(n, c, h, w, ch, |idx| {
            let dy = grad.data()[idx];
            ggamma[ch] += dy * xhat.data()[idx];
            gbeta[ch] += dy;
            gx.data_mut()[idx] = dy * gamma.data()[ch] * inv;
        });
    }
    (
        gx,
        Tensor::new(&[c], ggamma).unwrap(),
        Tensor::new(&[c], gbeta).unwrap(),
    )
}

/// Layer norm over the last axis of a T x D tensor, then affine by gamma/beta[D].
pub(crate) fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, NormSaved)> {
    check_rank("layer_norm", x, 2)?;
    let (t, d) = (x.shape()[0], x.shape()[1]);
    if d < 2 {
        return Err(TensorError::Unsupported {
            op: "layer_norm",
            msg: format!("feature width must be >= 2, got {d}"),
        });
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0; t];
    for r in 0..t {
        let row = &x.data()[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let xh = (row[j] - mu) * inv;
            xhat.data_mut()[r * d + j] = xh;
            out.data_mut()[r * d + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    Ok((out, NormSaved { xhat, inv_std }))
}

pub(crate) fn layer_norm_backward(
    grad: &Tensor,
    gamma: &Tensor,
    saved: &NormSaved,
) -> (Tensor, Tensor, Tensor) {
    let (t, d) = (grad.shape()[0], grad.shape()[1]);
    let mut gx = Tensor::zeros(grad.shape());
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    for r in 0..t {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let idx = r * d + j;
            let dy = grad.data()[idx];
            let xh = saved.xhat.data()[idx];
            ggamma[j] += dy * xh;
            gbeta[j] += dy;
            let dxhat = dy * gamma.data()[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh;
        }
        let inv = saved.inv_std[r];
        for j in 0..d {
            let idx = r * d + j;
            let dxhat = grad.data()[idx] * gamma.data()[j];
            let xh = saved.xhat.data()[idx];
            gx.data_mut()[idx] =
                inv * (dxhat - sum_dxhat / d as f64 - xh * sum_dxhat_xhat / d as f64);
        }
    }
    (
        gx,
        Tensor::new(&[d], ggamma).unwrap(),
        Tensor::new(&[d], gbeta).unwrap(),
    )
}
