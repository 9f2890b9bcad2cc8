//! Layer primitives. Every forward function has a matching `*_backward`
//! that maps an upstream gradient to gradients of the inputs and weights.

use super::{Segments, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const GLN_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn check_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} must be rank 2, got shape {:?}",
            t.shape()
        )))
    }
}

fn check_len(t: &Tensor, n: usize, what: &str) -> Result<()> {
    if t.len() == n {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must have {n} entries, got {}", t.len())))
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// `A · B`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul lhs")?;
    check_matrix(b, "matmul rhs")?;
    if a.cols() != b.rows() {
        return Err(Error::invalid(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(p)) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `A · Bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul lhs")?;
    check_matrix(b, "matmul rhs")?;
    if a.cols() != b.cols() {
        return Err(Error::invalid("matmul_nt column counts differ"));
    }
    let (m, n) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let v = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// `Aᵀ · B`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matrix(a, "matmul lhs")?;
    check_matrix(b, "matmul rhs")?;
    if a.rows() != b.rows() {
        return Err(Error::invalid("matmul_tn row counts differ"));
    }
    let (m, n) = (a.cols(), b.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for p in 0..a.rows() {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out.row_mut(i).iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    debug_assert_eq!(out.shape(), &[m, n]);
    Ok(out)
}

/// Gradients `(dA, dB)` of `C = A · B`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> (Tensor, Tensor) {
    let da = matmul_nt(dc, b).expect("shapes checked in forward");
    let db = matmul_tn(a, dc).expect("shapes checked in forward");
    (da, db)
}

// ---------------------------------------------------------------------------
// 1x1 convolution
// ---------------------------------------------------------------------------

/// `y[c, t] = Σ_i weight[c, i] · x[i, t] + bias[c]`
pub fn pointwise_conv(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_matrix(x, "conv input")?;
    check_matrix(weight, "conv weight")?;
    if weight.cols() != x.rows() {
        return Err(Error::invalid(format!(
            "conv weight {:?} does not accept {} input channels",
            weight.shape(),
            x.rows()
        )));
    }
    check_len(bias, weight.rows(), "conv bias")?;
    let mut y = matmul(weight, x)?;
    for (c, &b) in bias.data().iter().enumerate() {
        y.row_mut(c).iter_mut().for_each(|v| *v += b);
    }
    Ok(y)
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
    pub dbias: Tensor,
}

pub fn pointwise_conv_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> ConvGrads {
    let dx = matmul_tn(weight, dy).expect("shapes checked in forward");
    let dweight = matmul_nt(dy, x).expect("shapes checked in forward");
    let dbias = Tensor::vector((0..dy.rows()).map(|c| dy.row(c).iter().sum()).collect());
    ConvGrads { dx, dweight, dbias }
}

// ---------------------------------------------------------------------------
// Dilated depthwise convolution (non-causal, "same" zero padding)
// ---------------------------------------------------------------------------

/// Dilated depthwise convolution of a single utterance.
pub fn depthwise_dconv(x: &Tensor, kernel: &Tensor, bias: &Tensor, dilation: usize) -> Result<Tensor> {
    check_matrix(x, "dconv input")?;
    depthwise_dconv_segments(x, kernel, bias, dilation, &Segments::single(x.cols()))
}

fn check_dconv(x: &Tensor, kernel: &Tensor, bias: &Tensor, dilation: usize, segs: &Segments) -> Result<()> {
    check_matrix(x, "dconv input")?;
    check_matrix(kernel, "dconv kernel")?;
    if kernel.rows() != x.rows() {
        return Err(Error::invalid("dconv kernel channel count differs from input"));
    }
    if kernel.cols() % 2 == 0 {
        return Err(Error::invalid(format!(
            "dconv kernel size must be odd, got {}",
            kernel.cols()
        )));
    }
    if dilation == 0 {
        return Err(Error::invalid("dilation must be at least 1"));
    }
    check_len(bias, x.rows(), "dconv bias")?;
    if segs.total() != x.cols() {
        return Err(Error::invalid("segment lengths do not cover the input"));
    }
    Ok(())
}

/// Tap offsets relative to the output position: `(p - (P-1)/2) * dilation`.
fn tap_offsets(taps: usize, dilation: usize) -> impl Iterator<Item = (usize, isize)> {
    let half = (taps / 2) as isize;
    (0..taps).map(move |p| (p, (p as isize - half) * dilation as isize))
}

/// Same as [`depthwise_dconv`], with each segment zero-padded independently.
pub fn depthwise_dconv_segments(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    dilation: usize,
    segs: &Segments,
) -> Result<Tensor> {
    check_dconv(x, kernel, bias, dilation, segs)?;
    let mut y = Tensor::zeros(x.shape());
    let taps = kernel.cols();
    for c in 0..x.rows() {
        let k = kernel.row(c);
        let b = bias.data()[c];
        let xr = x.row(c);
        let yr = y.row_mut(c);
        for (start, len) in segs.spans() {
            let xs = &xr[start..start + len];
            let ys = &mut yr[start..start + len];
            ys.iter_mut().for_each(|v| *v = b);
            for (p, off) in tap_offsets(taps, dilation) {
                let w = k[p];
                // output t reads input t + off, valid when 0 <= t + off < len
                let lo = (-off).max(0) as usize;
                let hi = (len as isize - off).clamp(0, len as isize) as usize;
                for t in lo..hi {
                    ys[t] += w * xs[(t as isize + off) as usize];
                }
            }
        }
    }
    Ok(y)
}

pub struct DconvGrads {
    pub dx: Tensor,
    pub dkernel: Tensor,
    pub dbias: Tensor,
}

pub fn depthwise_dconv_backward(
    x: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    segs: &Segments,
    dy: &Tensor,
) -> DconvGrads {
    let taps = kernel.cols();
    let mut dx = Tensor::zeros(x.shape());
    let mut dkernel = Tensor::zeros(kernel.shape());
    let mut dbias = Tensor::zeros(&[x.rows()]);
    for c in 0..x.rows() {
        let k = kernel.row(c);
        let xr = x.row(c);
        let dyr = dy.row(c);
        dbias.data_mut()[c] = dyr.iter().sum();
        let mut dk = vec![0.0; taps];
        let dxr = dx.row_mut(c);
        for (start, len) in segs.spans() {
            let xs = &xr[start..start + len];
            let dys = &dyr[start..start + len];
            let dxs = &mut dxr[start..start + len];
            for (p, off) in tap_offsets(taps, dilation) {
                let lo = (-off).max(0) as usize;
                let hi = (len as isize - off).clamp(0, len as isize) as usize;
                let mut acc = 0.0;
                for t in lo..hi {
                    let src = (t as isize + off) as usize;
                    acc += xs[src] * dys[t];
                    dxs[src] += k[p] * dys[t];
                }
                dk[p] += acc;
            }
        }
        dkernel.row_mut(c).copy_from_slice(&dk);
    }
    DconvGrads { dx, dkernel, dbias }
}

// ---------------------------------------------------------------------------
// PReLU
// ---------------------------------------------------------------------------

pub fn prelu(x: &Tensor, slope: &Tensor) -> Result<Tensor> {
    check_matrix(x, "prelu input")?;
    check_len(slope, x.rows(), "prelu slope")?;
    let mut y = x.clone();
    for (c, &a) in slope.data().iter().enumerate() {
        for v in y.row_mut(c) {
            if *v < 0.0 {
                *v *= a;
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dslope)`. The derivative at exactly zero is taken as 1.
pub fn prelu_backward(x: &Tensor, slope: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let mut dx = dy.clone();
    let mut dslope = Tensor::zeros(slope.shape());
    for (c, &a) in slope.data().iter().enumerate() {
        let mut ds = 0.0;
        for (g, &xv) in dx.row_mut(c).iter_mut().zip(x.row(c)) {
            if xv < 0.0 {
                ds += xv * *g;
                *g *= a;
            }
        }
        dslope.data_mut()[c] = ds;
    }
    (dx, dslope)
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Saved state of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mode: Mode,
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    /// Batch statistics (train mode) used to refresh the running averages.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Per-channel batch normalization over every column of `x` (batch × time).
///
/// Train mode normalizes with batch statistics; eval mode uses the running
/// statistics passed in.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: Mode,
) -> Result<(Tensor, BnCache)> {
    check_matrix(x, "batch norm input")?;
    let c = x.rows();
    for (t, what) in [
        (gamma, "gamma"),
        (beta, "beta"),
        (running_mean, "running mean"),
        (running_var, "running variance"),
    ] {
        check_len(t, c, what)?;
    }
    let n = x.cols() as f64;
    let mut y = Tensor::zeros(x.shape());
    let mut x_hat = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0; c];
    let mut batch_mean = vec![0.0; c];
    let mut batch_var = vec![0.0; c];
    for ch in 0..c {
        let row = x.row(ch);
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                (mean, var)
            }
            Mode::Eval => (running_mean.data()[ch], running_var.data()[ch]),
        };
        batch_mean[ch] = mean;
        batch_var[ch] = var;
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = is;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for ((yh, yv), &xv) in x_hat.row_mut(ch).iter_mut().zip(y.row_mut(ch)).zip(row) {
            *yh = (xv - mean) * is;
            *yv = *yh * g + b;
        }
    }
    Ok((
        y,
        BnCache {
            mode,
            x_hat,
            inv_std,
            batch_mean,
            batch_var,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(cache: &BnCache, gamma: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = dy.rows();
    let n = dy.cols() as f64;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let dyr = dy.row(ch);
        let xh = cache.x_hat.row(ch);
        let sum_dy: f64 = dyr.iter().sum();
        let sum_dy_xh: f64 = dyr.iter().zip(xh).map(|(a, b)| a * b).sum();
        dgamma.data_mut()[ch] = sum_dy_xh;
        dbeta.data_mut()[ch] = sum_dy;
        let k = gamma.data()[ch] * cache.inv_std[ch];
        let dxr = dx.row_mut(ch);
        match cache.mode {
            Mode::Train => {
                for ((d, &g), &h) in dxr.iter_mut().zip(dyr).zip(xh) {
                    *d = k * (g - sum_dy / n - h * sum_dy_xh / n);
                }
            }
            Mode::Eval => {
                for (d, &g) in dxr.iter_mut().zip(dyr) {
                    *d = k * g;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Exponential moving average update of the running statistics from a
/// train-mode pass. The running variance uses the unbiased batch variance.
pub fn update_running_stats(running_mean: &mut Tensor, running_var: &mut Tensor, cache: &BnCache, count: usize) {
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    for ch in 0..running_mean.len() {
        let m = &mut running_mean.data_mut()[ch];
        *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * cache.batch_mean[ch];
        let v = &mut running_var.data_mut()[ch];
        *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * cache.batch_var[ch] * unbias;
    }
}

// ---------------------------------------------------------------------------
// Global layer normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GlnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
}

/// gLN of a single utterance: statistics over all entries jointly, then a
/// per-row affine map.
pub fn global_layer_norm(y: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, GlnCache)> {
    check_matrix(y, "gLN input")?;
    global_layer_norm_segments(y, gamma, beta, eps, &Segments::single(y.cols()))
}

/// gLN with separate statistics per segment.
pub fn global_layer_norm_segments(
    y: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    segs: &Segments,
) -> Result<(Tensor, GlnCache)> {
    check_matrix(y, "gLN input")?;
    check_len(gamma, y.rows(), "gLN gamma")?;
    check_len(beta, y.rows(), "gLN beta")?;
    if segs.total() != y.cols() {
        return Err(Error::invalid("segment lengths do not cover the input"));
    }
    let rows = y.rows();
    let mut out = Tensor::zeros(y.shape());
    let mut x_hat = Tensor::zeros(y.shape());
    let mut inv_std = Vec::with_capacity(segs.count());
    for (start, len) in segs.spans() {
        let n = (rows * len) as f64;
        let mean = (0..rows)
            .map(|r| y.row(r)[start..start + len].iter().sum::<f64>())
            .sum::<f64>()
            / n;
        let var = (0..rows)
            .map(|r| {
                y.row(r)[start..start + len]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for r in 0..rows {
            let (g, b) = (gamma.data()[r], beta.data()[r]);
            for t in start..start + len {
                let h = (y.at(r, t) - mean) * is;
                x_hat.set(r, t, h);
                out.set(r, t, h * g + b);
            }
        }
    }
    Ok((out, GlnCache { x_hat, inv_std }))
}

/// Returns `(dy_in, dgamma, dbeta)`.
pub fn global_layer_norm_backward(
    cache: &GlnCache,
    gamma: &Tensor,
    segs: &Segments,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let rows = dout.rows();
    let mut dx = Tensor::zeros(dout.shape());
    let mut dgamma = Tensor::zeros(&[rows]);
    let mut dbeta = Tensor::zeros(&[rows]);
    for r in 0..rows {
        let dr = dout.row(r);
        dbeta.data_mut()[r] = dr.iter().sum();
        dgamma.data_mut()[r] = dr.iter().zip(cache.x_hat.row(r)).map(|(a, b)| a * b).sum();
    }
    for ((start, len), &is) in segs.spans().zip(&cache.inv_std) {
        let n = (rows * len) as f64;
        let mut mean_g = 0.0;
        let mut mean_gh = 0.0;
        for r in 0..rows {
            let g = gamma.data()[r];
            for t in start..start + len {
                let gh = dout.at(r, t) * g;
                mean_g += gh;
                mean_gh += gh * cache.x_hat.at(r, t);
            }
        }
        mean_g /= n;
        mean_gh /= n;
        for r in 0..rows {
            let g = gamma.data()[r];
            for t in start..start + len {
                let gh = dout.at(r, t) * g;
                dx.set(r, t, is * (gh - mean_g - cache.x_hat.at(r, t) * mean_gh));
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Softmax over the first index, sigmoid
// ---------------------------------------------------------------------------

/// Softmax down each column: `out[i, j] = exp(w[i, j]) / Σ_i exp(w[i, j])`.
pub fn softmax_columns(w: &Tensor) -> Tensor {
    let (rows, cols) = (w.rows(), w.cols());
    let mut out = Tensor::zeros(w.shape());
    for j in 0..cols {
        let max = (0..rows).map(|i| w.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..rows {
            let e = (w.at(i, j) - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for i in 0..rows {
            out.set(i, j, out.at(i, j) / sum);
        }
    }
    out
}

/// Gradient through [`softmax_columns`] given its output.
pub fn softmax_columns_backward(out: &Tensor, dout: &Tensor) -> Tensor {
    let (rows, cols) = (out.rows(), out.cols());
    let mut dw = Tensor::zeros(out.shape());
    for j in 0..cols {
        let dot: f64 = (0..rows).map(|i| out.at(i, j) * dout.at(i, j)).sum();
        for i in 0..rows {
            dw.set(i, j, out.at(i, j) * (dout.at(i, j) - dot));
        }
    }
    dw
}

#[inline]
fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient through [`sigmoid`] given its output.
pub fn sigmoid_backward(out: &Tensor, dout: &Tensor) -> Tensor {
    out.zip_map(dout, |s, g| g * s * (1.0 - s))
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean of `|a - b|` over every entry.
pub fn mean_abs_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// `sign(a - b) / count`; zero where the operands agree.
pub fn mean_abs_loss_backward(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.len().max(1) as f64;
    a.zip_map(b, |x, y| sign(x - y) / n)
}

/// Mean-absolute loss averaged per segment, then across segments. With one
/// segment this is [`mean_abs_loss`].
pub fn segment_mean_abs_loss(a: &Tensor, b: &Tensor, segs: &Segments) -> Result<f64> {
    if a.shape() != b.shape() || !a.is_matrix() || segs.total() != a.cols() {
        return Err(Error::invalid("loss operands or segments do not match"));
    }
    let rows = a.rows();
    let mut total = 0.0;
    for (start, len) in segs.spans() {
        let mut s = 0.0;
        for r in 0..rows {
            for t in start..start + len {
                s += (a.at(r, t) - b.at(r, t)).abs();
            }
        }
        total += s / (rows * len) as f64;
    }
    Ok(total / segs.count() as f64)
}

pub fn segment_mean_abs_loss_backward(a: &Tensor, b: &Tensor, segs: &Segments) -> Tensor {
    let rows = a.rows();
    let mut g = Tensor::zeros(a.shape());
    let k = segs.count() as f64;
    for (start, len) in segs.spans() {
        let scale = 1.0 / ((rows * len) as f64 * k);
        for r in 0..rows {
            for t in start..start + len {
                g.set(r, t, sign(a.at(r, t) - b.at(r, t)) * scale);
            }
        }
    }
    g
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        Tensor::from_vec(&[rows, cols], data).unwrap()
    }

    #[test]
    fn pointwise_identity_and_ones() {
        let x = ramp(3, 5);
        let y = pointwise_conv(&x, &Tensor::identity(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);

        let y = pointwise_conv(
            &Tensor::full(&[2, 3], 1.0),
            &Tensor::full(&[1, 2], 1.0),
            &Tensor::vector(vec![1.0]),
        )
        .unwrap();
        assert_eq!(y, Tensor::from_rows(&[vec![3.0, 3.0, 3.0]]));
    }

    #[test]
    fn pointwise_shape_mismatch() {
        let err = pointwise_conv(&ramp(3, 4), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2]));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let err = pointwise_conv(&ramp(2, 4), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3]));
        assert!(err.is_err());
    }

    #[test]
    fn dconv_identity_kernel_any_dilation() {
        let x = ramp(2, 13);
        let mut k = Tensor::zeros(&[2, 5]);
        k.set(0, 2, 1.0);
        k.set(1, 2, 1.0);
        for d in [1, 2, 3, 7, 20] {
            let y = depthwise_dconv(&x, &k, &Tensor::zeros(&[2]), d).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn dconv_ones_edges() {
        let x = Tensor::full(&[1, 9], 1.0);
        let k = Tensor::full(&[1, 3], 1.0);
        let y = depthwise_dconv(&x, &k, &Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(y.row(0), &[2.0, 2.0, 3.0, 3.0, 3.0, 3.0, 3.0, 2.0, 2.0]);
    }

    #[test]
    fn dconv_rejects_even_kernel() {
        let r = depthwise_dconv(&ramp(1, 4), &Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1]), 1);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dconv_segments_do_not_leak() {
        // With a segment boundary, the output of one segment ignores the other.
        let x = ramp(1, 10);
        let k = Tensor::from_rows(&[vec![0.5, 1.0, -2.0]]);
        let b = Tensor::vector(vec![0.25]);
        let segs = Segments::new(vec![4, 6]).unwrap();
        let y = depthwise_dconv_segments(&x, &k, &b, 1, &segs).unwrap();
        let left = depthwise_dconv(&x.slice_cols(0, 4), &k, &b, 1).unwrap();
        let right = depthwise_dconv(&x.slice_cols(4, 6), &k, &b, 1).unwrap();
        assert_eq!(y, Tensor::concat_cols(&[left, right]).unwrap());
    }

    #[test]
    fn prelu_values() {
        let x = Tensor::from_rows(&[vec![-2.0, 0.0, 3.0]]);
        let y = prelu(&x, &Tensor::vector(vec![0.25])).unwrap();
        assert_eq!(y.row(0), &[-0.5, 0.0, 3.0]);
        let (dx, _) = prelu_backward(&x, &Tensor::vector(vec![0.25]), &Tensor::full(&[1, 3], 1.0));
        assert_eq!(dx.row(0), &[0.25, 1.0, 1.0]);
    }

    #[test]
    fn batch_norm_train_statistics() {
        let x = ramp(3, 40).map(|v| 3.0 * v + 1.5);
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let (y, _) = batch_norm(&x, &ones, &zeros, &zeros, &ones, Mode::Train).unwrap();
        for c in 0..3 {
            let r = y.row(c);
            let m = r.iter().sum::<f64>() / 40.0;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 40.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let x = ramp(2, 10);
        let beta = Tensor::vector(vec![0.7, -1.2]);
        let (y, _) = batch_norm(
            &x,
            &Tensor::zeros(&[2]),
            &beta,
            &Tensor::zeros(&[2]),
            &Tensor::full(&[2], 1.0),
            Mode::Train,
        )
        .unwrap();
        assert!(y.row(0).iter().all(|&v| v == 0.7));
        assert!(y.row(1).iter().all(|&v| v == -1.2));
    }

    #[test]
    fn batch_norm_eval_uses_initial_stats() {
        let x = ramp(1, 5);
        let (y, _) = batch_norm(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &Tensor::zeros(&[1]),
            &Tensor::full(&[1], 1.0),
            Mode::Eval,
        )
        .unwrap();
        let k = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * k).abs() < 1e-15);
        }
    }

    #[test]
    fn running_stats_update() {
        let x = Tensor::from_rows(&[vec![1.0, 3.0]]);
        let ones = Tensor::full(&[1], 1.0);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let (_, cache) = batch_norm(&x, &ones, &Tensor::zeros(&[1]), &rm, &rv, Mode::Train).unwrap();
        update_running_stats(&mut rm, &mut rv, &cache, 2);
        assert!((rm.data()[0] - 0.2).abs() < 1e-15);
        // unbiased variance of {1, 3} is 2
        assert!((rv.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn gln_statistics_and_constant_input() {
        let y = ramp(4, 6).map(|v| 10.0 * v + 3.0);
        let (out, _) = global_layer_norm(&y, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), GLN_EPS).unwrap();
        let n = out.len() as f64;
        let m = out.sum() / n;
        let v = out.data().iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
        assert!(m.abs() < 1e-7);
        assert!((v - 1.0).abs() < 1e-5);

        let c = Tensor::full(&[3, 5], 4.2);
        let (out, _) = global_layer_norm(&c, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), GLN_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let s = softmax_columns(&Tensor::zeros(&[4, 3]));
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let w = ramp(5, 4);
        let mut shifted = w.clone();
        for j in 0..4 {
            for i in 0..5 {
                shifted.set(i, j, w.at(i, j) + 100.0 * j as f64 - 37.0);
            }
        }
        let a = softmax_columns(&w);
        let b = softmax_columns(&shifted);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_saturation() {
        let s = sigmoid(&Tensor::vector(vec![0.0, 40.0, -40.0, 1000.0, -1000.0]));
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 1.0).abs() < 1e-12);
        assert!(s.data()[2] > 0.0 && s.data()[2] < 1e-12);
        assert!(s.is_finite());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Tensor::from_rows(&[vec![3.0], vec![7.0]]));
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
        assert!(matmul(&a, &Tensor::zeros(&[3, 1])).is_err());
        assert_eq!(matmul_nt(&a, &a).unwrap(), matmul(&a, &a.transpose()).unwrap());
        assert_eq!(matmul_tn(&a, &a).unwrap(), matmul(&a.transpose(), &a).unwrap());
    }

    #[test]
    fn loss_values() {
        let a = Tensor::from_rows(&[vec![1.0, 3.0]]);
        let b = Tensor::from_rows(&[vec![0.0, 1.0]]);
        assert_eq!(mean_abs_loss(&a, &b).unwrap(), 1.5);
        assert_eq!(mean_abs_loss(&a, &a).unwrap(), 0.0);
        assert!(mean_abs_loss(&a, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn segment_loss_averages_items() {
        let a = ramp(2, 7);
        let b = Tensor::zeros(&[2, 7]);
        let segs = Segments::new(vec![3, 4]).unwrap();
        let l = segment_mean_abs_loss(&a, &b, &segs).unwrap();
        let l0 = mean_abs_loss(&a.slice_cols(0, 3), &b.slice_cols(0, 3)).unwrap();
        let l1 = mean_abs_loss(&a.slice_cols(3, 4), &b.slice_cols(3, 4)).unwrap();
        assert!((l - (l0 + l1) / 2.0).abs() < 1e-15);
    }
}
