//! Forward and backward passes for the layer types of the keyword-spotting CNN.
//!
//! Activations are rank-3 tensors laid out `(time, freq, channel)`, convolution
//! kernels are `(m, r, c_in, n)`, dense weights are `(in, out)` so that
//! `output = input · weight + bias` with the input read as a row vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Output spatial size of a valid convolution with stride, floor-divided.
pub fn conv_output_dims(t: usize, f: usize, m: usize, r: usize, s: usize, u: usize) -> (usize, usize) {
    ((t - m + 1) / s, (f - r + 1) / u)
}

fn check_conv(input: &Tensor, kernel: &Tensor, s: usize, u: usize) -> Result<(usize, usize)> {
    if input.rank() != 3 || kernel.rank() != 4 {
        return dim_err(format!(
            "conv2d expects input (t,f,c) and kernel (m,r,c,n), got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        ));
    }
    let &[t, f, c] = input.shape() else { unreachable!() };
    let &[m, r, kc, _] = kernel.shape() else { unreachable!() };
    if kc != c {
        return dim_err(format!("conv2d: input has {c} channels, kernel expects {kc}"));
    }
    if m > t || r > f {
        return dim_err(format!("conv2d: kernel {m}x{r} larger than input {t}x{f}"));
    }
    if s == 0 || u == 0 {
        return dim_err("conv2d: strides must be positive");
    }
    let (to, fo) = conv_output_dims(t, f, m, r, s, u);
    if to == 0 || fo == 0 {
        return dim_err(format!("conv2d: stride ({s},{u}) leaves an empty output"));
    }
    Ok((to, fo))
}

pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, s: usize, u: usize) -> Result<Tensor> {
    let (to, fo) = check_conv(input, kernel, s, u)?;
    let &[_, f, c] = input.shape() else { unreachable!() };
    let &[m, r, _, n] = kernel.shape() else { unreachable!() };
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; to * fo * n];
    for i in 0..to {
        for j in 0..fo {
            let o = &mut out[(i * fo + j) * n..(i * fo + j + 1) * n];
            for a in 0..m {
                for b in 0..r {
                    let xin = ((i * s + a) * f + j * u + b) * c;
                    let kin = (a * r + b) * c;
                    for ch in 0..c {
                        let xv = x[xin + ch];
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &k[(kin + ch) * n..(kin + ch + 1) * n];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[to, fo, n], out)
}

/// Returns `(grad_input, grad_kernel)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    s: usize,
    u: usize,
) -> Result<(Tensor, Tensor)> {
    let (to, fo) = check_conv(input, kernel, s, u)?;
    let &[_, f, c] = input.shape() else { unreachable!() };
    let &[m, r, _, n] = kernel.shape() else { unreachable!() };
    if grad_out.shape() != [to, fo, n] {
        return dim_err(format!(
            "conv2d_backward: grad_out {:?} does not match output [{to}, {fo}, {n}]",
            grad_out.shape()
        ));
    }
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for i in 0..to {
        for j in 0..fo {
            let go = &g[(i * fo + j) * n..(i * fo + j + 1) * n];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for a in 0..m {
                for b in 0..r {
                    let xin = ((i * s + a) * f + j * u + b) * c;
                    let kin = (a * r + b) * c;
                    for ch in 0..c {
                        let row = (kin + ch) * n..(kin + ch + 1) * n;
                        let xv = x[xin + ch];
                        let mut acc = 0.0;
                        for ((gkv, &kv), &gv) in gk[row.clone()].iter_mut().zip(&k[row]).zip(go) {
                            *gkv += xv * gv;
                            acc += kv * gv;
                        }
                        gx[xin + ch] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(kernel.shape(), gk)?,
    ))
}

/// Adds a per-channel bias to a `(t, f, c)` activation in place.
pub fn add_channel_bias(x: &mut Tensor, bias: &Tensor) -> Result<()> {
    let c = *x.shape().last().unwrap_or(&0);
    if bias.len() != c {
        return dim_err(format!("bias of length {} for {c} channels", bias.len()));
    }
    for chunk in x.data_mut().chunks_mut(c) {
        for (v, &b) in chunk.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(())
}

/// Sums a `(t, f, c)` gradient over space, giving the per-channel bias gradient.
pub fn channel_bias_grad(grad: &Tensor) -> Tensor {
    let c = *grad.shape().last().unwrap();
    let mut gb = vec![0.0; c];
    for chunk in grad.data().chunks(c) {
        for (acc, &v) in gb.iter_mut().zip(chunk) {
            *acc += v;
        }
    }
    Tensor::vector(&gb)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.check_same_shape(grad_out, "relu_backward")?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(output.shape(), data)
}

/// Max pooling over non-overlapping `p x q` windows. Trailing rows/columns that
/// do not fill a window are dropped. Returns the pooled tensor and, for each
/// output element, the flat input offset that produced it (first maximum in
/// row-major window order).
pub fn maxpool_forward(input: &Tensor, p: usize, q: usize) -> Result<(Tensor, Vec<usize>)> {
    if input.rank() != 3 {
        return dim_err(format!("maxpool expects (t,f,c), got {:?}", input.shape()));
    }
    let &[t, f, c] = input.shape() else { unreachable!() };
    if p == 0 || q == 0 || p > t || q > f {
        return dim_err(format!("maxpool window {p}x{q} does not fit input {t}x{f}"));
    }
    let (to, fo) = (t / p, f / q);
    let x = input.data();
    let mut out = vec![0.0; to * fo * c];
    let mut arg = vec![0usize; to * fo * c];
    for i in 0..to {
        for j in 0..fo {
            for ch in 0..c {
                let mut best_off = (i * p * f + j * q) * c + ch;
                let mut best = x[best_off];
                for a in 0..p {
                    for b in 0..q {
                        let off = ((i * p + a) * f + j * q + b) * c + ch;
                        if x[off] > best {
                            best = x[off];
                            best_off = off;
                        }
                    }
                }
                let o = (i * fo + j) * c + ch;
                out[o] = best;
                arg[o] = best_off;
            }
        }
    }
    Ok((Tensor::new(&[to, fo, c], out)?, arg))
}

pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return dim_err("maxpool_backward: argmax and grad_out lengths differ");
    }
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    for (&off, &g) in argmax.iter().zip(grad_out.data()) {
        if off >= data.len() {
            return Err(Error::Index { index: off, len: data.len() });
        }
        data[off] += g;
    }
    Ok(gx)
}

fn check_dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    if weight.rank() != 2 {
        return dim_err(format!("dense weight must be (in, out), got {:?}", weight.shape()));
    }
    let (din, dout) = (weight.shape()[0], weight.shape()[1]);
    if input.len() != din {
        return dim_err(format!("dense: input has {} features, weight expects {din}", input.len()));
    }
    if bias.len() != dout {
        return dim_err(format!("dense: bias has {} entries, weight has {dout} outputs", bias.len()));
    }
    Ok((din, dout))
}

/// `input · weight + bias`; the input is flattened to a row vector.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, dout) = check_dense(input, weight, bias)?;
    let mut out = bias.data().to_vec();
    for (&x, row) in input.data().iter().zip(weight.data().chunks(dout)) {
        if x == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(row) {
            *o += x * w;
        }
    }
    Tensor::new(&[dout], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` has the input's shape.
pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, dout) = check_dense(input, weight, bias)?;
    if grad_out.len() != dout {
        return dim_err(format!("dense_backward: grad_out has {} entries, expected {dout}", grad_out.len()));
    }
    let g = grad_out.data();
    let mut gx = Vec::with_capacity(input.len());
    let mut gw = Vec::with_capacity(weight.len());
    for (&x, row) in input.data().iter().zip(weight.data().chunks(dout)) {
        gx.push(row.iter().zip(g).map(|(w, gv)| w * gv).sum());
        gw.extend(g.iter().map(|gv| x * gv));
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new(bias.shape(), g.to_vec())?,
    ))
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.map(|z| (z - max).exp());
    let total = exps.sum();
    exps.map(|e| e / total)
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient in the logits.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if label >= logits.len() {
        return Err(Error::Index { index: label, len: logits.len() });
    }
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.data().iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits.data()[label];
    let mut grad = softmax(logits);
    grad.data_mut()[label] -= 1.0;
    Ok((loss, grad))
}

/// Compares analytic gradients against central differences of `loss`.
///
/// For each tensor, up to `samples_per_tensor` coordinates are drawn (every
/// coordinate when the tensor is small enough). Returns the largest
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(
    params: &[Tensor],
    analytic: &[Tensor],
    mut loss: F,
    eps: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Config(format!("finite-difference epsilon {eps} outside (0, 1e-3]")));
    }
    if params.len() != analytic.len() {
        return dim_err("finite_difference_check: params and gradients differ in count");
    }
    for (p, g) in params.iter().zip(analytic) {
        p.check_same_shape(g, "finite_difference_check")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..params.len() {
        let len = params[ti].len();
        let coords: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            (0..samples_per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for idx in coords {
            let orig = params[ti].data()[idx];
            work[ti].data_mut()[idx] = orig + eps;
            let up = loss(&work)?;
            work[ti].data_mut()[idx] = orig - eps;
            let down = loss(&work)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti].data()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
