//! Tensor operations: forward kernels plus their backward rules.
//!
//! Each op takes `Option<&Tape>`; pass `None` for inference. Convolution,
//! pooling and reduction inner loops accumulate in f64 and store f32.

use std::collections::HashMap;

use super::{accumulate_into, Tape, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn track(tape: Option<&Tape>, inputs: &[&Tensor]) -> bool {
    tape.is_some() && inputs.iter().any(|t| t.requires_grad())
}

pub(crate) enum Rule {
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { a: Tensor, c: f32 },
    Relu { a: Tensor },
    SumAll { a: Tensor },
    MseMean { a: Tensor, b: Tensor },
    Linear { x: Tensor, w: Tensor, b: Tensor },
    Conv2d { input: Tensor, weight: Tensor, bias: Tensor, stride: usize, padding: usize },
    MaxPool { input: Tensor, argmax: Vec<u32> },
    GlobalAvgPool { input: Tensor },
    Softmax { input: Tensor, axis: usize },
    BatchNorm { input: Tensor, gamma: Tensor, beta: Tensor, xhat: Vec<f32>, inv_std: Vec<f32>, training: bool },
    CrossEntropy { logits: Tensor, probs: Vec<f32>, labels: Vec<usize> },
}

impl Rule {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Rule::Add { a, b } | Rule::Sub { a, b } | Rule::Mul { a, b } | Rule::MseMean { a, b } => {
                vec![a, b]
            }
            Rule::Scale { a, .. } | Rule::Relu { a } | Rule::SumAll { a } => vec![a],
            Rule::Linear { x, w, b } => vec![x, w, b],
            Rule::Conv2d { input, weight, bias, .. } => vec![input, weight, bias],
            Rule::MaxPool { input, .. } | Rule::GlobalAvgPool { input } => vec![input],
            Rule::Softmax { input, .. } => vec![input],
            Rule::BatchNorm { input, gamma, beta, .. } => vec![input, gamma, beta],
            Rule::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    pub(crate) fn apply(
        &self,
        output: &Tensor,
        g: &[f32],
        grads: &mut HashMap<u64, Vec<f32>>,
    ) -> Result<()> {
        match self {
            Rule::Add { a, b } => {
                accumulate_into(grads, a, g);
                accumulate_into(grads, b, g);
            }
            Rule::Sub { a, b } => {
                accumulate_into(grads, a, g);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                accumulate_into(grads, b, &neg);
            }
            Rule::Mul { a, b } => {
                let (da, db) = {
                    let av = a.data();
                    let bv = b.data();
                    let da: Vec<f32> = g.iter().zip(bv.iter()).map(|(g, b)| g * b).collect();
                    let db: Vec<f32> = g.iter().zip(av.iter()).map(|(g, a)| g * a).collect();
                    (da, db)
                };
                accumulate_into(grads, a, &da);
                accumulate_into(grads, b, &db);
            }
            Rule::Scale { a, c } => {
                let da: Vec<f32> = g.iter().map(|v| v * c).collect();
                accumulate_into(grads, a, &da);
            }
            Rule::Relu { a } => {
                let da: Vec<f32> = {
                    let av = a.data();
                    g.iter()
                        .zip(av.iter())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect()
                };
                accumulate_into(grads, a, &da);
            }
            Rule::SumAll { a } => {
                let da = vec![g[0]; a.numel()];
                accumulate_into(grads, a, &da);
            }
            Rule::MseMean { a, b } => {
                let n = a.numel() as f64;
                let scale = 2.0 * g[0] as f64 / n;
                let da: Vec<f32> = {
                    let av = a.data();
                    let bv = b.data();
                    av.iter()
                        .zip(bv.iter())
                        .map(|(x, y)| (scale * (*x as f64 - *y as f64)) as f32)
                        .collect()
                };
                let db: Vec<f32> = da.iter().map(|v| -v).collect();
                accumulate_into(grads, a, &da);
                accumulate_into(grads, b, &db);
            }
            Rule::Linear { x, w, b } => {
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let out = w.shape()[0];
                let xv = x.data();
                let wv = w.data();
                let mut dx = vec![0.0f64; n * d];
                let mut dw = vec![0.0f64; out * d];
                let mut db = vec![0.0f64; out];
                for i in 0..n {
                    for o in 0..out {
                        let go = g[i * out + o] as f64;
                        db[o] += go;
                        for k in 0..d {
                            dx[i * d + k] += go * wv[o * d + k] as f64;
                            dw[o * d + k] += go * xv[i * d + k] as f64;
                        }
                    }
                }
                drop(xv);
                drop(wv);
                accumulate_into(grads, x, &dx.iter().map(|v| *v as f32).collect::<Vec<_>>());
                accumulate_into(grads, w, &dw.iter().map(|v| *v as f32).collect::<Vec<_>>());
                accumulate_into(grads, b, &db.iter().map(|v| *v as f32).collect::<Vec<_>>());
            }
            Rule::Conv2d { input, weight, bias, stride, padding } => {
                conv2d_backward(input, weight, bias, *stride, *padding, output, g, grads)?;
            }
            Rule::MaxPool { input, argmax } => {
                let mut dx = vec![0.0f32; input.numel()];
                for (cell, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += g[cell];
                }
                accumulate_into(grads, input, &dx);
            }
            Rule::GlobalAvgPool { input } => {
                let (n, c, h, w) = dims4(input);
                let inv = 1.0 / (h * w) as f32;
                let mut dx = vec![0.0f32; input.numel()];
                for i in 0..n {
                    for ch in 0..c {
                        let go = g[i * c + ch] * inv;
                        let base = (i * c + ch) * h * w;
                        for p in 0..h * w {
                            dx[base + p] = go;
                        }
                    }
                }
                accumulate_into(grads, input, &dx);
            }
            Rule::Softmax { input, axis } => {
                // dx = y * (g - <g, y>) per lane
                let y = output.data();
                let shape = input.shape();
                let axis_len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut dx = vec![0.0f32; input.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = 0.0f64;
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            dot += g[idx] as f64 * y[idx] as f64;
                        }
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            dx[idx] = (y[idx] as f64 * (g[idx] as f64 - dot)) as f32;
                        }
                    }
                }
                drop(y);
                accumulate_into(grads, input, &dx);
            }
            Rule::BatchNorm { input, gamma, beta, xhat, inv_std, training } => {
                let (n, c, h, w) = dims4(input);
                let m = (n * h * w) as f64;
                let gv = gamma.data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * h * w;
                        for p in 0..h * w {
                            let idx = base + p;
                            let gi = g[idx] as f64;
                            let xh = xhat[idx] as f64;
                            dbeta[ch] += gi;
                            dgamma[ch] += gi * xh;
                            sum_g[ch] += gi;
                            sum_gx[ch] += gi * xh;
                        }
                    }
                }
                let mut dx = vec![0.0f32; input.numel()];
                for i in 0..n {
                    for ch in 0..c {
                        let scale = gv[ch] as f64 * inv_std[ch] as f64;
                        let base = (i * c + ch) * h * w;
                        for p in 0..h * w {
                            let idx = base + p;
                            let gi = g[idx] as f64;
                            let d = if *training {
                                scale
                                    * (gi - sum_g[ch] / m - xhat[idx] as f64 * sum_gx[ch] / m)
                            } else {
                                scale * gi
                            };
                            dx[idx] = d as f32;
                        }
                    }
                }
                drop(gv);
                accumulate_into(grads, input, &dx);
                accumulate_into(grads, gamma, &dgamma.iter().map(|v| *v as f32).collect::<Vec<_>>());
                accumulate_into(grads, beta, &dbeta.iter().map(|v| *v as f32).collect::<Vec<_>>());
            }
            Rule::CrossEntropy { logits, probs, labels } => {
                let (n, c) = (logits.shape()[0], logits.shape()[1]);
                let scale = g[0] / n as f32;
                let mut dl = vec![0.0f32; n * c];
                for i in 0..n {
                    for k in 0..c {
                        let onehot = if labels[i] == k { 1.0 } else { 0.0 };
                        dl[i * c + k] = (probs[i * c + k] - onehot) * scale;
                    }
                }
                accumulate_into(grads, logits, &dl);
            }
        }
        Ok(())
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn finish(
    tape: Option<&Tape>,
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<f32>,
    inputs: &[&Tensor],
    rule: impl FnOnce() -> Rule,
) -> Result<Tensor> {
    let tracked = track(tape, inputs);
    let out = Tensor::from_op_output(op, shape, data, tracked)?;
    if tracked {
        tape.expect("tracked implies tape").record(&out, rule());
    }
    Ok(out)
}

pub fn add(tape: Option<&Tape>, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data: Vec<f32> = {
        let (av, bv) = (a.data(), b.data());
        av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect()
    };
    finish(tape, "add", a.shape().to_vec(), data, &[a, b], || Rule::Add {
        a: a.clone(),
        b: b.clone(),
    })
}

pub fn sub(tape: Option<&Tape>, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data: Vec<f32> = {
        let (av, bv) = (a.data(), b.data());
        av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect()
    };
    finish(tape, "sub", a.shape().to_vec(), data, &[a, b], || Rule::Sub {
        a: a.clone(),
        b: b.clone(),
    })
}

pub fn mul(tape: Option<&Tape>, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data: Vec<f32> = {
        let (av, bv) = (a.data(), b.data());
        av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect()
    };
    finish(tape, "mul", a.shape().to_vec(), data, &[a, b], || Rule::Mul {
        a: a.clone(),
        b: b.clone(),
    })
}

/// Multiply every element by a constant.
pub fn scale(tape: Option<&Tape>, a: &Tensor, c: f32) -> Result<Tensor> {
    let data: Vec<f32> = a.data().iter().map(|x| x * c).collect();
    finish(tape, "scale", a.shape().to_vec(), data, &[a], || Rule::Scale {
        a: a.clone(),
        c,
    })
}

pub fn relu(tape: Option<&Tape>, a: &Tensor) -> Result<Tensor> {
    let data: Vec<f32> = a.data().iter().map(|x| x.max(0.0)).collect();
    finish(tape, "relu", a.shape().to_vec(), data, &[a], || Rule::Relu {
        a: a.clone(),
    })
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all(tape: Option<&Tape>, a: &Tensor) -> Result<Tensor> {
    let s: f64 = a.data().iter().map(|v| *v as f64).sum();
    finish(tape, "sum_all", vec![1], vec![s as f32], &[a], || Rule::SumAll {
        a: a.clone(),
    })
}

/// Mean of squared element differences, as a scalar tensor.
pub fn mse_mean(tape: Option<&Tape>, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mse_mean", a, b)?;
    let s: f64 = {
        let (av, bv) = (a.data(), b.data());
        av.iter()
            .zip(bv.iter())
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum()
    };
    let v = (s / a.numel() as f64) as f32;
    finish(tape, "mse_mean", vec![1], vec![v], &[a, b], || Rule::MseMean {
        a: a.clone(),
        b: b.clone(),
    })
}

/// Fully connected layer: x (N,d) * w (out,d)^T + b (out) -> (N,out).
pub fn linear(tape: Option<&Tape>, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
        return Err(Error::invalid(
            "linear",
            format!(
                "expected x (N,d), w (out,d), b (out); got {:?}, {:?}, {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    if x.shape()[1] != w.shape()[1] || w.shape()[0] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let data: Vec<f32> = {
        let xv = x.data();
        let wv = w.data();
        let bv = b.data();
        let mut y = vec![0.0f32; n * out];
        for i in 0..n {
            for o in 0..out {
                let mut acc = bv[o] as f64;
                for k in 0..d {
                    acc += xv[i * d + k] as f64 * wv[o * d + k] as f64;
                }
                y[i * out + o] = acc as f32;
            }
        }
        y
    };
    finish(tape, "linear", vec![n, out], data, &[x, w, b], || Rule::Linear {
        x: x.clone(),
        w: w.clone(),
        b: b.clone(),
    })
}

/// 2D cross-correlation. input (N,I,H,W), weight (O,I,K,K), bias (O).
pub fn conv2d(
    tape: Option<&Tape>,
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if input.rank() != 4 || weight.rank() != 4 {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "expected rank-4 input and weight, got {:?} and {:?}",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    let (n, cin, h, w) = dims4(input);
    let (out_ch, win_ch, kh, kw) = dims4(weight);
    if cin != win_ch {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if kh != kw {
        return Err(Error::invalid(
            "conv2d",
            format!("only square kernels supported, got {:?}", weight.shape()),
        ));
    }
    if bias.shape() != [out_ch] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: weight.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let k = kh;
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::invalid(
            "conv2d",
            format!(
                "kernel {k}x{k} does not fit input {:?} with padding {padding}",
                input.shape()
            ),
        ));
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;

    let data: Vec<f32> = {
        let xv = input.data();
        let wv = weight.data();
        let bv = bias.data();
        let mut y = vec![0.0f32; n * out_ch * oh * ow];
        for ni in 0..n {
            for o in 0..out_ch {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bv[o] as f64;
                        for i in 0..cin {
                            for ky in 0..k {
                                let iy = (yo * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (xo * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((ni * cin + i) * h + iy as usize) * w + ix as usize;
                                    let wi = ((o * cin + i) * k + ky) * k + kx;
                                    acc += xv[xi] as f64 * wv[wi] as f64;
                                }
                            }
                        }
                        y[((ni * out_ch + o) * oh + yo) * ow + xo] = acc as f32;
                    }
                }
            }
        }
        y
    };
    finish(
        tape,
        "conv2d",
        vec![n, out_ch, oh, ow],
        data,
        &[input, weight, bias],
        || Rule::Conv2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            stride,
            padding,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    output: &Tensor,
    g: &[f32],
    grads: &mut HashMap<u64, Vec<f32>>,
) -> Result<()> {
    let (n, cin, h, w) = dims4(input);
    let (out_ch, _, k, _) = dims4(weight);
    let (_, _, oh, ow) = dims4(output);
    let xv = input.data();
    let wv = weight.data();
    let mut dx = vec![0.0f64; input.numel()];
    let mut dw = vec![0.0f64; weight.numel()];
    let mut db = vec![0.0f64; out_ch];
    for ni in 0..n {
        for o in 0..out_ch {
            for yo in 0..oh {
                for xo in 0..ow {
                    let go = g[((ni * out_ch + o) * oh + yo) * ow + xo] as f64;
                    db[o] += go;
                    for i in 0..cin {
                        for ky in 0..k {
                            let iy = (yo * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (xo * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + i) * h + iy as usize) * w + ix as usize;
                                let wi = ((o * cin + i) * k + ky) * k + kx;
                                dx[xi] += go * wv[wi] as f64;
                                dw[wi] += go * xv[xi] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    drop(xv);
    drop(wv);
    accumulate_into(grads, input, &dx.iter().map(|v| *v as f32).collect::<Vec<_>>());
    accumulate_into(grads, weight, &dw.iter().map(|v| *v as f32).collect::<Vec<_>>());
    accumulate_into(grads, bias, &db.iter().map(|v| *v as f32).collect::<Vec<_>>());
    Ok(())
}

/// 2x2 max pooling with stride 2. Spatial extents must be even. Gradient
/// routes to the first maximum in row-major window scan order.
pub fn max_pool2d(tape: Option<&Tape>, input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::invalid(
            "max_pool2d",
            format!("expected rank-4 input, got {:?}", input.shape()),
        ));
    }
    let (n, c, h, w) = dims4(input);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "max_pool2d",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];
    {
        let xv = input.data();
        for ni in 0..n {
            for ch in 0..c {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((ni * c + ch) * h + yo * 2 + dy) * w + xo * 2 + dx;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let cell = ((ni * c + ch) * oh + yo) * ow + xo;
                        out[cell] = best;
                        argmax[cell] = best_idx as u32;
                    }
                }
            }
        }
    }
    finish(
        tape,
        "max_pool2d",
        vec![n, c, oh, ow],
        out,
        &[input],
        || Rule::MaxPool {
            input: input.clone(),
            argmax,
        },
    )
}

/// Spatial mean per channel: (N,C,H,W) -> (N,C).
pub fn global_avg_pool(tape: Option<&Tape>, input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::invalid(
            "global_avg_pool",
            format!("expected rank-4 input, got {:?}", input.shape()),
        ));
    }
    let (n, c, h, w) = dims4(input);
    let data: Vec<f32> = {
        let xv = input.data();
        let mut y = vec![0.0f32; n * c];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * h * w;
                let mut acc = 0.0f64;
                for p in 0..h * w {
                    acc += xv[base + p] as f64;
                }
                y[ni * c + ch] = (acc / (h * w) as f64) as f32;
            }
        }
        y
    };
    finish(tape, "global_avg_pool", vec![n, c], data, &[input], || {
        Rule::GlobalAvgPool { input: input.clone() }
    })
}

/// Numerically stable softmax along `axis`.
pub fn softmax(tape: Option<&Tape>, input: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= input.rank() {
        return Err(Error::invalid(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", input.shape()),
        ));
    }
    let shape = input.shape();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let data: Vec<f32> = {
        let xv = input.data();
        let mut y = vec![0.0f32; input.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..axis_len {
                    m = m.max(xv[base + k * inner] as f64);
                }
                let mut denom = 0.0f64;
                for k in 0..axis_len {
                    denom += (xv[base + k * inner] as f64 - m).exp();
                }
                for k in 0..axis_len {
                    let idx = base + k * inner;
                    y[idx] = ((xv[idx] as f64 - m).exp() / denom) as f32;
                }
            }
        }
        y
    };
    finish(tape, "softmax", shape.to_vec(), data, &[input], || Rule::Softmax {
        input: input.clone(),
        axis,
    })
}

/// Per-channel batch-statistics normalization with affine parameters.
///
/// Training mode normalizes with the batch mean/variance (biased) and blends
/// them into the running buffers: `running = momentum*running + (1-m)*batch`.
/// Inference mode normalizes with the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_stats_norm(
    tape: Option<&Tape>,
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    training: bool,
    momentum: f32,
    eps: f32,
) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::invalid(
            "batch_stats_norm",
            format!("expected rank-4 input, got {:?}", input.shape()),
        ));
    }
    let (n, c, h, w) = dims4(input);
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.shape() != [c] {
            return Err(Error::invalid(
                "batch_stats_norm",
                format!("{name} must have shape [{c}], got {:?}", t.shape()),
            ));
        }
    }
    let m = (n * h * w) as f64;
    let (mean, var) = if training {
        let xv = input.data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * h * w;
                for p in 0..h * w {
                    mean[ch] += xv[base + p] as f64;
                }
            }
        }
        for v in mean.iter_mut() {
            *v /= m;
        }
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * h * w;
                for p in 0..h * w {
                    let d = xv[base + p] as f64 - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v /= m;
        }
        drop(xv);
        // side effect: fold batch statistics into the running buffers
        {
            let mut rm = running_mean.data().clone();
            let mut rv = running_var.data().clone();
            for ch in 0..c {
                rm[ch] = momentum * rm[ch] + (1.0 - momentum) * mean[ch] as f32;
                rv[ch] = momentum * rv[ch] + (1.0 - momentum) * var[ch] as f32;
            }
            running_mean.set_data(rm)?;
            running_var.set_data(rv)?;
        }
        (mean, var)
    } else {
        let rm = running_mean.data();
        let rv = running_var.data();
        (
            rm.iter().map(|v| *v as f64).collect(),
            rv.iter().map(|v| *v as f64).collect(),
        )
    };

    let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
    let (out, xhat) = {
        let xv = input.data();
        let gv = gamma.data();
        let bv = beta.data();
        let mut out = vec![0.0f32; input.numel()];
        let mut xhat = vec![0.0f32; input.numel()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * h * w;
                for p in 0..h * w {
                    let idx = base + p;
                    let xh = ((xv[idx] as f64 - mean[ch]) * inv_std[ch] as f64) as f32;
                    xhat[idx] = xh;
                    out[idx] = gv[ch] * xh + bv[ch];
                }
            }
        }
        (out, xhat)
    };
    finish(
        tape,
        "batch_stats_norm",
        input.shape().to_vec(),
        out,
        &[input, gamma, beta],
        || Rule::BatchNorm {
            input: input.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
            training,
        },
    )
}

/// Mean over the batch of -log softmax(logits)[label].
pub fn cross_entropy(tape: Option<&Tape>, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::invalid(
            "cross_entropy",
            format!("expected (N,C) logits, got {:?}", logits.shape()),
        ));
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::invalid(
            "cross_entropy",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(
            "cross_entropy",
            format!("label {bad} out of range for {c} classes"),
        ));
    }
    let (loss, probs) = {
        let xv = logits.data();
        let mut probs = vec![0.0f32; n * c];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
            let mut denom = 0.0f64;
            for &v in row {
                denom += (v as f64 - m).exp();
            }
            let lse = m + denom.ln();
            for (k, &v) in row.iter().enumerate() {
                probs[i * c + k] = ((v as f64 - lse).exp()) as f32;
            }
            total += lse - row[labels[i]] as f64;
        }
        ((total / n as f64) as f32, probs)
    };
    finish(tape, "cross_entropy", vec![1], vec![loss], &[logits], || {
        Rule::CrossEntropy {
            logits: logits.clone(),
            probs,
            labels: labels.to_vec(),
        }
    })
}

/// In-place SGD with weight decay: p <- p - lr*(grad + wd*p). Gradients are
/// cleared afterwards. Every parameter must have a populated gradient.
pub fn sgd_step(params: &[Tensor], lr: f32, weight_decay: f32) -> Result<()> {
    for p in params {
        if p.grad().is_none() {
            return Err(Error::invalid(
                "sgd_step",
                format!("parameter {:?} has no gradient", p.shape()),
            ));
        }
    }
    for p in params {
        let g = p.grad().expect("checked above");
        let mut data = p.to_vec();
        for (v, gi) in data.iter_mut().zip(g.iter()) {
            *v -= lr * (gi + weight_decay * *v);
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
        }
        p.set_data(data)?;
        p.zero_grad();
    }
    Ok(())
}


#[cfg(test)]
impl Tensor {
    fn accumulate_grad_for_test(&self, g: Vec<f32>) {
        self.accumulate_grad(&g);
    }
}
