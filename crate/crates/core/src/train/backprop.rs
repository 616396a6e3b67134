//! Per-sample forward pass with caches, and the matching backward pass.

use crate::error::{Error, Result};
use crate::nn::{argmax, log_softmax_at, softmax, LayerSpec, Model, Params};
use crate::scalar::Scalar;
use crate::tensor::{col2im_add, gemm, im2col_into, Tensor, Window};

/// Mean cross-entropy gradients over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    /// Aligned with the model's layers; `None` for parameter-free layers.
    pub params: Vec<Option<Params<T>>>,
    /// Mean cross-entropy over the batch.
    pub loss: T,
    /// Samples whose prediction matched the label.
    pub correct: usize,
    pub batch_size: usize,
}

enum Cache<T> {
    Conv {
        cols: Vec<T>,
        dims: (usize, usize, usize),
        window: Window,
        rows: usize,
    },
    Dense {
        input: Vec<T>,
    },
    Relu {
        input: Vec<T>,
    },
    Pool {
        winners: Vec<usize>,
        input_len: usize,
    },
    Passthrough,
}

/// Analytic gradients of the mean cross-entropy of `batch` with respect to
/// every parameter. ReLU uses subgradient 0 at 0; max-pool routes the
/// gradient to the first maximal element of each window.
pub fn gradients<'a, T: Scalar>(
    model: &Model<T>,
    batch: impl IntoIterator<Item = (&'a Tensor<T>, usize)>,
) -> Result<Gradients<T>> {
    let mut acc: Vec<Option<(Vec<T>, Vec<T>)>> = model
        .params()
        .iter()
        .map(|p| {
            p.as_ref()
                .map(|p| (vec![T::zero(); p.weights.len()], vec![T::zero(); p.bias.len()]))
        })
        .collect();
    let mut loss = T::zero();
    let mut correct = 0;
    let mut count = 0usize;
    for (x, label) in batch {
        let (l, hit) = accumulate_sample(model, x, label, &mut acc)?;
        loss += l;
        correct += hit as usize;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("gradient batch is empty".into()));
    }
    let inv = T::one() / T::of(count as f64);
    let params = acc
        .into_iter()
        .zip(model.params())
        .map(|(g, p)| {
            g.zip(p.as_ref()).map(|((mut gw, mut gb), p)| {
                gw.iter_mut().chain(gb.iter_mut()).for_each(|v| *v *= inv);
                Params {
                    weights: Tensor::from_parts(p.weights.shape().to_vec(), gw),
                    bias: Tensor::from_parts(p.bias.shape().to_vec(), gb),
                }
            })
        })
        .collect();
    Ok(Gradients {
        params,
        loss: loss * inv,
        correct,
        batch_size: count,
    })
}

/// Adds one sample's gradients into `acc`; returns its loss and whether it was classified correctly.
fn accumulate_sample<T: Scalar>(
    model: &Model<T>,
    input: &Tensor<T>,
    label: usize,
    acc: &mut [Option<(Vec<T>, Vec<T>)>],
) -> Result<(T, bool)> {
    if input.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "sample {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape()
        )));
    }
    if label >= model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            model.num_classes()
        )));
    }

    let layers = model.layers();
    let mut caches = Vec::with_capacity(layers.len());
    let mut x = input.data().to_vec();
    let mut shape = input.shape().to_vec();
    for (i, layer) in layers.iter().enumerate() {
        if matches!(layer, LayerSpec::Softmax) {
            caches.push(Cache::Passthrough);
            continue;
        }
        let out_shape = layer.output_shape(&shape).map_err(|m| Error::layer(i, m))?;
        let params = model.layer_params(i);
        let (out, cache) = match *layer {
            LayerSpec::Conv2D {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let p = params.ok_or_else(|| Error::layer(i, "missing parameters"))?;
                let window = Window {
                    kernel,
                    stride,
                    padding,
                };
                let dims = (shape[0], shape[1], shape[2]);
                let rows = out_shape[0] * out_shape[1];
                let k = kernel.0 * kernel.1 * dims.2;
                let mut cols = vec![T::zero(); rows * k];
                im2col_into(&x, dims, window, &mut cols);
                let mut out = vec![T::zero(); rows * out_channels];
                gemm(&cols, p.weights.data(), &mut out, rows, k, out_channels);
                for row in out.chunks_exact_mut(out_channels) {
                    row.iter_mut().zip(p.bias.data()).for_each(|(v, &b)| *v += b);
                }
                (
                    out,
                    Cache::Conv {
                        cols,
                        dims,
                        window,
                        rows,
                    },
                )
            }
            LayerSpec::Dense { units } => {
                let p = params.ok_or_else(|| Error::layer(i, "missing parameters"))?;
                let mut out = vec![T::zero(); units];
                gemm(&x, p.weights.data(), &mut out, 1, x.len(), units);
                out.iter_mut().zip(p.bias.data()).for_each(|(v, &b)| *v += b);
                (out, Cache::Dense { input: x })
            }
            LayerSpec::ReLU => (x.iter().map(|&v| v.max(T::zero())).collect(), Cache::Relu { input: x }),
            LayerSpec::MaxPool2D { pool, stride } => {
                let (w, c) = (shape[1], shape[2]);
                let (oh, ow) = (out_shape[0], out_shape[1]);
                let mut out = Vec::with_capacity(oh * ow * c);
                let mut winners = Vec::with_capacity(oh * ow * c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut best = ((oy * stride) * w + ox * stride) * c + ch;
                            for py in 0..pool {
                                for px in 0..pool {
                                    let j = ((oy * stride + py) * w + ox * stride + px) * c + ch;
                                    if x[j] > x[best] {
                                        best = j;
                                    }
                                }
                            }
                            out.push(x[best]);
                            winners.push(best);
                        }
                    }
                }
                (
                    out,
                    Cache::Pool {
                        winners,
                        input_len: x.len(),
                    },
                )
            }
            LayerSpec::Flatten => (x, Cache::Passthrough),
            LayerSpec::Softmax => unreachable!(),
        };
        caches.push(cache);
        x = out;
        shape = out_shape;
    }

    let logits = x;
    let loss = -log_softmax_at(&logits, label);
    let hit = argmax(&softmax(&logits)) == label;
    let mut grad: Vec<T> = softmax(&logits);
    grad[label] -= T::one();

    for (i, cache) in caches.into_iter().enumerate().rev() {
        let need_input_grad = i > 0;
        grad = match cache {
            Cache::Passthrough => grad,
            Cache::Relu { input } => input
                .iter()
                .zip(&grad)
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect(),
            Cache::Pool { winners, input_len } => {
                let mut dx = vec![T::zero(); input_len];
                for (&j, &g) in winners.iter().zip(&grad) {
                    dx[j] += g;
                }
                dx
            }
            Cache::Dense { input } => {
                let w = model.layer_params(i).unwrap().weights.data();
                let units = grad.len();
                let (gw, gb) = acc[i].as_mut().unwrap();
                for (p, &xv) in input.iter().enumerate() {
                    let row = &mut gw[p * units..(p + 1) * units];
                    row.iter_mut().zip(&grad).for_each(|(d, &g)| *d += xv * g);
                }
                gb.iter_mut().zip(&grad).for_each(|(d, &g)| *d += g);
                if need_input_grad {
                    input
                        .iter()
                        .enumerate()
                        .map(|(p, _)| {
                            let mut s = T::zero();
                            for (u, &g) in grad.iter().enumerate() {
                                s += w[p * units + u] * g;
                            }
                            s
                        })
                        .collect()
                } else {
                    Vec::new()
                }
            }
            Cache::Conv {
                cols,
                dims,
                window,
                rows,
            } => {
                let w = model.layer_params(i).unwrap().weights.data();
                let out_c = grad.len() / rows;
                let k = cols.len() / rows;
                let (gw, gb) = acc[i].as_mut().unwrap();
                for r in 0..rows {
                    let dy = &grad[r * out_c..(r + 1) * out_c];
                    let col = &cols[r * k..(r + 1) * k];
                    for (p, &cv) in col.iter().enumerate() {
                        let row = &mut gw[p * out_c..(p + 1) * out_c];
                        row.iter_mut().zip(dy).for_each(|(d, &g)| *d += cv * g);
                    }
                    gb.iter_mut().zip(dy).for_each(|(d, &g)| *d += g);
                }
                if need_input_grad {
                    let mut dcols = vec![T::zero(); rows * k];
                    for r in 0..rows {
                        let dy = &grad[r * out_c..(r + 1) * out_c];
                        for p in 0..k {
                            let wrow = &w[p * out_c..(p + 1) * out_c];
                            let mut s = T::zero();
                            for (&wv, &g) in wrow.iter().zip(dy) {
                                s += wv * g;
                            }
                            dcols[r * k + p] = s;
                        }
                    }
                    let mut dx = vec![T::zero(); dims.0 * dims.1 * dims.2];
                    col2im_add(&dcols, dims, window, &mut dx);
                    dx
                } else {
                    Vec::new()
                }
            }
        };
        if !need_input_grad {
            break;
        }
    }
    Ok((loss, hit))
}
