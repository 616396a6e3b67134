//! Float layer kernels. Every op that has two backends produces identical
//! per-element summation order in both, so they agree to the last bit in
//! practice; the tests only rely on the documented tolerances.

use super::layer::LayerSpec;
use super::model::Params;
use super::plan::Backend;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm, im2col_into, Tensor, Window};

/// Cross-correlation of `input[h, w, c]` with `weights[kh, kw, c, out_c]`, plus bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    backend: Backend,
) -> Result<Tensor<T>> {
    let (in_dims, window, out_c) = conv_geometry(input, weights, bias, stride, padding)?;
    let (oh, ow) = window.output_dims(in_dims.0, in_dims.1)?;
    let out = match backend {
        Backend::Reference => conv_direct(input.data(), in_dims, weights.data(), bias.data(), window, out_c),
        Backend::Accelerated => conv_gemm(input.data(), in_dims, weights.data(), bias.data(), window, out_c),
    };
    Ok(Tensor::from_parts(vec![oh, ow, out_c], out))
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<((usize, usize, usize), Window, usize)> {
    let (&[h, w, c], &[kh, kw, wc, out_c]) = (input.shape(), weights.shape()) else {
        return Err(Error::Shape(format!(
            "conv2d expects input [h, w, c] and weights [kh, kw, c, out_c], got {:?} and {:?}",
            input.shape(),
            weights.shape()
        )));
    };
    if wc != c {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {c}, weights expect {wc}"
        )));
    }
    if bias.shape() != [out_c] {
        return Err(Error::Shape(format!(
            "conv2d bias {:?} does not match {out_c} filters",
            bias.shape()
        )));
    }
    Ok((
        (h, w, c),
        Window {
            kernel: (kh, kw),
            stride,
            padding,
        },
        out_c,
    ))
}

fn conv_direct<T: Scalar>(
    input: &[T],
    (h, w, c): (usize, usize, usize),
    weights: &[T],
    bias: &[T],
    window: Window,
    out_c: usize,
) -> Vec<T> {
    let (kh, kw) = window.kernel;
    let (s, p) = (window.stride, window.padding);
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (w + 2 * p - kw) / s + 1;
    let mut out = vec![T::zero(); oh * ow * out_c];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..out_c {
                let mut acc = T::zero();
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..c {
                            let x = input[(iy as usize * w + ix as usize) * c + ci];
                            let wt = weights[((ky * kw + kx) * c + ci) * out_c + o];
                            acc += x * wt;
                        }
                    }
                }
                out[(oy * ow + ox) * out_c + o] = acc + bias[o];
            }
        }
    }
    out
}

fn conv_gemm<T: Scalar>(
    input: &[T],
    dims: (usize, usize, usize),
    weights: &[T],
    bias: &[T],
    window: Window,
    out_c: usize,
) -> Vec<T> {
    let (h, w, c) = dims;
    let (kh, kw) = window.kernel;
    let (s, p) = (window.stride, window.padding);
    let rows = ((h + 2 * p - kh) / s + 1) * ((w + 2 * p - kw) / s + 1);
    let k = kh * kw * c;
    let mut cols = vec![T::zero(); rows * k];
    im2col_into(input, dims, window, &mut cols);
    let mut out = vec![T::zero(); rows * out_c];
    gemm(&cols, weights, &mut out, rows, k, out_c);
    for row in out.chunks_exact_mut(out_c) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    out
}

/// `y = x W + b` for a flat input.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    backend: Backend,
) -> Result<Tensor<T>> {
    let (&[n], &[wn, units]) = (input.shape(), weights.shape()) else {
        return Err(Error::Shape(format!(
            "dense expects input [n] and weights [n, units], got {:?} and {:?}",
            input.shape(),
            weights.shape()
        )));
    };
    if wn != n || bias.shape() != [units] {
        return Err(Error::Shape(format!(
            "dense input {:?} incompatible with weights {:?} / bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    let (x, wt, b) = (input.data(), weights.data(), bias.data());
    let mut out = vec![T::zero(); units];
    match backend {
        Backend::Reference => {
            for (u, o) in out.iter_mut().enumerate() {
                let mut acc = T::zero();
                for i in 0..n {
                    acc += x[i] * wt[i * units + u];
                }
                *o = acc;
            }
        }
        Backend::Accelerated => gemm(x, wt, &mut out, 1, n, units),
    }
    for (o, &bv) in out.iter_mut().zip(b) {
        *o += bv;
    }
    Ok(Tensor::from_parts(vec![units], out))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(
        input.shape().to_vec(),
        input.data().iter().map(|&v| v.max(T::zero())).collect(),
    )
}

/// Windowed max over each channel of `input[h, w, c]`.
pub fn max_pool<T: Scalar>(input: &Tensor<T>, pool: usize, stride: usize) -> Result<Tensor<T>> {
    let out_shape = LayerSpec::MaxPool2D { pool, stride }
        .output_shape(input.shape())
        .map_err(Error::Shape)?;
    let (w, c) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut m = T::neg_infinity();
                for py in 0..pool {
                    for px in 0..pool {
                        m = m.max(x[((oy * stride + py) * w + ox * stride + px) * c + ch]);
                    }
                }
                out.push(m);
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Max-subtracted softmax over a flat vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(logits)[label]`, computed without forming the probabilities.
pub fn log_softmax_at<T: Scalar>(logits: &[T], label: usize) -> T {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum: T = logits.iter().map(|&v| (v - max).exp()).sum();
    logits[label] - max - sum.ln()
}

/// Runs one layer. Layers without an accelerated kernel ignore `backend`.
pub fn apply_layer<T: Scalar>(
    layer: &LayerSpec,
    input: &Tensor<T>,
    params: Option<&Params<T>>,
    backend: Backend,
) -> Result<Tensor<T>> {
    let need_params = || params.ok_or_else(|| Error::InvalidArgument(format!("{layer} requires parameters")));
    match *layer {
        LayerSpec::Conv2D { stride, padding, .. } => {
            let p = need_params()?;
            conv2d(input, &p.weights, &p.bias, stride, padding, backend)
        }
        LayerSpec::Dense { .. } => {
            let p = need_params()?;
            dense(input, &p.weights, &p.bias, backend)
        }
        LayerSpec::MaxPool2D { pool, stride } => max_pool(input, pool, stride),
        LayerSpec::Flatten => Ok(Tensor::from_parts(vec![input.len()], input.data().to_vec())),
        LayerSpec::ReLU => Ok(relu(input)),
        LayerSpec::Softmax => {
            if input.rank() != 1 {
                return Err(Error::Shape(format!(
                    "softmax expects a flat input, got {:?}",
                    input.shape()
                )));
            }
            Ok(Tensor::from_parts(input.shape().to_vec(), softmax(input.data())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, data).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn identity_conv() {
        let x = t(&[2, 3, 1], &[1., -2., 3., 4., 5., -6.]);
        for backend in [Backend::Reference, Backend::Accelerated] {
            let y = conv2d(&x, &t(&[1, 1, 1, 1], &[1.]), &t(&[1], &[0.]), 1, 0, backend).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn window_sum() {
        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        for backend in [Backend::Reference, Backend::Accelerated] {
            let y = conv2d(&x, &t(&[2, 2, 1, 1], &[1.; 4]), &t(&[1], &[0.]), 1, 0, backend).unwrap();
            assert_eq!(y.shape(), &[1, 1, 1]);
            assert_eq!(y.data(), &[10.]);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = t(&[3, 3, 2], &[0.; 18]);
        let err = conv2d(&x, &t(&[1, 1, 1, 1], &[1.]), &t(&[1], &[0.]), 1, 0, Backend::Reference).unwrap_err();
        assert!(err.to_string().contains("channel"));
    }

    #[test]
    fn backends_agree_on_random_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[8, 8, 3], &mut rng);
        let w = random(&[3, 3, 3, 4], &mut rng);
        let b = random(&[4], &mut rng);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let r = conv2d(&x, &w, &b, stride, padding, Backend::Reference).unwrap();
            let a = conv2d(&x, &w, &b, stride, padding, Backend::Accelerated).unwrap();
            assert_eq!(r.shape(), a.shape());
            let diff = r
                .data()
                .iter()
                .zip(a.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f32::max);
            assert!(diff < 1e-5, "stride {stride} pad {padding}: {diff}");
        }
    }

    #[test]
    fn elementwise_layers() {
        let x = t(&[2], &[1., 2.]);
        let i2 = Tensor::identity(2).unwrap();
        let y = dense(&x, &i2, &t(&[2], &[0., 0.]), Backend::Reference).unwrap();
        assert_eq!(y.data(), &[1., 2.]);
        assert_eq!(softmax(&[0.0f32, 0.0]), vec![0.5, 0.5]);
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
    }

    #[test]
    fn pooling_picks_window_max() {
        let x = t(&[2, 2, 2], &[1., -1., 4., -2., 3., -3., 2., -4.]);
        let y = max_pool(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[4., -1.]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0f32, 2.0, -3.0]);
        let b = softmax(&[101.0f32, 102.0, 97.0]);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-5);
        }
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        let lp = log_softmax_at(&[0.0f64; 4], 2);
        assert!((lp + 4f64.ln()).abs() < 1e-12);
    }
}
