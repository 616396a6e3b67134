//! Dense row-major tensors plus the matrix-multiply and im2col primitives
//! the execution backends are built from.
//!
//! Images use channels-last `[h, w, c]` layout throughout.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Wraps `data` with the given shape. Every dimension must be at least 1
    /// and the element count must match the shape product.
    pub fn new(shape: impl Into<Vec<usize>>, data: impl Into<Vec<T>>) -> Result<Self> {
        let shape = shape.into();
        let data = data.into();
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![T::zero(); len],
        })
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        })
    }

    /// Crate-internal constructor for buffers whose length is already known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Element at a multi-index, row-major.
    pub fn at(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::Shape("a tensor needs at least one dimension".into()));
    }
    if shape.contains(&0) {
        return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

/// `[m, k] x [k, n] -> [m, n]`.
///
/// Every output element is accumulated from zero over `k` in ascending order,
/// so the result is bit-identical to a plain triple loop.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape(format!("cannot multiply {:?} by {:?}", a.shape, b.shape)));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Row block height for [`gemm`]; keeps a handful of output rows hot while a
/// strip of `b` streams through.
const ROW_BLOCK: usize = 4;

/// `out[m, n] += a[m, k] * b[k, n]` on raw row-major slices.
///
/// `out` is expected to be zeroed by the caller. Blocking only reorders which
/// element is worked on; the `k` order inside each element never changes.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i0 in (0..m).step_by(ROW_BLOCK) {
        let i1 = (i0 + ROW_BLOCK).min(m);
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for i in i0..i1 {
                let av = a[i * k + p];
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Geometry of a 2-D sliding window over a channels-last image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    /// Output `(oh, ow)` for an `h x w` input, or an error if the kernel does
    /// not fit inside the padded input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 || self.stride == 0 {
            return Err(Error::Shape(format!("degenerate window {self:?}")));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if kh > ph || kw > pw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// Unfolds every receptive field of `input[h, w, c]` into a row of length
/// `kh * kw * c`, ordered `(ky, kx, channel)`. Out-of-bounds taps are zero.
pub fn im2col<T: Scalar>(
    input: &Tensor<T>,
    kernel: (usize, usize),
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::Shape(format!("im2col expects [h, w, c], got {:?}", input.shape)));
    }
    let window = Window {
        kernel,
        stride,
        padding,
    };
    let (h, w, c) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = window.output_dims(h, w)?;
    let cols = kernel.0 * kernel.1 * c;
    let mut out = vec![T::zero(); oh * ow * cols];
    im2col_into(&input.data, (h, w, c), window, &mut out);
    Ok(Tensor::from_parts(vec![oh * ow, cols], out))
}

/// Slice form of [`im2col`]; `out` must be zeroed and sized `oh * ow * kh * kw * c`.
pub(crate) fn im2col_into<T: Copy>(input: &[T], (h, w, c): (usize, usize, usize), window: Window, out: &mut [T]) {
    let (kh, kw) = window.kernel;
    let (s, p) = (window.stride, window.padding);
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (w + 2 * p - kw) / s + 1;
    let cols = kh * kw * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
            for ky in 0..kh {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * s + kx) as isize - p as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * kw + kx) * c;
                    row[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
}

/// Inverse scatter of [`im2col_into`]: accumulates column gradients back into
/// an image-shaped buffer. `out` must be zeroed.
pub(crate) fn col2im_add<T: Scalar>(cols_data: &[T], (h, w, c): (usize, usize, usize), window: Window, out: &mut [T]) {
    let (kh, kw) = window.kernel;
    let (s, p) = (window.stride, window.padding);
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (w + 2 * p - kw) / s + 1;
    let cols = kh * kw * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols_data[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
            for ky in 0..kh {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * s + kx) as isize - p as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = (ky * kw + kx) * c;
                    for ch in 0..c {
                        out[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn row_major_indexing() {
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(m.at(&[1, 0]), Some(3.0));
        assert_eq!(m.at(&[2, 0]), None);
        let z = t(&[3], &[0., 0., 0.]);
        assert_eq!(z.data(), &[0.0; 3]);
    }

    #[test]
    fn length_mismatch_names_both_sizes() {
        let err = Tensor::<f32>::new([2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('6') && msg.contains('5'), "{msg}");
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
    }

    #[test]
    fn identity_and_dot_product() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        let i2 = Tensor::identity(2).unwrap();
        assert_eq!(matmul(&i2, &x).unwrap(), x);
        let dot = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(dot.shape(), &[1, 1]);
        assert_eq!(dot.data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = matmul(&t(&[2, 3], &[0.; 6]), &t(&[2, 2], &[0.; 4])).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn one_by_one_im2col_is_flatten() {
        let x = t(&[2, 2, 1], &[1., 2., 3., 4.]);
        let cols = im2col(&x, (1, 1), 1, 0).unwrap();
        assert_eq!(cols.shape(), &[4, 1]);
        assert_eq!(cols.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn two_by_two_windows_on_three_by_three() {
        // Windows enumerated by hand.
        let x = t(&[3, 3, 1], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let cols = im2col(&x, (2, 2), 1, 0).unwrap();
        assert_eq!(cols.shape(), &[4, 4]);
        assert_eq!(
            cols.data(),
            &[1., 2., 4., 5., 2., 3., 5., 6., 4., 5., 7., 8., 5., 6., 8., 9.]
        );
    }

    #[test]
    fn padded_corner_has_five_zeros() {
        let x = t(&[3, 3, 1], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let cols = im2col(&x, (3, 3), 1, 1).unwrap();
        assert_eq!(cols.shape(), &[9, 9]);
        let corner = &cols.data()[..9];
        assert_eq!(corner, &[0., 0., 0., 0., 1., 2., 0., 4., 5.]);
        assert_eq!(corner.iter().filter(|&&v| v == 0.0).count(), 5);
    }

    #[test]
    fn kernel_larger_than_padded_input() {
        let x = t(&[2, 2, 1], &[0.; 4]);
        assert!(im2col(&x, (3, 3), 1, 0).is_err());
        assert!(im2col(&x, (3, 3), 1, 1).is_ok());
    }

    proptest! {
        #[test]
        fn new_round_trips(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let len: usize = dims.iter().product();
            let data: Vec<f64> = (0..len).map(|i| (i as f64) * 0.5 - seed as f64).collect();
            let x = Tensor::new(dims.clone(), data.clone()).unwrap();
            prop_assert_eq!(x.shape(), &dims[..]);
            prop_assert_eq!(x.data(), &data[..]);
        }

        #[test]
        fn identity_is_exact(rows in 1usize..6, cols in 1usize..6, vals in prop::collection::vec(-1e3f32..1e3, 36)) {
            let x = Tensor::new([rows, cols], vals[..rows * cols].to_vec()).unwrap();
            let i = Tensor::identity(rows).unwrap();
            prop_assert_eq!(matmul(&i, &x).unwrap(), x);
        }
    }
}
