//! Post-training int8 quantization.
//!
//! Weights: symmetric per-tensor, `q ∈ [-127, 127]`, zero point 0.
//! Activations: asymmetric per edge from calibrated min/max.
//! Biases: int32 at scale `input_scale * weight_scale`.
//!
//! Edge `0` is the model input and edge `i + 1` is the output of layer `i`.
//! MaxPool and Flatten outputs share their input edge's parameters, so those
//! layers run on raw int8 values without requantization.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{apply_layer, argmax, softmax, Backend, Classifier, ExecutionPlan, LayerSpec, Metadata, Model, Params};
use crate::scalar::Scalar;
use crate::tensor::{im2col_into, Tensor, Window};

/// Affine mapping `real = scale * (q - zero_point)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

/// Widening applied to a calibration range that collapsed to a single value.
pub const DEGENERATE_RANGE_PAD: f64 = 1e-3;

impl QuantParams {
    /// Asymmetric int8 parameters covering `[min, max]` widened to contain 0.
    pub fn from_range(min: f32, max: f32) -> Self {
        let (mut lo, mut hi) = (min as f64, max as f64);
        if hi - lo == 0.0 {
            lo -= DEGENERATE_RANGE_PAD;
            hi += DEGENERATE_RANGE_PAD;
        }
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        let scale = (hi - lo) / 255.0;
        let zero_point = (-128.0 - lo / scale).round_ties_even().clamp(-128.0, 127.0) as i32;
        Self {
            scale: scale as f32,
            zero_point,
        }
    }

    pub fn quantize(&self, x: f32) -> i8 {
        let q = (x as f64 / self.scale as f64).round_ties_even() + self.zero_point as f64;
        q.clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point) as f32
    }

    pub fn is_valid(&self) -> bool {
        self.scale > 0.0 && self.scale.is_finite() && (-128..=127).contains(&self.zero_point)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i8>,
    pub params: QuantParams,
}

impl QuantTensor {
    /// Symmetric quantization: `scale = max|w| / 127` (1.0 for an all-zero
    /// tensor), `q = clamp(round_half_even(w / scale), -127, 127)`.
    pub fn symmetric(t: &Tensor<f32>) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::InvalidArgument("cannot quantize non-finite weights".into()));
        }
        let max = t.max_abs();
        let scale = if max == 0.0 { 1.0 } else { max / 127.0 };
        let values = t
            .data()
            .iter()
            .map(|&w| (w / scale).round_ties_even().clamp(-127.0, 127.0) as i8)
            .collect();
        Ok(Self {
            shape: t.shape().to_vec(),
            values,
            params: QuantParams { scale, zero_point: 0 },
        })
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        Tensor::from_parts(
            self.shape.clone(),
            self.values.iter().map(|&q| self.params.dequantize(q)).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantLayer {
    pub weights: QuantTensor,
    /// Float biases, kept so the model can be (re)calibrated.
    pub bias: Vec<f32>,
    /// int32 biases at `input_scale * weight_scale`; present once calibrated.
    pub bias_q: Option<Vec<i32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantModel {
    layers: Vec<LayerSpec>,
    params: Vec<Option<QuantLayer>>,
    input_shape: Vec<usize>,
    class_names: Vec<String>,
    pub metadata: Metadata,
    activations: Option<Vec<Option<QuantParams>>>,
}

impl QuantModel {
    /// Assembles a model and checks structure, weight shapes and, when
    /// present, the activation parameters.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        params: Vec<Option<QuantLayer>>,
        input_shape: Vec<usize>,
        class_names: Vec<String>,
        metadata: Metadata,
        activations: Option<Vec<Option<QuantParams>>>,
    ) -> Result<Self> {
        let model = Self {
            layers,
            params,
            input_shape,
            class_names,
            metadata,
            activations,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        // the float view carries all structural checks
        let float = self.dequantized()?;
        for (i, p) in self.params.iter().enumerate() {
            if let Some(p) = p {
                if p.weights.params.zero_point != 0 || !p.weights.params.is_valid() {
                    return Err(Error::layer(
                        i,
                        "weight quantization must be symmetric with positive scale",
                    ));
                }
                if p.bias_q.as_ref().is_some_and(|b| b.len() != p.bias.len()) {
                    return Err(Error::layer(i, "int32 bias length mismatch"));
                }
            }
        }
        if let Some(acts) = &self.activations {
            if acts.len() != self.layers.len() + 1 {
                return Err(Error::InvalidArgument(format!(
                    "{} activation edges for {} layers",
                    acts.len(),
                    self.layers.len()
                )));
            }
            for (i, layer) in float.layers().iter().enumerate() {
                let (inp, out) = (acts[i], acts[i + 1]);
                if inp.is_none_or(|p| !p.is_valid()) {
                    return Err(Error::layer(i, "missing or invalid input edge parameters"));
                }
                match layer {
                    LayerSpec::Softmax => {
                        if out.is_some() {
                            return Err(Error::layer(i, "softmax output is float and takes no parameters"));
                        }
                    }
                    LayerSpec::MaxPool2D { .. } | LayerSpec::Flatten => {
                        if out != inp {
                            return Err(Error::layer(i, "pass-through layers must keep their input parameters"));
                        }
                    }
                    _ => {
                        if out.is_none_or(|p| !p.is_valid()) {
                            return Err(Error::layer(i, "missing or invalid output edge parameters"));
                        }
                    }
                }
                if layer.has_params() && self.params[i].as_ref().is_some_and(|p| p.bias_q.is_none()) {
                    return Err(Error::layer(i, "calibrated model is missing int32 biases"));
                }
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<QuantLayer>] {
        &self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn activations(&self) -> Option<&[Option<QuantParams>]> {
        self.activations.as_deref()
    }

    pub fn is_calibrated(&self) -> bool {
        self.activations.is_some()
    }

    /// Per-layer weight scales, `None` for parameter-free layers.
    pub fn weight_scales(&self) -> Vec<Option<f32>> {
        self.params
            .iter()
            .map(|p| p.as_ref().map(|p| p.weights.params.scale))
            .collect()
    }

    /// Float model with weights `scale * q` and the float biases.
    pub fn dequantized(&self) -> Result<Model<f32>> {
        let params = self
            .params
            .iter()
            .map(|p| {
                p.as_ref()
                    .map(|p| -> Result<Params<f32>> {
                        Ok(Params {
                            weights: p.weights.dequantize(),
                            bias: Tensor::new([p.bias.len()], p.bias.clone())?,
                        })
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(
            self.layers.clone(),
            params,
            self.input_shape.clone(),
            self.class_names.clone(),
            self.metadata.clone(),
        )
    }
}

/// Quantizes every weight tensor of a trained model. Activations stay
/// uncalibrated until [`calibrate_activations`].
pub fn quantize_weights<T: Scalar>(model: &Model<T>) -> Result<QuantModel> {
    let model: Model<f32> = model.cast();
    let params = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.as_ref()
                .map(|p| {
                    if !p.bias.is_finite() {
                        return Err(Error::layer(i, "non-finite bias"));
                    }
                    Ok(QuantLayer {
                        weights: QuantTensor::symmetric(&p.weights).map_err(|e| Error::layer(i, e.to_string()))?,
                        bias: p.bias.data().to_vec(),
                        bias_q: None,
                    })
                })
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantModel {
        layers: model.layers().to_vec(),
        params,
        input_shape: model.input_shape().to_vec(),
        class_names: model.class_names().to_vec(),
        metadata: model.metadata.clone(),
        activations: None,
    })
}

/// Records per-edge activation ranges from a float forward pass (with the
/// dequantized weights) over the first `samples` items of `calib_data`, then
/// derives activation parameters and int32 biases.
pub fn calibrate_activations(
    qmodel: &QuantModel,
    calib_data: &LabeledDataset<f32>,
    samples: usize,
) -> Result<QuantModel> {
    let n = samples.min(calib_data.len());
    if n == 0 {
        return Err(Error::InvalidArgument("calibration set is empty".into()));
    }
    let float = qmodel.dequantized()?;
    let plan = ExecutionPlan::uniform(float.layers(), Backend::Accelerated);
    let mut ranges = vec![(f32::INFINITY, f32::NEG_INFINITY); float.layers().len() + 1];
    for (x, _) in calib_data.items.iter().take(n) {
        if x.shape() != float.input_shape() {
            return Err(Error::Shape(format!(
                "calibration image {:?} does not match model input {:?}",
                x.shape(),
                float.input_shape()
            )));
        }
        observe(&mut ranges[0], x.data());
        let mut act = x.clone();
        for (i, layer) in float.layers().iter().enumerate() {
            // walk the layers directly so every edge is observed
            act = apply_layer(layer, &act, float.layer_params(i), plan.assignments()[i])?;
            observe(&mut ranges[i + 1], act.data());
        }
    }

    let mut acts: Vec<Option<QuantParams>> = Vec::with_capacity(ranges.len());
    acts.push(Some(QuantParams::from_range(ranges[0].0, ranges[0].1)));
    for (i, layer) in float.layers().iter().enumerate() {
        let edge = match layer {
            LayerSpec::Softmax => None,
            LayerSpec::MaxPool2D { .. } | LayerSpec::Flatten => acts[i],
            _ => Some(QuantParams::from_range(ranges[i + 1].0, ranges[i + 1].1)),
        };
        acts.push(edge);
    }

    let mut params = qmodel.params.clone();
    for (i, p) in params.iter_mut().enumerate() {
        if let Some(p) = p {
            let in_scale = acts[i].expect("input edge calibrated").scale;
            p.bias_q = Some(quantize_bias(&p.bias, in_scale * p.weights.params.scale));
        }
    }
    QuantModel::from_parts(
        qmodel.layers.clone(),
        params,
        qmodel.input_shape.clone(),
        qmodel.class_names.clone(),
        qmodel.metadata.clone(),
        Some(acts),
    )
}

fn observe(range: &mut (f32, f32), values: &[f32]) {
    for &v in values {
        range.0 = range.0.min(v);
        range.1 = range.1.max(v);
    }
}

fn quantize_bias(bias: &[f32], scale: f32) -> Vec<i32> {
    bias.iter()
        .map(|&b| {
            (b as f64 / scale as f64)
                .round_ties_even()
                .clamp(i32::MIN as f64, i32::MAX as f64) as i32
        })
        .collect()
}

#[inline]
fn requantize(acc: i32, multiplier: f64, zero_point: i32) -> i8 {
    ((acc as f64 * multiplier).round_ties_even() + zero_point as f64).clamp(-128.0, 127.0) as i8
}

/// Dequantized logits of the integer pipeline.
pub fn quantized_logits(qmodel: &QuantModel, input: &Tensor<f32>, plan: &ExecutionPlan) -> Result<Vec<f32>> {
    let acts = qmodel.activations.as_ref().ok_or(Error::NotCalibrated)?;
    if input.shape() != qmodel.input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "input {:?} does not match model input {:?}",
            input.shape(),
            qmodel.input_shape
        )));
    }
    if plan.len() != qmodel.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "plan covers {} layers, model has {}",
            plan.len(),
            qmodel.layers.len()
        )));
    }
    let in_params = acts[0].ok_or(Error::NotCalibrated)?;
    let mut x: Vec<i8> = input.data().iter().map(|&v| in_params.quantize(v)).collect();
    let mut shape = input.shape().to_vec();

    for (i, layer) in qmodel.layers.iter().enumerate() {
        let inp = acts[i].ok_or(Error::NotCalibrated)?;
        if matches!(layer, LayerSpec::Softmax) {
            return Ok(x.iter().map(|&q| inp.dequantize(q)).collect());
        }
        let out_shape = layer.output_shape(&shape).map_err(|m| Error::layer(i, m))?;
        let out = acts[i + 1].ok_or(Error::NotCalibrated)?;
        x = match *layer {
            LayerSpec::Conv2D { out_channels, .. } => {
                let p = qmodel.params[i]
                    .as_ref()
                    .ok_or_else(|| Error::layer(i, "missing parameters"))?;
                let bias = p.bias_q.as_ref().ok_or(Error::NotCalibrated)?;
                let window = layer.window().expect("conv has a window");
                let acc = match plan.assignments()[i] {
                    Backend::Reference => conv_i8_direct(
                        &x,
                        &shape,
                        &p.weights.values,
                        bias,
                        inp.zero_point,
                        window,
                        out_channels,
                    ),
                    Backend::Accelerated => conv_i8_gemm(
                        &x,
                        &shape,
                        &p.weights.values,
                        bias,
                        inp.zero_point,
                        window,
                        out_channels,
                    ),
                };
                let m = inp.scale as f64 * p.weights.params.scale as f64 / out.scale as f64;
                acc.into_iter().map(|a| requantize(a, m, out.zero_point)).collect()
            }
            LayerSpec::Dense { units } => {
                let p = qmodel.params[i]
                    .as_ref()
                    .ok_or_else(|| Error::layer(i, "missing parameters"))?;
                let bias = p.bias_q.as_ref().ok_or(Error::NotCalibrated)?;
                let centered: Vec<i32> = x.iter().map(|&q| q as i32 - inp.zero_point).collect();
                let w = &p.weights.values;
                let mut acc = bias.clone();
                match plan.assignments()[i] {
                    Backend::Reference => {
                        for (u, a) in acc.iter_mut().enumerate() {
                            let mut s = 0i32;
                            for (k, &c) in centered.iter().enumerate() {
                                s += c * w[k * units + u] as i32;
                            }
                            *a += s;
                        }
                    }
                    Backend::Accelerated => {
                        let wi: Vec<i32> = w.iter().map(|&v| v as i32).collect();
                        let mut s = vec![0i32; units];
                        gemm_i32(&centered, &wi, &mut s, 1, centered.len(), units);
                        acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
                    }
                }
                let m = inp.scale as f64 * p.weights.params.scale as f64 / out.scale as f64;
                acc.into_iter().map(|a| requantize(a, m, out.zero_point)).collect()
            }
            LayerSpec::ReLU => {
                let m = inp.scale as f64 / out.scale as f64;
                x.iter()
                    .map(|&q| requantize((q as i32).max(inp.zero_point) - inp.zero_point, m, out.zero_point))
                    .collect()
            }
            LayerSpec::MaxPool2D { pool, stride } => {
                let (w, c) = (shape[1], shape[2]);
                let (oh, ow) = (out_shape[0], out_shape[1]);
                let mut y = Vec::with_capacity(oh * ow * c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut m = i8::MIN;
                            for py in 0..pool {
                                for px in 0..pool {
                                    m = m.max(x[((oy * stride + py) * w + ox * stride + px) * c + ch]);
                                }
                            }
                            y.push(m);
                        }
                    }
                }
                y
            }
            LayerSpec::Flatten => x,
            LayerSpec::Softmax => unreachable!(),
        };
        shape = out_shape;
    }
    // no Softmax at the end: the last edge holds the logits
    let last = acts[qmodel.layers.len()].ok_or(Error::NotCalibrated)?;
    Ok(x.iter().map(|&q| last.dequantize(q)).collect())
}

/// Class probabilities from the integer pipeline under `plan`.
pub fn quantized_forward_with(qmodel: &QuantModel, input: &Tensor<f32>, plan: &ExecutionPlan) -> Result<Tensor<f32>> {
    let logits = quantized_logits(qmodel, input, plan)?;
    Ok(Tensor::from_parts(vec![logits.len()], softmax(&logits)))
}

/// Class probabilities using the default plan (integer GEMM for conv and dense).
pub fn quantized_forward(qmodel: &QuantModel, input: &Tensor<f32>) -> Result<Tensor<f32>> {
    quantized_forward_with(
        qmodel,
        input,
        &ExecutionPlan::uniform(&qmodel.layers, Backend::Accelerated),
    )
}

pub fn quantized_predict(qmodel: &QuantModel, input: &Tensor<f32>, plan: &ExecutionPlan) -> Result<usize> {
    Ok(argmax(quantized_forward_with(qmodel, input, plan)?.data()))
}

#[allow(clippy::too_many_arguments)]
fn conv_i8_direct(
    x: &[i8],
    shape: &[usize],
    w: &[i8],
    bias: &[i32],
    zp: i32,
    window: Window,
    out_c: usize,
) -> Vec<i32> {
    let (h, wd, c) = (shape[0], shape[1], shape[2]);
    let (kh, kw) = window.kernel;
    let (s, p) = (window.stride, window.padding);
    let oh = (h + 2 * p - kh) / s + 1;
    let ow = (wd + 2 * p - kw) / s + 1;
    let mut out = vec![0i32; oh * ow * out_c];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..out_c {
                let mut acc = 0i32;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..c {
                            let xv = x[(iy as usize * wd + ix as usize) * c + ci] as i32 - zp;
                            acc += xv * w[((ky * kw + kx) * c + ci) * out_c + o] as i32;
                        }
                    }
                }
                out[(oy * ow + ox) * out_c + o] = acc + bias[o];
            }
        }
    }
    out
}

fn conv_i8_gemm(x: &[i8], shape: &[usize], w: &[i8], bias: &[i32], zp: i32, window: Window, out_c: usize) -> Vec<i32> {
    let dims = (shape[0], shape[1], shape[2]);
    let (kh, kw) = window.kernel;
    let (s, p) = (window.stride, window.padding);
    let rows = ((dims.0 + 2 * p - kh) / s + 1) * ((dims.1 + 2 * p - kw) / s + 1);
    let k = kh * kw * dims.2;
    // centre before unfolding so padded taps are exact zeros
    let centered: Vec<i32> = x.iter().map(|&q| q as i32 - zp).collect();
    let mut cols = vec![0i32; rows * k];
    im2col_into(&centered, dims, window, &mut cols);
    let wi: Vec<i32> = w.iter().map(|&v| v as i32).collect();
    let mut out = vec![0i32; rows * out_c];
    gemm_i32(&cols, &wi, &mut out, rows, k, out_c);
    for row in out.chunks_exact_mut(out_c) {
        row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
    }
    out
}

fn gemm_i32(a: &[i32], b: &[i32], out: &mut [i32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl Classifier<f32> for QuantModel {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn class_names(&self) -> &[String] {
        &self.class_names
    }

    fn logits(&self, input: &Tensor<f32>) -> Result<Vec<f32>> {
        quantized_logits(self, input, &ExecutionPlan::uniform(&self.layers, Backend::Accelerated))
    }
}

/// An integer model bound to an execution plan.
#[derive(Clone, Copy, Debug)]
pub struct QuantPlanned<'a> {
    pub model: &'a QuantModel,
    pub plan: &'a ExecutionPlan,
}

impl Classifier<f32> for QuantPlanned<'_> {
    fn input_shape(&self) -> &[usize] {
        &self.model.input_shape
    }

    fn class_names(&self) -> &[String] {
        &self.model.class_names
    }

    fn logits(&self, input: &Tensor<f32>) -> Result<Vec<f32>> {
        quantized_logits(self.model, input, self.plan)
    }
}
