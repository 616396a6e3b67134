//! The `.plite` binary model format.
//!
//! All integers and floats are little-endian and fixed width; there is no
//! padding and no optional field, so every model has exactly one encoding.
//! Pruned weights are stored densely, which makes the file size a function of
//! the architecture alone. See `docs/plite-format.md` for the full layout.

use std::fs;
use std::path::Path;

use crate::compress::{quantized_logits, QuantLayer, QuantModel, QuantParams, QuantTensor};
use crate::error::{Error, Result};
use crate::nn::{forward_logits, Backend, Classifier, ExecutionPlan, LayerSpec, Metadata, Model, Params};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PLIT";
pub const VERSION: u16 = 1;
pub const FLAG_QUANTIZED: u16 = 1;

const TAG_CONV2D: u8 = 1;
const TAG_MAXPOOL2D: u8 = 2;
const TAG_FLATTEN: u8 = 3;
const TAG_DENSE: u8 = 4;
const TAG_RELU: u8 = 5;
const TAG_SOFTMAX: u8 = 6;

/// A model read from a `.plite` file.
#[derive(Clone, Debug, PartialEq)]
pub enum LiteModel {
    Float(Model<f32>),
    Quantized(QuantModel),
}

/// Borrowed view of a model to serialize.
#[derive(Clone, Copy, Debug)]
pub enum LiteRef<'a> {
    Float(&'a Model<f32>),
    Quantized(&'a QuantModel),
}

impl<'a> From<&'a Model<f32>> for LiteRef<'a> {
    fn from(m: &'a Model<f32>) -> Self {
        LiteRef::Float(m)
    }
}

impl<'a> From<&'a QuantModel> for LiteRef<'a> {
    fn from(m: &'a QuantModel) -> Self {
        LiteRef::Quantized(m)
    }
}

impl<'a> From<&'a LiteModel> for LiteRef<'a> {
    fn from(m: &'a LiteModel) -> Self {
        match m {
            LiteModel::Float(m) => LiteRef::Float(m),
            LiteModel::Quantized(m) => LiteRef::Quantized(m),
        }
    }
}

impl LiteModel {
    pub fn is_quantized(&self) -> bool {
        matches!(self, LiteModel::Quantized(_))
    }

    pub fn metadata(&self) -> &Metadata {
        match self {
            LiteModel::Float(m) => &m.metadata,
            LiteModel::Quantized(m) => &m.metadata,
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        match self {
            LiteModel::Float(m) => m.layers(),
            LiteModel::Quantized(m) => m.layers(),
        }
    }

    /// Logits with every layer assigned to `backend`.
    pub fn logits_with(&self, input: &Tensor<f32>, backend: Backend) -> Result<Vec<f32>> {
        let plan = ExecutionPlan::uniform(self.layers(), backend);
        match self {
            LiteModel::Float(m) => Ok(forward_logits(m, input, &plan)?.into_data()),
            LiteModel::Quantized(m) => quantized_logits(m, input, &plan),
        }
    }
}

impl Classifier<f32> for LiteModel {
    fn input_shape(&self) -> &[usize] {
        match self {
            LiteModel::Float(m) => m.input_shape(),
            LiteModel::Quantized(m) => m.input_shape(),
        }
    }

    fn class_names(&self) -> &[String] {
        match self {
            LiteModel::Float(m) => m.class_names(),
            LiteModel::Quantized(m) => m.class_names(),
        }
    }

    fn logits(&self, input: &Tensor<f32>) -> Result<Vec<f32>> {
        self.logits_with(input, Backend::Accelerated)
    }
}

/// Serializes a float or calibrated quantized model.
pub fn to_bytes<'a>(model: impl Into<LiteRef<'a>>) -> Result<Vec<u8>> {
    let model = model.into();
    let (layers, input_shape, class_names, metadata) = match model {
        LiteRef::Float(m) => (m.layers(), m.input_shape(), m.class_names(), &m.metadata),
        LiteRef::Quantized(m) => (m.layers(), m.input_shape(), m.class_names(), &m.metadata),
    };
    if layers.is_empty() {
        return Err(Error::InvalidArgument("a model must have at least one layer".into()));
    }
    let mut w = Writer::default();
    w.bytes(&MAGIC);
    w.u16(VERSION);
    w.u16(if matches!(model, LiteRef::Quantized(_)) {
        FLAG_QUANTIZED
    } else {
        0
    });
    w.string(&metadata.name)?;
    w.u64(metadata.seed);
    w.u32(metadata.epochs);
    w.f32(metadata.sparsity);
    w.dims(input_shape)?;
    w.len(class_names.len())?;
    for name in class_names {
        w.string(name)?;
    }
    w.len(layers.len())?;
    for layer in layers {
        w.layer(layer)?;
    }
    match model {
        LiteRef::Float(m) => {
            for p in m.params().iter().flatten() {
                w.f32_tensor(&p.weights)?;
                w.f32_tensor(&p.bias)?;
            }
        }
        LiteRef::Quantized(m) => {
            let acts = m.activations().ok_or(Error::NotCalibrated)?;
            for p in m.params().iter().flatten() {
                let q = &p.weights;
                w.dims(&q.shape)?;
                w.f32(q.params.scale);
                w.i32(q.params.zero_point);
                w.len(q.values.len())?;
                w.bytes(&q.values.iter().map(|&v| v as u8).collect::<Vec<_>>());
                let bias = p.bias_q.as_ref().ok_or(Error::NotCalibrated)?;
                w.dims(&[bias.len()])?;
                w.len(bias.len() * 4)?;
                for &b in bias {
                    w.i32(b);
                }
            }
            w.len(acts.len())?;
            for edge in acts {
                match edge {
                    None => w.bytes(&[0]),
                    Some(p) => {
                        w.bytes(&[1]);
                        w.f32(p.scale);
                        w.i32(p.zero_point);
                    }
                }
            }
        }
    }
    Ok(w.buf)
}

/// Parses a `.plite` image. Any structural problem is reported with the byte
/// offset where it was detected; nothing partial is returned.
pub fn from_bytes(bytes: &[u8]) -> Result<LiteModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::parse(0, "file too short for magic"))? != MAGIC {
        return Err(Error::parse(0, "bad magic, expected \"PLIT\""));
    }
    let version = r.u16()?;
    if version == 0 {
        return Err(Error::parse(4, "version 0 is invalid"));
    }
    if version > VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let flags_at = r.pos;
    let flags = r.u16()?;
    if flags & !FLAG_QUANTIZED != 0 {
        return Err(Error::parse(flags_at, format!("unknown flag bits {flags:#06x}")));
    }
    let quantized = flags & FLAG_QUANTIZED != 0;
    let metadata = Metadata {
        name: r.string()?,
        seed: r.u64()?,
        epochs: r.u32()?,
        sparsity: r.f32()?,
    };
    let input_shape = r.dims()?;
    let n_classes = r.count(4)?;
    let class_names = (0..n_classes).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let layers_at = r.pos;
    let n_layers = r.count(1)?;
    if n_layers == 0 {
        return Err(Error::parse(layers_at, "a model must have at least one layer"));
    }
    let layers = (0..n_layers).map(|_| r.layer()).collect::<Result<Vec<_>>>()?;

    let params_at = r.pos;
    let model = if quantized {
        let mut blocks = Vec::new();
        for layer in &layers {
            blocks.push(if layer.has_params() {
                Some(r.quant_block()?)
            } else {
                None
            });
        }
        let edges_at = r.pos;
        let n_edges = r.count(1)?;
        if n_edges != layers.len() + 1 {
            return Err(Error::parse(
                edges_at,
                format!("{n_edges} activation edges for {} layers", layers.len()),
            ));
        }
        let mut acts = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            let at = r.pos;
            acts.push(match r.take(1)?[0] {
                0 => None,
                1 => Some(QuantParams {
                    scale: r.f32()?,
                    zero_point: r.i32()?,
                }),
                t => return Err(Error::parse(at, format!("invalid edge tag {t}"))),
            });
        }
        r.finish()?;
        // float biases are reconstructed from the int32 ones
        let params = blocks
            .into_iter()
            .enumerate()
            .map(|(i, b)| {
                b.map(|(weights, bias_q)| {
                    let s = acts[i].map_or(0.0, |a| a.scale) * weights.params.scale;
                    QuantLayer {
                        weights,
                        bias: bias_q.iter().map(|&b| b as f32 * s).collect(),
                        bias_q: Some(bias_q),
                    }
                })
            })
            .collect();
        QuantModel::from_parts(layers, params, input_shape, class_names, metadata, Some(acts)).map(LiteModel::Quantized)
    } else {
        let mut params = Vec::with_capacity(layers.len());
        for layer in &layers {
            params.push(if layer.has_params() {
                Some(Params {
                    weights: r.f32_tensor()?,
                    bias: r.f32_tensor()?,
                })
            } else {
                None
            });
        }
        r.finish()?;
        Model::new(layers, params, input_shape, class_names, metadata).map(LiteModel::Float)
    };
    model.map_err(|e| Error::parse(params_at, format!("inconsistent model: {e}")))
}

/// Writes the canonical encoding to `path` and returns the byte count.
pub fn export_lite<'a>(model: impl Into<LiteRef<'a>>, path: impl AsRef<Path>) -> Result<u64> {
    let bytes = to_bytes(model)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn import_lite(path: impl AsRef<Path>) -> Result<LiteModel> {
    from_bytes(&fs::read(path)?)
}

/// File size in bytes.
pub fn model_size(path: impl AsRef<Path>) -> Result<u64> {
    Ok(fs::metadata(path)?.len())
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} does not fit a u32 field")))
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn i32(&mut self, v: i32) {
        self.bytes(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) -> Result<()> {
        self.u32(to_u32(n)?);
        Ok(())
    }

    fn string(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.bytes(s.as_bytes());
        Ok(())
    }

    fn dims(&mut self, dims: &[usize]) -> Result<()> {
        self.len(dims.len())?;
        for &d in dims {
            self.len(d)?;
        }
        Ok(())
    }

    fn layer(&mut self, layer: &LayerSpec) -> Result<()> {
        let (tag, attrs): (u8, Vec<usize>) = match *layer {
            LayerSpec::Conv2D {
                out_channels,
                kernel,
                stride,
                padding,
            } => (TAG_CONV2D, vec![out_channels, kernel.0, kernel.1, stride, padding]),
            LayerSpec::MaxPool2D { pool, stride } => (TAG_MAXPOOL2D, vec![pool, stride]),
            LayerSpec::Flatten => (TAG_FLATTEN, vec![]),
            LayerSpec::Dense { units } => (TAG_DENSE, vec![units]),
            LayerSpec::ReLU => (TAG_RELU, vec![]),
            LayerSpec::Softmax => (TAG_SOFTMAX, vec![]),
        };
        self.bytes(&[tag]);
        for a in attrs {
            self.len(a)?;
        }
        Ok(())
    }

    fn f32_tensor(&mut self, t: &Tensor<f32>) -> Result<()> {
        self.dims(t.shape())?;
        self.len(t.len() * 4)?;
        for &v in t.data() {
            self.f32(v);
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::parse(
                self.pos,
                format!("truncated: need {n} bytes, {remaining} left"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    /// A u32 element count, rejected early if the remaining bytes cannot
    /// hold that many elements of at least `min_size` bytes each.
    fn count(&mut self, min_size: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n.saturating_mul(min_size) > self.bytes.len() - self.pos {
            return Err(Error::parse(
                at,
                format!("truncated: count {n} exceeds remaining bytes"),
            ));
        }
        Ok(n)
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.count(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::parse(at + 4, "string is not UTF-8"))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.count(4)?;
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }

    /// Reads a declared byte length and checks it against `elements * width`.
    fn payload(&mut self, dims: &[usize], width: usize) -> Result<&'a [u8]> {
        let at = self.pos;
        let declared = self.u32()? as usize;
        let expected = dims
            .iter()
            .try_fold(width, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse(at, "tensor shape overflows"))?;
        if declared != expected {
            return Err(Error::parse(
                at,
                format!("declared byte length {declared} does not match shape {dims:?} ({expected} bytes)"),
            ));
        }
        self.take(declared)
    }

    fn layer(&mut self) -> Result<LayerSpec> {
        let at = self.pos;
        let tag = self.take(1)?[0];
        let mut attr = || -> Result<usize> { Ok(self.u32()? as usize) };
        Ok(match tag {
            TAG_CONV2D => LayerSpec::Conv2D {
                out_channels: attr()?,
                kernel: (attr()?, attr()?),
                stride: attr()?,
                padding: attr()?,
            },
            TAG_MAXPOOL2D => LayerSpec::MaxPool2D {
                pool: attr()?,
                stride: attr()?,
            },
            TAG_FLATTEN => LayerSpec::Flatten,
            TAG_DENSE => LayerSpec::Dense { units: attr()? },
            TAG_RELU => LayerSpec::ReLU,
            TAG_SOFTMAX => LayerSpec::Softmax,
            t => return Err(Error::parse(at, format!("unknown layer tag {t}"))),
        })
    }

    fn f32_tensor(&mut self) -> Result<Tensor<f32>> {
        let dims = self.dims()?;
        let data = self
            .payload(&dims, 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok(Tensor::from_parts(dims, data))
    }

    fn quant_block(&mut self) -> Result<(QuantTensor, Vec<i32>)> {
        let shape = self.dims()?;
        let params = QuantParams {
            scale: self.f32()?,
            zero_point: self.i32()?,
        };
        let values = self.payload(&shape, 1)?.iter().map(|&b| b as i8).collect();
        let bias_at = self.pos;
        let bias_dims = self.dims()?;
        if bias_dims.len() != 1 {
            return Err(Error::parse(bias_at, "bias must be rank 1"));
        }
        let bias = self
            .payload(&bias_dims, 4)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Ok((QuantTensor { shape, values, params }, bias))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::parse(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
