use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::LayerSpec;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights and bias of a Conv2D (`[kh, kw, in_c, out_c]`, `[out_c]`) or
/// Dense (`[in, units]`, `[units]`) layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metadata {
    pub name: String,
    pub seed: u64,
    pub epochs: u32,
    /// Requested pruning sparsity, 0 for an unpruned model.
    pub sparsity: f32,
}

/// A sequential classifier: layers, their parameters, the expected input
/// shape and one label per output class.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    layers: Vec<LayerSpec>,
    params: Vec<Option<Params<T>>>,
    input_shape: Vec<usize>,
    class_names: Vec<String>,
    pub metadata: Metadata,
}

impl<T: Scalar> Model<T> {
    /// Assembles a model and checks the whole shape chain, including parameter shapes.
    pub fn new(
        layers: Vec<LayerSpec>,
        params: Vec<Option<Params<T>>>,
        input_shape: Vec<usize>,
        class_names: Vec<String>,
        metadata: Metadata,
    ) -> Result<Self> {
        let model = Self {
            layers,
            params,
            input_shape,
            class_names,
            metadata,
        };
        infer_shapes(&model)?;
        Ok(model)
    }

    /// Builds a model with freshly initialized parameters: weights uniform in
    /// `±sqrt(6 / fan_in)`, biases zero.
    pub fn init(layers: Vec<LayerSpec>, input_shape: Vec<usize>, class_names: Vec<String>, seed: u64) -> Result<Self> {
        let shapes = layer_shapes(&layers, &input_shape, class_names.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let input = if i == 0 { &input_shape } else { &shapes[i - 1] };
            params.push(match layer.param_shapes(input) {
                Some((w_shape, b_shape)) => {
                    let fan_in: usize = w_shape[..w_shape.len() - 1].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let weights = Tensor::from_fn(w_shape, |_| T::of(rng.gen_range(-bound..bound)))?;
                    Some(Params {
                        weights,
                        bias: Tensor::zeros(b_shape)?,
                    })
                }
                None => None,
            });
        }
        Self::new(
            layers,
            params,
            input_shape,
            class_names,
            Metadata {
                seed,
                ..Metadata::default()
            },
        )
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<Params<T>>] {
        &self.params
    }

    pub fn layer_params(&self, layer: usize) -> Option<&Params<T>> {
        self.params.get(layer)?.as_ref()
    }

    pub fn weights_mut(&mut self, layer: usize) -> Option<&mut [T]> {
        Some(self.params.get_mut(layer)?.as_mut()?.weights.data_mut())
    }

    pub fn bias_mut(&mut self, layer: usize) -> Option<&mut [T]> {
        Some(self.params.get_mut(layer)?.as_mut()?.bias.data_mut())
    }

    /// Mutable access to all parameter sets; shapes cannot change through this.
    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (usize, &mut Params<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .filter_map(|(i, p)| p.as_mut().map(|p| (i, p)))
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }

    pub fn weight_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.weights.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| p.as_ref().map(Params::cast)).collect(),
            input_shape: self.input_shape.clone(),
            class_names: self.class_names.clone(),
            metadata: self.metadata.clone(),
        }
    }
}

/// The default classifier used throughout the toolkit:
/// Conv2D(8, 3x3) → ReLU → MaxPool(2) → Conv2D(16, 3x3) → ReLU → MaxPool(2)
/// → Flatten → Dense(classes) → Softmax.
pub fn canonical_layers(num_classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(8, 3),
        LayerSpec::ReLU,
        LayerSpec::max_pool(2),
        LayerSpec::conv(16, 3),
        LayerSpec::ReLU,
        LayerSpec::max_pool(2),
        LayerSpec::Flatten,
        LayerSpec::dense(num_classes),
        LayerSpec::Softmax,
    ]
}

pub fn canonical_cnn<T: Scalar>(input_shape: &[usize], class_names: Vec<String>, seed: u64) -> Result<Model<T>> {
    Model::init(
        canonical_layers(class_names.len()),
        input_shape.to_vec(),
        class_names,
        seed,
    )
}

/// Output shape of every layer, in order. Fails on the first layer whose
/// attributes or parameters do not fit the shape flowing into it.
pub fn infer_shapes<T: Scalar>(model: &Model<T>) -> Result<Vec<Vec<usize>>> {
    if model.params.len() != model.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} layers but {} parameter slots",
            model.layers.len(),
            model.params.len()
        )));
    }
    let shapes = layer_shapes(&model.layers, &model.input_shape, model.class_names.len())?;
    for (i, (layer, params)) in model.layers.iter().zip(&model.params).enumerate() {
        let input = if i == 0 { &model.input_shape } else { &shapes[i - 1] };
        match (layer.param_shapes(input), params) {
            (None, None) => {}
            (None, Some(_)) => return Err(Error::layer(i, format!("{layer} takes no parameters"))),
            (Some(_), None) => return Err(Error::layer(i, format!("{layer} is missing parameters"))),
            (Some((w, b)), Some(p)) => {
                if p.weights.shape() != w.as_slice() || p.bias.shape() != b.as_slice() {
                    return Err(Error::layer(
                        i,
                        format!(
                            "{layer} on input {input:?} expects weights {w:?} and bias {b:?}, got {:?} and {:?}",
                            p.weights.shape(),
                            p.bias.shape()
                        ),
                    ));
                }
            }
        }
    }
    Ok(shapes)
}

/// Structural shape chain for a layer list; parameters are not consulted.
pub fn layer_shapes(layers: &[LayerSpec], input_shape: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("a model needs at least one layer".into()));
    }
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
    }
    let mut shapes = Vec::with_capacity(layers.len());
    let mut current = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let is_last = i + 1 == layers.len();
        if matches!(layer, LayerSpec::Softmax) != is_last {
            return Err(Error::layer(
                i,
                if is_last {
                    "the final layer must be Softmax"
                } else {
                    "Softmax may only appear as the final layer"
                },
            ));
        }
        current = layer
            .output_shape(&current)
            .map_err(|m| Error::layer(i, format!("{layer}: {m}")))?;
        shapes.push(current.clone());
    }
    if current != [num_classes] {
        return Err(Error::layer(
            layers.len() - 1,
            format!("model outputs {current:?} but has {num_classes} classes"),
        ));
    }
    Ok(shapes)
}
