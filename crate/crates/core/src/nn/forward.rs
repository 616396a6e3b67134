use super::kernels::{apply_layer, log_softmax_at, softmax};
use super::layer::LayerSpec;
use super::model::Model;
use super::plan::ExecutionPlan;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_plan<T: Scalar>(model: &Model<T>, input: &Tensor<T>, plan: &ExecutionPlan) -> Result<()> {
    if input.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "input {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape()
        )));
    }
    if plan.len() != model.layers().len() {
        return Err(Error::InvalidArgument(format!(
            "plan covers {} layers, model has {}",
            plan.len(),
            model.layers().len()
        )));
    }
    Ok(())
}

/// Runs every layer except the closing Softmax and returns the logits.
pub fn forward_logits<T: Scalar>(model: &Model<T>, input: &Tensor<T>, plan: &ExecutionPlan) -> Result<Tensor<T>> {
    check_plan(model, input, plan)?;
    let mut x = input.clone();
    for (i, (layer, backend)) in model.layers().iter().zip(plan.assignments()).enumerate() {
        if matches!(layer, LayerSpec::Softmax) {
            break;
        }
        x = apply_layer(layer, &x, model.layer_params(i), *backend).map_err(|e| Error::layer(i, e.to_string()))?;
    }
    Ok(x)
}

/// Class probabilities for one input.
pub fn forward<T: Scalar>(model: &Model<T>, input: &Tensor<T>, plan: &ExecutionPlan) -> Result<Tensor<T>> {
    let logits = forward_logits(model, input, plan)?;
    Ok(Tensor::from_parts(logits.shape().to_vec(), softmax(logits.data())))
}

pub fn predict<T: Scalar>(model: &Model<T>, input: &Tensor<T>, plan: &ExecutionPlan) -> Result<usize> {
    Ok(argmax(forward(model, input, plan)?.data()))
}

/// Anything that maps an input image to class logits: a float model under an
/// execution plan, or an integer model.
pub trait Classifier<T: Scalar> {
    fn input_shape(&self) -> &[usize];

    fn class_names(&self) -> &[String];

    fn logits(&self, input: &Tensor<T>) -> Result<Vec<T>>;

    /// Predicted class (argmax of the softmax output) and cross-entropy against `label`.
    fn classify(&self, input: &Tensor<T>, label: usize) -> Result<(usize, T)> {
        let logits = self.logits(input)?;
        if label >= logits.len() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                logits.len()
            )));
        }
        Ok((argmax(&softmax(&logits)), -log_softmax_at(&logits, label)))
    }
}

/// A float model bound to an execution plan.
#[derive(Clone, Copy, Debug)]
pub struct Planned<'a, T> {
    pub model: &'a Model<T>,
    pub plan: &'a ExecutionPlan,
}

impl<T: Scalar> Classifier<T> for Planned<'_, T> {
    fn input_shape(&self) -> &[usize] {
        self.model.input_shape()
    }

    fn class_names(&self) -> &[String] {
        self.model.class_names()
    }

    fn logits(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        Ok(forward_logits(self.model, input, self.plan)?.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{canonical_cnn, plan_execution, Backend, LayerKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn digits() -> Vec<String> {
        (0..10).map(|d| d.to_string()).collect()
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn untrained_model_outputs_a_distribution() {
        let m = canonical_cnn::<f32>(&[28, 28, 1], digits(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn([28, 28, 1], |_| rng.gen::<f32>()).unwrap();
        let plan = ExecutionPlan::uniform(m.layers(), Backend::Accelerated);
        let p = forward(&m, &x, &plan).unwrap();
        assert_eq!(p.len(), 10);
        assert!((p.data().iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // bit-identical on repeat
        assert_eq!(forward(&m, &x, &plan).unwrap(), p);
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let mut m = canonical_cnn::<f32>(&[12, 12, 1], digits(), 4).unwrap();
        for i in 0..m.layers().len() {
            if let Some(w) = m.weights_mut(i) {
                w.fill(0.0);
            }
        }
        let x = Tensor::from_fn([12, 12, 1], |i| i as f32 / 144.0).unwrap();
        let plan = plan_execution(m.layers(), &[]);
        let p = forward(&m, &x, &plan).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.1).abs() < 1e-6));
        assert_eq!(predict(&m, &x, &plan).unwrap(), 0);
    }

    #[test]
    fn input_shape_is_checked() {
        let m = canonical_cnn::<f32>(&[28, 28, 1], digits(), 4).unwrap();
        let plan = plan_execution(m.layers(), &[LayerKind::Conv2D]);
        let x = Tensor::zeros([27, 28, 1]).unwrap();
        assert!(forward(&m, &x, &plan).is_err());
        let short = ExecutionPlan::new(vec![Backend::Reference]);
        assert!(forward(&m, &Tensor::zeros([28, 28, 1]).unwrap(), &short).is_err());
    }
}
