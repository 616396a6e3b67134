//! Mini-batch training, evaluation, and the two fine-tuning modes used after
//! compression: mask-preserving (pruning) and fake-quantized (int8).

mod backprop;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use backprop::{gradients, Gradients};

use crate::compress::PruneMask;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Backend, Classifier, ExecutionPlan, Model, Planned};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    /// Heavy-ball momentum: `v = μ v + g`, `w -= lr v`.
    SgdMomentum(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 42,
            optimizer: Optimizer::SgdMomentum(0.9),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        // zero is allowed: it freezes the parameters, which is useful for checks
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if let Optimizer::SgdMomentum(mu) = self.optimizer {
            if !(0.0..1.0).contains(&mu) {
                return Err(Error::InvalidArgument(format!("momentum {mu} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// `NaN` when no validation set was supplied.
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Trains a copy of `model` with mini-batch SGD on cross-entropy. The
/// shuffle order is drawn from `cfg.seed`, so equal inputs give bit-identical
/// parameters.
pub fn train<T: Scalar>(
    model: &Model<T>,
    train_data: &LabeledDataset<T>,
    val_data: &LabeledDataset<T>,
    cfg: &TrainConfig,
) -> Result<(Model<T>, TrainHistory)> {
    if val_data.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut model = model.clone();
    let history = fit(&mut model, train_data, Some(val_data), cfg, &Hooks::default())?;
    model.metadata.epochs += cfg.epochs as u32;
    model.metadata.seed = cfg.seed;
    Ok((model, history))
}

/// Fine-tunes a pruned model. The mask is re-applied after every update, so
/// pruned weights stay exactly zero.
pub fn finetune_masked<T: Scalar>(
    model: &Model<T>,
    mask: &PruneMask,
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
) -> Result<Model<T>> {
    mask.check_aligned(model)?;
    let mut model = model.clone();
    mask.apply(&mut model)?;
    fit(
        &mut model,
        data,
        None,
        cfg,
        &Hooks {
            mask: Some(mask),
            fake_quant: None,
        },
    )?;
    model.metadata.epochs += cfg.epochs as u32;
    Ok(model)
}

/// Quantization-aware fine-tuning with fixed per-tensor weight scales.
///
/// The forward pass sees `scale * round_half_even(w / scale)`; the gradient
/// is applied to the float shadow weights unchanged (straight-through), and
/// the shadow weights are returned for re-quantization.
pub fn finetune_fakequant<T: Scalar>(
    model: &Model<T>,
    weight_scales: &[Option<f32>],
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
) -> Result<Model<T>> {
    finetune_fakequant_masked(model, weight_scales, None, data, cfg)
}

/// [`finetune_fakequant`] that also keeps a pruning mask in force.
pub fn finetune_fakequant_masked<T: Scalar>(
    model: &Model<T>,
    weight_scales: &[Option<f32>],
    mask: Option<&PruneMask>,
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
) -> Result<Model<T>> {
    if weight_scales.len() != model.layers().len() {
        return Err(Error::InvalidArgument(format!(
            "{} weight scales for {} layers",
            weight_scales.len(),
            model.layers().len()
        )));
    }
    for (i, (scale, params)) in weight_scales.iter().zip(model.params()).enumerate() {
        match (scale, params) {
            (Some(s), Some(_)) if *s > 0.0 && s.is_finite() => {}
            (None, None) => {}
            _ => return Err(Error::layer(i, "weight scale missing, invalid or unexpected")),
        }
    }
    let mut model = model.clone();
    if let Some(mask) = mask {
        mask.check_aligned(&model)?;
        mask.apply(&mut model)?;
    }
    let scales: Vec<Option<T>> = weight_scales.iter().map(|s| s.map(|s| T::of(s as f64))).collect();
    fit(
        &mut model,
        data,
        None,
        cfg,
        &Hooks {
            mask,
            fake_quant: Some(&scales),
        },
    )?;
    model.metadata.epochs += cfg.epochs as u32;
    Ok(model)
}

/// Accuracy and mean cross-entropy of a float model under `plan`.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &LabeledDataset<T>, plan: &ExecutionPlan) -> Result<Evaluation> {
    evaluate_with(&Planned { model, plan }, data)
}

/// Accuracy and mean cross-entropy of any classifier, accumulated in item order.
pub fn evaluate_with<T: Scalar>(classifier: &impl Classifier<T>, data: &LabeledDataset<T>) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0f64;
    for (x, label) in &data.items {
        let (pred, l) = classifier.classify(x, *label)?;
        correct += (pred == *label) as usize;
        loss += l.as_f64();
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

#[derive(Default)]
struct Hooks<'a, T> {
    mask: Option<&'a PruneMask>,
    fake_quant: Option<&'a [Option<T>]>,
}

fn fake_quantized<T: Scalar>(model: &Model<T>, scales: &[Option<T>]) -> Model<T> {
    let mut fq = model.clone();
    for (i, scale) in scales.iter().enumerate() {
        if let (Some(s), Some(w)) = (scale, fq.weights_mut(i)) {
            for v in w {
                *v = (*v / *s).round_half_even() * *s;
            }
        }
    }
    fq
}

fn check_data<T: Scalar>(model: &Model<T>, data: &LabeledDataset<T>, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} set is empty")));
    }
    if data.image_shape() != Some(model.input_shape()) {
        return Err(Error::Shape(format!(
            "{what} images are {:?}, model expects {:?}",
            data.image_shape(),
            model.input_shape()
        )));
    }
    if data.num_classes() != model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "{what} set has {} classes, model has {}",
            data.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

fn fit<T: Scalar>(
    model: &mut Model<T>,
    data: &LabeledDataset<T>,
    val: Option<&LabeledDataset<T>>,
    cfg: &TrainConfig,
    hooks: &Hooks<'_, T>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    check_data(model, data, "training")?;
    if let Some(val) = val {
        check_data(model, val, "validation")?;
    }
    let lr = T::of(cfg.learning_rate);
    let momentum = match cfg.optimizer {
        Optimizer::Sgd => None,
        Optimizer::SgdMomentum(mu) => Some(T::of(mu)),
    };
    let mut velocity: Vec<Option<(Vec<T>, Vec<T>)>> = model
        .params()
        .iter()
        .map(|p| {
            p.as_ref()
                .map(|p| (vec![T::zero(); p.weights.len()], vec![T::zero(); p.bias.len()]))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let val_plan = ExecutionPlan::uniform(model.layers(), Backend::Accelerated);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk.iter().map(|&i| (&data.items[i].0, data.items[i].1));
            let grads = match hooks.fake_quant {
                Some(scales) => gradients(&fake_quantized(model, scales), batch)?,
                None => gradients(model, batch)?,
            };
            if !grads.loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            loss_sum += grads.loss.as_f64() * grads.batch_size as f64;
            correct += grads.correct;

            for (i, params) in model.params_mut() {
                if let (Some(g), Some(v)) = (&grads.params[i], &mut velocity[i]) {
                    step(params.weights.data_mut(), g.weights.data(), &mut v.0, lr, momentum);
                    step(params.bias.data_mut(), g.bias.data(), &mut v.1, lr, momentum);
                }
            }
            if let Some(mask) = hooks.mask {
                mask.apply(model)?;
            }
            if model
                .params()
                .iter()
                .flatten()
                .any(|p| !p.weights.is_finite() || !p.bias.is_finite())
            {
                return Err(Error::Diverged { epoch, batch: b });
            }
        }
        let n = data.len() as f64;
        let (val_loss, val_accuracy) = match val {
            Some(val) => {
                let e = evaluate(model, val, &val_plan)?;
                (e.loss, e.accuracy)
            }
            None => (f64::NAN, f64::NAN),
        };
        log::debug!(
            "epoch {}: train loss {:.4}, val accuracy {:.4}",
            epoch + 1,
            loss_sum / n,
            val_accuracy
        );
        history.epochs.push(EpochStats {
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        });
    }
    Ok(history)
}

fn step<T: Scalar>(w: &mut [T], g: &[T], v: &mut [T], lr: T, momentum: Option<T>) {
    match momentum {
        Some(mu) => {
            for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
        None => {
            for (w, &g) in w.iter_mut().zip(g) {
                *w -= lr * g;
            }
        }
    }
}
