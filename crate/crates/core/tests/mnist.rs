//! Measured properties of the model trained on the bundled MNIST subset.

use std::path::Path;
use std::sync::OnceLock;

use edgeopt::compress::{calibrate_activations, quantize_weights, QuantModel};
use edgeopt::data::{load_idx_dir, split, LabeledDataset};
use edgeopt::nn::{argmax, canonical_cnn, predict, Backend, ExecutionPlan, Model};
use edgeopt::train::{evaluate_with, finetune_fakequant, train, TrainConfig, TrainHistory};

struct Trained {
    train: LabeledDataset,
    val: LabeledDataset,
    model: Model<f32>,
    history: TrainHistory,
}

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        ..TrainConfig::default()
    }
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = load_idx_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")).unwrap();
        let (train_set, val) = split(&ds, 0.7, 42).unwrap();
        let init = canonical_cnn::<f32>(&[28, 28, 1], ds.class_names.clone(), 42).unwrap();
        let (model, history) = train(&init, &train_set, &val, &config()).unwrap();
        Trained {
            train: train_set,
            val,
            model,
            history,
        }
    })
}

fn quantized(model: &Model<f32>, calib: &LabeledDataset, samples: usize) -> QuantModel {
    calibrate_activations(&quantize_weights(model).unwrap(), calib, samples).unwrap()
}

#[test]
fn training_lowers_the_loss_and_fits_training_images() {
    let t = trained();
    let first = t.history.epochs.first().unwrap().train_loss;
    let last = t.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");

    let plan = ExecutionPlan::uniform(t.model.layers(), Backend::Accelerated);
    let fitted = t
        .train
        .items
        .iter()
        .take(200)
        .filter(|(x, y)| predict(&t.model, x, &plan).unwrap() == *y)
        .count();
    assert!(fitted >= 190, "{fitted}/200 training images fitted");
}

#[test]
fn calibration_subset_matches_full_set() {
    let t = trained();
    let small = evaluate_with(&quantized(&t.model, &t.val, 100), &t.val)
        .unwrap()
        .accuracy;
    let full = evaluate_with(&quantized(&t.model, &t.val, t.val.len()), &t.val)
        .unwrap()
        .accuracy;
    assert!((small - full).abs() <= 0.01, "100 samples {small}, all {full}");
}

#[test]
fn int8_and_float_predictions_agree() {
    let t = trained();
    let q = quantized(&t.model, &t.train, 100);
    let plan = ExecutionPlan::uniform(t.model.layers(), Backend::Accelerated);
    let qplan = ExecutionPlan::uniform(q.layers(), Backend::Accelerated);
    let agree = t
        .val
        .items
        .iter()
        .filter(|(x, _)| {
            let f = predict(&t.model, x, &plan).unwrap();
            let i = argmax(&edgeopt::compress::quantized_logits(&q, x, &qplan).unwrap());
            f == i
        })
        .count();
    let rate = agree as f64 / t.val.len() as f64;
    assert!(rate >= 0.97, "argmax agreement {rate}");
}

#[test]
fn fake_quant_finetuning_does_not_hurt_int8_accuracy() {
    let t = trained();
    let q = quantized(&t.model, &t.train, 100);
    let before = evaluate_with(&q, &t.val).unwrap().accuracy;
    let cfg = TrainConfig { epochs: 2, ..config() };
    let tuned = finetune_fakequant(&t.model, &q.weight_scales(), &t.train, &cfg).unwrap();
    let after = evaluate_with(&quantized(&tuned, &t.train, 100), &t.val)
        .unwrap()
        .accuracy;
    assert!(after >= before, "int8 accuracy {before} -> {after}");
}
