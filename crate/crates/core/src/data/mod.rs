//! Labeled image datasets: IDX files, folder-per-class PGM trees and a
//! seeded synthetic generator, plus the stratified train/validation split.

mod folder;
mod idx;
mod pgm;
mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use folder::{list_folder, load_folder, save_folder, FolderListing};
pub use idx::{load_idx, load_idx_dir};
pub use pgm::{decode_pgm, encode_pgm, read_pgm};
pub use synth::{synth_dataset, SynthSpec};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered `(image, label)` pairs. Images are `[h, w, 1]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T = f32> {
    pub items: Vec<(Tensor<T>, usize)>,
    pub class_names: Vec<String>,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(items: Vec<(Tensor<T>, usize)>, class_names: Vec<String>) -> Result<Self> {
        if let Some((first, _)) = items.first() {
            if let Some((i, (img, _))) = items
                .iter()
                .enumerate()
                .find(|(_, (img, _))| img.shape() != first.shape())
            {
                return Err(Error::InvalidArgument(format!(
                    "item {i} has shape {:?}, expected {:?}",
                    img.shape(),
                    first.shape()
                )));
            }
        }
        if let Some((_, label)) = items.iter().find(|(_, l)| *l >= class_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self { items, class_names })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.items.first().map(|(img, _)| img.shape())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for (_, l) in &self.items {
            counts[*l] += 1;
        }
        counts
    }

    /// The first `n` items (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Self {
        Self {
            items: self.items.iter().take(n).cloned().collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LabeledDataset<U> {
        LabeledDataset {
            items: self.items.iter().map(|(x, l)| (x.cast(), *l)).collect(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Stratified split: shuffle with `seed`, then put the first
/// `floor(train_fraction * count)` items of every class into `train` and the
/// rest into `val`. Both halves keep the shuffled order.
pub fn split<T: Scalar>(
    ds: &LabeledDataset<T>,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let counts = ds.class_counts();
    if let Some((c, n)) = counts.iter().enumerate().find(|(_, &n)| n < 2) {
        return Err(Error::InvalidArgument(format!(
            "class `{}` has {n} item(s); at least 2 are needed to stratify",
            ds.class_names[c]
        )));
    }
    let quota: Vec<usize> = counts
        .iter()
        .map(|&n| (train_fraction * n as f64 + 1e-9).floor() as usize)
        .collect();

    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut taken = vec![0; counts.len()];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for i in order {
        let item = ds.items[i].clone();
        let label = item.1;
        if taken[label] < quota[label] {
            taken[label] += 1;
            train.push(item);
        } else {
            val.push(item);
        }
    }
    Ok((
        LabeledDataset {
            items: train,
            class_names: ds.class_names.clone(),
        },
        LabeledDataset {
            items: val,
            class_names: ds.class_names.clone(),
        },
    ))
}
