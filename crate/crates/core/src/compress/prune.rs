use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PruneScope {
    /// Each weight tensor loses `floor(s * len)` of its own weights.
    #[default]
    PerLayer,
    /// All weight tensors are ranked together.
    Global,
}

impl fmt::Display for PruneScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneScope::PerLayer => "per-layer",
            PruneScope::Global => "global",
        })
    }
}

impl FromStr for PruneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-layer" | "per_layer" | "layer" => Ok(PruneScope::PerLayer),
            "global" => Ok(PruneScope::Global),
            _ => Err(Error::InvalidArgument(format!("unknown pruning scope `{s}`"))),
        }
    }
}

/// Keep/prune flags for one weight tensor (`true` = kept).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    pub shape: Vec<usize>,
    pub keep: Vec<bool>,
}

impl LayerMask {
    pub fn all_kept(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        }
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn sparsity(&self) -> f64 {
        self.pruned_count() as f64 / self.keep.len() as f64
    }
}

/// Per-layer weight masks aligned with a model's layers. Biases are never masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    pub layers: Vec<Option<LayerMask>>,
}

impl PruneMask {
    pub fn all_kept<T: Scalar>(model: &Model<T>) -> Self {
        Self {
            layers: model
                .params()
                .iter()
                .map(|p| p.as_ref().map(|p| LayerMask::all_kept(p.weights.shape())))
                .collect(),
        }
    }

    pub fn check_aligned<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        if self.layers.len() != model.layers().len() {
            return Err(Error::InvalidArgument(format!(
                "mask covers {} layers, model has {}",
                self.layers.len(),
                model.layers().len()
            )));
        }
        for (i, (m, p)) in self.layers.iter().zip(model.params()).enumerate() {
            match (m, p) {
                (None, None) => {}
                (Some(m), Some(p)) if m.shape == p.weights.shape() && m.keep.len() == p.weights.len() => {}
                _ => return Err(Error::layer(i, "mask does not match the layer's weights")),
            }
        }
        Ok(())
    }

    /// Zeroes every masked weight.
    pub fn apply<T: Scalar>(&self, model: &mut Model<T>) -> Result<()> {
        self.check_aligned(model)?;
        for (i, m) in self.layers.iter().enumerate() {
            if let (Some(m), Some(w)) = (m, model.weights_mut(i)) {
                for (v, &keep) in w.iter_mut().zip(&m.keep) {
                    if !keep {
                        *v = T::zero();
                    }
                }
            }
        }
        Ok(())
    }

    pub fn pruned_count(&self) -> usize {
        self.layers.iter().flatten().map(LayerMask::pruned_count).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().flatten().map(|m| m.keep.len()).sum()
    }

    /// Fraction of masked weights over all weight tensors.
    pub fn sparsity(&self) -> f64 {
        self.pruned_count() as f64 / self.total().max(1) as f64
    }

    /// `(layer, flat index)` of every pruned weight.
    pub fn pruned_positions(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(l, m)| m.as_ref().map(|m| (l, m)))
            .flat_map(|(l, m)| {
                m.keep
                    .iter()
                    .enumerate()
                    .filter(|(_, k)| !**k)
                    .map(move |(i, _)| (l, i))
            })
            .collect()
    }
}

/// Number of weights to remove from `n` at sparsity `s`.
///
/// The epsilon keeps products such as `0.29 * 100 = 28.999999999999996`
/// from losing a weight to binary rounding.
pub fn prune_count(sparsity: f64, n: usize) -> usize {
    ((sparsity * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Zeroes the `floor(sparsity * n)` smallest-magnitude weights (per layer or
/// pooled across layers). Ties go to the lower flat index; biases are left
/// alone.
pub fn prune_magnitude<T: Scalar>(model: &Model<T>, sparsity: f64, scope: PruneScope) -> Result<(Model<T>, PruneMask)> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let mut mask = PruneMask::all_kept(model);
    match scope {
        PruneScope::PerLayer => {
            for (m, p) in mask.layers.iter_mut().zip(model.params()) {
                if let (Some(m), Some(p)) = (m, p) {
                    let w = p.weights.data();
                    let k = prune_count(sparsity, w.len());
                    for i in smallest(w.iter().enumerate().map(|(i, &v)| ((0, i), v)), k) {
                        m.keep[i.1] = false;
                    }
                }
            }
        }
        PruneScope::Global => {
            let pooled = model
                .params()
                .iter()
                .enumerate()
                .filter_map(|(l, p)| p.as_ref().map(|p| (l, p)))
                .flat_map(|(l, p)| p.weights.data().iter().enumerate().map(move |(i, &v)| ((l, i), v)));
            let k = prune_count(sparsity, mask.total());
            for (l, i) in smallest(pooled, k) {
                mask.layers[l].as_mut().unwrap().keep[i] = false;
            }
        }
    }
    let mut pruned = model.clone();
    mask.apply(&mut pruned)?;
    pruned.metadata.sparsity = sparsity as f32;
    Ok((pruned, mask))
}

/// Positions of the `k` entries with the smallest `|v|`, ordered by
/// `(|v|, position)`.
fn smallest<T: Scalar>(values: impl Iterator<Item = ((usize, usize), T)>, k: usize) -> Vec<(usize, usize)> {
    let mut ranked: Vec<((usize, usize), T)> = values.map(|(pos, v)| (pos, v.abs())).collect();
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    ranked.into_iter().take(k).map(|(pos, _)| pos).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, Params};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn dense_model(weights: &[f32]) -> Model<f32> {
        let n = weights.len() / 2;
        Model::new(
            vec![LayerSpec::dense(2), LayerSpec::Softmax],
            vec![
                Some(Params {
                    weights: Tensor::new([n, 2], weights).unwrap(),
                    bias: Tensor::new([2], [0.3, -0.3]).unwrap(),
                }),
                None,
            ],
            vec![n],
            vec!["a".into(), "b".into()],
            Default::default(),
        )
        .unwrap()
    }

    fn weights(m: &Model<f32>) -> Vec<f32> {
        m.layer_params(0).unwrap().weights.data().to_vec()
    }

    #[test]
    fn two_smallest_magnitudes_go() {
        let (m, mask) = prune_magnitude(&dense_model(&[0.1, -0.5, 0.05, 0.9]), 0.5, PruneScope::PerLayer).unwrap();
        assert_eq!(weights(&m), [0.0, -0.5, 0.0, 0.9]);
        assert_eq!(mask.pruned_count(), 2);
        assert_eq!(m.layer_params(0).unwrap().bias.data(), &[0.3, -0.3]);
    }

    #[test]
    fn zero_sparsity_is_identity() {
        let model = dense_model(&[0.1, -0.5, 0.05, 0.9]);
        let (m, mask) = prune_magnitude(&model, 0.0, PruneScope::PerLayer).unwrap();
        assert_eq!(m.params(), model.params());
        assert_eq!(mask, PruneMask::all_kept(&model));
    }

    #[test]
    fn ties_break_by_index() {
        let (m, _) = prune_magnitude(&dense_model(&[1., 1., -1., 1.]), 0.5, PruneScope::PerLayer).unwrap();
        assert_eq!(weights(&m), [0., 0., -1., 1.]);
    }

    #[test]
    fn out_of_range_sparsity() {
        let model = dense_model(&[1., 2.]);
        assert!(prune_magnitude(&model, 1.0, PruneScope::Global).is_err());
        assert!(prune_magnitude(&model, -0.1, PruneScope::Global).is_err());
    }

    #[test]
    fn misaligned_mask_is_rejected() {
        let model = dense_model(&[1., 2., 3., 4.]);
        let other = dense_model(&[1., 2.]);
        let mask = PruneMask::all_kept(&other);
        assert!(mask.check_aligned(&model).is_err());
    }

    proptest! {
        #[test]
        fn idempotent_and_monotone(
            w in prop::collection::vec(-2.0f32..2.0, 2..40).prop_map(|mut v| { if v.len() % 2 == 1 { v.pop(); } v }),
            s1 in 0.0f64..0.99,
            s2 in 0.0f64..0.99,
            global in any::<bool>(),
        ) {
            let scope = if global { PruneScope::Global } else { PruneScope::PerLayer };
            let model = dense_model(&w);
            let (once, m1) = prune_magnitude(&model, s1, scope).unwrap();
            let (twice, m1b) = prune_magnitude(&once, s1, scope).unwrap();
            prop_assert_eq!(&m1, &m1b);
            prop_assert_eq!(once.params(), twice.params());
            prop_assert_eq!(m1.pruned_count(), prune_count(s1, w.len()));

            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let (_, ml) = prune_magnitude(&model, lo, scope).unwrap();
            let (_, mh) = prune_magnitude(&model, hi, scope).unwrap();
            let high: std::collections::HashSet<_> = mh.pruned_positions().into_iter().collect();
            prop_assert!(ml.pruned_positions().iter().all(|p| high.contains(p)));
        }
    }
}
