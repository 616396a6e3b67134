use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f32,
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize, image_size: usize) -> Self {
        Self {
            classes,
            per_class,
            image_size,
            noise: 0.1,
        }
    }
}

/// Class `c` draws a two-pixel-thick bar: horizontal for even `c`, vertical
/// for odd `c`, at a position that steps with `c / 2`. Items are interleaved
/// by class and noise is clipped back into `[0, 1]`.
pub fn synth_dataset(spec: SynthSpec, seed: u64) -> Result<LabeledDataset> {
    let SynthSpec {
        classes,
        per_class,
        image_size: n,
        noise,
    } = spec;
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "a synthetic dataset needs at least 2 classes".into(),
        ));
    }
    let slots = classes.div_ceil(2);
    if n < 2 * slots + 2 {
        return Err(Error::InvalidArgument(format!(
            "image size {n} too small for {classes} distinct bar positions"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid noise level {noise}")));
    }
    let step = (n - 2) / slots;
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|c| {
            let pos = 1 + (c / 2) * step;
            (0..n * n)
                .map(|i| {
                    let (y, x) = (i / n, i % n);
                    let coord = if c % 2 == 0 { y } else { x };
                    if coord == pos || coord == pos + 1 {
                        0.9
                    } else {
                        0.05
                    }
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut items = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (c, template) in templates.iter().enumerate() {
            let data: Vec<f32> = template
                .iter()
                .map(|&v| {
                    if noise == 0.0 {
                        v
                    } else {
                        (v + normal.sample(&mut rng)).clamp(0.0, 1.0)
                    }
                })
                .collect();
            items.push((Tensor::from_parts(vec![n, n, 1], data), c));
        }
    }
    Ok(LabeledDataset {
        items,
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_sized() {
        let a = synth_dataset(SynthSpec::new(2, 50, 16), 7).unwrap();
        let b = synth_dataset(SynthSpec::new(2, 50, 16), 7).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![50, 50]);
        assert!(a
            .items
            .iter()
            .all(|(x, _)| x.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn noiseless_items_repeat() {
        let spec = SynthSpec {
            noise: 0.0,
            ..SynthSpec::new(4, 3, 16)
        };
        let ds = synth_dataset(spec, 1).unwrap();
        for c in 0..4 {
            let same: Vec<_> = ds.items.iter().filter(|(_, l)| *l == c).collect();
            assert!(same.windows(2).all(|w| w[0].0 == w[1].0));
        }
        assert_ne!(ds.items[0].0, ds.items[1].0);
    }

    #[test]
    fn rejects_one_class() {
        assert!(synth_dataset(SynthSpec::new(1, 3, 16), 0).is_err());
        assert!(synth_dataset(SynthSpec::new(10, 3, 8), 0).is_err());
    }
}
