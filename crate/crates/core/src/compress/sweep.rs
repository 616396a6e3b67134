use super::prune::{prune_magnitude, PruneScope};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Backend, ExecutionPlan, Model};
use crate::scalar::Scalar;
use crate::train::{evaluate, finetune_masked, TrainConfig};

/// The nine sparsity levels swept by default.
pub const DEFAULT_SPARSITY_GRID: [f64; 9] = [0.25, 0.50, 0.60, 0.70, 0.80, 0.90, 0.95, 0.97, 0.99];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub sparsity: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub finetune_epochs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparsitySweep {
    pub rows: Vec<SweepRow>,
}

/// For each grid point: prune a fresh copy of `model`, fine-tune it with the
/// mask held for `finetune_epochs` (none if 0), and evaluate on `val_data`.
pub fn sparsity_sweep<T: Scalar>(
    model: &Model<T>,
    train_data: &LabeledDataset<T>,
    val_data: &LabeledDataset<T>,
    grid: &[f64],
    finetune_epochs: usize,
    cfg: &TrainConfig,
    scope: PruneScope,
) -> Result<SparsitySweep> {
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "sparsity grid must be strictly increasing: {grid:?}"
        )));
    }
    let plan = ExecutionPlan::uniform(model.layers(), Backend::Accelerated);
    let cfg = TrainConfig {
        epochs: finetune_epochs.max(1),
        ..cfg.clone()
    };
    let mut rows = Vec::with_capacity(grid.len());
    for &s in grid {
        let row = (|| {
            let (mut pruned, mask) = prune_magnitude(model, s, scope)?;
            if finetune_epochs > 0 {
                pruned = finetune_masked(&pruned, &mask, train_data, &cfg)?;
            }
            let eval = evaluate(&pruned, val_data, &plan)?;
            log::info!("sparsity {s:.2}: val accuracy {:.4}", eval.accuracy);
            Ok(SweepRow {
                sparsity: s,
                val_accuracy: eval.accuracy,
                val_loss: eval.loss,
                finetune_epochs,
            })
        })()
        .map_err(|e: Error| Error::Sweep {
            sparsity: s,
            source: Box::new(e),
        })?;
        rows.push(row);
    }
    Ok(SparsitySweep { rows })
}

/// Largest sparsity whose accuracy stays within `max_drop` of the baseline;
/// if none does, the most accurate row (first one on ties).
pub fn select_sparsity(sweep: &SparsitySweep, baseline_acc: f64, max_drop: f64) -> Option<f64> {
    let floor = baseline_acc - max_drop;
    sweep
        .rows
        .iter()
        .filter(|r| r.val_accuracy >= floor)
        .map(|r| r.sparsity)
        .fold(None, |best: Option<f64>, s| Some(best.map_or(s, |b| b.max(s))))
        .or_else(|| {
            sweep
                .rows
                .iter()
                .fold(None, |best: Option<&SweepRow>, r| match best {
                    Some(b) if b.val_accuracy >= r.val_accuracy => Some(b),
                    _ => Some(r),
                })
                .map(|r| r.sparsity)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synth_dataset, SynthSpec};
    use crate::nn::{LayerSpec, Model};

    fn sweep(rows: &[(f64, f64)]) -> SparsitySweep {
        SparsitySweep {
            rows: rows
                .iter()
                .map(|&(s, a)| SweepRow {
                    sparsity: s,
                    val_accuracy: a,
                    val_loss: 0.0,
                    finetune_epochs: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn selection_rule() {
        let s = sweep(&[(0.5, 0.980), (0.7, 0.979), (0.9, 0.900)]);
        assert_eq!(select_sparsity(&s, 0.980, 0.01), Some(0.7));
        let above = sweep(&[(0.5, 0.99), (0.7, 0.995), (0.9, 0.991)]);
        assert_eq!(select_sparsity(&above, 0.98, 0.0), Some(0.9));
        let none = sweep(&[(0.5, 0.5), (0.7, 0.6), (0.9, 0.1)]);
        assert_eq!(select_sparsity(&none, 0.98, 0.01), Some(0.7));
        assert_eq!(select_sparsity(&SparsitySweep::default(), 0.9, 0.0), None);
    }

    #[test]
    fn unfinetuned_zero_row_matches_baseline() {
        let ds = synth_dataset(SynthSpec::new(2, 20, 8), 3).unwrap();
        let (train, val) = split(&ds, 0.7, 3).unwrap();
        let model = Model::<f32>::init(
            vec![LayerSpec::Flatten, LayerSpec::dense(2), LayerSpec::Softmax],
            vec![8, 8, 1],
            ds.class_names.clone(),
            1,
        )
        .unwrap();
        let cfg = TrainConfig::default();
        let s = sparsity_sweep(&model, &train, &val, &[0.0, 0.5], 0, &cfg, PruneScope::PerLayer).unwrap();
        let base = evaluate(
            &model,
            &val,
            &ExecutionPlan::uniform(model.layers(), Backend::Accelerated),
        )
        .unwrap();
        assert_eq!(s.rows[0].val_accuracy, base.accuracy);
        assert_eq!(s.rows[0].val_loss, base.loss);
        assert!(sparsity_sweep(&model, &train, &val, &[0.5, 0.5], 0, &cfg, PruneScope::PerLayer).is_err());
        let err = sparsity_sweep(&model, &train, &val, &[0.5, 1.0], 0, &cfg, PruneScope::PerLayer).unwrap_err();
        assert!(err.to_string().starts_with("sparsity 1"), "{err}");
    }
}
