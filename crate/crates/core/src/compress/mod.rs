//! Model compression: magnitude pruning, sparsity sweeps and int8 quantization.

mod prune;
mod quant;
mod sweep;

pub use prune::{prune_count, prune_magnitude, LayerMask, PruneMask, PruneScope};
pub use quant::{
    calibrate_activations, quantize_weights, quantized_forward, quantized_forward_with, quantized_logits,
    quantized_predict, QuantLayer, QuantModel, QuantParams, QuantPlanned, QuantTensor, DEGENERATE_RANGE_PAD,
};
pub use sweep::{select_sparsity, sparsity_sweep, SparsitySweep, SweepRow, DEFAULT_SPARSITY_GRID};
