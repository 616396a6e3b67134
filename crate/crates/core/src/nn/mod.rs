//! Layer vocabulary, models, float kernels and the delegate-style execution planner.

mod forward;
mod kernels;
mod layer;
mod model;
mod plan;

pub use forward::{argmax, forward, forward_logits, predict, Classifier, Planned};
pub use kernels::{apply_layer, conv2d, dense, log_softmax_at, max_pool, relu, softmax};
pub use layer::{LayerKind, LayerSpec};
pub use model::{canonical_cnn, canonical_layers, infer_shapes, layer_shapes, Metadata, Model, Params};
pub use plan::{plan_execution, Backend, ExecutionPlan, DEFAULT_ACCELERATED};
