use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layer::{LayerKind, LayerSpec};
use crate::error::{Error, Result};

/// Which kernel family executes a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Direct loop kernels.
    Reference,
    /// im2col + GEMM for convolutions, GEMM for dense layers.
    Accelerated,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Reference => "reference",
            Backend::Accelerated => "accelerated",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reference" | "ref" => Ok(Backend::Reference),
            "accelerated" | "acc" => Ok(Backend::Accelerated),
            _ => Err(Error::InvalidArgument(format!("unknown backend `{s}`"))),
        }
    }
}

/// Layer kinds the accelerated backend takes over by default; everything
/// else falls back to the reference kernels.
pub const DEFAULT_ACCELERATED: [LayerKind; 2] = [LayerKind::Conv2D, LayerKind::Dense];

/// Per-layer backend assignment, aligned with a model's layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionPlan {
    assignments: Vec<Backend>,
}

impl ExecutionPlan {
    pub fn new(assignments: Vec<Backend>) -> Self {
        Self { assignments }
    }

    /// The same backend for every layer, restricted to the default
    /// accelerated set so fallback semantics still hold.
    pub fn uniform(layers: &[LayerSpec], backend: Backend) -> Self {
        match backend {
            Backend::Reference => plan_execution(layers, &[]),
            Backend::Accelerated => plan_execution(layers, &DEFAULT_ACCELERATED),
        }
    }

    pub fn assignments(&self) -> &[Backend] {
        &self.assignments
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn accelerated_count(&self) -> usize {
        self.assignments.iter().filter(|&&b| b == Backend::Accelerated).count()
    }
}

/// Assigns each layer to the accelerated backend iff its kind is supported;
/// unsupported layers are offloaded to the reference kernels.
pub fn plan_execution(layers: &[LayerSpec], supported: &[LayerKind]) -> ExecutionPlan {
    ExecutionPlan {
        assignments: layers
            .iter()
            .map(|l| {
                if supported.contains(&l.kind()) {
                    Backend::Accelerated
                } else {
                    Backend::Reference
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Backend::{Accelerated as A, Reference as R};

    fn layers() -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv(2, 1),
            LayerSpec::ReLU,
            LayerSpec::dense(2),
            LayerSpec::Softmax,
        ]
    }

    #[test]
    fn membership_decides_backend() {
        let plan = plan_execution(&layers(), &[LayerKind::Conv2D, LayerKind::Dense]);
        assert_eq!(plan.assignments(), &[A, R, A, R]);
        assert_eq!(plan_execution(&layers(), &[]).assignments(), &[R; 4]);
        assert_eq!(plan_execution(&layers(), &LayerKind::ALL).assignments(), &[A; 4]);
    }

    #[test]
    fn backend_names_round_trip() {
        for b in [R, A] {
            assert_eq!(b.name().parse::<Backend>().unwrap(), b);
        }
        assert!("gpu".parse::<Backend>().is_err());
    }
}
