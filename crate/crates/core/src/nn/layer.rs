use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Window;

/// One layer of a sequential model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2D {
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    MaxPool2D {
        pool: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
    },
    ReLU,
    Softmax,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2D {
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: 0,
        }
    }

    pub fn max_pool(pool: usize) -> Self {
        LayerSpec::MaxPool2D { pool, stride: pool }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2D { .. } => LayerKind::Conv2D,
            LayerSpec::MaxPool2D { .. } => LayerKind::MaxPool2D,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::ReLU => LayerKind::ReLU,
            LayerSpec::Softmax => LayerKind::Softmax,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2D { .. } | LayerSpec::Dense { .. })
    }

    pub(crate) fn window(&self) -> Option<Window> {
        match *self {
            LayerSpec::Conv2D {
                kernel,
                stride,
                padding,
                ..
            } => Some(Window {
                kernel,
                stride,
                padding,
            }),
            LayerSpec::MaxPool2D { pool, stride } => Some(Window {
                kernel: (pool, pool),
                stride,
                padding: 0,
            }),
            _ => None,
        }
    }

    /// Output shape for a given input shape, without looking at parameters.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2D {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 || stride == 0 {
                    return Err("conv attributes must be positive".into());
                }
                let [h, w, _] = image_dims(input)?;
                let (oh, ow) = Window {
                    kernel,
                    stride,
                    padding,
                }
                .output_dims(h, w)
                .map_err(|e| format!("input {input:?}: {e}"))?;
                Ok(vec![oh, ow, out_channels])
            }
            LayerSpec::MaxPool2D { pool, stride } => {
                if pool == 0 || stride == 0 {
                    return Err("pool attributes must be positive".into());
                }
                let [h, w, c] = image_dims(input)?;
                if pool > h || pool > w {
                    return Err(format!("pool {pool} larger than input {input:?}"));
                }
                Ok(vec![(h - pool) / stride + 1, (w - pool) / stride + 1, c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err("dense units must be positive".into());
                }
                if input.len() != 1 {
                    return Err(format!("dense expects a flat input, got {input:?}"));
                }
                Ok(vec![units])
            }
            LayerSpec::ReLU => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(format!("softmax expects a flat input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// `(weights, bias)` shapes for a layer with parameters.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2D {
                out_channels, kernel, ..
            } => {
                let c = *input.get(2)?;
                Some((vec![kernel.0, kernel.1, c, out_channels], vec![out_channels]))
            }
            LayerSpec::Dense { units } => Some((vec![*input.first()?, units], vec![units])),
            _ => None,
        }
    }
}

fn image_dims(input: &[usize]) -> Result<[usize; 3], String> {
    match input {
        &[h, w, c] => Ok([h, w, c]),
        _ => Err(format!("expected an [h, w, c] input, got {input:?}")),
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2D {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(
                f,
                "Conv2D({out_channels}, {}x{}, s{stride}, p{padding})",
                kernel.0, kernel.1
            ),
            LayerSpec::MaxPool2D { pool, stride } => write!(f, "MaxPool2D({pool}, s{stride})"),
            LayerSpec::Flatten => f.write_str("Flatten"),
            LayerSpec::Dense { units } => write!(f, "Dense({units})"),
            LayerSpec::ReLU => f.write_str("ReLU"),
            LayerSpec::Softmax => f.write_str("Softmax"),
        }
    }
}

/// Layer kind without attributes; used to describe which layers a backend supports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2D,
    MaxPool2D,
    Flatten,
    Dense,
    ReLU,
    Softmax,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Conv2D,
        LayerKind::MaxPool2D,
        LayerKind::Flatten,
        LayerKind::Dense,
        LayerKind::ReLU,
        LayerKind::Softmax,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2D => "Conv2D",
            LayerKind::MaxPool2D => "MaxPool2D",
            LayerKind::Flatten => "Flatten",
            LayerKind::Dense => "Dense",
            LayerKind::ReLU => "ReLU",
            LayerKind::Softmax => "Softmax",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer kind `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_shape_chain() {
        let conv = LayerSpec::conv(8, 3);
        assert_eq!(conv.output_shape(&[28, 28, 1]).unwrap(), vec![26, 26, 8]);
        let pool = LayerSpec::max_pool(2);
        assert_eq!(pool.output_shape(&[26, 26, 8]).unwrap(), vec![13, 13, 8]);
        assert_eq!(LayerSpec::Flatten.output_shape(&[13, 13, 8]).unwrap(), vec![1352]);
        assert_eq!(
            LayerSpec::dense(10).param_shapes(&[1352]).unwrap(),
            (vec![1352, 10], vec![10])
        );
    }

    #[test]
    fn kind_parses_case_insensitively() {
        assert_eq!("conv2d".parse::<LayerKind>().unwrap(), LayerKind::Conv2D);
        assert!("Dropout".parse::<LayerKind>().is_err());
    }
}
