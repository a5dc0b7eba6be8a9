use serde::{Deserialize, Serialize};

/// One layer of a feed-forward network. Shapes are per example: dense layers
/// take `[features]`, spatial layers take `[channels, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
        has_bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    Relu,
    AvgPool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn dense(in_features: usize, out_features: usize, has_bias: bool) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
            has_bias,
        }
    }

    /// Square-kernel convolution.
    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    ) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            has_bias,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn kernel_len(&self) -> usize {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => in_features * out_features,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => out_channels * in_channels * kernel_h * kernel_w,
            _ => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Dense {
                out_features,
                has_bias: true,
                ..
            } => out_features,
            LayerSpec::Conv2d {
                out_channels,
                has_bias: true,
                ..
            } => out_channels,
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernel_len() + self.bias_len()
    }

    /// Fan-in used for Kaiming-uniform initialisation.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_features, .. } => in_features,
            LayerSpec::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * kernel_h * kernel_w,
            _ => 0,
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Output shape for a given per-example input shape, or a description of
    /// why the input is not accepted.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => {
                if input != [in_features] {
                    return Err(format!(
                        "dense expects input [{in_features}], got {input:?}"
                    ));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = spatial(input, "conv2d")?;
                if c != in_channels {
                    return Err(format!(
                        "conv2d expects {in_channels} input channels, got {c}"
                    ));
                }
                if stride == 0 || kernel_h == 0 || kernel_w == 0 || out_channels == 0 {
                    return Err("conv2d geometry must be positive".into());
                }
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                if ph < kernel_h || pw < kernel_w {
                    return Err(format!(
                        "conv2d kernel {kernel_h}x{kernel_w} larger than padded input {ph}x{pw}"
                    ));
                }
                Ok(vec![
                    out_channels,
                    (ph - kernel_h) / stride + 1,
                    (pw - kernel_w) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::AvgPool2d { window, stride } => {
                let [c, h, w] = spatial(input, "avgpool2d")?;
                if window == 0 || stride == 0 {
                    return Err("avgpool2d geometry must be positive".into());
                }
                if h < window || w < window {
                    return Err(format!(
                        "avgpool2d window {window} larger than input {h}x{w}"
                    ));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::Flatten => {
                if input.is_empty() {
                    return Err("flatten needs a non-scalar input".into());
                }
                Ok(vec![input.iter().product()])
            }
        }
    }
}

fn spatial(input: &[usize], kind: &str) -> Result<[usize; 3], String> {
    match *input {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(format!("{kind} expects a [c, h, w] input, got {input:?}")),
    }
}

/// Dense `in -> hidden -> classes` classifier with one ReLU.
pub fn mlp2(in_features: usize, hidden: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(in_features, hidden, true),
        LayerSpec::Relu,
        LayerSpec::dense(hidden, classes, true),
    ]
}

/// Two 3x3 convolutions, a 2x2 average pool and two dense layers.
pub fn conv4(
    input: [usize; 3],
    channels: (usize, usize),
    hidden: usize,
    classes: usize,
) -> Vec<LayerSpec> {
    let [c, h, w] = input;
    let flat = channels.1 * (h / 2) * (w / 2);
    vec![
        LayerSpec::conv2d(c, channels.0, 3, 1, 1, true),
        LayerSpec::Relu,
        LayerSpec::conv2d(channels.0, channels.1, 3, 1, 1, true),
        LayerSpec::Relu,
        LayerSpec::AvgPool2d {
            window: 2,
            stride: 2,
        },
        LayerSpec::Flatten,
        LayerSpec::dense(flat, hidden, true),
        LayerSpec::Relu,
        LayerSpec::dense(hidden, classes, true),
    ]
}
