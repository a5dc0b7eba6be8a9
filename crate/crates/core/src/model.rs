//! Forward and backward passes over a [`Network`] under a [`Mask`].
//!
//! All compute uses the masked weights `W ⊙ m`. Reductions run left to right
//! in `f32` so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::mask::Mask;
use crate::network::Network;
use crate::tensor::Tensor;

/// Inputs `[n, ...]` with one class label per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() < 2 {
            return Err(Error::Config(format!(
                "batch inputs need a leading batch dimension, got shape {:?}",
                inputs.shape()
            )));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: inputs.rows(),
                actual: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_batch(net: &Network, mask: &Mask, batch: &Batch) -> Result<()> {
    mask.check_len(net.num_params())?;
    if &batch.inputs.shape()[1..] != net.input_shape() {
        let mut expected = vec![batch.inputs.rows()];
        expected.extend_from_slice(net.input_shape());
        return Err(Error::ShapeMismatch {
            expected,
            actual: batch.inputs.shape().to_vec(),
        });
    }
    let classes = net.num_classes();
    if let Some((index, &label)) = batch.labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::InvalidLabel {
            index,
            label,
            num_classes: classes,
        });
    }
    batch.inputs.check_finite("input")
}

/// Activations entering each layer; the last entry is the logits.
fn run_forward(net: &Network, weights: &[f32], batch: &Batch) -> Vec<Vec<f32>> {
    let n = batch.len();
    let mut acts = Vec::with_capacity(net.layers().len() + 1);
    acts.push(batch.inputs.data().to_vec());
    for (i, layer) in net.layers().iter().enumerate() {
        let input = acts.last().unwrap();
        let in_shape = net.shape_before(i);
        let out_shape = net.shape_before(i + 1);
        let out = match *layer {
            LayerSpec::Dense {
                in_features,
                out_features,
                has_bias,
            } => {
                let r = net.param_range(i).unwrap();
                let (w, b) = (&weights[r.kernel.clone()], &weights[r.bias.clone()]);
                let mut out = vec![0.0f32; n * out_features];
                for s in 0..n {
                    let x = &input[s * in_features..(s + 1) * in_features];
                    for o in 0..out_features {
                        let row = &w[o * in_features..(o + 1) * in_features];
                        let mut acc = if has_bias { b[o] } else { 0.0 };
                        for k in 0..in_features {
                            acc += row[k] * x[k];
                        }
                        out[s * out_features + o] = acc;
                    }
                }
                out
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                has_bias,
            } => {
                let r = net.param_range(i).unwrap();
                let (w, b) = (&weights[r.kernel.clone()], &weights[r.bias.clone()]);
                let geo = ConvGeometry::new(in_shape, out_shape, stride, padding);
                let mut out = vec![0.0f32; n * out_channels * geo.out_hw()];
                for s in 0..n {
                    let x = &input[s * in_channels * geo.in_hw()..][..in_channels * geo.in_hw()];
                    for o in 0..out_channels {
                        for oy in 0..geo.oh {
                            for ox in 0..geo.ow {
                                let mut acc = if has_bias { b[o] } else { 0.0 };
                                for c in 0..in_channels {
                                    for ky in 0..kernel_h {
                                        let Some(iy) = geo.in_row(oy, ky) else { continue };
                                        for kx in 0..kernel_w {
                                            let Some(ix) = geo.in_col(ox, kx) else { continue };
                                            acc += w[((o * in_channels + c) * kernel_h + ky) * kernel_w + kx]
                                                * x[(c * geo.ih + iy) * geo.iw + ix];
                                        }
                                    }
                                }
                                out[((s * out_channels + o) * geo.oh + oy) * geo.ow + ox] = acc;
                            }
                        }
                    }
                }
                out
            }
            LayerSpec::Relu => input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            LayerSpec::AvgPool2d { window, stride } => {
                let (c, ih, iw) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let area = (window * window) as f32;
                let mut out = vec![0.0f32; n * c * oh * ow];
                for sc in 0..n * c {
                    let x = &input[sc * ih * iw..(sc + 1) * ih * iw];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0f32;
                            for dy in 0..window {
                                for dx in 0..window {
                                    acc += x[(oy * stride + dy) * iw + ox * stride + dx];
                                }
                            }
                            out[(sc * oh + oy) * ow + ox] = acc / area;
                        }
                    }
                }
                out
            }
            LayerSpec::Flatten => input.clone(),
        };
        acts.push(out);
    }
    acts
}

struct ConvGeometry {
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(in_shape: &[usize], out_shape: &[usize], stride: usize, padding: usize) -> Self {
        Self {
            ih: in_shape[1],
            iw: in_shape[2],
            oh: out_shape[1],
            ow: out_shape[2],
            stride,
            padding,
        }
    }

    fn in_hw(&self) -> usize {
        self.ih * self.iw
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky).checked_sub(self.padding).filter(|&v| v < self.ih)
    }

    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx).checked_sub(self.padding).filter(|&v| v < self.iw)
    }
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
fn softmax_cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f32, Vec<f32>) {
    let n = labels.len();
    let mut total = 0.0f32;
    let mut grad = vec![0.0f32; logits.len()];
    let inv_n = 1.0 / n as f32;
    for (s, &label) in labels.iter().enumerate() {
        let z = &logits[s * classes..(s + 1) * classes];
        let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for &v in z {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - z[label];
        let g = &mut grad[s * classes..(s + 1) * classes];
        for (k, &v) in z.iter().enumerate() {
            let p = (v - max).exp() / sum;
            g[k] = (p - if k == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    (total * inv_n, grad)
}

/// Logits and mean cross-entropy loss of `W ⊙ m` on `batch`.
pub fn forward(net: &Network, mask: &Mask, batch: &Batch) -> Result<(Tensor, f32)> {
    check_batch(net, mask, batch)?;
    let weights = mask.masked(&net.weights);
    let mut acts = run_forward(net, &weights, batch);
    let logits = acts.pop().unwrap();
    let (loss, _) = softmax_cross_entropy(&logits, &batch.labels, net.num_classes());
    Ok((Tensor::new(vec![batch.len(), net.num_classes()], logits)?, loss))
}

/// Gradient of the loss w.r.t. `W`, evaluated at `W ⊙ m`, with pruned
/// entries forced to exactly zero.
pub fn backward(net: &Network, mask: &Mask, batch: &Batch) -> Result<Vec<f32>> {
    forward_backward(net, mask, batch).map(|(_, grad)| grad)
}

/// Loss and gradient from a single forward pass.
pub fn forward_backward(net: &Network, mask: &Mask, batch: &Batch) -> Result<(f32, Vec<f32>)> {
    check_batch(net, mask, batch)?;
    let weights = mask.masked(&net.weights);
    let acts = run_forward(net, &weights, batch);
    let classes = net.num_classes();
    let (loss, mut delta) = softmax_cross_entropy(acts.last().unwrap(), &batch.labels, classes);
    let mut grad = vec![0.0f32; net.num_params()];
    let n = batch.len();

    for i in (0..net.layers().len()).rev() {
        let input = &acts[i];
        let in_shape = net.shape_before(i);
        let out_shape = net.shape_before(i + 1);
        let need_input_grad = i > 0;
        delta = match net.layers()[i] {
            LayerSpec::Dense {
                in_features,
                out_features,
                has_bias,
            } => {
                let r = net.param_range(i).unwrap();
                let w = &weights[r.kernel.clone()];
                let mut dx = vec![0.0f32; if need_input_grad { n * in_features } else { 0 }];
                for s in 0..n {
                    let x = &input[s * in_features..(s + 1) * in_features];
                    let dy = &delta[s * out_features..(s + 1) * out_features];
                    for o in 0..out_features {
                        let g = dy[o];
                        let gw = &mut grad[r.kernel.start + o * in_features..][..in_features];
                        for k in 0..in_features {
                            gw[k] += g * x[k];
                        }
                        if has_bias {
                            grad[r.bias.start + o] += g;
                        }
                    }
                    if need_input_grad {
                        let dxs = &mut dx[s * in_features..(s + 1) * in_features];
                        for o in 0..out_features {
                            let g = dy[o];
                            let row = &w[o * in_features..(o + 1) * in_features];
                            for k in 0..in_features {
                                dxs[k] += g * row[k];
                            }
                        }
                    }
                }
                dx
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                has_bias,
            } => {
                let r = net.param_range(i).unwrap();
                let w = &weights[r.kernel.clone()];
                let geo = ConvGeometry::new(in_shape, out_shape, stride, padding);
                let in_len = in_channels * geo.in_hw();
                let mut dx = vec![0.0f32; if need_input_grad { n * in_len } else { 0 }];
                for s in 0..n {
                    let x = &input[s * in_len..(s + 1) * in_len];
                    for o in 0..out_channels {
                        for oy in 0..geo.oh {
                            for ox in 0..geo.ow {
                                let g = delta[((s * out_channels + o) * geo.oh + oy) * geo.ow + ox];
                                if has_bias {
                                    grad[r.bias.start + o] += g;
                                }
                                for c in 0..in_channels {
                                    for ky in 0..kernel_h {
                                        let Some(iy) = geo.in_row(oy, ky) else { continue };
                                        for kx in 0..kernel_w {
                                            let Some(ix) = geo.in_col(ox, kx) else { continue };
                                            let wi = ((o * in_channels + c) * kernel_h + ky) * kernel_w + kx;
                                            let xi = (c * geo.ih + iy) * geo.iw + ix;
                                            grad[r.kernel.start + wi] += g * x[xi];
                                            if need_input_grad {
                                                dx[s * in_len + xi] += g * w[wi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            }
            LayerSpec::Relu => delta
                .iter()
                .zip(input)
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            LayerSpec::AvgPool2d { window, stride } => {
                let (c, ih, iw) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let area = (window * window) as f32;
                let mut dx = vec![0.0f32; n * c * ih * iw];
                for sc in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = delta[(sc * oh + oy) * ow + ox] / area;
                            for dy in 0..window {
                                for dxw in 0..window {
                                    dx[sc * ih * iw + (oy * stride + dy) * iw + ox * stride + dxw] += g;
                                }
                            }
                        }
                    }
                }
                dx
            }
            LayerSpec::Flatten => delta,
        };
    }
    mask.apply(&mut grad);
    Ok((loss, grad))
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

/// Fraction of examples whose argmax prediction under `W ⊙ m` matches the label.
pub fn evaluate<I>(net: &Network, mask: &Mask, batches: I) -> Result<f64>
where
    I: IntoIterator<Item = Batch>,
{
    let mut correct = 0usize;
    let mut total = 0usize;
    let classes = net.num_classes();
    for batch in batches {
        let (logits, _) = forward(net, mask, &batch)?;
        for (s, &label) in batch.labels.iter().enumerate() {
            if argmax(&logits.data()[s * classes..(s + 1) * classes]) == label {
                correct += 1;
            }
        }
        total += batch.len();
    }
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(correct as f64 / total as f64)
}
