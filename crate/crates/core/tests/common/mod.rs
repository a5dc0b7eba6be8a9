//! Independent f64 reference implementations used as test oracles.
#![allow(dead_code)]

use prwd_core::harness::dataset::synthetic_clusters;
use prwd_core::layer::LayerSpec;
use prwd_core::{Dataset, Mask, Network};

/// Per-example activation with its `[c, h, w]` or `[n]` shape.
#[derive(Clone, Debug)]
pub struct Act {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Reference forward pass of one example in f64 with explicit zero padding.
/// `mults` counts multiplications that involve a surviving kernel weight.
pub fn oracle_forward(net: &Network, weights: &[f64], mask: &Mask, x: &[f64], mults: &mut u64) -> Vec<f64> {
    oracle_forward_traced(net, weights, mask, x, mults, &mut Vec::new())
}

/// Like [`oracle_forward`], also collecting every value that enters a ReLU.
pub fn oracle_forward_traced(
    net: &Network,
    weights: &[f64],
    mask: &Mask,
    x: &[f64],
    mults: &mut u64,
    relu_in: &mut Vec<f64>,
) -> Vec<f64> {
    let mut act = Act {
        shape: net.input_shape().to_vec(),
        data: x.to_vec(),
    };
    let mut offset = 0usize;
    for layer in net.layers() {
        let w_at = |i: usize| if mask.get(i) { weights[i] } else { 0.0 };
        act = match *layer {
            LayerSpec::Dense {
                in_features,
                out_features,
                has_bias,
            } => {
                let bias_at = offset + in_features * out_features;
                let mut out = vec![0.0; out_features];
                for (o, y) in out.iter_mut().enumerate() {
                    for k in 0..in_features {
                        let idx = offset + o * in_features + k;
                        if mask.get(idx) {
                            *mults += 1;
                        }
                        *y += w_at(idx) * act.data[k];
                    }
                    if has_bias {
                        *y += w_at(bias_at + o);
                    }
                }
                offset = bias_at + if has_bias { out_features } else { 0 };
                Act {
                    shape: vec![out_features],
                    data: out,
                }
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
                let (h, w) = (act.shape[1], act.shape[2]);
                let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                let mut padded = vec![0.0; in_channels * ph * pw];
                for c in 0..in_channels {
                    for y in 0..h {
                        for xx in 0..w {
                            padded[(c * ph + y + padding) * pw + xx + padding] = act.data[(c * h + y) * w + xx];
                        }
                    }
                }
                let oh = (ph - kernel_h) / stride + 1;
                let ow = (pw - kernel_w) / stride + 1;
                let klen = in_channels * kernel_h * kernel_w;
                let bias_at = offset + out_channels * klen;
                let mut out = vec![0.0; out_channels * oh * ow];
                for o in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for c in 0..in_channels {
                                for ky in 0..kernel_h {
                                    for kx in 0..kernel_w {
                                        let idx = offset + o * klen + (c * kernel_h + ky) * kernel_w + kx;
                                        if mask.get(idx) {
                                            *mults += 1;
                                        }
                                        acc += w_at(idx) * padded[(c * ph + oy * stride + ky) * pw + ox * stride + kx];
                                    }
                                }
                            }
                            if has_bias {
                                acc += w_at(bias_at + o);
                            }
                            out[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                offset = bias_at + if has_bias { out_channels } else { 0 };
                Act {
                    shape: vec![out_channels, oh, ow],
                    data: out,
                }
            }
            LayerSpec::Relu => {
                relu_in.extend_from_slice(&act.data);
                Act {
                    shape: act.shape.clone(),
                    data: act.data.iter().map(|&v| v.max(0.0)).collect(),
                }
            }
            LayerSpec::AvgPool2d { window, stride } => {
                let (c, h, w) = (act.shape[0], act.shape[1], act.shape[2]);
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                let mut out = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for dy in 0..window {
                                for dx in 0..window {
                                    s += act.data[(ch * h + oy * stride + dy) * w + ox * stride + dx];
                                }
                            }
                            out.push(s / (window * window) as f64);
                        }
                    }
                }
                Act {
                    shape: vec![c, oh, ow],
                    data: out,
                }
            }
            LayerSpec::Flatten => Act {
                shape: vec![act.data.len()],
                data: act.data,
            },
        };
    }
    act.data
}

/// Mean softmax cross-entropy in f64.
pub fn oracle_loss(net: &Network, weights: &[f64], mask: &Mask, inputs: &[f64], labels: &[usize]) -> f64 {
    let dim: usize = net.input_shape().iter().product();
    let mut total = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let mut m = 0;
        let z = oracle_forward(net, weights, mask, &inputs[s * dim..(s + 1) * dim], &mut m);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[label];
    }
    total / labels.len() as f64
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Conv, strided and padded conv, a non-square kernel, pooling, flatten,
/// dense with and without bias.
pub fn every_layer_kind() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv2d(2, 3, 3, 2, 1, true),
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 2,
            kernel_h: 2,
            kernel_w: 3,
            stride: 1,
            padding: 0,
            has_bias: false,
        },
        LayerSpec::AvgPool2d { window: 2, stride: 1 },
        LayerSpec::Flatten,
        LayerSpec::dense(4, 5, true),
        LayerSpec::Relu,
        LayerSpec::dense(5, 3, false),
    ]
}

pub const EVERY_KIND_INPUT: [usize; 3] = [2, 7, 7];

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect()
}

pub fn clusters(classes: usize, n: usize, shape: &[usize], seed: u64) -> Dataset {
    synthetic_clusters(classes, n, 4, shape, 1.0, seed).unwrap().0
}

pub fn random_mask(d: usize, keep: f64, seed: u64) -> Mask {
    let u = noise(d, seed);
    Mask::from_bits(u.iter().map(|&v| ((v as f64 + 1.0) / 2.0) < keep).collect())
}
