use std::ops::Range;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{put_f32s, ByteReader};
use crate::error::{Error, Result};
use crate::layer::LayerSpec;

const NETWORK_MAGIC: &[u8; 4] = b"PRWD";
const NETWORK_VERSION: u32 = 1;

/// Where one parametric layer's parameters live in the flat weight vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRange {
    pub layer: usize,
    pub kernel: Range<usize>,
    pub bias: Range<usize>,
}

/// Layer graph plus the flat parameter vector that it interprets.
///
/// Layout: layers in order, within a layer the kernel then the bias. Dense
/// kernels are `[out, in]`, conv kernels `[out, in, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// Per-example shape entering each layer, plus the final output shape.
    shapes: Vec<Vec<usize>>,
    ranges: Vec<Option<ParamRange>>,
    pub weights: Vec<f32>,
}

impl Network {
    /// Validates the architecture and builds a network with all-zero weights.
    pub fn zeros(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "input shape must be non-empty and positive, got {input_shape:?}"
            )));
        }
        if layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            let input = shapes.last().unwrap();
            match layer.output_shape(input) {
                Ok(out) => shapes.push(out),
                Err(reason) => {
                    let from = if i == 0 {
                        format!("input {input_shape:?}")
                    } else {
                        format!("layer {} ({})", i - 1, layers[i - 1].kind())
                    };
                    return Err(Error::IncompatibleLayers {
                        from,
                        to: format!("layer {i} ({})", layer.kind()),
                        reason,
                    });
                }
            }
        }
        if shapes.last().unwrap().len() != 1 {
            return Err(Error::Config(format!(
                "network output must be a logit vector, got shape {:?}",
                shapes.last().unwrap()
            )));
        }
        let mut offset = 0;
        let ranges = layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                if !layer.is_parametric() {
                    return None;
                }
                let kernel = offset..offset + layer.kernel_len();
                let bias = kernel.end..kernel.end + layer.bias_len();
                offset = bias.end;
                Some(ParamRange {
                    layer: i,
                    kernel,
                    bias,
                })
            })
            .collect();
        Ok(Self {
            input_shape,
            layers,
            shapes,
            ranges,
            weights: vec![0.0; offset],
        })
    }

    /// Kaiming-uniform kernels with bound `sqrt(6 / fan_in)` and zero biases.
    pub fn init(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(input_shape, layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (layer, range) in net.layers.iter().zip(&net.ranges) {
            let Some(range) = range else { continue };
            let bound = (6.0f32 / layer.fan_in() as f32).sqrt();
            let dist = Uniform::new(-bound, bound).expect("positive bound");
            for w in &mut net.weights[range.kernel.clone()] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(net)
    }

    /// Same architecture, different weights.
    pub fn with_weights(&self, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                what: "weight vector",
                expected: self.weights.len(),
                actual: weights.len(),
            });
        }
        Ok(Self {
            weights,
            ..self.clone()
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-example shape entering layer `i` (`i == layers().len()` gives the
    /// output shape).
    pub fn shape_before(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    /// Total parameter count `d`.
    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn param_range(&self, layer: usize) -> Option<&ParamRange> {
        self.ranges.get(layer).and_then(|r| r.as_ref())
    }

    pub fn param_ranges(&self) -> impl Iterator<Item = &ParamRange> {
        self.ranges.iter().flatten()
    }

    /// Maps a flat index to `(layer, offset within that layer)`.
    pub fn locate(&self, index: usize) -> Option<(usize, usize)> {
        self.param_ranges()
            .find(|r| r.kernel.start <= index && index < r.bias.end)
            .map(|r| (r.layer, index - r.kernel.start))
    }

    /// Index of the next parametric layer after `layer`, if any.
    pub fn next_parametric(&self, layer: usize) -> Option<usize> {
        (layer + 1..self.layers.len()).find(|&i| self.layers[i].is_parametric())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.weights.len() * 4);
        out.extend_from_slice(NETWORK_MAGIC);
        out.extend_from_slice(&NETWORK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.input_shape.len() as u32).to_le_bytes());
        for &dim in &self.input_shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            encode_layer(&mut out, layer);
        }
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        put_f32s(&mut out, &self.weights);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(NETWORK_MAGIC)?;
        let at = r.offset();
        let version = r.u32_le("version")?;
        if version != NETWORK_VERSION {
            return Err(Error::parse(at, format!("unsupported version {version}")));
        }
        let rank = r.u32_le("input rank")? as usize;
        let input_shape = (0..rank)
            .map(|_| r.u32_le("input dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = r.u32_le("layer count")? as usize;
        let layers = (0..count)
            .map(|_| decode_layer(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let at = r.offset();
        let mut net = Self::zeros(input_shape, layers)
            .map_err(|e| Error::parse(at, format!("invalid layer table: {e}")))?;
        let at = r.offset();
        let d = r.u64_le("parameter count")? as usize;
        if d != net.num_params() {
            return Err(Error::parse(
                at,
                format!(
                    "parameter count {d} does not match layer table ({})",
                    net.num_params()
                ),
            ));
        }
        net.weights = r.f32_vec_le(d, "weights")?;
        r.finish()?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn encode_layer(out: &mut Vec<u8>, layer: &LayerSpec) {
    fn put(out: &mut Vec<u8>, v: usize) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    match *layer {
        LayerSpec::Dense {
            in_features,
            out_features,
            has_bias,
        } => {
            out.push(0);
            put(out, in_features);
            put(out, out_features);
            out.push(has_bias as u8);
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
            out.push(1);
            for v in [in_channels, out_channels, kernel_h, kernel_w, stride, padding] {
                put(out, v);
            }
            out.push(has_bias as u8);
        }
        LayerSpec::Relu => out.push(2),
        LayerSpec::AvgPool2d { window, stride } => {
            out.push(3);
            put(out, window);
            put(out, stride);
        }
        LayerSpec::Flatten => out.push(4),
    }
}

fn decode_layer(r: &mut ByteReader<'_>) -> Result<LayerSpec> {
    let at = r.offset();
    let dim = |r: &mut ByteReader<'_>, what| r.u32_le(what).map(|v| v as usize);
    let flag = |r: &mut ByteReader<'_>| -> Result<bool> {
        let at = r.offset();
        match r.u8("bias flag")? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::parse(at, format!("invalid bias flag {other}"))),
        }
    };
    Ok(match r.u8("layer kind")? {
        0 => LayerSpec::Dense {
            in_features: dim(r, "in_features")?,
            out_features: dim(r, "out_features")?,
            has_bias: flag(r)?,
        },
        1 => LayerSpec::Conv2d {
            in_channels: dim(r, "in_channels")?,
            out_channels: dim(r, "out_channels")?,
            kernel_h: dim(r, "kernel_h")?,
            kernel_w: dim(r, "kernel_w")?,
            stride: dim(r, "stride")?,
            padding: dim(r, "padding")?,
            has_bias: flag(r)?,
        },
        2 => LayerSpec::Relu,
        3 => LayerSpec::AvgPool2d {
            window: dim(r, "window")?,
            stride: dim(r, "stride")?,
        },
        4 => LayerSpec::Flatten,
        other => return Err(Error::parse(at, format!("unknown layer kind {other}"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{conv4, mlp2};

    #[test]
    fn init_is_deterministic() {
        let a = Network::init(vec![2], vec![LayerSpec::dense(2, 2, false)], 7).unwrap();
        let b = Network::init(vec![2], vec![LayerSpec::dense(2, 2, false)], 7).unwrap();
        assert_eq!(a.weights.len(), 4);
        assert_eq!(
            a.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>(),
            b.weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>()
        );
        let c = Network::init(vec![2], vec![LayerSpec::dense(2, 2, false)], 8).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn biases_start_at_zero() {
        let net = Network::init(vec![3], vec![LayerSpec::dense(3, 2, true)], 123).unwrap();
        assert_eq!(net.num_params(), 8);
        assert!(net.weights[6..].iter().all(|&b| b == 0.0));
        assert!(net.weights[..6].iter().any(|&w| w != 0.0));
    }

    #[test]
    fn kaiming_bound_holds_per_layer() {
        let layers = vec![
            LayerSpec::conv2d(1, 2, 3, 1, 1, true),
            LayerSpec::Flatten,
            LayerSpec::dense(2 * 4 * 4, 3, true),
        ];
        let net = Network::init(vec![1, 4, 4], layers, 42).unwrap();
        // fan_in: conv 1*3*3 = 9, dense 32
        let conv = net.param_range(0).unwrap();
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(net.weights[conv.kernel.clone()]
            .iter()
            .all(|w| (-bound..=bound).contains(w)));
        let dense = net.param_range(2).unwrap();
        let bound = (6.0f32 / 32.0).sqrt();
        assert!(net.weights[dense.kernel.clone()]
            .iter()
            .all(|w| (-bound..=bound).contains(w)));
    }

    #[test]
    fn incompatible_shapes_name_the_pair() {
        let err = Network::zeros(
            vec![4],
            vec![
                LayerSpec::dense(4, 3, true),
                LayerSpec::Relu,
                LayerSpec::dense(5, 2, true),
            ],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 1 (relu)"), "{msg}");
        assert!(msg.contains("layer 2 (dense)"), "{msg}");
    }

    #[test]
    fn layout_is_a_bijection() {
        let net = Network::zeros(vec![1, 8, 8], conv4([1, 8, 8], (2, 3), 5, 4)).unwrap();
        let expected: usize = net.layers().iter().map(|l| l.param_count()).sum();
        assert_eq!(net.num_params(), expected);
        let mut seen = vec![0usize; net.num_params()];
        for r in net.param_ranges() {
            for i in r.kernel.start..r.bias.end {
                seen[i] += 1;
                assert_eq!(net.locate(i).unwrap().0, r.layer);
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let net = Network::init(vec![1, 8, 8], conv4([1, 8, 8], (2, 3), 5, 4), 3).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"PRWD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Network::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, net);

        let mlp = Network::init(vec![784], mlp2(784, 64, 10), 1).unwrap();
        assert_eq!(Network::from_bytes(&mlp.to_bytes()).unwrap(), mlp);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let net = Network::init(vec![3], vec![LayerSpec::dense(3, 2, true)], 0).unwrap();
        let bytes = net.to_bytes();
        match Network::from_bytes(&bytes[..bytes.len() - 2]) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Network::from_bytes(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
    }
}
