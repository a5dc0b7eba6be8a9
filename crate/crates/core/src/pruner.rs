//! Magnitude pruning: global unstructured pruning over the flat weight
//! vector, and structured L1 filter pruning for convolutions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::mask::Mask;
use crate::network::Network;

/// Fraction of surviving weights removed per iterative pruning round.
pub const DEFAULT_ITERATION_FRACTION: f64 = 0.2;

// Products like 0.29 * 100 land just below the integer in binary floating
// point; counts are taken on the decimal value.
const COUNT_EPS: f64 = 1e-9;

/// Which parameters take part in global unstructured pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePool {
    pub prune_biases: bool,
    pub prune_final_layer: bool,
}

impl Default for PrunePool {
    fn default() -> Self {
        Self {
            prune_biases: true,
            prune_final_layer: true,
        }
    }
}

impl PrunePool {
    /// Candidate flags for every flat weight position.
    pub fn candidates(&self, net: &Network) -> Vec<bool> {
        let mut out = vec![false; net.num_params()];
        let last = net.param_ranges().last().map(|r| r.layer);
        for r in net.param_ranges() {
            if !self.prune_final_layer && Some(r.layer) == last {
                continue;
            }
            out[r.kernel.clone()].iter_mut().for_each(|c| *c = true);
            if self.prune_biases {
                out[r.bias.clone()].iter_mut().for_each(|c| *c = true);
            }
        }
        out
    }
}

/// `⌊fraction · surviving⌋`.
pub fn prune_count(surviving: usize, fraction: f64) -> usize {
    ((fraction * surviving as f64) + COUNT_EPS).floor() as usize
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Pruning(format!(
            "pruning fraction must lie in (0, 1), got {fraction}"
        )));
    }
    Ok(())
}

/// Prunes the `⌊f · surviving⌋` smallest-magnitude surviving candidates.
/// Equal magnitudes are pruned in ascending flat-index order.
pub fn global_magnitude_prune(
    net: &Network,
    current: &Mask,
    fraction: f64,
    pool: PrunePool,
) -> Result<Mask> {
    check_fraction(fraction)?;
    current.check_len(net.num_params())?;
    let candidates = pool.candidates(net);
    let mut surviving: Vec<usize> = (0..net.num_params())
        .filter(|&j| candidates[j] && current.get(j))
        .collect();
    if surviving.is_empty() {
        return Err(Error::Pruning("no surviving weights to prune".into()));
    }
    let count = prune_count(surviving.len(), fraction);
    // stable sort keeps index order among equal magnitudes
    surviving.sort_by(|&a, &b| net.weights[a].abs().total_cmp(&net.weights[b].abs()));
    let mut next = current.clone();
    for &j in &surviving[..count] {
        next.set(j, false);
    }
    Ok(next)
}

/// Mask sequence of iterative pruning: `m_0` is all ones and
/// `m_{j+1} = prune(weights[j], m_j, f)`, where `weights[j]` are the trained
/// weights at the end of iteration `j`.
pub fn iterative_mask_sequence(
    net: &Network,
    trained_weights: &[Vec<f32>],
    fraction: f64,
    pool: PrunePool,
) -> Result<Vec<Mask>> {
    let mut masks = vec![Mask::ones(net.num_params())];
    for weights in trained_weights {
        let snapshot = net.with_weights(weights.clone())?;
        let next = global_magnitude_prune(&snapshot, masks.last().unwrap(), fraction, pool)?;
        masks.push(next);
    }
    Ok(masks)
}

/// Per-layer target densities `p_i` for structured pruning, extrapolated to
/// higher sparsity as `p_i^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredRates {
    /// Layer index to density `p_i ∈ (0, 1]`.
    pub per_layer: BTreeMap<usize, f64>,
    pub exponent: u32,
}

impl StructuredRates {
    pub fn effective_density(&self, layer: usize) -> Option<f64> {
        self.per_layer.get(&layer).map(|p| p.powi(self.exponent as i32))
    }

    fn validate(&self, net: &Network) -> Result<()> {
        if self.exponent == 0 {
            return Err(Error::Config("structured exponent must be >= 1".into()));
        }
        for (&layer, &p) in &self.per_layer {
            match net.layers().get(layer) {
                Some(LayerSpec::Conv2d { .. }) => {}
                Some(other) => {
                    return Err(Error::Config(format!(
                        "structured rate given for layer {layer} ({}), only conv2d layers can be filter-pruned",
                        other.kind()
                    )))
                }
                None => {
                    return Err(Error::Config(format!(
                        "structured rate given for missing layer {layer}"
                    )))
                }
            }
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!(
                    "density for layer {layer} must lie in (0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// L1 norm of each output filter's kernel slice (bias excluded).
pub fn filter_l1_norms(net: &Network, layer: usize) -> Option<Vec<f32>> {
    let LayerSpec::Conv2d { out_channels, .. } = net.layers()[layer] else {
        return None;
    };
    let r = net.param_range(layer)?;
    let per_filter = r.kernel.len() / out_channels;
    Some(
        net.weights[r.kernel.clone()]
            .chunks(per_filter)
            .map(|f| f.iter().fold(0.0f32, |acc, w| acc + w.abs()))
            .collect(),
    )
}

/// Number of filters kept at density `p` (at least one).
pub fn kept_filter_count(out_channels: usize, density: f64) -> usize {
    ((density * out_channels as f64 - COUNT_EPS).ceil() as usize).clamp(1, out_channels)
}

/// Filter pruning by L1 norm. For every rated conv layer the
/// `⌈p_i^k · out_channels⌉` filters of largest norm survive (ties keep the
/// lower channel index). Pruned filters lose their kernel slice and bias, and
/// the matching input-channel slices of the next conv or dense layer are
/// zeroed too.
pub fn structured_filter_prune(net: &Network, rates: &StructuredRates) -> Result<Mask> {
    rates.validate(net)?;
    let mut mask = Mask::ones(net.num_params());
    for &layer in rates.per_layer.keys() {
        let kept = kept_filters(net, rates, layer);
        let LayerSpec::Conv2d { out_channels, .. } = net.layers()[layer] else {
            unreachable!("validated")
        };
        let r = net.param_range(layer).unwrap();
        let per_filter = r.kernel.len() / out_channels;
        for o in (0..out_channels).filter(|o| !kept[*o]) {
            for j in r.kernel.start + o * per_filter..r.kernel.start + (o + 1) * per_filter {
                mask.set(j, false);
            }
            if !r.bias.is_empty() {
                mask.set(r.bias.start + o, false);
            }
        }
        if let Some(next) = net.next_parametric(layer) {
            for j in input_slice_positions(net, layer, next, &kept) {
                mask.set(j, false);
            }
        }
    }
    Ok(mask)
}

fn kept_filters(net: &Network, rates: &StructuredRates, layer: usize) -> Vec<bool> {
    let norms = filter_l1_norms(net, layer).expect("conv layer");
    let keep = kept_filter_count(norms.len(), rates.effective_density(layer).unwrap());
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut kept = vec![false; norms.len()];
    for &o in &order[..keep] {
        kept[o] = true;
    }
    kept
}

/// Flat positions in `next` that read from the dropped output channels of `layer`.
fn input_slice_positions(net: &Network, layer: usize, next: usize, kept: &[bool]) -> Vec<usize> {
    let r = net.param_range(next).unwrap();
    let channels = kept.len();
    let mut out = Vec::new();
    match net.layers()[next] {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => {
            let k = kernel_h * kernel_w;
            for o in 0..out_channels {
                for c in (0..in_channels).filter(|c| !kept[*c]) {
                    let base = r.kernel.start + (o * in_channels + c) * k;
                    out.extend(base..base + k);
                }
            }
        }
        LayerSpec::Dense {
            in_features,
            out_features,
            ..
        } => {
            // flattened [c, h, w]: each channel owns a contiguous block
            let block = in_features / channels;
            debug_assert_eq!(block * channels, in_features, "layer {layer} feeds {next}");
            for o in 0..out_features {
                for c in (0..channels).filter(|c| !kept[*c]) {
                    let base = r.kernel.start + o * in_features + c * block;
                    out.extend(base..base + block);
                }
            }
        }
        _ => unreachable!("parametric layer"),
    }
    out
}

/// Physically removes the filters a structured mask pruned, returning the
/// smaller network with the surviving weights. A filter counts as pruned
/// when its whole kernel slice is masked.
pub fn compact_structured(net: &Network, mask: &Mask) -> Result<Network> {
    mask.check_len(net.num_params())?;
    let layers = net.layers();
    // kept output channels per conv layer
    let mut kept_out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, layer) in layers.iter().enumerate() {
        if let LayerSpec::Conv2d { out_channels, .. } = *layer {
            let r = net.param_range(i).unwrap();
            let per = r.kernel.len() / out_channels;
            let kept: Vec<usize> = (0..out_channels)
                .filter(|&o| (r.kernel.start + o * per..r.kernel.start + (o + 1) * per).any(|j| mask.get(j)))
                .collect();
            if kept.is_empty() {
                return Err(Error::Pruning(format!("layer {i} has no surviving filters")));
            }
            kept_out.insert(i, kept);
        }
    }

    let mut new_layers = Vec::with_capacity(layers.len());
    let mut new_weights = Vec::new();
    // channels kept by the most recent conv, for the next parametric layer
    let mut incoming: Option<&Vec<usize>> = None;
    let w = mask.masked(&net.weights);
    for (i, layer) in layers.iter().enumerate() {
        let Some(r) = net.param_range(i) else {
            new_layers.push(*layer);
            continue;
        };
        match *layer {
            LayerSpec::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                has_bias,
                ..
            } => {
                let in_keep: Vec<usize> = match incoming {
                    Some(ch) => ch.clone(),
                    None => (0..in_channels).collect(),
                };
                let out_keep = &kept_out[&i];
                let k = kernel_h * kernel_w;
                for &o in out_keep {
                    for &c in &in_keep {
                        let base = r.kernel.start + (o * in_channels + c) * k;
                        new_weights.extend_from_slice(&w[base..base + k]);
                    }
                }
                if has_bias {
                    new_weights.extend(out_keep.iter().map(|&o| w[r.bias.start + o]));
                }
                new_layers.push(LayerSpec::Conv2d {
                    in_channels: in_keep.len(),
                    out_channels: out_keep.len(),
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    has_bias,
                });
                incoming = Some(out_keep);
            }
            LayerSpec::Dense {
                in_features,
                out_features,
                has_bias,
            } => {
                let in_keep: Vec<usize> = match incoming {
                    Some(ch) => {
                        let channels = channel_count_before(net, i);
                        let block = in_features / channels;
                        ch.iter().flat_map(|&c| c * block..(c + 1) * block).collect()
                    }
                    None => (0..in_features).collect(),
                };
                for o in 0..out_features {
                    let row = r.kernel.start + o * in_features;
                    new_weights.extend(in_keep.iter().map(|&k| w[row + k]));
                }
                if has_bias {
                    new_weights.extend_from_slice(&w[r.bias.clone()]);
                }
                new_layers.push(LayerSpec::Dense {
                    in_features: in_keep.len(),
                    out_features,
                    has_bias,
                });
                incoming = None;
            }
            _ => unreachable!("parametric layer"),
        }
    }
    let mut compact = Network::zeros(net.input_shape().to_vec(), new_layers)?;
    compact.weights = new_weights;
    Ok(compact)
}

/// Channel count of the spatial tensor that was flattened before layer `i`.
fn channel_count_before(net: &Network, i: usize) -> usize {
    (0..i)
        .rev()
        .find_map(|j| match net.layers()[j] {
            LayerSpec::Flatten => Some(net.shape_before(j)[0]),
            _ => None,
        })
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{conv4, LayerSpec};
    use proptest::prelude::*;

    fn vector_net(weights: Vec<f32>) -> Network {
        let n = weights.len();
        let mut net = Network::zeros(vec![n], vec![LayerSpec::dense(n, 1, false)]).unwrap();
        net.weights = weights;
        net
    }

    #[test]
    fn prunes_two_smallest() {
        let net = vector_net(vec![0.5, -0.1, 0.3, -0.4]);
        let m = global_magnitude_prune(&net, &Mask::ones(4), 0.5, PrunePool::default()).unwrap();
        assert_eq!(m.bits(), &[true, false, false, true]);
    }

    #[test]
    fn ties_prune_lowest_index_first() {
        let net = vector_net(vec![0.2, 0.2, 0.2, 0.9]);
        let m = global_magnitude_prune(&net, &Mask::ones(4), 0.25, PrunePool::default()).unwrap();
        assert_eq!(m.bits(), &[false, true, true, true]);
    }

    #[test]
    fn rejects_bad_fraction_and_empty_pool() {
        let net = vector_net(vec![1.0, 2.0]);
        for f in [0.0, 1.0, -0.1, 1.5] {
            assert!(global_magnitude_prune(&net, &Mask::ones(2), f, PrunePool::default()).is_err());
        }
        assert!(global_magnitude_prune(&net, &Mask::zeros(2), 0.5, PrunePool::default()).is_err());
    }

    #[test]
    fn floor_counts() {
        assert_eq!(prune_count(100_000, 0.2), 20_000);
        assert_eq!(prune_count(8, 0.2), 1);
        assert_eq!(prune_count(100, 0.29), 29);
        assert_eq!(prune_count(3, 0.2), 0);
    }

    #[test]
    fn iterative_sequence_on_ten_weights() {
        let net = vector_net((1..=10).map(|v| v as f32).collect());
        let ws = vec![net.weights.clone(), net.weights.clone()];
        let masks = iterative_mask_sequence(&net, &ws, 0.2, PrunePool::default()).unwrap();
        let survivors: Vec<usize> = masks.iter().map(Mask::surviving).collect();
        assert_eq!(survivors, vec![10, 8, 7]);
        let none = iterative_mask_sequence(&net, &[], 0.2, PrunePool::default()).unwrap();
        assert_eq!(none, vec![Mask::ones(10)]);
    }

    #[test]
    fn bias_and_final_layer_exclusion() {
        let layers = vec![LayerSpec::dense(2, 2, true), LayerSpec::Relu, LayerSpec::dense(2, 2, true)];
        let net = Network::zeros(vec![2], layers).unwrap();
        let all = PrunePool::default().candidates(&net);
        assert!(all.iter().all(|&c| c));
        let no_bias = PrunePool { prune_biases: false, prune_final_layer: true }.candidates(&net);
        assert_eq!(no_bias, vec![true, true, true, true, false, false, true, true, true, true, false, false]);
        let no_final = PrunePool { prune_biases: true, prune_final_layer: false }.candidates(&net);
        assert_eq!(no_final.iter().filter(|&&c| c).count(), 6);
    }

    #[test]
    fn structured_density_extrapolation() {
        let rates = StructuredRates { per_layer: [(0, 0.9)].into(), exponent: 2 };
        assert!((rates.effective_density(0).unwrap() - 0.81).abs() < 1e-12);
        assert_eq!(kept_filter_count(100, 0.81), 81);
        assert_eq!(kept_filter_count(4, 0.5), 2);
        assert_eq!(kept_filter_count(3, 0.01), 1);
    }

    #[test]
    fn keeps_largest_l1_filters() {
        let layers = vec![
            LayerSpec::conv2d(1, 4, 1, 1, 0, true),
            LayerSpec::Flatten,
            LayerSpec::dense(4 * 2 * 2, 2, false),
        ];
        let mut net = Network::zeros(vec![1, 2, 2], layers).unwrap();
        net.weights[..4].copy_from_slice(&[3.0, -1.0, 4.0, -2.0]);
        let rates = StructuredRates { per_layer: [(0, 0.5)].into(), exponent: 1 };
        let m = structured_filter_prune(&net, &rates).unwrap();
        assert_eq!(&m.bits()[..4], &[true, false, true, false]);
        // biases of filters 1 and 3
        assert_eq!(&m.bits()[4..8], &[true, false, true, false]);
        // dense row 0 reads channel blocks of 4 features each
        let dense = &m.bits()[8..24];
        assert_eq!(&dense[..4], &[true; 4]);
        assert_eq!(&dense[4..8], &[false; 4]);
        assert_eq!(&dense[8..12], &[true; 4]);
        assert_eq!(&dense[12..16], &[false; 4]);
    }

    #[test]
    fn full_density_is_identity() {
        let net = Network::init(vec![1, 8, 8], conv4([1, 8, 8], (4, 6), 8, 3), 1).unwrap();
        let rates = StructuredRates { per_layer: [(0, 1.0), (2, 1.0)].into(), exponent: 3 };
        assert_eq!(structured_filter_prune(&net, &rates).unwrap(), Mask::ones(net.num_params()));
    }

    #[test]
    fn rate_on_dense_layer_is_config_error() {
        let net = Network::init(vec![1, 8, 8], conv4([1, 8, 8], (4, 6), 8, 3), 1).unwrap();
        let rates = StructuredRates { per_layer: [(6, 0.5)].into(), exponent: 1 };
        assert!(matches!(structured_filter_prune(&net, &rates), Err(Error::Config(_))));
    }

    #[test]
    fn compaction_shrinks_architecture() {
        let net = Network::init(vec![1, 8, 8], conv4([1, 8, 8], (4, 6), 8, 3), 1).unwrap();
        let rates = StructuredRates { per_layer: [(0, 0.5), (2, 0.5)].into(), exponent: 1 };
        let m = structured_filter_prune(&net, &rates).unwrap();
        let small = compact_structured(&net, &m).unwrap();
        assert_eq!(small.layers()[0], LayerSpec::conv2d(1, 2, 3, 1, 1, true));
        assert_eq!(small.layers()[2], LayerSpec::conv2d(2, 3, 3, 1, 1, true));
        assert_eq!(small.layers()[6], LayerSpec::dense(3 * 16, 8, true));
    }

    proptest! {
        #[test]
        fn agrees_with_full_sort(ws in proptest::collection::vec(-4i32..4, 2..50), f in 0.05f64..0.95) {
            let weights: Vec<f32> = ws.iter().map(|&v| v as f32 * 0.25).collect();
            let net = vector_net(weights.clone());
            let m = global_magnitude_prune(&net, &Mask::ones(weights.len()), f, PrunePool::default()).unwrap();
            // brute force: rank every position by (|w|, index)
            let mut keyed: Vec<(f32, usize)> = weights.iter().map(|w| w.abs()).zip(0..).collect();
            keyed.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = (f * weights.len() as f64 + 1e-9).floor() as usize;
            let mut expected = vec![true; weights.len()];
            for &(_, j) in &keyed[..k] { expected[j] = false; }
            prop_assert_eq!(m.bits(), expected.as_slice());
        }

        #[test]
        fn pruning_is_monotone(ws in proptest::collection::vec(-100i32..100, 5..60), rounds in 1usize..6) {
            let net = vector_net(ws.iter().map(|&v| v as f32).collect());
            let mut m = Mask::ones(ws.len());
            for _ in 0..rounds {
                let before = m.surviving();
                let next = global_magnitude_prune(&net, &m, 0.2, PrunePool::default()).unwrap();
                prop_assert!(next.is_subset_of(&m));
                prop_assert_eq!(before - next.surviving(), prune_count(before, 0.2));
                m = next;
            }
        }
    }
}
