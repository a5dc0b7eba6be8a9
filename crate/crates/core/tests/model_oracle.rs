mod common;

use common::*;
use proptest::prelude::*;
use prwd_core::layer::{conv4, mlp2, LayerSpec};
use prwd_core::model::{backward, evaluate, forward};
use prwd_core::{Batch, Mask, Network, Tensor};

fn batch_for(net: &Network, n: usize, seed: u64) -> Batch {
    let dim: usize = net.input_shape().iter().product();
    let mut shape = vec![n];
    shape.extend_from_slice(net.input_shape());
    let classes = net.num_classes();
    Batch::new(
        Tensor::new(shape, noise(n * dim, seed)).unwrap(),
        (0..n).map(|i| (i * 7 + seed as usize) % classes).collect(),
    )
    .unwrap()
}

fn nets() -> Vec<Network> {
    vec![
        Network::init(EVERY_KIND_INPUT.to_vec(), every_layer_kind(), 3).unwrap(),
        Network::init(vec![6], mlp2(6, 5, 3), 4).unwrap(),
        Network::init(vec![1, 6, 6], conv4([1, 6, 6], (2, 3), 4, 3), 5).unwrap(),
    ]
}

fn with_random_biases(mut net: Network, seed: u64) -> Network {
    // initial biases are zero; give them values so bias paths are exercised
    let ranges: Vec<_> = net.param_ranges().cloned().collect();
    let vals = noise(net.num_params(), seed);
    for r in ranges {
        for i in r.bias {
            net.weights[i] = 0.3 * vals[i];
        }
    }
    net
}

#[test]
fn forward_matches_f64_oracle() {
    for (k, net) in nets().into_iter().enumerate() {
        let net = with_random_biases(net, 10 + k as u64);
        let mask = random_mask(net.num_params(), 0.7, k as u64);
        let batch = batch_for(&net, 3, 20 + k as u64);
        let (logits, loss) = forward(&net, &mask, &batch).unwrap();
        let dim: usize = net.input_shape().iter().product();
        let classes = net.num_classes();
        let w = to_f64(&net.weights);
        let x = to_f64(batch.inputs.data());
        for s in 0..batch.len() {
            let mut m = 0;
            let expect = oracle_forward(&net, &w, &mask, &x[s * dim..(s + 1) * dim], &mut m);
            for c in 0..classes {
                let got = logits.data()[s * classes + c] as f64;
                assert!((got - expect[c]).abs() <= 1e-5 * (1.0 + expect[c].abs()), "net {k} example {s}: {got} vs {}", expect[c]);
            }
        }
        let expect_loss = oracle_loss(&net, &w, &mask, &x, &batch.labels);
        assert!((loss as f64 - expect_loss).abs() < 1e-5, "net {k}: loss {loss} vs {expect_loss}");
    }
}

#[test]
fn gradients_match_central_differences() {
    let h = 1e-4;
    for (k, net) in nets().into_iter().enumerate() {
        let net = with_random_biases(net, 30 + k as u64);
        let mask = random_mask(net.num_params(), 0.8, 40 + k as u64);
        let batch = batch_for(&net, 4, 50 + k as u64);
        let grad = backward(&net, &mask, &batch).unwrap();
        let dim: usize = net.input_shape().iter().product();
        let x = to_f64(batch.inputs.data());
        let base = to_f64(&net.weights);
        let kinks = |w: &[f64]| -> Vec<bool> {
            let mut signs = Vec::new();
            for s in 0..batch.len() {
                let mut pre = Vec::new();
                oracle_forward_traced(&net, w, &mask, &x[s * dim..(s + 1) * dim], &mut 0, &mut pre);
                signs.extend(pre.iter().map(|&v| v > 0.0));
            }
            signs
        };
        let (mut checked, mut skipped) = (0, 0);
        for i in 0..net.num_params() {
            if !mask.get(i) {
                assert_eq!(grad[i], 0.0, "net {k}: pruned position {i} has gradient");
                continue;
            }
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            if kinks(&plus) != kinks(&minus) {
                skipped += 1;
                continue;
            }
            let numeric = (oracle_loss(&net, &plus, &mask, &x, &batch.labels)
                - oracle_loss(&net, &minus, &mask, &x, &batch.labels))
                / (2.0 * h);
            let analytic = grad[i] as f64;
            let tol = 1e-6 + 1e-3 * numeric.abs().max(analytic.abs());
            assert!(
                (numeric - analytic).abs() <= tol,
                "net {k} param {i}: analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked > 10 * skipped.max(1) / 2, "net {k}: too many kink skips ({skipped} of {checked})");
    }
}

#[test]
fn evaluate_matches_per_example_oracle() {
    let net = with_random_biases(nets().remove(0), 60);
    let mask = random_mask(net.num_params(), 0.9, 61);
    let dim: usize = net.input_shape().iter().product();
    let n = 23;
    let batch = batch_for(&net, n, 62);
    let data = prwd_core::Dataset::new(batch.inputs.clone(), batch.labels.clone(), net.num_classes()).unwrap();
    let x = to_f64(batch.inputs.data());
    let mut correct = 0;
    for s in 0..n {
        let z = oracle_forward(&net, &to_f64(&net.weights), &mask, &x[s * dim..(s + 1) * dim], &mut 0);
        let mut order: Vec<usize> = (0..z.len()).collect();
        order.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
        assert!(z[order[0]] - z[order[1]] > 1e-6, "near tie makes the oracle ambiguous");
        if order[0] == batch.labels[s] {
            correct += 1;
        }
    }
    for size in [1, 4, 23, 100] {
        let acc = evaluate(&net, &mask, data.batches(size)).unwrap();
        assert_eq!(acc, correct as f64 / n as f64, "batch size {size}");
    }
    assert!(evaluate(&net, &mask, std::iter::empty()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mask_is_absorbed_into_weights(seed in 0u64..10_000, keep in 0.0f64..1.0, junk in -1e3f32..1e3) {
        let net = with_random_biases(nets().remove(seed as usize % 3), seed);
        let mask = random_mask(net.num_params(), keep, seed);
        let batch = batch_for(&net, 2, seed);
        let mut noisy = net.clone();
        for i in 0..net.num_params() {
            if !mask.get(i) {
                noisy.weights[i] = junk;
            }
        }
        let absorbed = net.with_weights(mask.masked(&net.weights)).unwrap();
        let ones = Mask::ones(net.num_params());
        let (a, la) = forward(&noisy, &mask, &batch).unwrap();
        let (b, lb) = forward(&absorbed, &ones, &batch).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(la.to_bits(), lb.to_bits());
    }
}

#[test]
fn shape_errors_are_reported() {
    let net = Network::init(vec![6], mlp2(6, 5, 3), 1).unwrap();
    let bad = Batch::new(Tensor::new(vec![2, 5], vec![0.0; 10]).unwrap(), vec![0, 1]).unwrap();
    assert!(forward(&net, &Mask::ones(net.num_params()), &bad).is_err());
    let short_mask = Mask::ones(net.num_params() - 1);
    let ok = batch_for(&net, 2, 1);
    assert!(forward(&net, &short_mask, &ok).is_err());
    assert!(Network::zeros(vec![6], vec![LayerSpec::dense(5, 3, true)]).is_err());
}
