//! Datasets, evaluation, reference networks and the bit-width grid runner.

mod dataset;
mod grid;
pub mod synthetic;

pub use dataset::{
    encode_idx_images, encode_idx_labels, load_dataset, parse_idx_images, parse_idx_labels,
    read_idx_pair, DataSplit, Dataset, DatasetSpec,
};
pub use grid::{derive_seed, run_grid, Cell, Experiment, GridReport, GridSpec, NetworkRef, RunConfig};

use crate::error::{Error, Result};
use crate::qforward::{forward_quantized, quantize_weights, PrecisionAssignment};
use crate::tensornet::{LayerSpec, NetworkSpec, Parameters, Shape};

const EVAL_BATCH: usize = 256;

/// Number of rows whose label is not among the `k` largest logits. Ties
/// rank the lower class index first.
pub fn topk_misses(logits: &[f64], labels: &[usize], classes: usize, k: usize) -> usize {
    logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &label)| {
            let target = row[label];
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(j, &z)| z > target || (z == target && j < label))
                .count();
            ahead >= k
        })
        .count()
}

/// Top-k error rate in percent under `assign`.
pub fn evaluate_topk(
    net: &NetworkSpec,
    params: &Parameters,
    assign: &PrecisionAssignment,
    data: &Dataset,
    k: usize,
) -> Result<f64> {
    let classes = net.num_classes();
    if k == 0 || (classes > 1 && k >= classes) {
        return Err(Error::Config(format!(
            "top-k needs 1 <= k < {classes}, got {k}"
        )));
    }
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    let view = quantize_weights(params, assign)?;
    let mut misses = 0;
    for batch in data.batches(EVAL_BATCH) {
        let pass = forward_quantized(net, &view, assign, &batch)?;
        misses += topk_misses(&pass.logits, &batch.labels, classes, k);
    }
    Ok(100.0 * misses as f64 / data.len() as f64)
}

/// Reference desk-scale networks.
///
/// * `desk8`: six 3x3 convolutions (two max-pools) and two fully-connected
///   layers;
/// * `desk6`: four 3x3 convolutions (two max-pools) and two fully-connected
///   layers.
pub fn preset_network(name: &str, input: Shape, classes: usize) -> Result<NetworkSpec> {
    let c = input.channels;
    let pooled = |ch: usize| ch * (input.height / 4) * (input.width / 4);
    let layers = match name {
        "desk8" => vec![
            LayerSpec::conv("conv1", c, 8, 3),
            LayerSpec::conv("conv2", 8, 8, 3).with_pool(),
            LayerSpec::conv("conv3", 8, 16, 3),
            LayerSpec::conv("conv4", 16, 16, 3).with_pool(),
            LayerSpec::conv("conv5", 16, 16, 3),
            LayerSpec::conv("conv6", 16, 16, 3),
            LayerSpec::fc("fc1", pooled(16), 32),
            LayerSpec::fc("fc2", 32, classes).with_relu(false),
        ],
        "desk6" => vec![
            LayerSpec::conv("conv1", c, 8, 3),
            LayerSpec::conv("conv2", 8, 8, 3).with_pool(),
            LayerSpec::conv("conv3", 8, 16, 3),
            LayerSpec::conv("conv4", 16, 16, 3).with_pool(),
            LayerSpec::fc("fc1", pooled(16), 32),
            LayerSpec::fc("fc2", 32, classes).with_relu(false),
        ],
        other => return Err(Error::Config(format!("unknown network preset {other:?}"))),
    };
    NetworkSpec::new(input, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strict_winner_is_correct_at_k1() {
        assert_eq!(topk_misses(&[0.1, 0.9, 0.3], &[1], 3, 1), 0);
        assert_eq!(topk_misses(&[0.1, 0.9, 0.3], &[2], 3, 1), 1);
        assert_eq!(topk_misses(&[0.1, 0.9, 0.3], &[2], 3, 2), 0);
    }

    #[test]
    fn ties_favour_lower_index() {
        assert_eq!(topk_misses(&[0.5, 0.5], &[0], 2, 1), 0);
        assert_eq!(topk_misses(&[0.5, 0.5], &[1], 2, 1), 1);
    }

    #[test]
    fn k_is_classes_minus_one_misses_only_strict_minimum() {
        // brute force over all permutations of 4 distinct logits
        let vals = [0.1, 0.7, -0.3, 2.0];
        let mut perms = vec![];
        fn permute(v: &mut Vec<f64>, i: usize, out: &mut Vec<Vec<f64>>) {
            if i == v.len() {
                out.push(v.clone());
                return;
            }
            for j in i..v.len() {
                v.swap(i, j);
                permute(v, i + 1, out);
                v.swap(i, j);
            }
        }
        permute(&mut vals.to_vec(), 0, &mut perms);
        for p in &perms {
            for label in 0..4 {
                let is_min = p.iter().all(|&z| z >= p[label]);
                assert_eq!(topk_misses(p, &[label], 4, 3), usize::from(is_min));
            }
        }
    }

    #[test]
    fn uniform_random_logits_give_ninety_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let logits: Vec<f64> = (0..n * 10).map(|_| rng.gen()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let err = 100.0 * topk_misses(&logits, &labels, 10, 1) as f64 / n as f64;
        assert!((err - 90.0).abs() <= 3.0, "{err}");
    }

    #[test]
    fn presets_are_well_formed() {
        let net = preset_network("desk8", Shape::new(1, 12, 12), 10).unwrap();
        assert_eq!(net.num_layers(), 8);
        assert_eq!(net.num_classes(), 10);
        let net = preset_network("desk6", Shape::new(1, 28, 28), 10).unwrap();
        assert_eq!(net.num_layers(), 6);
        assert!(preset_network("resnet", Shape::new(1, 8, 8), 10).is_err());
    }

    #[test]
    fn invalid_k_is_rejected() {
        let net = preset_network("desk6", Shape::new(1, 8, 8), 4).unwrap();
        let params = Parameters::zeros(&net).unwrap();
        let data = synthetic::generate(&synthetic::SyntheticSpec {
            classes: 4,
            samples: 8,
            size: 8,
            ..Default::default()
        });
        let assign = PrecisionAssignment::float(6);
        assert!(evaluate_topk(&net, &params, &assign, &data, 0).is_err());
        assert!(evaluate_topk(&net, &params, &assign, &data, 4).is_err());
        // zero logits tie everywhere: class 0 always wins
        let err = evaluate_topk(&net, &params, &assign, &data, 1).unwrap();
        assert_eq!(err, 75.0);
    }
}
