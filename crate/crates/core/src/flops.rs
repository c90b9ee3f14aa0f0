//! FLOP accounting.
//!
//! A forward pass costs one multiply and one add per unmasked weight per output
//! position. A training step is counted as three forward passes (the backward pass as
//! two). Nonlinearities, normalization, biases and the softmax are not counted.

use serde::{Deserialize, Serialize};

use crate::model::{GraphOp, MaskedNetwork};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Train,
}

pub const TRAIN_MULTIPLIER: f64 = 3.0;

fn positions<T: Scalar>(net: &MaskedNetwork<T>) -> Vec<usize> {
    let mut pos = vec![1; net.layers().len()];
    let shapes = net.step_shapes();
    for (step, op) in net.graph().iter().enumerate() {
        if let GraphOp::Conv { layer, .. } = *op {
            pos[layer] = shapes[step][0] * shapes[step][1];
        }
    }
    pos
}

/// Forward FLOPs per example of the masked network.
pub fn forward_flops<T: Scalar>(net: &MaskedNetwork<T>) -> f64 {
    positions(net)
        .iter()
        .zip(net.layers())
        .map(|(&p, l)| 2.0 * l.mask().nnz() as f64 * p as f64)
        .sum()
}

/// Forward FLOPs per example with every mask full.
pub fn dense_forward_flops<T: Scalar>(net: &MaskedNetwork<T>) -> f64 {
    positions(net)
        .iter()
        .zip(net.layers())
        .map(|(&p, l)| 2.0 * l.mask().len() as f64 * p as f64)
        .sum()
}

pub fn flops_estimate<T: Scalar>(net: &MaskedNetwork<T>, n_examples: usize, phase: Phase) -> f64 {
    let f = forward_flops(net) * n_examples as f64;
    match phase {
        Phase::Forward => f,
        Phase::Train => TRAIN_MULTIPLIER * f,
    }
}

/// Cumulative training cost against the cost of one extensive dense training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub cumulative: f64,
    pub normalizer: f64,
}

impl CostLedger {
    pub fn new(normalizer: f64) -> Self {
        Self {
            cumulative: 0.0,
            normalizer,
        }
    }

    pub fn add(&mut self, flops: f64) {
        if flops > 0.0 {
            self.cumulative += flops;
        }
    }

    pub fn relative(&self) -> f64 {
        if self.normalizer > 0.0 {
            self.cumulative / self.normalizer
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;

    #[test]
    fn masked_linear_four_to_three() {
        let mut net = MaskedNetwork::<f64>::from_arch(&ArchSpec::from_id("mlp-4-3").unwrap(), 0).unwrap();
        net.set_prunable(&[true]).unwrap();
        net.set_mask(0, (0..12).map(|i| i < 6).collect()).unwrap();
        assert_eq!(forward_flops(&net), 12.0);
        assert_eq!(flops_estimate(&net, 10, Phase::Train), 360.0);
    }

    #[test]
    fn masked_is_dense_times_density() {
        let mut net = MaskedNetwork::<f64>::from_arch(&ArchSpec::from_id("mlp-10-10").unwrap(), 0).unwrap();
        net.set_prunable(&[true]).unwrap();
        net.set_mask(0, (0..100).map(|i| i % 4 == 0).collect()).unwrap();
        assert_eq!(forward_flops(&net), dense_forward_flops(&net) * net.density());
    }

    #[test]
    fn conv_counts_output_positions() {
        let net = MaskedNetwork::<f32>::from_arch(&ArchSpec::from_id("resnet-8-w2-c2-i4x4x1").unwrap(), 0).unwrap();
        // conv1: 3*3*1*2 weights at 16 positions
        assert!(dense_forward_flops(&net) >= 2.0 * 18.0 * 16.0);
    }

    #[test]
    fn dense_training_is_one_by_construction() {
        let net = MaskedNetwork::<f64>::from_arch(&ArchSpec::from_id("mlp-8-8-2").unwrap(), 0).unwrap();
        let budget = flops_estimate(&net, 1000, Phase::Train);
        let mut ledger = CostLedger::new(budget);
        ledger.add(budget);
        assert_eq!(ledger.relative(), 1.0);
    }
}
