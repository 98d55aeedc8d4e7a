//! Random float parameters, for demos and tests when no trained weights exist.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::topology::{ConvDims, NetworkDef};
use crate::graph::weights::{ConvWeights, WeightStore};
use crate::reference::FloatLayerParams;

/// He-normal weights with small uniform biases, for one convolution.
pub fn random_conv(dims: &ConvDims, rng: &mut impl Rng) -> FloatLayerParams {
    let fan_in = (dims.kernel * dims.kernel * dims.in_channels).max(1);
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
    let mut p = FloatLayerParams::zeros(dims.out_channels, dims.in_channels, dims.kernel, dims.stride, dims.pad);
    for w in p.weights_mut() {
        *w = normal.sample(rng);
    }
    for b in p.bias_mut() {
        *b = rng.random_range(-0.05..0.05);
    }
    p
}

/// A float-only store for `net`, deterministic in `seed`.
pub fn random_float_store(net: &NetworkDef, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::empty_for(net);
    for layer in &mut store.layers {
        let units = layer.dims.conv_units();
        layer.units = units
            .iter()
            .map(|(_, d)| ConvWeights { float: Some(random_conv(d, &mut rng)), quant: None })
            .collect();
    }
    store
}
