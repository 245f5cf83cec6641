//! Fixtures shared by the criterion benchmarks.

use mfa_core::seed::{rng_for, sample_ball, xavier_head, Stream};
use mfa_core::{DiscreteModel, HeadCloud, Sample};

pub const D: usize = 4;
pub const K: usize = 2;

/// Uniform initial head law with `atoms` Xavier-uniform atoms.
pub fn pi(atoms: usize, seed: u64) -> HeadCloud {
    let mut rng = rng_for(seed, Stream::Pi, &[]);
    HeadCloud::uniform((0..atoms).map(|_| xavier_head(&mut rng, K, D)).collect()).expect("valid cloud")
}

pub fn model(layers: usize, heads: usize, seed: u64) -> DiscreteModel {
    let mut rng = rng_for(seed, Stream::Init, &[layers as u64, heads as u64]);
    DiscreteModel::from_pi(&pi(8, seed), layers, heads, 1.0, &mut rng).expect("valid model")
}

pub fn sample(tokens: usize, seed: u64) -> Sample {
    let mut rng = rng_for(seed, Stream::Data, &[]);
    let states = (0..tokens).flat_map(|_| sample_ball(&mut rng, D, 1.0)).collect();
    Sample::uniform(D, states, None).expect("valid sample")
}
