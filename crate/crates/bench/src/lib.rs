// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixtures shared by the benchmarks.

use gem_core::store::ActivationSet;
use gem_core::synthetic::{generate_synthetic, SyntheticSpec};

/// A planted activation set of the given size with a mid-depth rotation zone.
pub fn planted_set(n_layers: usize, n_pairs: usize, hidden_dim: usize) -> ActivationSet {
    let mut spec = SyntheticSpec::simple(n_layers, n_layers / 4, n_layers / 2, 30.0, 7);
    spec.n_pairs = n_pairs;
    spec.hidden_dim = hidden_dim;
    spec.separation_profile = vec![4.0; n_layers];
    spec.noise_scale = 0.2;
    generate_synthetic(&spec).expect("valid benchmark spec").0
}
