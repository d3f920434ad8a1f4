//! Scans as bags of slice feature vectors: generation, capping, fold
//! planning, weighted sampling and the on-disk dataset format.

mod folds;
mod generator;
mod io;
mod sampler;

pub use folds::{stratified_folds, FoldPlan};
pub use generator::{generate, generate_with_directions, Directions, GeneratorConfig};
pub(crate) use io::csv_err;
pub use io::{read_dataset, read_features, write_dataset, write_features, FMIL_MAGIC, FMIL_VERSION, MANIFEST};
pub use sampler::{sampler_weights, Boost, SampleWeights};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::labels::{Gender, Label, Stratum};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub scan_id: String,
    /// `[n_slices, input_dim]`.
    pub features: Tensor,
    pub label: Label,
    pub gender: Gender,
}

impl Volume {
    pub fn n_slices(&self) -> usize {
        self.features.dims2().0
    }

    pub fn input_dim(&self) -> usize {
        self.features.dims2().1
    }

    pub fn stratum(&self) -> Stratum {
        Stratum::new(self.label, self.gender)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapMode {
    /// Uniform random subset without replacement, kept in slice order.
    Train,
    /// Evenly spaced indices `round(j (N - 1) / (M - 1))`.
    Infer,
}

/// Slice indices kept when capping `n` slices to `m`.
pub fn capped_indices(n: usize, m: usize, mode: CapMode, seed: u64) -> Vec<usize> {
    if n <= m {
        return (0..n).collect();
    }
    match mode {
        CapMode::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        CapMode::Infer if m == 1 => vec![0],
        CapMode::Infer => (0..m)
            .map(|j| ((j * (n - 1)) as f64 / (m - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Caps or zero-pads a scan to exactly `m` rows. The mask is true for rows
/// holding real slices.
pub fn cap_and_pad(v: &Volume, m: usize, mode: CapMode, seed: u64) -> (Tensor, Vec<bool>) {
    assert!(m >= 1, "slice cap must be >= 1");
    let (n, d) = v.features.dims2();
    let idx = capped_indices(n, m, mode, seed);
    let mut data = vec![0.0; m * d];
    for (row, &i) in idx.iter().enumerate() {
        data[row * d..(row + 1) * d].copy_from_slice(v.features.row(i));
    }
    let mut mask = vec![false; m];
    mask[..idx.len()].iter_mut().for_each(|b| *b = true);
    (Tensor::matrix(m, d, data).expect("m x d"), mask)
}

/// Reverses the feature order of every row. An involution standing in for a
/// horizontal image flip.
pub fn flip(features: &Tensor) -> Tensor {
    let (m, d) = features.dims2();
    let mut data = Vec::with_capacity(m * d);
    for i in 0..m {
        data.extend(features.row(i).iter().rev());
    }
    Tensor::new(features.shape(), data).expect("same shape")
}
