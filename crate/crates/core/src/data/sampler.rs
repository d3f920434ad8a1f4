use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::Volume;
use crate::error::{Error, Result};
use crate::labels::{Gender, Label, Stratum};

/// Per-stratum oversampling factor, indexed by [`Stratum::index`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Boost(pub [f64; 8]);

impl Default for Boost {
    /// 1 everywhere, 2 for (G, female).
    fn default() -> Self {
        Self::female_g(2.0)
    }
}

impl Boost {
    pub fn uniform() -> Self {
        Boost([1.0; 8])
    }

    pub fn female_g(factor: f64) -> Self {
        let mut b = [1.0; 8];
        b[Stratum::new(Label::G, Gender::Female).index()] = factor;
        Boost(b)
    }

    pub fn get(&self, s: Stratum) -> f64 {
        self.0[s.index()]
    }
}

/// Sampling weights aligned with the volume slice they were computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWeights {
    pub weights: Vec<f64>,
}

impl SampleWeights {
    /// Weights scaled to sum to 1.
    pub fn normalized(&self) -> Vec<f64> {
        let z: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / z).collect()
    }

    /// `n` draws with replacement, as positions into the weighted slice.
    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        let dist = WeightedIndex::new(&self.weights).expect("positive weights");
        (0..n).map(|_| dist.sample(rng)).collect()
    }
}

/// `weight(s) = boost(stratum(s)) / count(stratum(s))`, so every non-empty
/// stratum has draw probability proportional to its boost.
pub fn sampler_weights(volumes: &[&Volume], boost: &Boost) -> Result<SampleWeights> {
    if volumes.is_empty() {
        return Err(Error::Invalid("no volumes to weight".into()));
    }
    if boost.0.iter().any(|&b| !(b.is_finite() && b > 0.0)) {
        return Err(Error::Config(format!("boost factors must be > 0, got {:?}", boost.0)));
    }
    let mut counts = [0usize; 8];
    for v in volumes {
        counts[v.stratum().index()] += 1;
    }
    let weights = volumes
        .iter()
        .map(|v| {
            let s = v.stratum();
            boost.get(s) / counts[s.index()] as f64
        })
        .collect();
    Ok(SampleWeights { weights })
}
