use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Volume;
use crate::error::{Error, Result};
use crate::kv::{self, KvDoc};
use crate::labels::{Gender, Label, Stratum};
use crate::tensor::Tensor;

/// Controls the synthetic scan surrogate. Every slice is isotropic noise
/// plus a gender offset `+-gender_strength * v`. Diseased scans carry
/// `signal_strength * u_c` on a few randomly chosen slices; healthy scans
/// carry `healthy_strength * u_healthy` on every slice.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub input_dim: usize,
    pub gender_strength: f64,
    pub signal_strength: f64,
    pub healthy_strength: f64,
    /// Inclusive range of signal-carrying slices in a diseased scan.
    pub signal_slices: (usize, usize),
    pub noise_sigma: f64,
    /// Scan count per stratum, indexed by [`Stratum::index`].
    pub subgroup_counts: [usize; 8],
    /// Inclusive range of slices per scan.
    pub slice_count: (usize, usize),
    pub seed: u64,
    /// Draw class directions from flip-invariant (palindromic) vectors so
    /// that reversing feature order keeps every label.
    pub flip_equivariant: bool,
}

fn counts(healthy: (usize, usize), covid: (usize, usize), a: (usize, usize), g: (usize, usize)) -> [usize; 8] {
    [healthy.0, healthy.1, covid.0, covid.1, a.0, a.1, g.0, g.1]
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            gender_strength: 0.5,
            signal_strength: 5.0,
            healthy_strength: 0.5,
            signal_slices: (2, 6),
            noise_sigma: 1.0,
            subgroup_counts: counts((95, 95), (95, 95), (110, 100), (91, 18)),
            slice_count: (8, 32),
            seed: 0,
            flip_equivariant: true,
        }
    }
}

impl GeneratorConfig {
    /// Only a handful of signal slices in long bags.
    pub fn sparse_signal() -> Self {
        Self {
            signal_slices: (1, 3),
            slice_count: (24, 48),
            ..Self::default()
        }
    }

    /// Strong gender offset, so that scan embeddings carry gender unless it is
    /// actively removed.
    pub fn gender_shortcut() -> Self {
        Self {
            gender_strength: 1.5,
            ..Self::default()
        }
    }

    pub fn count(&self, s: Stratum) -> usize {
        self.subgroup_counts[s.index()]
    }

    pub fn set_count(&mut self, s: Stratum, n: usize) {
        self.subgroup_counts[s.index()] = n;
    }

    pub fn total(&self) -> usize {
        self.subgroup_counts.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let min_dim = if self.flip_equivariant { 7 } else { 5 };
        if self.input_dim < min_dim {
            return Err(Error::Config(format!(
                "input_dim must be >= {min_dim} to hold 5 orthogonal directions{}",
                if self.flip_equivariant { " with 4 palindromic" } else { "" }
            )));
        }
        let (lo, hi) = self.slice_count;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("slice_count range {lo}..={hi} is invalid")));
        }
        let (klo, khi) = self.signal_slices;
        if klo == 0 || klo > khi {
            return Err(Error::Config(format!("signal_slices range {klo}..={khi} is invalid")));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("gender_strength", self.gender_strength),
            ("signal_strength", self.signal_strength),
            ("healthy_strength", self.healthy_strength),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Strata with fewer scans than folds; some validation folds will miss them.
    pub fn warnings(&self, n_folds: usize) -> Vec<String> {
        Stratum::all()
            .filter(|&s| self.count(s) > 0 && self.count(s) < n_folds)
            .map(|s| format!("stratum {s} has {} scans for {n_folds} folds", self.count(s)))
            .collect()
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("input_dim", self.input_dim);
        doc.set("gender_strength", self.gender_strength);
        doc.set("signal_strength", self.signal_strength);
        doc.set("healthy_strength", self.healthy_strength);
        doc.set("signal_slices", kv::join(&[self.signal_slices.0, self.signal_slices.1]));
        doc.set("noise_sigma", self.noise_sigma);
        for s in Stratum::all() {
            doc.set(&format!("count_{}", s.key()), self.count(s));
        }
        doc.set("slice_count", kv::join(&[self.slice_count.0, self.slice_count.1]));
        doc.set("seed", self.seed);
        doc.set("flip_equivariant", self.flip_equivariant);
    }

    pub fn take_kv(&mut self, doc: &mut KvDoc) -> Result<()> {
        doc.take_into("input_dim", &mut self.input_dim)?;
        doc.take_into("gender_strength", &mut self.gender_strength)?;
        doc.take_into("signal_strength", &mut self.signal_strength)?;
        doc.take_into("healthy_strength", &mut self.healthy_strength)?;
        if let Some(v) = doc.take_str("signal_slices") {
            self.signal_slices = pair("signal_slices", &v)?;
        }
        doc.take_into("noise_sigma", &mut self.noise_sigma)?;
        for s in Stratum::all() {
            doc.take_into(&format!("count_{}", s.key()), &mut self.subgroup_counts[s.index()])?;
        }
        if let Some(v) = doc.take_str("slice_count") {
            self.slice_count = pair("slice_count", &v)?;
        }
        doc.take_into("seed", &mut self.seed)?;
        doc.take_into("flip_equivariant", &mut self.flip_equivariant)?;
        Ok(())
    }
}

fn pair(key: &str, v: &str) -> Result<(usize, usize)> {
    match kv::split::<usize>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{key} needs two comma-separated values, got {v:?}"))),
    }
}

/// Unit class directions (indexed by label) and the unit gender direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Directions {
    pub class: [Vec<f64>; 4],
    pub gender: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    for _ in 0..2 {
        for u in basis {
            let p = dot(v, u);
            v.iter_mut().zip(u).for_each(|(x, ui)| *x -= p * ui);
        }
    }
    let n = dot(v, v).sqrt();
    if n < 1e-8 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

impl Directions {
    /// Gram-Schmidt on seeded Gaussian draws. Palindromic class directions
    /// when `flip_equivariant`.
    pub fn sample(dim: usize, flip_equivariant: bool, rng: &mut impl Rng) -> Self {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(5);
        while basis.len() < 5 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if flip_equivariant && basis.len() < 4 {
                for i in 0..dim / 2 {
                    v[dim - 1 - i] = v[i];
                }
            }
            if orthonormalize(&mut v, &basis) {
                basis.push(v);
            }
        }
        let gender = basis.pop().expect("five directions");
        let class: [Vec<f64>; 4] = basis.try_into().expect("four class directions");
        Self { class, gender }
    }
}

/// Draws the dataset. Scans are produced stratum by stratum in
/// [`Stratum::all`] order; everything is a function of `cfg.seed`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<Volume>> {
    Ok(generate_with_directions(cfg)?.0)
}

pub fn generate_with_directions(cfg: &GeneratorConfig) -> Result<(Vec<Volume>, Directions)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dirs = Directions::sample(cfg.input_dim, cfg.flip_equivariant, &mut rng);
    let mut out = Vec::with_capacity(cfg.total());
    for s in Stratum::all() {
        for _ in 0..cfg.count(s) {
            let id = format!("scan_{:05}", out.len());
            out.push(draw_scan(cfg, &dirs, s, id, &mut rng));
        }
    }
    Ok((out, dirs))
}

fn draw_scan(cfg: &GeneratorConfig, dirs: &Directions, s: Stratum, scan_id: String, rng: &mut impl Rng) -> Volume {
    let d = cfg.input_dim;
    let n = rng.random_range(cfg.slice_count.0..=cfg.slice_count.1);
    let sign = match s.gender {
        Gender::Male => 1.0,
        Gender::Female => -1.0,
    };
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(cfg.noise_sigma * noise + sign * cfg.gender_strength * dirs.gender[j]);
        }
    }
    let u = &dirs.class[s.label.index()];
    let (strength, rows): (f64, Vec<usize>) = if s.label == Label::Healthy {
        (cfg.healthy_strength, (0..n).collect())
    } else {
        let k = rng.random_range(cfg.signal_slices.0..=cfg.signal_slices.1).min(n);
        let mut rows = sample(rng, n, k).into_vec();
        rows.sort_unstable();
        (cfg.signal_strength, rows)
    };
    for i in rows {
        for j in 0..d {
            data[i * d + j] += strength * u[j];
        }
    }
    Volume {
        scan_id,
        features: Tensor::matrix(n, d, data).expect("n x d"),
        label: s.label,
        gender: s.gender,
    }
}
