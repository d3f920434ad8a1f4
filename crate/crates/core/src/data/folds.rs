use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Volume;
use crate::error::{Error, Result};
use crate::labels::Stratum;

#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub n_folds: usize,
    /// Validation fold of every scan, in dataset order.
    pub assignment: IndexMap<String, usize>,
    pub warnings: Vec<String>,
}

impl FoldPlan {
    pub fn fold_of(&self, scan_id: &str) -> Option<usize> {
        self.assignment.get(scan_id).copied()
    }

    /// Indices into `volumes` of the validation split of `fold`.
    pub fn val_indices(&self, volumes: &[Volume], fold: usize) -> Result<Vec<usize>> {
        self.split(volumes, |f| f == fold)
    }

    /// Indices into `volumes` of the training split of `fold`.
    pub fn train_indices(&self, volumes: &[Volume], fold: usize) -> Result<Vec<usize>> {
        self.split(volumes, |f| f != fold)
    }

    fn split(&self, volumes: &[Volume], keep: impl Fn(usize) -> bool) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for (i, v) in volumes.iter().enumerate() {
            let f = self
                .fold_of(&v.scan_id)
                .ok_or_else(|| Error::Invalid(format!("scan {} missing from fold plan", v.scan_id)))?;
            if keep(f) {
                out.push(i);
            }
        }
        Ok(out)
    }

    /// Per-stratum scan counts of every fold.
    pub fn stratum_sizes(&self, volumes: &[Volume]) -> BTreeMap<Stratum, Vec<usize>> {
        let mut out: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
        for v in volumes {
            if let Some(f) = self.fold_of(&v.scan_id) {
                out.entry(v.stratum()).or_insert_with(|| vec![0; self.n_folds])[f] += 1;
            }
        }
        out
    }

    /// `scan_id,fold` lines with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scan_id,fold\n");
        for (id, f) in &self.assignment {
            s.push_str(&format!("{id},{f}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut assignment = IndexMap::new();
        let mut n_folds = 0;
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (id, f) = line
                .split_once(',')
                .ok_or_else(|| Error::Invalid(format!("fold plan line {}: {line:?}", i + 1)))?;
            let f: usize = f
                .trim()
                .parse()
                .map_err(|e| Error::Invalid(format!("fold plan line {}: {e}", i + 1)))?;
            n_folds = n_folds.max(f + 1);
            assignment.insert(id.to_string(), f);
        }
        Ok(Self {
            n_folds,
            assignment,
            warnings: Vec::new(),
        })
    }
}

/// Shuffles each (class, gender) stratum with `seed` and deals it round-robin
/// into `n_folds` folds. Dealing continues across strata from where the
/// previous stratum stopped, which keeps overall fold sizes balanced too.
pub fn stratified_folds(volumes: &[Volume], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need >= 2 folds, got {n_folds}")));
    }
    let mut by_stratum: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
    for (i, v) in volumes.iter().enumerate() {
        by_stratum.entry(v.stratum()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; volumes.len()];
    let mut warnings = Vec::new();
    let mut next = 0;
    for (stratum, mut members) in by_stratum {
        members.sort_by(|&a, &b| volumes[a].scan_id.cmp(&volumes[b].scan_id));
        members.shuffle(&mut rng);
        if members.len() < n_folds {
            warnings.push(format!(
                "stratum {stratum} has {} scans for {n_folds} folds; some folds lack it",
                members.len()
            ));
        }
        for i in members {
            fold_of[i] = next;
            next = (next + 1) % n_folds;
        }
    }
    let mut assignment = IndexMap::with_capacity(volumes.len());
    for (v, f) in volumes.iter().zip(fold_of) {
        if assignment.insert(v.scan_id.clone(), f).is_some() {
            return Err(Error::Invalid(format!("duplicate scan id {}", v.scan_id)));
        }
    }
    Ok(FoldPlan {
        n_folds,
        assignment,
        warnings,
    })
}
