//! Fold ensembling with flip test-time augmentation, out-of-fold scoring,
//! per-class threshold search and the thresholded decision rule.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{cap_and_pad, csv_err, flip, CapMode, FoldPlan, Volume};
use crate::error::{Error, FormatError, Result};
use crate::kv::KvDoc;
use crate::labels::{Gender, Label, N_CLASSES};
use crate::metrics::{competition_score, f1_from_counts, EvalReport};
use crate::trainer::argmax;

pub type Logits = [f64; N_CLASSES];

pub fn softmax(z: &Logits) -> [f64; N_CLASSES] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: [f64; N_CLASSES] = std::array::from_fn(|i| (z[i] - m).exp());
    let s: f64 = e.iter().sum();
    std::array::from_fn(|i| e[i] / s)
}

/// Logits of one fold model on the plain and flipped views of a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldViews {
    pub fold: usize,
    pub plain: Logits,
    pub flipped: Logits,
}

fn sorted_by_fold(checkpoints: &[Checkpoint]) -> Result<Vec<&Checkpoint>> {
    if checkpoints.is_empty() {
        return Err(Error::Invalid("no checkpoints to ensemble".into()));
    }
    let mut v: Vec<&Checkpoint> = checkpoints.iter().collect();
    v.sort_by_key(|c| c.fold);
    Ok(v)
}

fn fold_logits(volume: &Volume, c: &Checkpoint, with_flip: bool) -> Result<(Logits, Logits)> {
    let cfg = &c.model.config;
    if volume.input_dim() != cfg.input_dim {
        return Err(Error::Config(format!(
            "fold {} checkpoint expects input_dim {}, scan {} has {}",
            c.fold,
            cfg.input_dim,
            volume.scan_id,
            volume.input_dim()
        )));
    }
    let (x, mask) = cap_and_pad(volume, cfg.max_slices, CapMode::Infer, 0);
    let plain = c.model.forward(&x, &mask)?.disease_logits;
    let flipped = if with_flip {
        c.model.forward(&flip(&x), &mask)?.disease_logits
    } else {
        [f64::NAN; N_CLASSES]
    };
    Ok((plain, flipped))
}

/// Per-fold logits of both views, in fold order.
pub fn predict_views(volume: &Volume, checkpoints: &[Checkpoint]) -> Result<Vec<FoldViews>> {
    sorted_by_fold(checkpoints)?
        .into_iter()
        .map(|c| {
            let (plain, flipped) = fold_logits(volume, c, true)?;
            Ok(FoldViews {
                fold: c.fold,
                plain,
                flipped,
            })
        })
        .collect()
}

/// Averages per-fold views: `(1/2F) sum_f [z_f(x) + z_f(flip x)]` with TTA,
/// `(1/F) sum_f z_f(x)` without. Summation runs in fold order.
pub fn combine_views(views: &[FoldViews], tta: bool) -> Logits {
    let mut sum = [0.0; N_CLASSES];
    for v in views {
        for (c, s) in sum.iter_mut().enumerate() {
            *s += v.plain[c];
            if tta {
                *s += v.flipped[c];
            }
        }
    }
    let n = if tta { 2 * views.len() } else { views.len() } as f64;
    sum.map(|s| s / n)
}

/// Ensemble logits of one scan.
pub fn predict_scan(volume: &Volume, checkpoints: &[Checkpoint], tta: bool) -> Result<Logits> {
    let views = sorted_by_fold(checkpoints)?
        .into_iter()
        .map(|c| {
            let (plain, flipped) = fold_logits(volume, c, tta)?;
            Ok(FoldViews {
                fold: c.fold,
                plain,
                flipped,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine_views(&views, tta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OofRow {
    pub scan_id: String,
    pub p_healthy: f64,
    pub p_covid: f64,
    pub p_a: f64,
    pub p_g: f64,
    pub truth: Label,
    pub gender: Gender,
    pub fold: usize,
}

impl OofRow {
    pub fn probs(&self) -> [f64; N_CLASSES] {
        [self.p_healthy, self.p_covid, self.p_a, self.p_g]
    }
}

/// Out-of-fold probabilities, one row per scan in dataset order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OofTable {
    pub rows: Vec<OofRow>,
}

impl OofTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<OofRow>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self { rows })
    }
}

/// Scores every scan with the checkpoint of its own validation fold.
pub fn oof_predictions(
    volumes: &[Volume],
    plan: &FoldPlan,
    checkpoints: &[Checkpoint],
    tta: bool,
) -> Result<OofTable> {
    let mut by_fold: Vec<Option<&Checkpoint>> = vec![None; plan.n_folds];
    for c in checkpoints {
        if c.fold >= plan.n_folds {
            return Err(Error::Invalid(format!("checkpoint for fold {} beyond plan", c.fold)));
        }
        by_fold[c.fold] = Some(c);
    }
    if let Some(f) = by_fold.iter().position(Option::is_none) {
        return Err(Error::Invalid(format!("missing checkpoint for fold {f}")));
    }
    let rows = volumes
        .par_iter()
        .map(|v| {
            let fold = plan
                .fold_of(&v.scan_id)
                .ok_or_else(|| Error::Invalid(format!("scan {} missing from fold plan", v.scan_id)))?;
            let ck = std::slice::from_ref(by_fold[fold].expect("checked"));
            let p = softmax(&predict_scan(v, ck, tta)?);
            Ok(OofRow {
                scan_id: v.scan_id.clone(),
                p_healthy: p[0],
                p_covid: p[1],
                p_a: p[2],
                p_g: p[3],
                truth: v.label,
                gender: v.gender,
                fold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OofTable { rows })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lo: 0.05,
            hi: 0.95,
            step: 0.01,
        }
    }
}

impl Grid {
    /// Ascending grid points from `lo` to `hi` inclusive, rounded to 1e-9
    /// so decimal steps land on clean values.
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.step > 0.0 && self.hi >= self.lo) {
            return Err(Error::Config(format!(
                "threshold grid needs step > 0 and lo <= hi, got {self:?}"
            )));
        }
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n)
            .map(|i| ((self.lo + i as f64 * self.step) * 1e9).round() / 1e9)
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdSource {
    Oof,
    Validation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSet {
    pub t: [f64; N_CLASSES],
    pub grid: Grid,
    pub source: ThresholdSource,
    /// Binary F1 reached at each threshold on the tuning table.
    pub achieved_f1: [f64; N_CLASSES],
}

/// Binary F1 of `p >= t` against `positive`.
pub fn binary_f1(p: &[f64], positive: &[bool], t: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&pi, &y) in p.iter().zip(positive) {
        match (pi >= t, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    f1_from_counts(tp, fp, fn_)
}

/// Per class, the grid point maximizing binary F1; ties go to the smallest.
pub fn optimize_thresholds(table: &OofTable, grid: Grid, source: ThresholdSource) -> Result<ThresholdSet> {
    if table.rows.is_empty() {
        return Err(Error::Invalid("empty OOF table".into()));
    }
    let points = grid.points()?;
    let mut t = [0.0; N_CLASSES];
    let mut achieved_f1 = [0.0; N_CLASSES];
    for c in 0..N_CLASSES {
        let p: Vec<f64> = table.rows.iter().map(|r| r.probs()[c]).collect();
        let y: Vec<bool> = table.rows.iter().map(|r| r.truth.index() == c).collect();
        let mut best = (points[0], binary_f1(&p, &y, points[0]));
        for &tc in &points[1..] {
            let f = binary_f1(&p, &y, tc);
            if f > best.1 {
                best = (tc, f);
            }
        }
        (t[c], achieved_f1[c]) = best;
    }
    Ok(ThresholdSet {
        t,
        grid,
        source,
        achieved_f1,
    })
}

impl ThresholdSet {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        for l in Label::ALL {
            doc.set(&format!("threshold.{}", l.key()), self.t[l.index()]);
        }
        for l in Label::ALL {
            doc.set(&format!("achieved_f1.{}", l.key()), self.achieved_f1[l.index()]);
        }
        doc.set("grid.lo", self.grid.lo);
        doc.set("grid.hi", self.grid.hi);
        doc.set("grid.step", self.grid.step);
        doc.set(
            "source",
            match self.source {
                ThresholdSource::Oof => "oof",
                ThresholdSource::Validation => "validation",
            },
        );
        doc
    }

    pub fn from_kv(mut doc: KvDoc, path: &Path) -> Result<Self> {
        let mut take = |key: &str| -> Result<f64> {
            let mut v = f64::NAN;
            doc.take_into(key, &mut v)?;
            if v.is_nan() {
                return Err(FormatError::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("missing key {key}"),
                }
                .into());
            }
            Ok(v)
        };
        let mut t = [0.0; N_CLASSES];
        let mut achieved_f1 = [0.0; N_CLASSES];
        for l in Label::ALL {
            t[l.index()] = take(&format!("threshold.{}", l.key()))?;
        }
        for l in Label::ALL {
            achieved_f1[l.index()] = take(&format!("achieved_f1.{}", l.key()))?;
        }
        let grid = Grid {
            lo: take("grid.lo")?,
            hi: take("grid.hi")?,
            step: take("grid.step")?,
        };
        let source = match doc.take_str("source").as_deref() {
            Some("oof") => ThresholdSource::Oof,
            Some("validation") => ThresholdSource::Validation,
            other => return Err(Error::Config(format!("source: expected oof|validation, got {other:?}"))),
        };
        doc.expect_consumed()?;
        let set = Self {
            t,
            grid,
            source,
            achieved_f1,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for (c, &tc) in self.t.iter().enumerate() {
            if !(self.grid.lo..=self.grid.hi).contains(&tc) {
                return Err(Error::Config(format!(
                    "threshold {tc} of class {c} outside grid [{}, {}]",
                    self.grid.lo, self.grid.hi
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KvDoc::read(path)?, path)
    }
}

/// Most probable class among those clearing their threshold, or plain argmax
/// when none does. Ties go to the lowest class index.
pub fn decide(p: &[f64; N_CLASSES], thresholds: &[f64; N_CLASSES]) -> Result<Label> {
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "decide" });
    }
    let mut best: Option<usize> = None;
    for c in 0..N_CLASSES {
        if p[c] >= thresholds[c] && best.is_none_or(|b| p[c] > p[b]) {
            best = Some(c);
        }
    }
    Ok(Label::ALL[best.unwrap_or_else(|| argmax(p))])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scan_id: String,
    pub p_healthy: f64,
    pub p_covid: f64,
    pub p_a: f64,
    pub p_g: f64,
    pub pred_label: Label,
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for p in preds {
        w.serialize(p).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<Prediction>, _>>()
        .map_err(|e| csv_err(path, e))
}

/// Ensemble, softmax, decide and score a set of scans.
pub fn evaluate_pipeline(
    volumes: &[&Volume],
    checkpoints: &[Checkpoint],
    thresholds: Option<&ThresholdSet>,
    tta: bool,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let t = thresholds.map_or([0.0; N_CLASSES], |s| s.t);
    let preds = volumes
        .par_iter()
        .map(|v| {
            let p = softmax(&predict_scan(v, checkpoints, tta)?);
            Ok(Prediction {
                scan_id: v.scan_id.clone(),
                p_healthy: p[0],
                p_covid: p[1],
                p_a: p[2],
                p_g: p[3],
                pred_label: decide(&p, &t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<Label> = volumes.iter().map(|v| v.label).collect();
    let genders: Vec<Gender> = volumes.iter().map(|v| v.gender).collect();
    let pred: Vec<Label> = preds.iter().map(|p| p.pred_label).collect();
    Ok((competition_score(&truth, &pred, &genders)?, preds))
}
