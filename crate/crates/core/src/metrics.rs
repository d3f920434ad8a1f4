//! Confusion matrices, F1 scores and the gender-balanced competition score
//! `P = (macro_F1(male) + macro_F1(female)) / 2`.
//!
//! A class with no true positives gets F1 = 0, including a class absent from
//! both truth and predictions of a subset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::kv::{self, KvDoc};
use crate::labels::{Gender, Label, N_CLASSES};

pub type Confusion = [[usize; N_CLASSES]; N_CLASSES];

/// Entry `[t][p]` counts samples with truth `t` predicted as `p`.
pub fn confusion_matrix(truth: &[usize], pred: &[usize]) -> Result<Confusion> {
    if truth.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "truth has {} labels, predictions {}",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let mut cm = [[0; N_CLASSES]; N_CLASSES];
    for (&t, &p) in truth.iter().zip(pred) {
        for (what, v) in [("truth", t), ("prediction", p)] {
            if v >= N_CLASSES {
                return Err(Error::LabelOutOfRange { what, value: v });
            }
        }
        cm[t][p] += 1;
    }
    Ok(cm)
}

/// Binary F1 from counts; 0 when there are no true positives.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn per_class_f1(cm: &Confusion) -> [f64; N_CLASSES] {
    std::array::from_fn(|c| {
        let tp = cm[c][c];
        let fp = (0..N_CLASSES).map(|t| cm[t][c]).sum::<usize>() - tp;
        let fn_ = cm[c].iter().sum::<usize>() - tp;
        f1_from_counts(tp, fp, fn_)
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unweighted mean of the per-class F1 over all four classes.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> Result<f64> {
    Ok(mean(&per_class_f1(&confusion_matrix(truth, pred)?)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreStatus {
    Complete,
    /// A gender subset is empty, so P is undefined.
    MissingGender(Gender),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub confusion: Confusion,
    /// Over both genders.
    pub per_class_f1: [f64; N_CLASSES],
    pub macro_f1: f64,
    pub accuracy: f64,
    pub macro_f1_male: Option<f64>,
    pub macro_f1_female: Option<f64>,
    pub score_p: Option<f64>,
    pub status: ScoreStatus,
}

pub fn competition_score(truth: &[Label], pred: &[Label], genders: &[Gender]) -> Result<EvalReport> {
    if genders.len() != truth.len() {
        return Err(Error::Invalid(format!(
            "truth has {} labels, genders {}",
            truth.len(),
            genders.len()
        )));
    }
    let t: Vec<usize> = truth.iter().map(|l| l.index()).collect();
    let p: Vec<usize> = pred.iter().map(|l| l.index()).collect();
    let confusion = confusion_matrix(&t, &p)?;
    let per_class_f1 = per_class_f1(&confusion);
    let correct: usize = (0..N_CLASSES).map(|c| confusion[c][c]).sum();

    let subset = |g: Gender| -> Result<Option<f64>> {
        let (ts, ps): (Vec<usize>, Vec<usize>) = t
            .iter()
            .zip(&p)
            .zip(genders)
            .filter(|(_, &gg)| gg == g)
            .map(|((&a, &b), _)| (a, b))
            .unzip();
        if ts.is_empty() {
            Ok(None)
        } else {
            macro_f1(&ts, &ps).map(Some)
        }
    };
    let male = subset(Gender::Male)?;
    let female = subset(Gender::Female)?;
    let (score_p, status) = match (male, female) {
        (Some(m), Some(f)) => (Some((m + f) / 2.0), ScoreStatus::Complete),
        (None, _) => (None, ScoreStatus::MissingGender(Gender::Male)),
        (_, None) => (None, ScoreStatus::MissingGender(Gender::Female)),
    };
    Ok(EvalReport {
        n: t.len(),
        confusion,
        per_class_f1,
        macro_f1: mean(&per_class_f1),
        accuracy: correct as f64 / t.len() as f64,
        macro_f1_male: male,
        macro_f1_female: female,
        score_p,
        status,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".to_string(), |v| v.to_string())
}

fn parse_opt(doc: &KvDoc, key: &str, path: &Path) -> Result<Option<f64>> {
    match doc.get_str(key) {
        Some("undefined") => Ok(None),
        Some(_) => doc.get::<f64>(key),
        None => Err(missing(key, path)),
    }
}

fn missing(key: &str, path: &Path) -> Error {
    FormatError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("missing key {key}"),
    }
    .into()
}

impl EvalReport {
    /// Selection score: P when defined, otherwise overall macro-F1.
    pub fn selection_score(&self) -> f64 {
        self.score_p.unwrap_or(self.macro_f1)
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("n", self.n);
        for l in Label::ALL {
            doc.set(&format!("confusion.{}", l.key()), kv::join(&self.confusion[l.index()]));
        }
        for l in Label::ALL {
            doc.set(&format!("f1.{}", l.key()), self.per_class_f1[l.index()]);
        }
        doc.set("macro_f1", self.macro_f1);
        doc.set("accuracy", self.accuracy);
        doc.set("macro_f1_male", opt(self.macro_f1_male));
        doc.set("macro_f1_female", opt(self.macro_f1_female));
        doc.set("score_p", opt(self.score_p));
        let status = match self.status {
            ScoreStatus::Complete => "complete".to_string(),
            ScoreStatus::MissingGender(g) => format!("missing_{}", g.name()),
        };
        doc.set("status", status);
        doc
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let doc = KvDoc::parse(text, path)?;
        let num = |key: &str| -> Result<f64> { doc.get::<f64>(key)?.ok_or_else(|| missing(key, path)) };
        let mut confusion = [[0; N_CLASSES]; N_CLASSES];
        let mut per_class_f1 = [0.0; N_CLASSES];
        for l in Label::ALL {
            let key = format!("confusion.{}", l.key());
            let row: Vec<usize> = kv::split(&key, doc.get_str(&key).ok_or_else(|| missing(&key, path))?)?;
            if row.len() != N_CLASSES {
                return Err(Error::Config(format!("{key}: expected {N_CLASSES} counts")));
            }
            confusion[l.index()].copy_from_slice(&row);
            per_class_f1[l.index()] = num(&format!("f1.{}", l.key()))?;
        }
        let status = match doc.get_str("status") {
            Some("complete") => ScoreStatus::Complete,
            Some("missing_male") => ScoreStatus::MissingGender(Gender::Male),
            Some("missing_female") => ScoreStatus::MissingGender(Gender::Female),
            other => return Err(Error::Config(format!("status: unexpected {other:?}"))),
        };
        Ok(Self {
            n: doc.get::<usize>("n")?.ok_or_else(|| missing("n", path))?,
            confusion,
            per_class_f1,
            macro_f1: num("macro_f1")?,
            accuracy: num("accuracy")?,
            macro_f1_male: parse_opt(&doc, "macro_f1_male", path)?,
            macro_f1_female: parse_opt(&doc, "macro_f1_female", path)?,
            score_p: parse_opt(&doc, "score_p", path)?,
            status,
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}
