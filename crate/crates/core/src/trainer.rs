//! Two-stage fold training: a frozen-encoder warm-up at one learning rate,
//! then separate cosine-annealed rates for the encoder and everything else.
//! Weighted sampling with replacement, gradient accumulation and best-score
//! checkpoint selection on the held-out fold.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{cap_and_pad, sampler_weights, Boost, CapMode, FoldPlan, Volume};
use crate::diff::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::labels::Label;
use crate::losses::LossConfig;
use crate::metrics::{competition_score, mean_std, EvalReport};
use crate::model::{MilConfig, MilModel, ENCODER};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Leading epochs with the encoder frozen.
    pub freeze_epochs: usize,
    pub lr_stage1: f64,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Micro-batches accumulated per optimizer step.
    pub accumulation: usize,
    pub effective_batch: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub boost: Boost,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            freeze_epochs: 5,
            lr_stage1: 1e-3,
            lr_backbone: 1e-5,
            lr_heads: 1e-4,
            accumulation: 4,
            effective_batch: 16,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            boost: Boost::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Rates suited to an encoder trained from random initialization; the
    /// defaults assume a pretrained one and barely move it.
    pub fn from_scratch() -> Self {
        Self {
            lr_stage1: 1e-2,
            lr_backbone: 1e-3,
            lr_heads: 3e-3,
            ..Self::default()
        }
    }

    pub fn micro_batch(&self) -> usize {
        self.effective_batch / self.accumulation
    }

    pub fn validate(&self) -> Result<()> {
        if self.accumulation == 0 || self.effective_batch == 0 || !self.effective_batch.is_multiple_of(self.accumulation) {
            return Err(Error::Config(format!(
                "effective_batch {} must be a positive multiple of accumulation {}",
                self.effective_batch, self.accumulation
            )));
        }
        if self.epochs == 0 || self.freeze_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "need freeze_epochs < epochs, got {} and {}",
                self.freeze_epochs, self.epochs
            )));
        }
        for (name, v) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_backbone", self.lr_backbone),
            ("lr_heads", self.lr_heads),
            ("weight_decay", self.weight_decay),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        self.loss.validate()
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("epochs", self.epochs);
        doc.set("freeze_epochs", self.freeze_epochs);
        doc.set("lr_stage1", self.lr_stage1);
        doc.set("lr_backbone", self.lr_backbone);
        doc.set("lr_heads", self.lr_heads);
        doc.set("accumulation", self.accumulation);
        doc.set("effective_batch", self.effective_batch);
        doc.set("weight_decay", self.weight_decay);
        doc.set("beta1", self.beta1);
        doc.set("beta2", self.beta2);
        doc.set("adam_eps", self.adam_eps);
        doc.set("boost", crate::kv::join(&self.boost.0));
        doc.set("focal_gamma", self.loss.gamma);
        doc.set("focal_alpha", self.loss.alpha);
        doc.set("label_smoothing", self.loss.epsilon);
        doc.set("grl_single_lambda", self.loss.grl_single_lambda);
    }

    /// Reads the keys written by [`write_kv`](Self::write_kv). `seed` and
    /// `lambda_adv` are shared run-level keys and handled by the caller.
    pub fn take_kv(&mut self, doc: &mut KvDoc) -> Result<()> {
        doc.take_into("epochs", &mut self.epochs)?;
        doc.take_into("freeze_epochs", &mut self.freeze_epochs)?;
        doc.take_into("lr_stage1", &mut self.lr_stage1)?;
        doc.take_into("lr_backbone", &mut self.lr_backbone)?;
        doc.take_into("lr_heads", &mut self.lr_heads)?;
        doc.take_into("accumulation", &mut self.accumulation)?;
        doc.take_into("effective_batch", &mut self.effective_batch)?;
        doc.take_into("weight_decay", &mut self.weight_decay)?;
        doc.take_into("beta1", &mut self.beta1)?;
        doc.take_into("beta2", &mut self.beta2)?;
        doc.take_into("adam_eps", &mut self.adam_eps)?;
        if let Some(b) = doc.take_str("boost") {
            let v: Vec<f64> = crate::kv::split("boost", &b)?;
            self.boost = Boost(
                v.try_into()
                    .map_err(|_| Error::Config("boost needs 8 comma-separated factors".into()))?,
            );
        }
        doc.take_into("focal_gamma", &mut self.loss.gamma)?;
        doc.take_into("focal_alpha", &mut self.loss.alpha)?;
        doc.take_into("label_smoothing", &mut self.loss.epsilon)?;
        doc.take_into("grl_single_lambda", &mut self.loss.grl_single_lambda)?;
        Ok(())
    }
}

/// `eta0 * (1 + cos(pi * t / total)) / 2`.
pub fn cosine_lr(eta0: f64, t: usize, total: usize) -> f64 {
    eta0 * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Frozen,
    Finetune,
}

/// Learning rates of the encoder group and of everything else.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLr {
    pub backbone: f64,
    pub heads: f64,
}

/// Stage and rates of 0-based `epoch`. The encoder rate is 0 while frozen.
pub fn schedule(cfg: &TrainConfig, epoch: usize) -> (Stage, GroupLr) {
    if epoch < cfg.freeze_epochs {
        let lr = GroupLr {
            backbone: 0.0,
            heads: cfg.lr_stage1,
        };
        return (Stage::Frozen, lr);
    }
    let t = epoch - cfg.freeze_epochs;
    let total = cfg.epochs - cfg.freeze_epochs;
    let lr = GroupLr {
        backbone: cosine_lr(cfg.lr_backbone, t, total),
        heads: cosine_lr(cfg.lr_heads, t, total),
    };
    (Stage::Finetune, lr)
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

/// Adam with decoupled weight decay. Parameters that are not trainable are
/// left untouched, state included.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            state: vec![None; n_params],
        }
    }

    /// Drops the moment state of every parameter whose name starts with `prefix`.
    pub fn reset(&mut self, params: &ParamStore, prefix: &str) {
        for (i, (name, _)) in params.iter().enumerate() {
            if name.starts_with(prefix) {
                self.state[i] = None;
            }
        }
    }

    /// Update count of parameter `idx`, 0 when it has no state.
    pub fn steps(&self, idx: usize) -> i32 {
        self.state[idx].as_ref().map_or(0, |s| s.steps)
    }

    /// One step using the gradients stored in `params`; `lr_of` gives the
    /// learning rate by parameter name.
    pub fn step(&mut self, params: &mut ParamStore, lr_of: impl Fn(&str) -> f64) {
        for (i, (name, p)) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let lr = lr_of(name);
            let n = p.value.numel();
            let st = self.state[i].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                steps: 0,
            });
            st.steps += 1;
            let c1 = 1.0 - self.beta1.powi(st.steps);
            let c2 = 1.0 - self.beta2.powi(st.steps);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..n {
                let g = grad[j];
                st.m[j] = self.beta1 * st.m[j] + (1.0 - self.beta1) * g;
                st.v[j] = self.beta2 * st.v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = st.m[j] / c1;
                let v_hat = st.v[j] / c2;
                value[j] -= lr * self.weight_decay * value[j];
                value[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub fold: usize,
    /// 1-based.
    pub epoch: usize,
    pub stage: Stage,
    pub lr: GroupLr,
    /// Mean per-sample total loss over the epoch's draws.
    pub train_loss: f64,
    pub val: EvalReport,
}

impl EpochLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("epoch log serializes")
    }

    pub fn from_json(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Invalid(format!("epoch log: {e}")))
    }
}

/// Writes logs as one JSON object per line.
pub fn write_log(logs: &[EpochLog], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in logs {
        writeln!(f, "{}", l.to_json()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(EpochLog::from_json).collect()
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
    /// Every scan the training loop read.
    pub seen: BTreeSet<String>,
}

/// Called after every epoch, possibly from several folds at once.
pub type Observer<'a> = dyn Fn(&EpochLog) + Sync + 'a;

/// Seed of fold `fold`'s model and sampling streams.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ fold as u64
}

/// Argmax with ties to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Validation report of `model` on `volumes` with deterministic capping and
/// argmax decisions.
pub fn validate(model: &MilModel, volumes: &[&Volume]) -> Result<EvalReport> {
    let mut pred = Vec::with_capacity(volumes.len());
    for v in volumes {
        let (x, mask) = cap_and_pad(v, model.config.max_slices, CapMode::Infer, 0);
        let out = model.forward(&x, &mask)?;
        pred.push(Label::ALL[argmax(&out.disease_logits)]);
    }
    let truth: Vec<Label> = volumes.iter().map(|v| v.label).collect();
    let genders: Vec<_> = volumes.iter().map(|v| v.gender).collect();
    competition_score(&truth, &pred, &genders)
}

/// Accumulates the gradient of `scale * L(sample)` into `model.params` and
/// returns the unscaled loss.
fn sample_grad(
    model: &mut MilModel,
    features: &Tensor,
    mask: &[bool],
    v: &Volume,
    loss: &LossConfig,
    scale: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let g = model.loss_graph(&mut tape, features, mask, v.label.index(), v.gender.index(), loss)?;
    let value = tape.value(g.total).item();
    let scaled = tape.scale(g.total, scale);
    tape.backward(scaled)?;
    tape.accumulate_param_grads(&mut model.params);
    Ok(value)
}

/// One epoch over pre-drawn samples `(position in train, capping seed)`.
/// Returns the mean loss.
pub fn run_epoch(
    model: &mut MilModel,
    opt: &mut AdamW,
    train: &[&Volume],
    draws: &[(usize, u64)],
    cfg: &TrainConfig,
    lr: GroupLr,
) -> Result<f64> {
    let micro = cfg.micro_batch();
    let mut total = 0.0;
    for step in draws.chunks(cfg.effective_batch) {
        model.params.zero_grad();
        let scale = 1.0 / step.len() as f64;
        for mb in step.chunks(micro) {
            for &(pos, cap_seed) in mb {
                let v = train[pos];
                let (x, mask) = cap_and_pad(v, model.config.max_slices, CapMode::Train, cap_seed);
                total += sample_grad(model, &x, &mask, v, &cfg.loss, scale)?;
            }
        }
        opt.step(&mut model.params, |name| {
            if name.starts_with(ENCODER) {
                lr.backbone
            } else {
                lr.heads
            }
        });
    }
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "train loss" });
    }
    Ok(total / draws.len() as f64)
}

fn check_configs(model_cfg: &MilConfig, cfg: &TrainConfig) -> Result<()> {
    model_cfg.validate()?;
    cfg.validate()?;
    if model_cfg.lambda_adv != cfg.loss.lambda_adv {
        return Err(Error::Config(format!(
            "model lambda_adv {} differs from loss lambda_adv {}",
            model_cfg.lambda_adv, cfg.loss.lambda_adv
        )));
    }
    Ok(())
}

/// Trains on every fold except `fold` and keeps the best validation epoch.
pub fn train_fold(
    volumes: &[Volume],
    plan: &FoldPlan,
    fold: usize,
    model_cfg: &MilConfig,
    cfg: &TrainConfig,
    observer: Option<&Observer>,
) -> Result<FoldOutcome> {
    check_configs(model_cfg, cfg)?;
    if fold >= plan.n_folds {
        return Err(Error::Config(format!("fold {fold} out of range for {} folds", plan.n_folds)));
    }
    let train: Vec<&Volume> = plan.train_indices(volumes, fold)?.into_iter().map(|i| &volumes[i]).collect();
    let val: Vec<&Volume> = plan.val_indices(volumes, fold)?.into_iter().map(|i| &volumes[i]).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(format!(
            "fold {fold}: {} training and {} validation scans",
            train.len(),
            val.len()
        )));
    }
    let seed = fold_seed(cfg.seed, fold);
    let mut model = MilModel::new(model_cfg.clone(), seed)?;
    let weights = sampler_weights(&train, &cfg.boost)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(cfg, model.params.len());
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut seen = BTreeSet::new();
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..cfg.epochs {
        let (stage, lr) = schedule(cfg, epoch);
        match stage {
            Stage::Frozen => {
                model.params.freeze(ENCODER);
            }
            Stage::Finetune if epoch == cfg.freeze_epochs => {
                model.params.unfreeze(ENCODER);
                opt.reset(&model.params, ENCODER);
            }
            Stage::Finetune => {}
        }
        let draws: Vec<(usize, u64)> = weights
            .draw(train.len(), &mut rng)
            .into_iter()
            .map(|pos| (pos, rng.random()))
            .collect();
        for &(pos, _) in &draws {
            let id = &train[pos].scan_id;
            assert_ne!(plan.fold_of(id), Some(fold), "training read validation scan {id}");
            seen.insert(id.clone());
        }
        let train_loss = run_epoch(&mut model, &mut opt, &train, &draws, cfg, lr)?;
        let report = validate(&model, &val)?;
        let score = report.selection_score();
        let log = EpochLog {
            fold,
            epoch: epoch + 1,
            stage,
            lr,
            train_loss,
            val: report,
        };
        if let Some(obs) = observer {
            obs(&log);
        }
        logs.push(log);
        if best.as_ref().is_none_or(|b| score > b.score) {
            let mut snapshot = model.clone();
            snapshot.params.unfreeze("");
            snapshot.params.zero_grad();
            best = Some(Checkpoint {
                fold,
                epoch: epoch + 1,
                score,
                model: snapshot,
            });
        }
    }
    Ok(FoldOutcome {
        checkpoint: best.expect("at least one epoch"),
        logs,
        seen,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvSummary {
    /// Best selection score of every fold, in fold order.
    pub fold_scores: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
}

impl CvSummary {
    pub fn from_scores(fold_scores: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&fold_scores);
        Self { fold_scores, mean, std }
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("folds", self.fold_scores.len());
        for (f, s) in self.fold_scores.iter().enumerate() {
            doc.set(&format!("fold{f}.score_p"), s);
        }
        doc.set("mean_score_p", self.mean);
        doc.set("std_score_p", self.std);
        doc
    }
}

/// Trains all folds, up to `jobs` at a time (all at once when `None`).
pub fn train_all_folds(
    volumes: &[Volume],
    plan: &FoldPlan,
    model_cfg: &MilConfig,
    cfg: &TrainConfig,
    jobs: Option<usize>,
    observer: Option<&Observer>,
) -> Result<(Vec<FoldOutcome>, CvSummary)> {
    if plan.n_folds < 2 {
        return Err(Error::Config(format!("need >= 2 folds, got {}", plan.n_folds)));
    }
    check_configs(model_cfg, cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(plan.n_folds).max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<FoldOutcome> = pool.install(|| {
        (0..plan.n_folds)
            .into_par_iter()
            .map(|f| train_fold(volumes, plan, f, model_cfg, cfg, observer))
            .collect::<Result<_>>()
    })?;
    let summary = CvSummary::from_scores(outcomes.iter().map(|o| o.checkpoint.score).collect());
    Ok((outcomes, summary))
}
