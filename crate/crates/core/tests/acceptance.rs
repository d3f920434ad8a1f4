//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use fairmil::checkpoint::Checkpoint;
use fairmil::data::{
    cap_and_pad, generate, read_dataset, read_features, stratified_folds, write_dataset, write_features, Boost,
    CapMode, FoldPlan, GeneratorConfig, Volume, MANIFEST,
};
use fairmil::diff::{gradient_check, relative_error, Activation, Tape};
use fairmil::inference::{
    decide, evaluate_pipeline, oof_predictions, optimize_thresholds, predict_scan, Grid, OofRow, OofTable,
    ThresholdSource,
};
use fairmil::losses::{focal_smooth_loss, LossConfig};
use fairmil::metrics::competition_score;
use fairmil::model::{gender_probe, MilConfig, MilModel, Pooling};
use fairmil::tensor::Tensor;
use fairmil::trainer::{argmax, train_all_folds, train_fold, validate, write_log, TrainConfig};
use fairmil::{Error, FormatError, Gender, Label, N_CLASSES};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tiny(pooling: Pooling, lambda: f64, activation: Activation) -> MilConfig {
    MilConfig {
        input_dim: 5,
        embed_dim: 6,
        attn_hidden: 4,
        lambda_adv: lambda,
        max_slices: 4,
        pooling,
        activation,
    }
}

fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

const POOLINGS: [Pooling; 3] = [Pooling::Attention, Pooling::Mean, Pooling::Max];

/// Finite differences of each loss term, assembled with the reversal
/// semantics, against the reverse-mode gradient of the total loss.
fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let lambdas = [0.0, 0.1, 1.0, 5.0];
    let (mut models, mut scalars, mut worst) = (0, 0, 0.0f64);
    for seed in 0..24u64 {
        let pooling = POOLINGS[seed as usize % 3];
        let lambda = lambdas[seed as usize % 4];
        let activation = if seed % 2 == 0 { Activation::Tanh } else { Activation::Gelu };
        let loss = LossConfig {
            lambda_adv: lambda,
            grl_single_lambda: seed % 5 == 0,
            ..LossConfig::default()
        };
        let model = MilModel::new(tiny(pooling, lambda, activation), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 4, 5, 2.0);
        let n_valid = rng.random_range(1..=4);
        let mask: Vec<bool> = (0..4).map(|i| i < n_valid).collect();
        let (label, gender) = (rng.random_range(0..N_CLASSES), rng.random_range(0..2));

        let mut tape = Tape::new();
        let g = model.loss_graph(&mut tape, &x, &mask, label, gender, &loss).unwrap();
        tape.backward(g.total).unwrap();
        let mut analytic = model.params.clone();
        analytic.zero_grad();
        tape.accumulate_param_grads(&mut analytic);

        let fd = |term: usize| {
            gradient_check(
                |tape, ps| {
                    let m = MilModel {
                        config: model.config.clone(),
                        params: ps.clone(),
                    };
                    let g = m.loss_graph(tape, &x, &mask, label, gender, &loss)?;
                    Ok(if term == 0 { g.disease } else { g.gender })
                },
                &model.params,
                1e-4,
                1e-3,
            )
            .unwrap()
        };
        let (dis, gen) = (fd(0), fd(1));
        let w = loss.gender_weight();
        for (ed, eg) in dis.entries.iter().zip(&gen.entries) {
            let downstream = ed.param.starts_with("gender.") || ed.param.starts_with("disease.");
            let reversal = if downstream { 1.0 } else { -lambda };
            let expected = ed.numeric + w * reversal * eg.numeric;
            let a = analytic.get(&ed.param).unwrap().grad.data()[ed.index];
            worst = worst.max(relative_error(a, expected));
            scalars += 1;
        }
        models += 1;
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-3 && elapsed < Duration::from_secs(60),
        format!("{models} models, {scalars} scalars, max rel error {worst:.2e}, {elapsed:.1?}"),
    )
}

fn grl_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for lambda in [0.0, 0.1, 1.0, 5.0] {
        let xv = rand_tensor(&mut rng, 3, 4, 3.0);
        let cv = rand_tensor(&mut rng, 3, 4, 3.0);
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let y = tape.grl(x, lambda);
        if tape.value(y).data().iter().zip(xv.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("forward not identity at lambda {lambda}"));
        }
        let c = tape.constant(cv.clone());
        let prod = tape.mul(y, c).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        for (g, c) in tape.grad(x).data().iter().zip(cv.data()) {
            if *g != -lambda * c {
                return Err(format!("backward at lambda {lambda}: {g} vs {}", -lambda * c));
            }
        }
    }
    for pooling in POOLINGS {
        let model = MilModel::new(tiny(pooling, 0.0, Activation::Tanh), 9).unwrap();
        let x = rand_tensor(&mut rng, 4, 5, 2.0);
        let mut tape = Tape::new();
        let g = model
            .loss_graph(&mut tape, &x, &[true; 4], 1, 1, &LossConfig { lambda_adv: 0.0, ..LossConfig::default() })
            .unwrap();
        tape.backward(g.gender).unwrap();
        let mut store = model.params.clone();
        store.zero_grad();
        tape.accumulate_param_grads(&mut store);
        for (name, p) in store.iter() {
            let upstream = !(name.starts_with("gender.") || name.starts_with("disease."));
            if upstream && p.grad.data().iter().any(|&v| v != 0.0) {
                return Err(format!("{name} receives gender gradient at lambda 0"));
            }
        }
    }
    Ok("lambda in {0, 0.1, 1, 5}: identity forward bitwise, backward exactly -lambda, no encoder gradient at lambda 0".into())
}

fn pooling_invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut pad_err, mut perm_err) = (0.0f64, 0.0f64);
    for pooling in POOLINGS {
        let cfg = MilConfig {
            input_dim: 6,
            embed_dim: 8,
            attn_hidden: 5,
            max_slices: 12,
            pooling,
            ..MilConfig::default()
        };
        let model = MilModel::new(cfg, 3).unwrap();
        for _ in 0..100 {
            let n = rng.random_range(1..=8);
            let valid = rand_tensor(&mut rng, n, 6, 2.0);
            let padded_rows = rng.random_range(1..=4);
            let mut data = valid.data().to_vec();
            data.extend((0..padded_rows * 6).map(|_| rng.random_range(-50.0..50.0)));
            let padded = Tensor::new(&[n + padded_rows, 6], data).unwrap();
            let mut mask = vec![true; n];
            mask.extend(vec![false; padded_rows]);

            let base = model.forward(&valid, &vec![true; n]).unwrap();
            let pad = model.forward(&padded, &mask).unwrap();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| valid.row(i).to_vec()).collect();
            let perm = model.forward(&Tensor::from_rows(&rows).unwrap(), &vec![true; n]).unwrap();
            let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            pad_err = pad_err
                .max(diff(&base.disease_logits, &pad.disease_logits))
                .max(diff(&base.embedding, &pad.embedding));
            perm_err = perm_err
                .max(diff(&base.disease_logits, &perm.disease_logits))
                .max(diff(&base.embedding, &perm.embedding));
        }
    }
    check(
        pad_err <= 1e-12 && perm_err <= 1e-9,
        format!("3 poolings x 100 bags, padding {pad_err:.1e}, permutation {perm_err:.1e}"),
    )
}

fn focal(logits: &[f64], t: usize, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::vector(logits.to_vec()));
    let l = focal_smooth_loss(&mut tape, z, t, cfg).unwrap();
    tape.value(l).item()
}

fn loss_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ce_cfg = LossConfig {
        gamma: 0.0,
        epsilon: 0.0,
        alpha: 1.0,
        ..LossConfig::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let z: Vec<f64> = (0..N_CLASSES).map(|_| rng.random_range(-6.0..6.0)).collect();
        let t = rng.random_range(0..N_CLASSES);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        worst = worst.max((focal(&z, t, &ce_cfg) - (lse - z[t])).abs());
    }
    let uniform_cfg = LossConfig {
        gamma: 2.0,
        alpha: 0.25,
        epsilon: 0.0,
        ..LossConfig::default()
    };
    let u = focal(&[0.7; N_CLASSES], 2, &uniform_cfg);
    let closed = 0.25 * 0.5625 * 4f64.ln();
    check(
        worst <= 1e-12 && (u - closed).abs() <= 1e-6 && (u - 0.19495).abs() <= 1e-5,
        format!("cross-entropy gap {worst:.1e}, uniform {u:.6} vs {closed:.6}"),
    )
}

fn oracle_macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let mut total = 0.0;
    for c in 0..N_CLASSES {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let pp = pred.iter().filter(|&&p| p == c).count() as f64;
        let ap = truth.iter().filter(|&&t| t == c).count() as f64;
        if tp > 0.0 {
            let (prec, rec) = (tp / pp, tp / ap);
            total += 2.0 * prec * rec / (prec + rec);
        }
    }
    total / N_CLASSES as f64
}

fn metric_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let n = rng.random_range(2..80);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..N_CLASSES)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.5) { t } else { rng.random_range(0..N_CLASSES) })
            .collect();
        let genders: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let to_labels = |v: &[usize]| v.iter().map(|&i| Label::ALL[i]).collect::<Vec<_>>();
        let g: Vec<Gender> = genders.iter().map(|&i| Gender::ALL[i]).collect();
        let r = competition_score(&to_labels(&truth), &to_labels(&pred), &g).unwrap();
        let sub = |want: usize| -> Option<f64> {
            let idx: Vec<usize> = (0..n).filter(|&i| genders[i] == want).collect();
            (!idx.is_empty()).then(|| {
                let t: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
                let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
                oracle_macro_f1(&t, &p)
            })
        };
        let p = match (sub(0), sub(1)) {
            (Some(m), Some(f)) => Some((m + f) / 2.0),
            _ => None,
        };
        if r.macro_f1 != oracle_macro_f1(&truth, &pred)
            || r.macro_f1_male != sub(0)
            || r.macro_f1_female != sub(1)
            || r.score_p != p
        {
            return Err(format!("case {case} differs from brute force"));
        }
    }
    // (P, M-F1, F-F1) per fold as published.
    let table: [(f64, f64, f64); 5] = [
        (0.698, 0.673, 0.722),
        (0.727, 0.754, 0.699),
        (0.674, 0.658, 0.690),
        (0.688, 0.743, 0.634),
        (0.637, 0.565, 0.709),
    ];
    let worst = table
        .iter()
        .map(|&(p, m, f)| ((m + f) / 2.0 - p).abs())
        .fold(0.0, f64::max);
    let mean = table.iter().map(|r| r.0).sum::<f64>() / table.len() as f64;
    check(
        worst <= 0.0005 + 1e-9 && (mean - 0.685).abs() <= 0.0005,
        format!("1000 cases exact, published P gap {worst:.4}, mean P {mean:.4}"),
    )
}

fn random_oof(rng: &mut impl Rng, n: usize) -> OofTable {
    let rows = (0..n)
        .map(|i| {
            let truth = Label::ALL[rng.random_range(0..N_CLASSES)];
            let mut raw: [f64; N_CLASSES] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            raw[truth.index()] += rng.random_range(0.0..1.5);
            let s: f64 = raw.iter().sum();
            OofRow {
                scan_id: format!("s{i}"),
                p_healthy: raw[0] / s,
                p_covid: raw[1] / s,
                p_a: raw[2] / s,
                p_g: raw[3] / s,
                truth,
                gender: Gender::ALL[i % 2],
                fold: i % 5,
            }
        })
        .collect();
    OofTable { rows }
}

fn oracle_binary_f1(p: &[f64], pos: &[bool], t: f64) -> f64 {
    let tp = p.iter().zip(pos).filter(|&(&x, &y)| x >= t && y).count() as f64;
    let fp = p.iter().zip(pos).filter(|&(&x, &y)| x >= t && !y).count() as f64;
    let fneg = p.iter().zip(pos).filter(|&(&x, &y)| x < t && y).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (tp / (tp + fp), tp / (tp + fneg));
    2.0 * prec * rec / (prec + rec)
}

fn threshold_optimizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid: Vec<f64> = (5..=95).map(|k| k as f64 / 100.0).collect();
    for table_no in 0..50 {
        let n = rng.random_range(20..200);
        let table = random_oof(&mut rng, n);
        let set = optimize_thresholds(&table, Grid::default(), ThresholdSource::Oof).unwrap();
        for c in 0..N_CLASSES {
            let p: Vec<f64> = table.rows.iter().map(|r| r.probs()[c]).collect();
            let pos: Vec<bool> = table.rows.iter().map(|r| r.truth.index() == c).collect();
            let best = grid.iter().map(|&t| oracle_binary_f1(&p, &pos, t)).fold(0.0, f64::max);
            let at_t = oracle_binary_f1(&p, &pos, set.t[c]);
            if set.achieved_f1[c] != best || at_t != best {
                return Err(format!("table {table_no} class {c}: {} vs grid max {best}", set.achieved_f1[c]));
            }
            if at_t < oracle_binary_f1(&p, &pos, 0.5) {
                return Err(format!("table {table_no} class {c}: below the 0.5 baseline"));
            }
        }
    }
    Ok("50 tables x 4 classes hit the exhaustive grid maximum, never below t=0.5".into())
}

fn ensemble_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vols = generate(&GeneratorConfig {
        seed: 7,
        ..GeneratorConfig::default()
    })
    .unwrap();
    for (k, pooling) in POOLINGS.into_iter().enumerate() {
        let model = MilModel::new(MilConfig { pooling, ..MilConfig::default() }, k as u64).unwrap();
        let ck = Checkpoint {
            fold: 0,
            epoch: 1,
            score: 0.0,
            model: model.clone(),
        };
        for v in vols.iter().step_by(37) {
            let (x, mask) = cap_and_pad(v, model.config.max_slices, CapMode::Infer, 0);
            let direct = model.forward(&x, &mask).unwrap().disease_logits;
            let ens = predict_scan(v, std::slice::from_ref(&ck), false).unwrap();
            if direct.iter().zip(&ens).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(format!("{}: ensemble of one differs on {}", pooling.name(), v.scan_id));
            }
        }
    }
    for _ in 0..10_000 {
        let raw: [f64; N_CLASSES] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let s: f64 = raw.iter().sum();
        let p = raw.map(|x| x / s);
        if decide(&p, &[0.0; N_CLASSES]).unwrap() != Label::ALL[argmax(&p)] {
            return Err(format!("zero thresholds differ from argmax on {p:?}"));
        }
    }
    Ok("single fold without TTA bit-identical to forward, zero thresholds equal argmax".into())
}

fn split<'a>(vols: &'a [Volume], plan: &FoldPlan, fold: usize) -> Vec<&'a Volume> {
    plan.val_indices(vols, fold)
        .unwrap()
        .into_iter()
        .map(|i| &vols[i])
        .collect()
}

fn short_schedule(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        freeze_epochs: 2,
        seed,
        ..TrainConfig::from_scratch()
    }
}

fn with_lambda(mut model: MilConfig, mut train: TrainConfig, lambda: f64) -> (MilConfig, TrainConfig) {
    model.lambda_adv = lambda;
    train.loss.lambda_adv = lambda;
    (model, train)
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let vols = generate(&GeneratorConfig::default()).unwrap();
    let plan = stratified_folds(&vols, 5, 0).unwrap();
    let train = TrainConfig {
        epochs: 30,
        ..TrainConfig::from_scratch()
    };
    let (_, summary) = train_all_folds(&vols, &plan, &MilConfig::default(), &train, None, None).unwrap();
    let elapsed = start.elapsed();
    let folds: Vec<String> = summary.fold_scores.iter().map(|p| format!("{p:.3}")).collect();
    check(
        summary.mean >= 0.95 && elapsed < Duration::from_secs(600),
        format!(
            "{} scans, folds [{}], mean P {:.4} +- {:.4}, {elapsed:.0?}",
            vols.len(),
            folds.join(", "),
            summary.mean,
            summary.std
        ),
    )
}

/// Held-out accuracy of a gender probe on the fold-0 model's scan embeddings.
fn probe_accuracy(vols: &[Volume], plan: &FoldPlan, lambda: f64, seed: u64) -> f64 {
    let (model_cfg, train) = with_lambda(MilConfig::default(), short_schedule(seed), lambda);
    let out = train_fold(vols, plan, 0, &model_cfg, &train, None).unwrap();
    let model = &out.checkpoint.model;
    let embeddings: Vec<Vec<f64>> = vols
        .iter()
        .map(|v| {
            let (x, mask) = cap_and_pad(v, model.config.max_slices, CapMode::Infer, 0);
            model.forward(&x, &mask).unwrap().embedding
        })
        .collect();
    let genders: Vec<Gender> = vols.iter().map(|v| v.gender).collect();
    gender_probe(&embeddings, &genders, seed).unwrap()
}

fn paired(name_a: &str, name_b: &str, pairs: &[(f64, f64)]) -> (f64, usize, String) {
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| b - a).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let wins = diffs.iter().filter(|&&d| d > 0.0).count();
    let rows: Vec<String> = pairs.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    (mean, wins, format!("{name_a}/{name_b} per seed [{}]", rows.join(", ")))
}

fn fairness_mechanism() -> Outcome {
    let pairs: Vec<(f64, f64)> = (0..5u64)
        .map(|seed| {
            let vols = generate(&GeneratorConfig {
                seed,
                ..GeneratorConfig::gender_shortcut()
            })
            .unwrap();
            let plan = stratified_folds(&vols, 5, seed).unwrap();
            (probe_accuracy(&vols, &plan, 0.1, seed), probe_accuracy(&vols, &plan, 0.0, seed))
        })
        .collect();
    let (mean, wins, rows) = paired("lambda 0.1", "lambda 0", &pairs);
    check(
        mean > 0.0 && wins >= 4,
        format!("probe accuracy lower with reversal in {wins}/5 seeds, mean gap {mean:.4}; {rows}"),
    )
}

/// Female macro-F1 of argmax decisions on out-of-fold predictions.
fn female_macro_f1(vols: &[Volume], plan: &FoldPlan, boost: f64, seed: u64) -> f64 {
    let train = TrainConfig {
        boost: Boost::female_g(boost),
        ..short_schedule(seed)
    };
    let (outcomes, _) = train_all_folds(vols, plan, &MilConfig::default(), &train, None, None).unwrap();
    let cks: Vec<Checkpoint> = outcomes.into_iter().map(|o| o.checkpoint).collect();
    let oof = oof_predictions(vols, plan, &cks, false).unwrap();
    let truth: Vec<Label> = oof.rows.iter().map(|r| r.truth).collect();
    let pred: Vec<Label> = oof.rows.iter().map(|r| Label::ALL[argmax(&r.probs())]).collect();
    let genders: Vec<Gender> = oof.rows.iter().map(|r| r.gender).collect();
    competition_score(&truth, &pred, &genders)
        .unwrap()
        .macro_f1_female
        .unwrap()
}

fn oversampling_mechanism() -> Outcome {
    let pairs: Vec<(f64, f64)> = (0..5u64)
        .map(|seed| {
            let g = GeneratorConfig {
                seed,
                ..GeneratorConfig::default()
            };
            assert_eq!(
                (g.count(fairmil::Stratum::new(Label::G, Gender::Male)), g.count(fairmil::Stratum::new(Label::G, Gender::Female))),
                (91, 18)
            );
            let vols = generate(&g).unwrap();
            let plan = stratified_folds(&vols, 5, seed).unwrap();
            (female_macro_f1(&vols, &plan, 1.0, seed), female_macro_f1(&vols, &plan, 2.0, seed))
        })
        .collect();
    let (mean, wins, rows) = paired("boost 1", "boost 2", &pairs);
    check(
        mean > 0.0,
        format!("female macro-F1 gain from boost 2: mean {mean:.4}, {wins}/5 seeds up; {rows}"),
    )
}

fn pooling_ablation() -> Outcome {
    let pairs: Vec<(f64, f64)> = (0..5u64)
        .map(|seed| {
            let vols = generate(&GeneratorConfig {
                seed,
                ..GeneratorConfig::sparse_signal()
            })
            .unwrap();
            let plan = stratified_folds(&vols, 5, seed).unwrap();
            let val = split(&vols, &plan, 0);
            let acc = |pooling| {
                let model_cfg = MilConfig {
                    pooling,
                    max_slices: 48,
                    ..MilConfig::default()
                };
                let out = train_fold(&vols, &plan, 0, &model_cfg, &short_schedule(seed), None).unwrap();
                validate(&out.checkpoint.model, &val).unwrap().accuracy
            };
            (acc(Pooling::Mean), acc(Pooling::Max))
        })
        .collect();
    let (mean, wins, rows) = paired("mean", "max", &pairs);
    check(
        mean > 0.0,
        format!("max beats mean pooling by {mean:.4} on average, {wins}/5 seeds; {rows}"),
    )
}

fn tmpdir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("fairmil-acceptance-{}-{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![(MANIFEST.to_string(), std::fs::read(dir.join(MANIFEST)).unwrap())];
    let mut feats: Vec<_> = std::fs::read_dir(dir.join("features"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    feats.sort();
    files.extend(feats.into_iter().map(|p| (p.display().to_string(), std::fs::read(&p).unwrap())));
    files.iter_mut().for_each(|(n, _)| *n = n.rsplit('/').next().unwrap().to_string());
    files
}

fn determinism_and_formats() -> Outcome {
    let gen = GeneratorConfig {
        seed: 12,
        ..GeneratorConfig::default()
    };
    let (a, b) = (tmpdir("a"), tmpdir("b"));
    write_dataset(&generate(&gen).unwrap(), &a).unwrap();
    write_dataset(&generate(&gen).unwrap(), &b).unwrap();
    if dir_bytes(&a) != dir_bytes(&b) {
        return Err("datasets differ for one seed".into());
    }
    let vols = read_dataset(&a).unwrap();

    let plan = stratified_folds(&vols, 5, 12).unwrap();
    let train = TrainConfig {
        epochs: 3,
        freeze_epochs: 1,
        seed: 12,
        ..TrainConfig::from_scratch()
    };
    let run = |tag: &str| {
        let out = train_fold(&vols, &plan, 1, &MilConfig::default(), &train, None).unwrap();
        let log = a.join(format!("log-{tag}.jsonl"));
        write_log(&out.logs, &log).unwrap();
        let val = split(&vols, &plan, 1);
        let (report, _) = evaluate_pipeline(&val, std::slice::from_ref(&out.checkpoint), None, true).unwrap();
        (std::fs::read(&log).unwrap(), out.checkpoint.to_bytes(), report.to_text())
    };
    let (first, second) = (run("1"), run("2"));
    if first != second {
        return Err("training logs, checkpoints or reports differ for one seed".into());
    }

    for v in vols.iter().take(20) {
        let bytes = write_features(&v.features);
        let back = read_features(&bytes, Path::new("x.fmil")).unwrap();
        if write_features(&back) != bytes || back != v.features {
            return Err(format!("FMIL round trip of {}", v.scan_id));
        }
    }
    let ck_bytes = &first.1;
    let ck = Checkpoint::from_bytes(ck_bytes, Path::new("c.fmck")).unwrap();
    if &ck.to_bytes() != ck_bytes {
        return Err("FMCK round trip".into());
    }

    let p = Path::new("bad");
    let fmil = write_features(&vols[0].features);
    let mut magic = fmil.clone();
    magic[0] = b'X';
    let mut version = fmil.clone();
    version[4] = 9;
    let expect = [
        matches!(read_features(&magic, p), Err(Error::Format(FormatError::BadMagic { .. }))),
        matches!(read_features(&version, p), Err(Error::Format(FormatError::UnsupportedVersion { .. }))),
        matches!(read_features(&fmil[..fmil.len() - 3], p), Err(Error::Format(FormatError::Truncated { .. }))),
    ];
    let mut ck_magic = ck_bytes.clone();
    ck_magic[1] = b'?';
    let mut ck_version = ck_bytes.clone();
    ck_version[4] = 7;
    let ck_expect = [
        matches!(Checkpoint::from_bytes(&ck_magic, p), Err(Error::Format(FormatError::BadMagic { .. }))),
        matches!(
            Checkpoint::from_bytes(&ck_version, p),
            Err(Error::Format(FormatError::UnsupportedVersion { .. }))
        ),
        matches!(
            Checkpoint::from_bytes(&ck_bytes[..ck_bytes.len() / 2], p),
            Err(Error::Format(FormatError::Truncated { .. }))
        ),
    ];
    let manifest = std::fs::read_to_string(a.join(MANIFEST)).unwrap();
    let first_row = manifest.lines().nth(1).unwrap();
    let n = first_row.split(',').nth(3).unwrap();
    let bumped: usize = n.parse::<usize>().unwrap() + 1;
    let tampered_row = first_row.replacen(&format!(",{n},"), &format!(",{bumped},"), 1);
    std::fs::write(a.join(MANIFEST), manifest.replacen(first_row, &tampered_row, 1)).unwrap();
    let mismatch = matches!(
        read_dataset(&a),
        Err(Error::Format(FormatError::SliceCountMismatch { .. }))
    );
    let _ = std::fs::remove_dir_all(&a);
    let _ = std::fs::remove_dir_all(&b);
    check(
        expect.iter().chain(&ck_expect).all(|&ok| ok) && mismatch,
        format!(
            "dataset, log, checkpoint and report bit-identical; FMIL errors {expect:?}, FMCK errors {ck_expect:?}, slice mismatch {mismatch}"
        ),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 12] = [
        ("gradient correctness", gradient_correctness),
        ("gradient reversal semantics", grl_semantics),
        ("pooling invariances", pooling_invariances),
        ("loss reductions", loss_reductions),
        ("metric fidelity", metric_fidelity),
        ("threshold optimizer", threshold_optimizer),
        ("ensemble reductions", ensemble_reductions),
        ("end-to-end learning", end_to_end),
        ("fairness mechanism", fairness_mechanism),
        ("oversampling mechanism", oversampling_mechanism),
        ("pooling ablation", pooling_ablation),
        ("determinism and formats", determinism_and_formats),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let k = i + 1;
        if only.is_some_and(|o| o != k) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {k:>2} PASS {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {k:>2} FAIL {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
