use std::path::{Path, PathBuf};

use fairmil::config::RunConfig;
use fairmil::data::{generate as generate_volumes, read_dataset, stratified_folds, write_dataset, FoldPlan, Volume};
use fairmil::inference::{
    evaluate_pipeline, oof_predictions, optimize_thresholds, predict_views, write_predictions, ThresholdSet,
    ThresholdSource,
};
use fairmil::model::{MilConfig, MilModel};
use fairmil::tensor::Tensor;
use fairmil::trainer::{train_all_folds, write_log, EpochLog};
use fairmil::{Checkpoint, Error, Label, Result, Stratum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FOLDS_FILE: &str = "folds.csv";
pub const CONFIG_FILE: &str = "config.txt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Sibling of `path` named `<stem>.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn read_plan(dir: &Path) -> Result<FoldPlan> {
    FoldPlan::from_csv(&read_text(&dir.join(FOLDS_FILE))?)
}

fn load_checkpoints(dir: &Path, folds: impl IntoIterator<Item = usize>) -> Result<Vec<Checkpoint>> {
    folds
        .into_iter()
        .map(|f| {
            let ck = Checkpoint::load(&dir.join(Checkpoint::file_name(f)))?;
            if ck.fold != f {
                return Err(Error::Invalid(format!("{} holds fold {}", Checkpoint::file_name(f).display(), ck.fold)));
            }
            Ok(ck)
        })
        .collect()
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    for w in cfg.generator.warnings(cfg.folds) {
        eprintln!("warning: {w}");
    }
    let volumes = generate_volumes(&cfg.generator)?;
    create_dir(out)?;
    write_dataset(&volumes, out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    for s in Stratum::all() {
        let n = volumes.iter().filter(|v| v.stratum() == s).count();
        println!("{}\t{n}", s.key());
    }
    println!("total\t{}", volumes.len());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, jobs: Option<usize>) -> Result<()> {
    let volumes = read_dataset(data)?;
    let plan = stratified_folds(&volumes, cfg.folds, cfg.seed)?;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    write_text(&out.join(FOLDS_FILE), &plan.to_csv())?;

    let progress = |log: &EpochLog| {
        eprintln!(
            "fold {} epoch {:>3} {:?} lr {:.3e}/{:.3e} loss {:.4} val P {}",
            log.fold,
            log.epoch,
            log.stage,
            log.lr.backbone,
            log.lr.heads,
            log.train_loss,
            log.val.score_p.map_or("undefined".into(), |p| format!("{p:.4}")),
        );
    };
    let (outcomes, summary) = train_all_folds(&volumes, &plan, &cfg.model, &cfg.train, jobs, Some(&progress))?;
    for o in &outcomes {
        let f = o.checkpoint.fold;
        o.checkpoint.save(&out.join(Checkpoint::file_name(f)))?;
        write_log(&o.logs, &out.join(format!("fold{f}.log.jsonl")))?;
    }
    let text = summary.to_kv().to_text();
    write_text(&out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn thresholds(cfg: &RunConfig, data: &Path, checkpoints: &Path, out: &Path) -> Result<()> {
    let volumes = read_dataset(data)?;
    let plan = read_plan(checkpoints)?;
    let cks = load_checkpoints(checkpoints, 0..plan.n_folds)?;
    let oof = oof_predictions(&volumes, &plan, &cks, cfg.tta)?;
    let set = optimize_thresholds(&oof, cfg.grid, ThresholdSource::Oof)?;
    parent_dir(out)?;
    oof.write_csv(&out.with_file_name("oof.csv"))?;
    set.save(out)?;
    cfg.save(&sibling(out, CONFIG_FILE))?;
    print!("{}", set.to_kv().to_text());
    Ok(())
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub checkpoints: &'a Path,
    pub thresholds: Option<&'a Path>,
    pub fold: Option<usize>,
    pub out: &'a Path,
    pub dump_logits: Option<&'a Path>,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let volumes = read_dataset(args.data)?;
    let plan = read_plan(args.checkpoints)?;
    let (scans, cks): (Vec<&Volume>, Vec<Checkpoint>) = match args.fold {
        Some(f) => {
            let idx = plan.val_indices(&volumes, f)?;
            (idx.iter().map(|&i| &volumes[i]).collect(), load_checkpoints(args.checkpoints, [f])?)
        }
        None => (volumes.iter().collect(), load_checkpoints(args.checkpoints, 0..plan.n_folds)?),
    };
    let set = args.thresholds.map(ThresholdSet::load).transpose()?;
    let (report, preds) = evaluate_pipeline(&scans, &cks, set.as_ref(), cfg.tta)?;

    parent_dir(args.out)?;
    let text = report.to_text();
    write_text(args.out, &text)?;
    write_predictions(&preds, &args.out.with_file_name("predictions.csv"))?;
    cfg.save(&sibling(args.out, CONFIG_FILE))?;
    if let Some(path) = args.dump_logits {
        dump_logits(&scans, &cks, path)?;
    }
    print!("{text}");
    Ok(())
}

/// Per-fold logits of both views, one row per (scan, fold, view).
fn dump_logits(scans: &[&Volume], cks: &[Checkpoint], path: &Path) -> Result<()> {
    parent_dir(path)?;
    let mut text = String::from("scan_id,fold,view");
    for l in Label::ALL {
        text += &format!(",z_{}", l.key());
    }
    text.push('\n');
    for v in scans {
        for fv in predict_views(v, cks)? {
            for (view, z) in [("plain", fv.plain), ("flipped", fv.flipped)] {
                text += &format!("{},{},{view}", v.scan_id, fv.fold);
                for x in z {
                    text += &format!(",{x:?}");
                }
                text.push('\n');
            }
        }
    }
    write_text(path, &text)
}

/// Audits the loss gradients of a seeded tiny model with the configured
/// pooling, activation and adversarial strength.
pub fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let model_cfg = MilConfig {
        input_dim: 5,
        embed_dim: 6,
        attn_hidden: 4,
        max_slices: 4,
        ..cfg.model.clone()
    };
    let model = MilModel::new(model_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Tensor::new(&[4, 5], (0..20).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let mask = [true, true, true, false];
    let label = rng.random_range(0..Label::ALL.len());
    let gender = rng.random_range(0..2);
    let report = model.check_loss_gradients(&x, &mask, label, gender, &cfg.train.loss, 1e-4, 1e-3)?;

    let mut groups: Vec<(&str, usize, f64)> = Vec::new();
    for e in &report.entries {
        match groups.last_mut() {
            Some((name, n, worst)) if *name == e.param => {
                *n += 1;
                *worst = worst.max(e.rel_error);
            }
            _ => groups.push((&e.param, 1, e.rel_error)),
        }
    }
    for (name, n, worst) in &groups {
        println!("{name:<24} {n:>4} {worst:.3e}");
    }
    println!("max_rel_error {:.3e} (tol {:.0e})", report.max_rel_error, report.tol);
    if !report.passed() {
        return Err(Error::Invalid(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_error
        )));
    }
    println!("ok");
    Ok(())
}
