//! `fairmil`: generate synthetic scans, train fold models, tune thresholds,
//! evaluate ensembles and audit gradients.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairmil::config::RunConfig;
use fairmil::data::Boost;
use fairmil::kv::KvDoc;
use fairmil::model::Pooling;
use fairmil::Error;

#[derive(Parser)]
#[command(name = "fairmil", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest plus feature files).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Cross-validated training: one checkpoint and log per fold plus a summary.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Tune per-class thresholds on out-of-fold predictions.
    Thresholds {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Score the fold ensemble on a dataset, or on one validation fold of it.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        /// Restrict to the validation scans of this fold.
        #[arg(long)]
        fold: Option<usize>,
        /// Report file; defaults to `<checkpoints>/report.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-fold, per-view logits as CSV.
        #[arg(long)]
        dump_logits: Option<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Finite-difference gradient audit of a seeded tiny model.
    Gradcheck {
        #[command(flatten)]
        opts: Overrides,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct Overrides {
    /// `key = value` run config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda_adv: Option<f64>,
    #[arg(long, value_parser = ["attention", "mean", "max"])]
    pooling: Option<String>,
    /// Oversampling factor of the (G, female) stratum.
    #[arg(long)]
    boost_female_g: Option<f64>,
    #[arg(long, overrides_with = "no_tta")]
    tta: bool,
    #[arg(long, overrides_with = "tta")]
    no_tta: bool,
    /// Threshold set applied by `eval`.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Folds trained concurrently; defaults to the fold count.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> fairmil::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply(KvDoc::read(path)?)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.folds {
            cfg.folds = f;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(l) = self.lambda_adv {
            cfg.lambda_adv = l;
        }
        if let Some(p) = &self.pooling {
            cfg.model.pooling = p.parse::<Pooling>()?;
        }
        if let Some(b) = self.boost_female_g {
            cfg.train.boost = Boost::female_g(b);
        }
        if self.tta {
            cfg.tta = true;
        }
        if self.no_tta {
            cfg.tta = false;
        }
        cfg.sync();
        cfg.validate()?;
        eprintln!("# resolved config\n{}", cfg.to_text());
        Ok(cfg)
    }
}

/// 2: configuration, 3: filesystem, 4: data validation or file format.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { out, opts } => opts.resolve().and_then(|c| commands::generate(&c, &out)),
        Command::Train { data, out, opts } => opts
            .resolve()
            .and_then(|c| commands::train(&c, &data, &out, opts.jobs)),
        Command::Thresholds {
            data,
            checkpoints,
            out,
            opts,
        } => opts
            .resolve()
            .and_then(|c| commands::thresholds(&c, &data, &checkpoints, &out)),
        Command::Eval {
            data,
            checkpoints,
            fold,
            out,
            dump_logits,
            opts,
        } => opts.resolve().and_then(|c| {
            let out = out.unwrap_or_else(|| checkpoints.join("report.txt"));
            commands::eval(
                &c,
                &commands::EvalArgs {
                    data: &data,
                    checkpoints: &checkpoints,
                    thresholds: opts.thresholds.as_deref(),
                    fold,
                    out: &out,
                    dump_logits: dump_logits.as_deref(),
                },
            )
        }),
        Command::Gradcheck { opts } => opts.resolve().and_then(|c| commands::gradcheck(&c)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
