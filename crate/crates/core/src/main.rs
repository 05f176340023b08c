use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cprfl::data::{generate_synthetic_lt, prototype_embedding, save_embedding, save_features, GeneratorConfig};
use cprfl::train::{evaluate, gradcheck_command, load_split, Checkpoint, TrainConfig, Trainer, TEST_FILE, TRAIN_FILE};
use cprfl::Error;

#[derive(Parser)]
#[command(name = "cprfl", version, about = "Category-prompt refined feature learning for long-tailed multi-label data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic long-tailed train/test pair.
    GenData(GenData),
    /// Train a model and write checkpoints, history and the final report.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train.cprf and test.cprf.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    exponent: Option<f64>,
    #[arg(long)]
    rank_offset: Option<f64>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    feat_dim: Option<usize>,
    #[arg(long)]
    cooccur: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Also write per-class prototype means as an embedding file.
    #[arg(long)]
    prototype_embedding: Option<PathBuf>,
}

fn write_file(path: &Path, text: &str) -> cprfl::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenData) -> cprfl::Result<()> {
    let d = GeneratorConfig::default();
    let cfg = GeneratorConfig {
        classes: a.classes.unwrap_or(d.classes),
        tokens: a.tokens.unwrap_or(d.tokens),
        feat_dim: a.feat_dim.unwrap_or(d.feat_dim),
        n_max: a.n_max.unwrap_or(d.n_max),
        pareto_exponent: a.exponent.unwrap_or(d.pareto_exponent),
        rank_offset: a.rank_offset.unwrap_or(d.rank_offset),
        co_occurrence_strength: a.cooccur.unwrap_or(d.co_occurrence_strength),
        noise_sigma: a.noise.unwrap_or(d.noise_sigma),
        test_per_class: a.test_per_class.unwrap_or(d.test_per_class),
        seed: a.seed.unwrap_or(d.seed),
    };
    let (train, test) = generate_synthetic_lt(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    save_features(&train, &a.out.join(TRAIN_FILE))?;
    save_features(&test, &a.out.join(TEST_FILE))?;
    if let Some(path) = &a.prototype_embedding {
        save_embedding(&prototype_embedding(&train)?, path)?;
    }
    let [h, m, t] = train.group_sizes();
    println!(
        "wrote {} train / {} test samples to {}; class counts {:?}; head:medium:tail = {h}:{m}:{t}",
        train.len(),
        test.len(),
        a.out.display(),
        train.class_counts
    );
    Ok(())
}

fn run(cli: Cli) -> cprfl::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train {
            config,
            data,
            out_dir,
            resume,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let (train, test) = load_split(&data)?;
            let mut trainer = match resume {
                Some(path) => {
                    let ck = Checkpoint::load(&path)?;
                    if ck.config != cfg {
                        return Err(Error::Mismatch(format!(
                            "{} was written with a different config",
                            path.display()
                        )));
                    }
                    Trainer::resume(ck, &train, &test)?
                }
                None => Trainer::new(cfg, &train, &test)?,
            };
            trainer.run(Some(&out_dir), |rec| {
                let r = &rec.report;
                println!(
                    "epoch {:>3}  loss {:.6}  mAP total {:.4}  head {:.4}  medium {:.4}  tail {:.4}",
                    rec.epoch, rec.train_loss, r.map_total, r.map_head, r.map_medium, r.map_tail
                );
            })
        }
        Command::Eval {
            checkpoint,
            data,
            report,
        } => {
            let r = evaluate(&checkpoint, &data)?;
            let json = r.to_json()?;
            if let Some(path) = report {
                write_file(&path, &(json.clone() + "\n"))?;
            }
            println!("{json}");
            Ok(())
        }
        Command::Gradcheck {
            config,
            eps,
            tolerance,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let out = gradcheck_command(&cfg, eps, tolerance)?;
            let r = &out.report;
            println!(
                "max_rel_error {:e}  param {}  index {}  analytic {:e}  numeric {:e}  entries {}",
                r.max_rel_error, r.worst_param, r.worst_index, r.analytic, r.numeric, r.entries_checked
            );
            if out.passed {
                println!("PASS (tolerance {tolerance:e})");
                Ok(())
            } else {
                Err(Error::Tolerance {
                    param: r.worst_param.clone(),
                    index: r.worst_index,
                    error: r.max_rel_error,
                    tolerance,
                })
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
