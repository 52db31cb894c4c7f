use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rglm::harness::{
    ablate, attention_csv, attention_report, build_instructions, cross_dataset_eval, evaluate,
    gradient_suite, load_model, metrics_csv, runs_csv, save_encoder, save_head, save_model, sweep,
    test_metrics, timing_csv, timing_report, train, TrainConfig, TrainVariant, Vocab,
};
use rglm::info::run_mi_verify;
use rglm::tag::{generate_synthetic_tag, load_tag, save_tag, SbmSpec, Split};
use rglm::{Error, Result};

#[derive(Parser)]
#[command(name = "rglm", about = "Graph-token instruction tuning with reconstructive objectives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides in --key=value form (applied after the file).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed {p:?}")))
        })
        .collect()
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stochastic-block-model dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        nodes: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        d_z: usize,
        #[arg(long, default_value_t = 0.1)]
        intra_p: f64,
        #[arg(long, default_value_t = 0.01)]
        inter_p: f64,
        #[arg(long, default_value_t = 0.5)]
        feature_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 0.6)]
        train_ratio: f64,
        #[arg(long, default_value_t = 0.2)]
        val_ratio: f64,
    },
    /// Pretrain the message-passing encoder and write its checkpoint.
    PretrainGnn {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        d_e: usize,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 5e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.8)]
        mask_ratio: f64,
        #[arg(long, default_value_t = 1.0)]
        kl_weight: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model per the config; writes metrics.csv, summary.json,
    /// and checkpoints into out_dir.
    Train(ConfigArgs),
    /// Evaluate a saved model checkpoint on a split of the dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the ablation table for the configured variant.
    Ablate {
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Grid sweep over the loss weights.
    Sweep {
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Comma list of lambda_f values (decoder).
        #[arg(long, default_value = "0.1,0.4,1.0")]
        lambda_f_grid: String,
        /// Comma list of lambda_s values (decoder).
        #[arg(long, default_value = "1,2")]
        lambda_s_grid: String,
        /// Comma list of lambda_l values (latent variants).
        #[arg(long, default_value = "0.2,1.0,2.0")]
        lambda_l_grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Verify the exact information-theoretic identities.
    MiVerify {
        #[arg(long, default_value_t = 1000)]
        decomposition: usize,
        #[arg(long, default_value_t = 200)]
        upper: usize,
        #[arg(long, default_value_t = 200)]
        dpi: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every loss through its full stack.
    GradCheck,
    /// Attention-mass comparison between two checkpoints.
    AttentionReport {
        #[arg(long)]
        checkpoint_a: PathBuf,
        #[arg(long)]
        checkpoint_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Wall-time-per-epoch comparison of vanilla and the configured
    /// reconstruction variant.
    TimingReport {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train on the config's dataset, evaluate zero-shot on another.
    CrossEval {
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn out_path(cfg: &TrainConfig, name: &str) -> PathBuf {
    match &cfg.out_dir {
        Some(d) => d.join(name),
        None => PathBuf::from(name),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            nodes,
            classes,
            d_z,
            intra_p,
            inter_p,
            feature_noise,
            seed,
            name,
            train_ratio,
            val_ratio,
        } => {
            let tag = generate_synthetic_tag(&SbmSpec {
                nodes,
                classes,
                d_z,
                intra_p,
                inter_p,
                feature_noise,
                seed,
                name,
                train_ratio,
                val_ratio,
            })?;
            save_tag(&tag, &out)?;
            println!(
                "wrote {} ({} nodes, {} edges, {} classes)",
                out.display(),
                tag.node_count,
                tag.edges.len(),
                tag.meta.num_classes
            );
        }
        Command::PretrainGnn { dataset, out, d_e, epochs, lr, mask_ratio, kl_weight, seed } => {
            let tag = load_tag(&dataset)?;
            let encoder = rglm::gnn::pretrain(
                &tag,
                rglm::gnn::GnnConfig {
                    d_e,
                    epochs,
                    lr,
                    mask_ratio,
                    kl_weight,
                    seed,
                    ..Default::default()
                },
            )?;
            save_encoder(&out, &encoder)?;
            let preds = rglm::gnn::classify_all(&encoder, &tag)?;
            let mut shown = [(Split::Train, 0, 0), (Split::Val, 0, 0), (Split::Test, 0, 0)];
            for i in 0..tag.node_count {
                if let Some(gold) = tag.labels[i] {
                    for (sp, hit, total) in shown.iter_mut() {
                        if tag.splits[i] == *sp {
                            *total += 1;
                            if preds[i] == gold {
                                *hit += 1;
                            }
                        }
                    }
                }
            }
            for (sp, hit, total) in shown {
                println!("encoder label accuracy {sp:?}: {hit}/{total}");
            }
            println!("wrote frozen encoder to {}", out.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let tag = load_tag(&cfg.dataset)?;
            let outcome = train(&cfg, &tag)?;
            let test = test_metrics(&cfg, &tag, &outcome)?;
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(out_path(&cfg, "metrics.csv"), metrics_csv(&outcome.metrics))?;
            save_model(&out_path(&cfg, "model.json"), &outcome.model)?;
            if let Some(head) = &outcome.head {
                save_head(&out_path(&cfg, "head.json"), head, cfg.d_model)?;
            }
            let summary = serde_json::json!({
                "variant": cfg.variant.to_string(),
                "seed": cfg.seed,
                "epochs": cfg.epochs,
                "best_val_acc": outcome.best_val.accuracy,
                "best_val_f1": outcome.best_val.macro_f1,
                "test_acc": test.accuracy,
                "test_f1": test.macro_f1,
            });
            std::fs::write(
                out_path(&cfg, "summary.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            println!("{summary}");
        }
        Command::Eval { checkpoint, split, config } => {
            let cfg = config.resolve()?;
            let tag = load_tag(&cfg.dataset)?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(Error::Config(format!("unknown split {other:?}"))),
            };
            let model = load_model(&checkpoint)?;
            let vocab = Vocab::for_classes(tag.meta.num_classes);
            let examples =
                build_instructions(&tag, cfg.task, split, &cfg.ndt_config(), &vocab, cfg.seed)?;
            let metrics = evaluate(&model, &examples, &vocab, cfg.task)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Ablate { seeds, out, config } => {
            let cfg = config.resolve()?;
            let tag = load_tag(&cfg.dataset)?;
            let rows = ablate(&cfg, &tag, &parse_seed_list(&seeds)?)?;
            let csv = runs_csv(&rows);
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Sweep { seeds, lambda_f_grid, lambda_s_grid, lambda_l_grid, out, config } => {
            let cfg = config.resolve()?;
            let tag = load_tag(&cfg.dataset)?;
            let parse_f = |s: &str| -> Result<Vec<f64>> {
                s.split(',')
                    .map(|p| {
                        p.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad grid value {p:?}")))
                    })
                    .collect()
            };
            let grid: Vec<(f64, f64, f64)> = if cfg.variant == TrainVariant::Decoder {
                let fs = parse_f(&lambda_f_grid)?;
                let ss = parse_f(&lambda_s_grid)?;
                fs.iter()
                    .flat_map(|&f| ss.iter().map(move |&s| (f, s, cfg.lambda_l)))
                    .collect()
            } else {
                parse_f(&lambda_l_grid)?
                    .into_iter()
                    .map(|l| (cfg.lambda_f, cfg.lambda_s, l))
                    .collect()
            };
            let rows = sweep(&cfg, &tag, &grid, &parse_seed_list(&seeds)?)?;
            let csv = runs_csv(&rows);
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::MiVerify { decomposition, upper, dpi, seed } => {
            let report = run_mi_verify(decomposition, upper, dpi, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.failures.is_empty() {
                return Err(Error::Numeric(format!(
                    "{} identity checks failed",
                    report.failures.len()
                )));
            }
        }
        Command::GradCheck => {
            let results = gradient_suite()?;
            let mut worst = 0.0f64;
            for (label, err) in &results {
                println!("{label}: rel err {err:.3e}");
                worst = worst.max(*err);
            }
            if worst > 1e-4 {
                return Err(Error::Numeric(format!(
                    "gradient check failed: max rel err {worst:.3e} > 1e-4"
                )));
            }
            println!("all gradients within 1e-4");
        }
        Command::AttentionReport { checkpoint_a, checkpoint_b, out, config } => {
            let cfg = config.resolve()?;
            let tag = load_tag(&cfg.dataset)?;
            let a = load_model(&checkpoint_a)?;
            let b = load_model(&checkpoint_b)?;
            let vocab = Vocab::for_classes(tag.meta.num_classes);
            let test = build_instructions(
                &tag,
                cfg.task,
                Split::Test,
                &cfg.ndt_config(),
                &vocab,
                cfg.seed,
            )?;
            let rows = attention_report(&a, &b, &test)?;
            let mean_a: f64 = rows.iter().map(|r| r.a_mass).sum::<f64>() / rows.len() as f64;
            let mean_b: f64 = rows.iter().map(|r| r.b_mass).sum::<f64>() / rows.len() as f64;
            let csv = attention_csv(&rows);
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            eprintln!("mean mass a={mean_a:.6} b={mean_b:.6}");
        }
        Command::TimingReport { out, config } => {
            let cfg = config.resolve()?;
            let tag = load_tag(&cfg.dataset)?;
            let mut cfgs = vec![(
                "vanilla".to_string(),
                TrainConfig { variant: TrainVariant::Vanilla, ..cfg.clone() },
            )];
            if cfg.variant != TrainVariant::Vanilla {
                cfgs.push((cfg.variant.to_string(), cfg.clone()));
            }
            let rows = timing_report(&cfgs, &tag)?;
            let csv = timing_csv(&rows);
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::CrossEval { target, config } => {
            let cfg = config.resolve()?;
            let tag_a = load_tag(&cfg.dataset)?;
            let tag_b = load_tag(&target)?;
            let metrics = cross_dataset_eval(&cfg, &tag_a, &tag_b)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}
