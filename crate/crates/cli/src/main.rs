use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowfm_core::commands::{self, GenTarget};
use flowfm_core::persist::{ModelKind, RunConfig, TextArm};
use flowfm_core::sampler::{BenchCase, OdeConfig};
use flowfm_core::Error;

#[derive(Parser, Debug)]
#[command(name = "flowfm", version, about = "Flow-matching representation learning for accelerometer windows")]
struct Cli {
    /// Run configuration (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the config seed for training, seeds sampling elsewhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Train {
    /// Continue from this checkpoint up to `train.steps` total steps.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override `train.steps`.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labelled CSV replacing the checkpoint's training data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Joint encoder and flow-matching pretraining.
    Pretrain(Train),
    /// Same encoder trained with a DDPM generator.
    PretrainDiff(Train),
    /// Linear probe on the frozen encoder.
    Probe(Eval),
    /// Fine-tune the encoder with a linear head.
    Finetune(Eval),
    /// Tune the velocity network on class prompts.
    TextTune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with columns class_id,text.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, default_value = "text_rep")]
        arm: TextArm,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample windows from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with_all = ["prompt", "unconditional"])]
        class: Option<usize>,
        #[arg(long, conflicts_with = "unconditional")]
        prompt: Option<String>,
        #[arg(long)]
        unconditional: bool,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// ODE solver as method:steps, e.g. rk4:20.
        #[arg(long)]
        sampler: Option<OdeConfig>,
    },
    /// Compare flow and diffusion samplers on cost and FID.
    Bench {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        diffusion: PathBuf,
        /// Sampler cases: euler:20, rk4:20, ancestral, ddim:50.
        #[arg(long = "case", default_values = ["euler:20", "rk4:20", "ddim:50", "ancestral"])]
        cases: Vec<BenchCase>,
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// FID and kNN precision/recall of generated windows.
    EvalGen {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
    },
    /// Two-component PCA of encoder features.
    ExportProj {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: Option<PathBuf>,
    },
}

/// 1 for failures while computing, 2 for bad input or I/O.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } | Error::Tensor(_) | Error::Invalid(_) | Error::Data(_) => 1,
        Error::Io { .. } | Error::Config(_) | Error::Csv { .. } | Error::Checkpoint(_) => 2,
    }
}

fn train_config(cli: &Cli, train: &Train) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = train.steps {
        cfg.train_steps = steps;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    if cli.config.is_some() && !matches!(cli.command, Command::Pretrain(_) | Command::PretrainDiff(_)) {
        log::warn!("--config only applies to pretraining; the checkpoint's config is used");
    }
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_path();
    match &cli.command {
        Command::Pretrain(t) | Command::PretrainDiff(t) => {
            let kind = match cli.command {
                Command::Pretrain(_) => ModelKind::Flow,
                _ => ModelKind::Diffusion,
            };
            let cfg = train_config(cli, t)?;
            let path = commands::cmd_pretrain(&cfg, kind, out, t.resume.as_deref())?;
            println!("{}", path.display());
        }
        Command::Probe(e) => {
            let r = commands::cmd_probe(&e.checkpoint, e.data.as_deref(), e.split_seed, out)?;
            println!("accuracy {:.4} macro_f1 {:.4}", r.accuracy, r.macro_f1);
        }
        Command::Finetune(e) => {
            let r = commands::cmd_finetune(&e.checkpoint, e.data.as_deref(), e.split_seed, out)?;
            println!("accuracy {:.4} macro_f1 {:.4}", r.accuracy, r.macro_f1);
        }
        Command::TextTune {
            checkpoint,
            prompts,
            arm,
            steps,
        } => {
            let table = commands::load_prompts(prompts)?;
            let path = commands::cmd_text_tune(checkpoint, &table, *arm, *steps, out)?;
            println!("{}", path.display());
        }
        Command::Generate {
            checkpoint,
            class,
            prompt,
            unconditional,
            n,
            sampler,
        } => {
            let target = match (class, prompt, unconditional) {
                (Some(k), _, _) => GenTarget::Class(*k),
                (_, Some(text), _) => GenTarget::Prompt(text.clone()),
                (_, _, true) => GenTarget::Unconditional,
                _ => return Err(Error::Config("generate needs --class, --prompt or --unconditional".into())),
            };
            let path = commands::cmd_generate(checkpoint, &target, *n, *sampler, seed, out)?;
            println!("{}", path.display());
        }
        Command::Bench {
            flow,
            diffusion,
            cases,
            n,
        } => {
            let path = commands::cmd_bench(flow, diffusion, cases, *n, seed, out)?;
            println!("{}", path.display());
        }
        Command::EvalGen {
            checkpoint,
            real,
            generated,
        } => {
            let r = commands::cmd_eval_gen(checkpoint, real, generated, out)?;
            println!("fid {:.4} precision {:.4} recall {:.4}", r.fid, r.precision, r.recall);
        }
        Command::ExportProj {
            checkpoint,
            real,
            generated,
        } => {
            let path = commands::cmd_export_proj(checkpoint, real, generated.as_deref(), out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
