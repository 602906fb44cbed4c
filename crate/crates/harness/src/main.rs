use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ver_harness::error::HarnessError;
use ver_harness::{
    run_ablation, run_analyze, run_distill, run_finetune, ExperimentConfig, Result,
};

#[derive(Parser)]
#[command(name = "ver", about = "Vision expert library experiments", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. --set model.active_k=3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overrides every phase seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.sets, self.seed)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Distill the student against the synthetic teacher bank.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a distilled checkpoint to the synthetic task.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write utilization, norm-map, and information-map artifacts.
        #[arg(long)]
        analyze: bool,
    },
    /// Run one ablation grid over seed replicas.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One of: topk, routing-strategy, dfm-tfs, cta.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write analysis artifacts for a finetuned checkpoint.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter manifest of a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Distill { cfg, out } => {
            let cfg = cfg.load()?;
            let s = run_distill(&cfg, &out)?;
            println!(
                "distilled {} steps; final loss {:.6}; wrote {} and {}",
                s.steps,
                s.final_loss,
                s.checkpoint.display(),
                s.metrics.display()
            );
            for (i, (a, b)) in s.initial_cos.iter().zip(&s.final_cos).enumerate() {
                println!("teacher {i}: cosine distance {a:.4} -> {b:.4}");
            }
            println!("mi penalty {:.4} -> {:.4}", s.initial_mi, s.final_mi);
        }
        Cmd::Finetune {
            cfg,
            checkpoint,
            out,
            analyze,
        } => {
            let cfg = cfg.load()?;
            let s = run_finetune(&cfg, &checkpoint, &out)?;
            println!(
                "finetuned ({}): success {:.3}, rmse {:.4}; wrote {} and {}",
                s.run.strategy,
                s.run.final_success,
                s.run.final_mean_rmse,
                s.checkpoint.display(),
                s.metrics.display()
            );
            if s.run.eval_teacher_freqs.iter().sum::<f64>() > 0.0 {
                let freqs: Vec<String> = s
                    .run
                    .eval_teacher_freqs
                    .iter()
                    .map(|f| format!("{f:.3}"))
                    .collect();
                println!("eval teacher choice: [{}]", freqs.join(", "));
            }
            if analyze {
                let a = run_analyze(&cfg, &s.checkpoint, &out)?;
                for f in &a.files {
                    println!("wrote {}", f.display());
                }
            }
        }
        Cmd::Ablate {
            cfg,
            kind,
            checkpoint,
            out,
        } => {
            let cfg = cfg.load()?;
            let s = run_ablation(&cfg, &kind, &checkpoint, &out)?;
            println!("wrote {}", s.table.display());
            for row in &s.rows {
                println!(
                    "{}: success {:.3} +- {:.3}, rmse {:.4} +- {:.4}",
                    row.label, row.success_mean, row.success_std, row.rmse_mean, row.rmse_std
                );
            }
        }
        Cmd::Analyze {
            cfg,
            checkpoint,
            out,
        } => {
            let cfg = cfg.load()?;
            let s = run_analyze(&cfg, &checkpoint, &out)?;
            println!("success {:.3}", s.success_rate);
            for f in &s.files {
                println!("wrote {}", f.display());
            }
        }
        Cmd::InspectCheckpoint { path } => {
            let entries = ver_model::read_manifest(&path)
                .map_err(HarnessError::Model)?;
            let mut total = 0usize;
            for e in &entries {
                let n: usize = e.shape.iter().product();
                total += n;
                let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
                println!("{} [{}] @ {}", e.name, dims.join("x"), e.offset);
            }
            println!("{} parameters in {} tensors", total, entries.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
