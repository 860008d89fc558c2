use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcrpl::cli::{cmd_ablate, cmd_eval, cmd_finetune, cmd_pretrain, cmd_sweep, cmd_synth, stats_table, CliError, Config, EvalSplit, GridOutput};

#[derive(Parser)]
#[command(name = "mcrpl", version, about = "Cross-domain sequential recommendation with prompt-enhanced pre-training")]
struct Args {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed (and run.seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Parallel runs for ablate and sweep.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (manifest.txt, data.tsv).
    Synth,
    /// Pre-train on all domains.
    Pretrain,
    /// Fine-tune a checkpoint on the target domain.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint, the untrained initialization, or Pop.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Rank by training popularity instead of a model.
        #[arg(long)]
        pop: bool,
    },
    /// Run ablation variants for every seed.
    Ablate {
        /// Comma-separated variants; defaults to ablate.variants.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Sweep one parameter, e.g. --grid train.lambda=0.01,0.02
    Sweep {
        #[arg(long)]
        grid: String,
    },
}

fn load_config(args: &Args) -> Result<(Config, PathBuf), CliError> {
    let (mut cfg, base) = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (Config::parse(&text)?, base)
        }
        None => (Config::default(), PathBuf::new()),
    };
    if let Some(seed) = args.seed {
        cfg.apply(&[("run.seed".into(), seed.to_string())])?;
    }
    Ok((cfg, base))
}

fn grid_exit(grid: &GridOutput) -> ExitCode {
    print!("{}", grid.table());
    if grid.failed.is_empty() {
        return ExitCode::SUCCESS;
    }
    for f in &grid.failed {
        eprintln!("skipped {f}");
    }
    ExitCode::from(2)
}

fn run(args: &Args) -> Result<ExitCode, CliError> {
    let (cfg, base) = load_config(args)?;
    let out = &args.out;
    match &args.cmd {
        Cmd::Synth => {
            let stats = cmd_synth(&cfg, out)?;
            print!("{}", stats_table(&stats));
        }
        Cmd::Pretrain => {
            let r = cmd_pretrain(&cfg, &base, out)?;
            if let Some(rep) = r.report {
                println!("{}", serde_json::to_string(&rep).expect("serializable"));
            }
        }
        Cmd::Finetune { checkpoint } => {
            let r = cmd_finetune(&cfg, &base, checkpoint, out)?;
            if let Some(rep) = r.report {
                println!("{}", serde_json::to_string(&rep).expect("serializable"));
            }
        }
        Cmd::Eval { checkpoint, split, pop } => {
            let split: EvalSplit = split.parse()?;
            let rep = cmd_eval(&cfg, &base, checkpoint.as_deref(), split, *pop, Some(out))?;
            println!("{}", serde_json::to_string(&rep).expect("serializable"));
        }
        Cmd::Ablate { variants } => {
            let variants = variants.clone().unwrap_or_else(|| cfg.ablate_variants.clone());
            return Ok(grid_exit(&cmd_ablate(&cfg, &base, &variants, args.jobs, out)?));
        }
        Cmd::Sweep { grid } => {
            let (param, values) = grid
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("grid {grid:?} is not key=v1,v2,...")))?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            return Ok(grid_exit(&cmd_sweep(&cfg, &base, param.trim(), &values, args.jobs, out)?));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
