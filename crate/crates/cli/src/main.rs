#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mft_cli::commands::{self, PruneRow};
use mft_cli::config::{parse_overrides, ExperimentConfig};
use mft_cli::error::{Category, CliError, Result};
use mft_cli::report::cmd_report;
use mft_core::schedule::Selector;
use mft_core::train::EpochLog;
use mft_core::ModelConfig;

#[derive(Parser)]
#[command(name = "mft", version, about = "Masked fine-tuning and token pruning experiments for a small vision transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as `--key value`, after the command's own flags.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &parse_overrides(&self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch with the configured mask strategy.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy under random inference-time occlusion.
    EvalOcclusion {
        /// Defaults to `<out_dir>/model.mftc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = commands::DEFAULT_GRID)]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        eval_seeds: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Training-free hierarchical token pruning.
    EvalPrune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.7])]
        keep_ratio: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [String::from("attention"), String::from("random")])]
        selector: Vec<String>,
        #[arg(long, default_value_t = 3)]
        stages: usize,
        /// Test samples whose kept tokens are recorded.
        #[arg(long, default_value_t = 4)]
        visualize: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a checkpoint with token pruning active.
    FinetunePruned {
        #[arg(long)]
        init: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        keep_ratio: f64,
        #[arg(long, default_value = "attention")]
        selector: String,
        #[arg(long, default_value_t = 3)]
        stages: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Analytic GFLOPs, dense and under pruning schedules.
    Flops {
        /// `vit-base`, `toy`, or `config` for the configured model.
        #[arg(long, default_value = "vit-base")]
        preset: String,
        #[arg(long, value_delimiter = ',')]
        keep_ratio: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        stages: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Merge run directories into one table with accuracy drops.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn selector(s: &str) -> Result<Selector> {
    Ok(s.parse()?)
}

fn progress(l: &EpochLog) {
    eprintln!(
        "epoch {:>3}  loss {:.4}  ce {:.4}  kl {:.4}  top1 {:.2}",
        l.epoch, l.train_loss, l.ce_loss, l.kl_loss, l.test_top1
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.load()?;
            let out = commands::cmd_train(&cfg, &mut progress)?;
            println!("{}", out.dir.join(commands::CHECKPOINT_FILE).display());
        }
        Command::EvalOcclusion {
            checkpoint,
            grid,
            eval_seeds,
            common,
        } => {
            let cfg = common.load()?;
            let ckpt = commands::checkpoint_path(&cfg, checkpoint.as_deref());
            for (r, a) in commands::cmd_eval_occlusion(&cfg, &ckpt, &grid, eval_seeds)? {
                println!("mask_ratio {r:<5} top1 {a:.2}");
            }
        }
        Command::EvalPrune {
            checkpoint,
            keep_ratio,
            selector: sel,
            stages,
            visualize,
            common,
        } => {
            let cfg = common.load()?;
            let ckpt = commands::checkpoint_path(&cfg, checkpoint.as_deref());
            let selectors = sel.iter().map(|s| selector(s)).collect::<Result<Vec<_>>>()?;
            for PruneRow {
                keep_ratio,
                selector,
                top1,
                gflops,
            } in commands::cmd_eval_prune(&cfg, &ckpt, &keep_ratio, &selectors, stages, visualize)?
            {
                println!("keep {keep_ratio:<4} {:<9} top1 {top1:.2}  gflops {gflops:.4}", selector.as_str());
            }
        }
        Command::FinetunePruned {
            init,
            keep_ratio,
            selector: sel,
            stages,
            common,
        } => {
            let cfg = common.load()?;
            let out = commands::cmd_finetune_pruned(&cfg, &init, keep_ratio, selector(&sel)?, stages, &mut progress)?;
            println!(
                "{}",
                mft_cli::table::fmt_delta(out.final_top1(), out.base_top1)
            );
        }
        Command::Flops {
            preset,
            keep_ratio,
            stages,
            common,
        } => {
            let model = match preset.as_str() {
                "vit-base" => ModelConfig::vit_base(),
                "toy" => ModelConfig::toy(),
                "config" => common.load()?.model(),
                other => return Err(CliError::new(Category::Usage, format!("unknown preset `{other}`"))),
            };
            model.validate()?;
            let rows = commands::flops_rows(&model, &keep_ratio, stages)?;
            let t = commands::flops_table(&preset, &rows);
            if preset == "config" {
                t.write(&common.load()?.output_dir().join(commands::FLOPS_FILE))?;
            }
            print!("{}", String::from_utf8_lossy(&t.to_bytes()));
        }
        Command::Report { out, runs } => {
            let r = cmd_report(&runs, &out)?;
            let d = r.table.column("display")?;
            for row in &r.table.rows {
                println!("{:<16} {:<10} {:<48} {}", row[0], row[1], row[2], row[d]);
            }
            eprintln!("{} overlays in {}", r.overlays, out.join("overlays").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::new(Category::Usage, first).line());
            return ExitCode::from(Category::Usage.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.category.exit_code() as u8)
        }
    }
}
