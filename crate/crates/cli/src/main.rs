use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gatelora::analysis::{
    activation_report, block_costs, merge_adapters, model_flops_report, prune_inactive, random_selection_baseline,
    FlopsMode,
};
use gatelora::checkpoint::{Checkpoint, MANIFEST_FILE};
use gatelora::data::resolve_dataset;
use gatelora::tensor::DType;
use gatelora::train::{evaluate_top1, finetune, knn_accuracy, pretrain, RunConfig, RunResult};
use gatelora::{Error, RegKind};

#[derive(Parser)]
#[command(
    name = "gatelora",
    version,
    about = "Score-gated LoRA/DoRA fine-tuning for small vision transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh model on the configured data, without adapters.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune gated adapters on top of a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, value_enum, default_value_t = Metric::Top1)]
        metric: Metric,
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Reference set for the K-NN metric.
        #[arg(long)]
        train: Option<String>,
    },
    /// Analytic FLOPs of a checkpoint.
    Flops {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Unmerged)]
        mode: Mode,
        /// Sequence length including the class token; defaults to the model's.
        #[arg(long)]
        tokens: Option<u64>,
    },
    /// Fold active adapters into the base weights.
    Merge {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop adapters whose gate is off.
    Prune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Report {
        #[command(subcommand)]
        what: ReportKind,
    },
    Baseline {
        #[command(subcommand)]
        what: BaselineKind,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_enum)]
    reg: Option<Reg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum ReportKind {
    /// Per-site activation frequency over a directory of fine-tuned checkpoints.
    Activations {
        #[arg(long)]
        runs: PathBuf,
        /// CSV path; an SVG heatmap is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BaselineKind {
    /// Fine-tune with a random fixed subset of blocks switched on.
    Random {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Top1,
    Knn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Merged,
    Unmerged,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reg {
    L1,
    L2,
    Hinge,
}

/// Failure classes mapped onto process exit codes.
enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Json(_) | Error::Contract(_) | Error::Index { .. } => Failure::Config(msg),
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => Failure::Numeric(msg),
            Error::Data(_) | Error::Format(_) | Error::Length { .. } | Error::Io(_) | Error::Dimension { .. } => {
                Failure::Data(msg)
            }
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(RunConfig::from_json(&text)?)
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn save(ck: &Checkpoint, dir: &Path) -> CliResult<()> {
    ck.save(dir)
        .map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn gates_csv(result: &RunResult) -> String {
    let mut out = String::from("step");
    for s in &result.sites {
        out.push(',');
        out.push_str(&s.to_string());
    }
    out.push('\n');
    for (i, row) in result.gate_trajectory.iter().enumerate() {
        out.push_str(&(i + 1).to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Selected checkpoint at `out`, the last-step model under `out/final`, plus CSV logs.
fn write_run(out: &Path, run: &RunConfig, result: &RunResult) -> CliResult<()> {
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    save(
        &Checkpoint::new(result.selected.clone(), Some(run.clone()), DType::F32),
        out,
    )?;
    save(
        &Checkpoint::new(result.final_model.clone(), Some(run.clone()), DType::F32),
        &out.join("final"),
    )?;
    write(&out.join("metrics.csv"), &result.metrics_csv())?;
    if !result.sites.is_empty() {
        write(&out.join("gates.csv"), &gates_csv(result))?;
    }
    let summary = serde_json::json!({
        "steps": run.steps,
        "selected_step": result.selected_step,
        "best_val_acc": result.best_val_acc,
        "final_active": result.final_active(),
        "sites": result.sites.len(),
    });
    println!("{summary}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let cfg = read_config(&config)?;
            let result = pretrain(&cfg)?;
            write_run(&out, &cfg, &result)
        }
        Command::Finetune {
            config,
            init,
            out,
            overrides,
        } => {
            let mut cfg = read_config(&config)?;
            if let Some(l) = overrides.lambda {
                cfg.reg.lambda = l;
            }
            if let Some(r) = overrides.reg {
                cfg.reg.kind = match r {
                    Reg::L1 => RegKind::L1,
                    Reg::L2 => RegKind::L2,
                    Reg::Hinge => RegKind::Hinge,
                };
                if cfg.reg.kind == RegKind::Hinge && cfg.reg.tau.is_none() {
                    cfg.reg.tau = cfg.adapter.as_ref().map(|a| a.tau);
                }
            }
            if let Some(s) = overrides.seed {
                cfg.seed = s;
            }
            if let Some(r) = overrides.rank {
                let ad = cfg
                    .adapter
                    .as_mut()
                    .ok_or_else(|| Failure::Config("--rank needs an adapter section in the config".into()))?;
                ad.rank = r;
            }
            cfg.validate()?;
            let base = load_ckpt(&init)?;
            let result = finetune(&cfg, &base.model)?;
            write_run(&out, &cfg, &result)
        }
        Command::Eval {
            ckpt,
            data,
            metric,
            k,
            train,
        } => {
            let ck = load_ckpt(&ckpt)?;
            let ds = resolve_dataset(&data, &ck.model.cfg)?;
            let acc = match metric {
                Metric::Top1 => evaluate_top1(&ck.model, &ds)?,
                Metric::Knn => {
                    let reference = train.ok_or_else(|| Failure::Config("--metric knn needs --train <URI>".into()))?;
                    let tr = resolve_dataset(&reference, &ck.model.cfg)?;
                    knn_accuracy(&ck.model, &tr, &ds, k)?
                }
            };
            println!("{acc}");
            Ok(())
        }
        Command::Flops { ckpt, mode, tokens } => {
            let ck = load_ckpt(&ckpt)?;
            let mode = match mode {
                Mode::Merged => FlopsMode::Merged,
                Mode::Unmerged => FlopsMode::Unmerged,
            };
            let tokens = tokens.unwrap_or(ck.model.cfg.tokens() as u64);
            let report = model_flops_report(&ck.model.cfg, &block_costs(&ck.model), mode, tokens);
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| Failure::Data(e.to_string()))?
            );
            Ok(())
        }
        Command::Merge { ckpt, out } => {
            let ck = load_ckpt(&ckpt)?;
            let merged = merge_adapters(&ck.model)?;
            save(&Checkpoint { model: merged, ..ck }, &out)
        }
        Command::Prune { ckpt, out } => {
            let ck = load_ckpt(&ckpt)?;
            let pruned = prune_inactive(&ck.model);
            save(&Checkpoint { model: pruned, ..ck }, &out)
        }
        Command::Report {
            what: ReportKind::Activations { runs, out },
        } => {
            let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)
                .map_err(|e| Failure::Data(format!("{}: {e}", runs.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(MANIFEST_FILE).is_file())
                .collect();
            dirs.sort();
            if dirs.is_empty() {
                return Err(Failure::Data(format!("no checkpoints under {}", runs.display())));
            }
            let mut snaps = Vec::with_capacity(dirs.len());
            for d in &dirs {
                let ck = load_ckpt(d)?;
                snaps.push(
                    ck.model
                        .gate_snapshot()
                        .into_iter()
                        .map(|g| (g.site, g.active))
                        .collect(),
                );
            }
            let report = activation_report(&snaps)?;
            write(&out, &report.to_csv())?;
            write(&out.with_extension("svg"), &report.to_svg())?;
            println!("{} runs, {} layers", report.runs, report.layers);
            Ok(())
        }
        Command::Baseline {
            what:
                BaselineKind::Random {
                    n,
                    seed,
                    config,
                    init,
                    out,
                },
        } => {
            let cfg = read_config(&config)?;
            let base = load_ckpt(&init)?;
            let (result, used) = random_selection_baseline(n, seed, &cfg, &base.model)?;
            match out {
                Some(out) => write_run(&out, &used, &result),
                None => {
                    print!("{}", result.metrics_csv());
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
