use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mdpd::harness::{
    ablate, finetune_models, grad_check_spec, mode_warnings, objective_grad_check, op_grad_checks, persist, pretrain,
    source_task, target_task, write_ndjson, HarnessError, Sweep, TrainConfig,
};
use mdpd::memory::mem_report;
use mdpd::model::checkpoint::{load_checkpoint, save_checkpoint};
use mdpd::model::{build_backbone, build_side, BackboneModel};
use mdpd::trainer::{evaluate, evaluate_backbone, EvalMode, Mode, TransferModels};

#[derive(Parser)]
#[command(name = "mdpd", version, about = "Side-network transfer with dual-path distillation on synthetic tasks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// One of mdpd, full_ft, partial, side_only.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Output path; extensions are replaced per file kind.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Mask ratio.
    #[arg(long, global = true)]
    lambda: Option<String>,
    /// Side-network reduction factor.
    #[arg(long, global = true)]
    r: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a backbone on the source task and save it.
    Pretrain {
        /// Checkpoint to write; defaults to the output path with a `.ckpt` extension.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune a pretrained backbone on the target task.
    Finetune {
        /// Pretrained backbone; pretrains inline when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate saved models on the target task.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Side-network checkpoint for assisted evaluation.
        #[arg(long)]
        side: Option<PathBuf>,
        /// Skip assisted evaluation.
        #[arg(long)]
        faded_only: bool,
    },
    /// Fine-tune over one swept setting and several seeds.
    Ablate {
        /// `KEY=V1,V2,...`
        #[arg(long)]
        sweep: String,
    },
    /// Analytic and measured training-memory report.
    MemReport {
        #[arg(long, default_value_t = 0.15)]
        tol: f64,
        /// Report hidden widths 128, 256 and 512 at reductions 2 and 4 instead of the configured one.
        #[arg(long)]
        grid: bool,
    },
    /// Finite-difference check of every op and of the full objective.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Print the effective configuration.
    DumpConfig,
}

fn load_config(common: &Common) -> Result<TrainConfig, HarnessError> {
    let mut overrides = Vec::new();
    let mut push = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            overrides.push((key.to_string(), v));
        }
    };
    push("train.seed", common.seed.map(|s| s.to_string()));
    push("train.mode", common.mode.clone());
    push("train.steps", common.steps.map(|s| s.to_string()));
    push("distill.lambda", common.lambda.clone());
    push("arch.reduction", common.r.clone());
    Ok(TrainConfig::load(common.config.as_deref(), &overrides)?)
}

fn load_backbone(cfg: &TrainConfig, path: &Path) -> Result<BackboneModel, HarnessError> {
    let mut backbone = build_backbone(&cfg.arch, 0)?;
    backbone.load_named(&load_checkpoint(path)?)?;
    Ok(backbone)
}

fn pretrained(cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<BackboneModel, HarnessError> {
    if let Some(path) = checkpoint {
        return load_backbone(cfg, path);
    }
    let out = pretrain(cfg)?;
    if !out.converged {
        return Err(HarnessError::Convergence(format!(
            "pretraining reached {:.4} source accuracy, below {}",
            out.accuracy, cfg.pretrain.min_accuracy
        )));
    }
    Ok(out.backbone)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_deref();
    match cli.command {
        Command::DumpConfig => print!("{}", cfg.dump()),
        Command::Pretrain { checkpoint } => {
            let outcome = pretrain(&cfg)?;
            let record = outcome.record(&cfg);
            println!("{}", serde_json::to_string(&record).expect("record serializes"));
            if let Some(out) = out {
                write_ndjson(&out.with_extension("ndjson"), std::slice::from_ref(&record))?;
            }
            if !outcome.converged {
                return Err(HarnessError::Convergence(format!(
                    "source accuracy {:.4} is below {}",
                    outcome.accuracy, cfg.pretrain.min_accuracy
                )));
            }
            let path = checkpoint
                .or_else(|| out.map(|o| o.with_extension("ckpt")))
                .unwrap_or_else(|| PathBuf::from(format!("pretrain-seed{}.ckpt", cfg.train.seed)));
            save_checkpoint(&path, &outcome.backbone.to_named())?;
            eprintln!("checkpoint written to {}", path.display());
        }
        Command::Finetune { checkpoint } => {
            for w in mode_warnings(&cfg) {
                eprintln!("warning: {w}");
            }
            let backbone = pretrained(&cfg, checkpoint.as_deref())?;
            let (record, models) = finetune_models(&cfg, &backbone, "finetune")?;
            let assisted = record.assisted.as_ref().map_or("-".to_string(), |a| format!("{:.4}", a.accuracy));
            println!(
                "mode={} seed={} loss={:.6} faded_acc={:.4} assisted_acc={} baseline_faded_acc={:.4} freeze_intact={}",
                record.mode,
                record.seed,
                record.final_loss.total,
                record.faded.accuracy,
                assisted,
                record.baseline_faded_accuracy,
                record.freeze_intact
            );
            if let Some(out) = out {
                let (ndjson, csv) = persist(std::slice::from_ref(&record), out)?;
                save_checkpoint(&out.with_extension("backbone.ckpt"), &models.backbone.to_named())?;
                if let Some(side) = &models.side {
                    save_checkpoint(&out.with_extension("side.ckpt"), &side.to_named())?;
                }
                eprintln!("records written to {} and {}", ndjson.display(), csv.display());
            }
        }
        Command::Eval { checkpoint, side, faded_only } => {
            let backbone = load_backbone(&cfg, &checkpoint)?;
            let target = target_task(&cfg, cfg.train.seed);
            let source = source_task(&cfg, cfg.train.seed);
            let faded = evaluate_backbone(&backbone, &target.eval).map_err(HarnessError::from)?;
            let source_faded = evaluate_backbone(&backbone, &source.eval).map_err(HarnessError::from)?;
            println!("target faded: {}", serde_json::to_string(&faded).expect("serializes"));
            println!("source faded: {}", serde_json::to_string(&source_faded).expect("serializes"));
            match (side, faded_only) {
                (Some(path), false) => {
                    let mut side = build_side(&cfg.arch, 0)?;
                    side.load_named(&load_checkpoint(&path)?)?;
                    let mut models = TransferModels::new(backbone, Mode::SideOnly, cfg.distill_config().map_err(HarnessError::Setup)?, 0)?;
                    models.side = Some(side);
                    let assisted = evaluate(&models, &target.eval, EvalMode::Assisted)?;
                    println!("target assisted: {}", serde_json::to_string(&assisted).expect("serializes"));
                }
                (None, false) => eprintln!("note: no --side checkpoint, assisted evaluation skipped"),
                _ => {}
            }
        }
        Command::Ablate { sweep } => {
            let sweep: Sweep = sweep.parse()?;
            if cfg.train.mode != Mode::Mdpd {
                eprintln!("warning: ablations always run in mdpd mode");
            }
            let records = ablate(&cfg, &sweep)?;
            for r in &records {
                println!("{} seed={} faded_acc={:.4} loss={:.6}", r.tag, r.seed, r.faded.accuracy, r.final_loss.total);
            }
            let (ndjson, csv) = persist(&records, out.unwrap_or(Path::new("ablate")))?;
            eprintln!("records written to {} and {}", ndjson.display(), csv.display());
        }
        Command::MemReport { tol, grid } => {
            let specs = if grid {
                let mut v = Vec::new();
                for hidden in [128, 256, 512] {
                    for reduction in [2, 4] {
                        v.push(mdpd::model::ArchSpec { hidden, reduction, tokens: 16, ..cfg.arch.clone() });
                    }
                }
                v
            } else {
                vec![cfg.arch.clone()]
            };
            let records = specs.iter().map(|s| mem_report(s, cfg.train.seed, tol)).collect::<Result<Vec<_>, _>>()?;
            println!(
                "{:>4} {:>4} {:>6} {:>3} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10} {:>8} {:>5}",
                "L", "N", "D_B", "r", "a_total", "sigma_total", "full_ft", "petl_bound", "side", "empirical", "1/r", "pass"
            );
            for r in &records {
                println!(
                    "{:>4} {:>4} {:>6} {:>3} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10.4} {:>8.4} {:>5}",
                    r.spec.layers,
                    r.spec.tokens,
                    r.spec.hidden,
                    r.spec.reduction,
                    r.a_total,
                    r.sigma_total,
                    r.full_ft,
                    r.petl_lower_bound,
                    r.side_network,
                    r.ratio_empirical,
                    r.ratio_analytic,
                    r.pass
                );
            }
            println!("softmax buffers (N² per layer) are excluded from a_total and counted separately as softmax_excluded");
            match out {
                Some(out) => write_ndjson(&out.with_extension("ndjson"), &records)?,
                None => {
                    for r in &records {
                        println!("{}", serde_json::to_string(r).expect("serializes"));
                    }
                }
            }
        }
        Command::GradCheck { h, tol } => {
            let mut worst = 0.0f64;
            for c in op_grad_checks(cfg.train.seed, h)? {
                println!("{:<14} {:.3e}", c.op, c.max_rel_error);
                worst = worst.max(c.max_rel_error);
            }
            let obj = objective_grad_check(&grad_check_spec(), cfg.train.seed, h)?;
            println!("{:<14} {:.3e}", "objective", obj);
            worst = worst.max(obj);
            if worst.is_nan() || worst >= tol {
                return Err(HarnessError::Check(format!("max relative error {worst:.3e} exceeds {tol:e}")));
            }
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
