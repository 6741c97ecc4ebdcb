use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use realign_core::checkpoint::{load_checkpoint, save_checkpoint};
use realign_core::delta::{
    compute_delta, dare_transform, interference_candidates, resta_merge, safety_vector, DeltaSet,
    MaskSet,
};
use realign_core::fisher::{estimate_fisher, FisherDiag, Scope};
use realign_core::maskbuild::{build_mask, extend_mask_more, ExtraBasis};
use realign_core::pipeline::{self, apply_delta, RunConfig};
use realign_core::refmodel::{eval_suite, init_model, train, RefModelConfig};
use realign_core::surgery::{run_surgery, SurgeryPlan};
use realign_core::world::read_batch;

#[derive(Parser)]
#[command(
    name = "realign",
    version,
    about = "Checkpoint surgery that restores safety alignment lost during fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Diff a fine-tuned checkpoint against its base into a delta file.
    Delta {
        /// Fine-tuned checkpoint (minuend).
        #[arg(long)]
        after: PathBuf,
        /// Base checkpoint (subtrahend).
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diff an aligned checkpoint against its unaligned counterpart.
    SafetyVector {
        #[arg(long)]
        align: PathBuf,
        #[arg(long)]
        unalign: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the diagonal importance of each parameter from per-sample
    /// gradients of a model on a labeled dataset.
    Fisher {
        #[arg(long)]
        model: PathBuf,
        /// Dataset file: one "tok,tok,...<TAB>target" line per sample.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a removal mask: sign-interference candidates filtered to the
    /// top slice by importance.
    Mask {
        /// Fine-tuning delta checkpoint.
        #[arg(long)]
        delta: PathBuf,
        /// Safety-vector delta checkpoint.
        #[arg(long)]
        safety_vector: PathBuf,
        /// Importance diagonal checkpoint.
        #[arg(long)]
        fisher: PathBuf,
        /// Percent of candidates to mask.
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value = "per-tensor", value_parser = parse_scope)]
        scope: Scope,
        /// Also mask this percent of non-candidates, lowest importance
        /// first. Requires rho = 100.
        #[arg(long)]
        extra: Option<f64>,
        /// Denominator for --extra: non-candidates or all parameters.
        #[arg(long, default_value = "non-candidates", value_parser = parse_basis)]
        extra_basis: ExtraBasis,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a mask: masked coordinates revert to the base checkpoint,
    /// survivors get inverse-Hessian compensation.
    Surgery {
        #[arg(long)]
        sft: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Task dataset whose activations calibrate the layer Hessians.
        #[arg(long)]
        calib_data: PathBuf,
        #[arg(long, default_value_t = 128)]
        calib_samples: usize,
        #[arg(long, default_value_t = 128)]
        block_size: usize,
        #[arg(long, default_value_t = 0.01)]
        damping: f64,
        /// Skip compensation; plain removal only.
        #[arg(long)]
        no_recalibration: bool,
        #[arg(long)]
        out: PathBuf,
        /// Per-layer JSON-lines report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the full five-stage pipeline from a config file.
    Realign {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Trace the safety/task tradeoff across rho values and baselines.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Build the synthetic harmful-fine-tuning scenario end to end:
    /// train, degrade, repair, sweep.
    Scenario {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reference merging baselines.
    Baseline {
        #[command(subcommand)]
        cmd: BaselineCmd,
    },
    /// Train or evaluate the bundled reference model.
    Refmodel {
        #[command(subcommand)]
        cmd: RefmodelCmd,
    },
}

#[derive(Subcommand)]
enum BaselineCmd {
    /// Drop-and-rescale the fine-tuning delta, then reapply it.
    Dare {
        #[arg(long)]
        sft: PathBuf,
        #[arg(long)]
        pre: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        drop_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add a scaled safety vector to a fine-tuned checkpoint.
    Resta {
        #[arg(long)]
        sft: PathBuf,
        #[arg(long)]
        align: PathBuf,
        #[arg(long)]
        unalign: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum RefmodelCmd {
    /// Per-sample SGD on a dataset file. Starts from --model when given,
    /// otherwise from a fresh seeded initialization.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Fresh-init widths, comma separated (e.g. "24,24"). The first
        /// entry is the embedding width.
        #[arg(long, conflicts_with = "model")]
        dims: Option<String>,
        #[arg(long, default_value_t = 32)]
        vocab: usize,
        #[arg(long, default_value_t = 0.3)]
        lr: f64,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refusal rate on a harmful set, accuracy on a task set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        safety: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 0)]
        refuse_token: u32,
    },
}

/// Flags that override fields of a loaded config file.
#[derive(Args)]
struct Overrides {
    /// Mask ratio(s) in percent; repeat for a sweep grid.
    #[arg(long)]
    rho: Vec<f64>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long, value_parser = parse_scope)]
    scope: Option<Scope>,
    #[arg(long)]
    calib_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn apply(self, config: &mut RunConfig) {
        if !self.rho.is_empty() {
            config.rho = self.rho;
        }
        if let Some(v) = self.block_size {
            config.block_size = v;
        }
        if let Some(v) = self.damping {
            config.damping = v;
        }
        if let Some(v) = self.scope {
            config.scope = v;
        }
        if let Some(v) = self.calib_samples {
            config.calib_samples = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.out {
            config.out_dir = v;
        }
    }
}

fn parse_scope(s: &str) -> Result<Scope, realign_core::Error> {
    Scope::from_str(s)
}

fn parse_basis(s: &str) -> Result<ExtraBasis, String> {
    match s {
        "non-candidates" => Ok(ExtraBasis::NonCandidates),
        "all-params" => Ok(ExtraBasis::AllParams),
        other => Err(format!(
            "unknown basis {other:?}; expected non-candidates or all-params"
        )),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Delta { after, before, out } => {
            let a = load_checkpoint(&after)?;
            let b = load_checkpoint(&before)?;
            let d = compute_delta(&a, &b)?;
            save_checkpoint(&d.to_param_set(), &out)?;
            println!("wrote delta over {} tensors to {}", a.len(), out.display());
        }
        Cmd::SafetyVector { align, unalign, out } => {
            let a = load_checkpoint(&align)?;
            let u = load_checkpoint(&unalign)?;
            let d = safety_vector(&a, &u)?;
            save_checkpoint(&d.to_param_set(), &out)?;
            println!("wrote safety vector over {} tensors to {}", a.len(), out.display());
        }
        Cmd::Fisher { model, data, out } => {
            let m = load_checkpoint(&model)?;
            let batch = read_batch(&data)?;
            let cfg = RefModelConfig::infer(&m, batch.context_len() as u64)?;
            let n = batch.n_samples();
            let f = estimate_fisher(&m, &cfg, &[batch])?;
            save_checkpoint(&f.to_param_set(), &out)?;
            println!("estimated importance from {n} samples; wrote {}", out.display());
        }
        Cmd::Mask {
            delta,
            safety_vector: sv,
            fisher,
            rho,
            scope,
            extra,
            extra_basis,
            out,
        } => {
            let d_sft = DeltaSet::from_param_set(load_checkpoint(&delta)?)?;
            let d_safe = DeltaSet::from_param_set(load_checkpoint(&sv)?)?;
            let f = FisherDiag::from_param_set(load_checkpoint(&fisher)?)?;
            let candidates = interference_candidates(&d_sft, &d_safe)?;
            let mut mask = build_mask(&candidates, &f, rho, scope)?;
            if let Some(extra) = extra {
                mask = extend_mask_more(&mask, &candidates, &f, extra, extra_basis)?;
            }
            save_checkpoint(&mask.to_param_set(), &out)?;
            println!(
                "masked {} of {} parameters ({:.2}%); wrote {}",
                mask.count_ones(),
                mask.param_count(),
                100.0 * mask.fraction(),
                out.display()
            );
        }
        Cmd::Surgery {
            sft,
            pre,
            mask,
            calib_data,
            calib_samples,
            block_size,
            damping,
            no_recalibration,
            out,
            report,
        } => {
            let sft = load_checkpoint(&sft)?;
            let pre = load_checkpoint(&pre)?;
            let mask = MaskSet::from_param_set(load_checkpoint(&mask)?)?;
            let model = if no_recalibration {
                let d = compute_delta(&sft, &pre)?;
                let model = realign_core::delta::remove_deltas(&d, &pre, &mask)?;
                if let Some(path) = &report {
                    std::fs::write(path, "").with_context(|| path.display().to_string())?;
                }
                model
            } else {
                let batch = read_batch(&calib_data)?.take(calib_samples);
                let cfg = RefModelConfig::infer(&sft, batch.context_len() as u64)?;
                let (_, records) = realign_core::refmodel::forward(&sft, &cfg, &batch, true)?;
                let plan = SurgeryPlan {
                    block_size,
                    damping_fraction: damping,
                    ..SurgeryPlan::default()
                };
                let (model, layers) =
                    run_surgery(&sft, &pre, &mask, &records.expect("capture requested"), &plan)?;
                if let Some(path) = &report {
                    let mut lines = String::new();
                    for l in &layers {
                        lines.push_str(&serde_json::to_string(l).expect("report serializes"));
                        lines.push('\n');
                    }
                    std::fs::write(path, lines).with_context(|| path.display().to_string())?;
                }
                model
            };
            save_checkpoint(&model, &out)?;
            println!(
                "reverted {} coordinates{}; wrote {}",
                mask.count_ones(),
                if no_recalibration { "" } else { " with compensation" },
                out.display()
            );
        }
        Cmd::Realign { config, overrides } => {
            let mut cfg = RunConfig::from_file(&config)?;
            overrides.apply(&mut cfg);
            let outcome = pipeline::realign(&cfg)?;
            println!(
                "rho {}: masked {} parameters ({:.2}%)",
                outcome.report.rho,
                outcome.report.masked_total,
                100.0 * outcome.report.masked_fraction
            );
            if let Some(e) = &outcome.report.eval {
                println!(
                    "refusal_rate {:.4}, task_accuracy {:.4}",
                    e.refusal_rate, e.task_accuracy
                );
            }
            println!("wrote {}", outcome.checkpoint_path.display());
            println!("wrote {}", outcome.report_path.display());
        }
        Cmd::Sweep { config, overrides } => {
            let mut cfg = RunConfig::from_file(&config)?;
            overrides.apply(&mut cfg);
            let outcome = pipeline::sweep(&cfg)?;
            println!("{} rows across {} rho values", outcome.report.rows.len(), cfg.rho.len());
            println!("wrote {}", outcome.csv_path.display());
            println!("wrote {}", outcome.json_path.display());
        }
        Cmd::Scenario { seed, out } => {
            let outcome = pipeline::scenario_harmful_ft(seed, &out)?;
            for (name, e) in &outcome.reference {
                println!(
                    "{name}: refusal_rate {:.4}, task_accuracy {:.4}",
                    e.refusal_rate, e.task_accuracy
                );
            }
            println!("wrote scenario artifacts under {}", outcome.dir.display());
        }
        Cmd::Baseline { cmd } => match cmd {
            BaselineCmd::Dare {
                sft,
                pre,
                drop_rate,
                seed,
                out,
            } => {
                let sft = load_checkpoint(&sft)?;
                let pre = load_checkpoint(&pre)?;
                let d = compute_delta(&sft, &pre)?;
                let dropped = dare_transform(&d, drop_rate, seed)?;
                let model = apply_delta(&pre, &dropped)?;
                save_checkpoint(&model, &out)?;
                println!("dropped {drop_rate} of delta coordinates; wrote {}", out.display());
            }
            BaselineCmd::Resta {
                sft,
                align,
                unalign,
                scale,
                out,
            } => {
                let sft = load_checkpoint(&sft)?;
                let a = load_checkpoint(&align)?;
                let u = load_checkpoint(&unalign)?;
                let d_safe = safety_vector(&a, &u)?;
                let model = resta_merge(&sft, &d_safe, scale)?;
                save_checkpoint(&model, &out)?;
                println!("added safety vector at scale {scale}; wrote {}", out.display());
            }
        },
        Cmd::Refmodel { cmd } => match cmd {
            RefmodelCmd::Train {
                data,
                model,
                dims,
                vocab,
                lr,
                epochs,
                seed,
                out,
            } => {
                let batch = read_batch(&data)?;
                let (start, cfg) = match (model, dims) {
                    (Some(path), None) => {
                        let m = load_checkpoint(&path)?;
                        let cfg = RefModelConfig::infer(&m, batch.context_len() as u64)?;
                        (m, cfg)
                    }
                    (None, Some(dims)) => {
                        let dims: Vec<usize> = dims
                            .split(',')
                            .map(|d| d.trim().parse::<usize>())
                            .collect::<Result<_, _>>()
                            .context("dims must be comma-separated widths")?;
                        let cfg = RefModelConfig::new(vocab, batch.context_len(), dims, seed)?;
                        (init_model(&cfg), cfg)
                    }
                    (None, None) => bail!("pass --model to continue training or --dims for a fresh model"),
                    (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
                };
                let trained = train(&start, &cfg, &batch, lr, epochs, seed)?;
                save_checkpoint(&trained, &out)?;
                println!(
                    "trained {} epochs on {} samples; wrote {}",
                    epochs,
                    batch.n_samples(),
                    out.display()
                );
            }
            RefmodelCmd::Eval {
                model,
                safety,
                task,
                refuse_token,
            } => {
                let m = load_checkpoint(&model)?;
                let safety = read_batch(&safety)?;
                let task = read_batch(&task)?;
                let cfg = RefModelConfig::infer(&m, safety.context_len() as u64)?;
                let e = eval_suite(&m, &cfg, &safety, &task, refuse_token)?;
                println!("{}", serde_json::to_string(&e).expect("report serializes"));
            }
        },
    }
    Ok(())
}
