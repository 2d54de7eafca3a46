use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deltaforge_core::delta::{apply_delta, compute_delta, DeltaSet, DeltaSource, TensorSelection};
use deltaforge_core::editors::{BiasKey, BlockValue, EditOp, MagnitudeDist, OpRecord, META_OP_RECORD};
use deltaforge_core::probe;
use deltaforge_core::riemann::{estimate_with_exact, DEFAULT_SUBDIVISIONS};
use deltaforge_core::sweep::{emit_report, run_sweep, ProbeSetup, ReportFormat, SweepConfig};
use deltaforge_core::{load_checkpoint, save_checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "deltaforge", version, about = "Edit delta parameters and estimate the loss change")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Delta computation.
    #[command(subcommand)]
    Delta(DeltaCommand),
    /// Apply an editing operator to a delta checkpoint.
    Edit(EditArgs),
    /// Add an edited delta to the pre-trained weights.
    Apply {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe training and gradients.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Riemann estimate of the loss change from a perturbation, printed as JSON.
    Estimate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        perturbation: PathBuf,
        #[arg(long = "C", default_value_t = DEFAULT_SUBDIVISIONS)]
        subdivisions: usize,
        /// Average over c = 1..C-1 instead of c = 0..C-1.
        #[arg(long)]
        skip_left: bool,
    },
    /// Run a parameter sweep from a JSON config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

#[derive(Subcommand)]
enum DeltaCommand {
    Compute {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        /// all, matrices or list:a,b
        #[arg(long, default_value = "matrices")]
        select: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Train a probe and write W_pre and W_post.
    Train {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_pre: PathBuf,
        #[arg(long)]
        out_post: PathBuf,
    },
    /// Loss gradient at a checkpoint on the fine-tuning data.
    Grad {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    delta: PathBuf,
    #[arg(long)]
    op: String,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    bias_on: Option<String>,
    /// Gradient checkpoint for product-sign bias.
    #[arg(long)]
    gradient: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    allow_reversal: bool,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    signed_mean: bool,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    keep: Option<f64>,
    #[arg(long)]
    factor: Option<f64>,
    #[arg(long)]
    dist: Option<String>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    perturbation_out: Option<PathBuf>,
}

fn required<T>(value: Option<T>, flag: &str, op: &str) -> Result<T> {
    value.ok_or_else(|| Error::InvalidConfig(format!("--op {op} requires --{flag}")))
}

impl EditArgs {
    fn build_op(&self) -> Result<EditOp> {
        let op = self.op.as_str();
        let p = || required(self.p, "p", op);
        let k = || required(self.k, "k", op);
        let edit = match op {
            "drop" => EditOp::Drop { p: p()? },
            "dare" => EditOp::Dare { p: p()? },
            "comp" => EditOp::Comp { p: p()?, k: k()? },
            "della" => EditOp::Della {
                p: p()?,
                window: required(self.window, "window", op)?,
            },
            "biased" => {
                let bias_on = match required(self.bias_on.as_deref(), "bias-on", op)? {
                    "delta_sign" => BiasKey::DeltaSign,
                    "product_sign" => BiasKey::ProductSign,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "unknown --bias-on {other:?} (expected delta_sign or product_sign)"
                        )))
                    }
                };
                EditOp::Biased {
                    p: p()?,
                    k: k()?,
                    bias_on,
                }
            }
            "bitdelta" => EditOp::Bitdelta,
            "bitdelta-scale" => EditOp::BitdeltaScale {
                factor: required(self.factor, "factor", op)?,
            },
            "bitdelta-sample" => EditOp::BitdeltaSample {
                dist: required(self.dist.as_deref(), "dist", op)?.parse::<MagnitudeDist>()?,
                spread: required(self.spread, "spread", op)?,
            },
            "multibit" => {
                let bits = required(self.bits, "bits", op)?;
                if bits >= usize::BITS {
                    return Err(Error::InvalidConfig(format!("{bits} bits is too many")));
                }
                EditOp::Multibit {
                    blocks: 1usize << bits,
                    value: if self.signed_mean {
                        BlockValue::SignedMean
                    } else {
                        BlockValue::MagnitudeMean
                    },
                }
            }
            "svd" => EditOp::Svd {
                rank: required(self.rank, "rank", op)?,
            },
            "ties" => EditOp::Ties {
                keep: required(self.keep, "keep", op)?,
            },
            "expo" => EditOp::Expo {
                alpha: required(self.alpha, "alpha", op)?,
                allow_reversal: self.allow_reversal,
            },
            other => return Err(Error::InvalidConfig(format!("unknown operator {other:?}"))),
        };
        Ok(edit)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Delta(DeltaCommand::Compute {
            pre,
            post,
            select,
            out,
        }) => {
            let selection: TensorSelection = select.parse()?;
            let pre_map = load_checkpoint(&pre, false)?;
            let post_map = load_checkpoint(&post, false)?;
            let mut delta = compute_delta(&post_map, &pre_map, &selection)?;
            delta.source = DeltaSource {
                pre: pre.display().to_string(),
                post: post.display().to_string(),
            };
            save_checkpoint(&delta.to_checkpoint(), &out)
        }
        Command::Edit(args) => {
            let op = args.build_op()?;
            let delta = DeltaSet::from_checkpoint(load_checkpoint(&args.delta, false)?)?;
            let gradient = match &args.gradient {
                Some(path) => Some(load_checkpoint(path, false)?),
                None => None,
            };
            let outcome = op.apply(&delta, args.seed, gradient.as_ref())?;
            save_checkpoint(&outcome.edited_checkpoint()?, &args.out)?;
            if let Some(path) = &args.perturbation_out {
                save_checkpoint(&outcome.perturbation_checkpoint()?, path)?;
            }
            Ok(())
        }
        Command::Apply { pre, edited, out } => {
            let pre_map = load_checkpoint(&pre, false)?;
            let edited = DeltaSet::from_checkpoint(load_checkpoint(&edited, false)?)?;
            save_checkpoint(&apply_delta(&pre_map, &edited)?, &out)
        }
        Command::Probe(ProbeCommand::Train {
            spec,
            out_pre,
            out_post,
        }) => {
            let setup: ProbeSetup = read_json(&spec)?;
            let trained = setup.train()?;
            let (pre, post) = trained.checkpoints()?;
            save_checkpoint(&pre, &out_pre)?;
            save_checkpoint(&post, &out_post)?;
            let r = &trained.record;
            eprintln!(
                "trained {} + {} steps, relative gradient norm {:.3e}, converged: {}",
                r.steps_base, r.steps_finetune, r.relative_grad_norm, r.converged
            );
            Ok(())
        }
        Command::Probe(ProbeCommand::Grad { spec, params, out }) => {
            let setup: ProbeSetup = read_json(&spec)?;
            let (_, finetune) = setup.datasets()?;
            let params = load_checkpoint(&params, false)?;
            save_checkpoint(&probe::grad(&setup.probe, &params, &finetune)?, &out)
        }
        Command::Estimate {
            spec,
            post,
            perturbation,
            subdivisions,
            skip_left,
        } => {
            let setup: ProbeSetup = read_json(&spec)?;
            let (_, finetune) = setup.datasets()?;
            let w_post = load_checkpoint(&post, false)?;
            let pert_map = load_checkpoint(&perturbation, false)?;
            let op_record: Option<OpRecord> = pert_map
                .metadata()
                .get(META_OP_RECORD)
                .map(|s| serde_json::from_str(s))
                .transpose()?;
            let pert = DeltaSet::from_checkpoint(pert_map)?;
            let est = estimate_with_exact(
                &setup.probe,
                &finetune,
                &w_post,
                &pert,
                subdivisions,
                !skip_left,
            )?;
            println!("{}", serde_json::to_string_pretty(&est.report(op_record))?);
            Ok(())
        }
        Command::Sweep {
            config,
            out,
            format,
        } => {
            let format: ReportFormat = format.parse()?;
            let config: SweepConfig = read_json(&config)?;
            let rows = run_sweep(&config)?;
            emit_report(&rows, &out, format)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
