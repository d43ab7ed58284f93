use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fxtune::diagnostics::{descent_check, mismatch_per_layer};
use fxtune::fixedpoint::Precision;
use fxtune::harness::{Experiment, RunConfig};
use fxtune::qforward::{quantize_weights, PrecisionAssignment};
use fxtune::strategies::Strategy;
use fxtune::tensornet::{Checkpoint, Parameters};
use fxtune::{Error, Result};

#[derive(Parser)]
#[command(name = "fxtune", version, about = "Fixed-point emulation and fine-tuning of small CNNs")]
struct Cli {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct Bits {
    /// Weight bit-width: 4, 8, 16, 32 or float.
    #[arg(long, default_value = "8")]
    weights: Precision,
    /// Activation bit-width: 4, 8, 16, 32 or float.
    #[arg(long, default_value = "8")]
    acts: Precision,
}

#[derive(Subcommand)]
enum Command {
    /// Train the float network and save a checkpoint.
    TrainFloat,
    /// Quantize the float checkpoint and evaluate it without fine-tuning.
    Quantize(#[command(flatten)] Bits),
    /// Fine-tune one bit-width cell with a strategy.
    Finetune {
        #[arg(long)]
        strategy: Strategy,
        #[command(flatten)]
        bits: Bits,
    },
    /// Evaluate a checkpoint at a bit-width pair.
    Eval {
        /// Checkpoint to evaluate; defaults to the configured one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        bits: Bits,
    },
    /// Gradient-mismatch report for the float checkpoint.
    Diagnose {
        #[command(flatten)]
        bits: Bits,
        #[arg(long, default_value_t = 50)]
        batches: usize,
        /// Descent-check step in activation LSBs.
        #[arg(long, default_value_t = 1.0)]
        step_scale: f64,
    },
    /// Run the bit-width grid for the configured strategy.
    Grid {
        #[arg(long)]
        strategy: Option<Strategy>,
    },
}

#[derive(Serialize)]
struct CellResult {
    strategy: Strategy,
    weights: Precision,
    acts: Precision,
    /// Top-k error in percent, or "n/a" when training diverged.
    error: serde_json::Value,
    assignment: PrecisionAssignment,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Checkpoint with fixed-point layers stored as raw integers.
fn quantized_checkpoint(exp: &Experiment, params: &Parameters, assign: &PrecisionAssignment) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::from_params(&exp.net, params)?;
    let view = quantize_weights(params, assign)?;
    for (spec, layer) in exp.net.layers.iter().zip(&view.layers) {
        if let Some(q) = &layer.quantized {
            ckpt.set_quantized_weights(&spec.name, q)?;
        }
    }
    Ok(ckpt)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Command::Grid { strategy: Some(s) } = &cli.command {
        cfg.strategy.strategy = *s;
    }
    let out = cfg.output_dir.clone();
    let exp = Experiment::prepare(cfg)?;
    create_dir(&out)?;

    match cli.command {
        Command::TrainFloat => {
            let trained = exp.train_float()?;
            let path = out.join("float.ckpt");
            Checkpoint::from_params(&exp.net, &trained.params)?.save(&path)?;
            trained.log.save_csv(out.join("train_float_log.csv"))?;
            let err = exp.evaluate(&trained.params, &PrecisionAssignment::float(exp.net.num_layers()))?;
            if trained.diverged {
                println!("float training: n/a (diverged)");
            } else {
                println!("float top-{} error: {err:.2}%", exp.cfg.top_k);
            }
            println!("checkpoint: {}", path.display());
        }
        Command::Quantize(bits) => {
            let params = exp.pretrained()?;
            let assign = exp.assignment(&params, bits.weights, bits.acts)?;
            let err = exp.evaluate(&params, &assign)?;
            let stem = format!("quantized_w{}_a{}", bits.weights, bits.acts);
            quantized_checkpoint(&exp, &params, &assign)?.save(out.join(format!("{stem}.ckpt")))?;
            write_json(
                &out.join(format!("{stem}.json")),
                &CellResult {
                    strategy: Strategy::None,
                    weights: bits.weights,
                    acts: bits.acts,
                    error: err.into(),
                    assignment: assign,
                },
            )?;
            println!("W{}/A{} top-{} error: {err:.2}%", bits.weights, bits.acts, exp.cfg.top_k);
        }
        Command::Finetune { strategy, bits } => {
            let float_base = exp.pretrained()?;
            let p1_base = match strategy {
                Strategy::P2 | Strategy::P3 => Some(exp.p1(&float_base, bits.weights)?.params),
                _ => None,
            };
            let (outcome, assign) =
                exp.finetune_cell(strategy, &float_base, p1_base.as_ref(), bits.weights, bits.acts)?;
            let stem = format!("{strategy}_w{}_a{}", bits.weights, bits.acts);
            outcome.log.save_csv(out.join(format!("{stem}_log.csv")))?;
            let error = if outcome.diverged {
                println!("W{}/A{} {strategy}: n/a (diverged)", bits.weights, bits.acts);
                serde_json::Value::from("n/a")
            } else {
                let err = exp.evaluate(&outcome.params, &assign)?;
                Checkpoint::from_params(&exp.net, &outcome.params)?.save(out.join(format!("{stem}.ckpt")))?;
                println!("W{}/A{} {strategy} top-{} error: {err:.2}%", bits.weights, bits.acts, exp.cfg.top_k);
                err.into()
            };
            write_json(
                &out.join(format!("{stem}.json")),
                &CellResult {
                    strategy,
                    weights: bits.weights,
                    acts: bits.acts,
                    error,
                    assignment: assign,
                },
            )?;
        }
        Command::Eval { checkpoint, bits } => {
            let params = match checkpoint {
                Some(path) => {
                    let (net, params) = Checkpoint::load(&path)?.to_params()?;
                    if net.geometry()? != exp.net.geometry()? {
                        return Err(Error::Config(format!(
                            "{} does not match the configured network",
                            path.display()
                        )));
                    }
                    params
                }
                None => exp.pretrained()?,
            };
            let assign = exp.assignment(&params, bits.weights, bits.acts)?;
            let err = exp.evaluate(&params, &assign)?;
            println!("W{}/A{} top-{} error: {err:.2}%", bits.weights, bits.acts, exp.cfg.top_k);
        }
        Command::Diagnose { bits, batches, step_scale } => {
            if batches == 0 {
                return Err(Error::Config("--batches must be at least 1".into()));
            }
            let params = exp.pretrained()?;
            let assign = exp.assignment(&params, bits.weights, bits.acts)?;
            let data: Vec<_> = exp
                .data
                .validation
                .batches(exp.cfg.strategy.batch_size)
                .take(batches)
                .collect();
            let report = mismatch_per_layer(&exp.net, &params, &assign, &data)?;
            report.save(&out)?;
            let descents = data
                .iter()
                .map(|b| descent_check(&exp.net, &params, &assign, b, step_scale))
                .collect::<Result<Vec<_>>>()?;
            write_json(&out.join("descent.json"), &descents)?;
            println!("layer        cosine    rel_err");
            for l in &report.layers {
                match (l.cosine_mean, l.rel_err_mean) {
                    (Some(c), Some(e)) => println!("{:<12} {c:>7.4} {e:>10.4}", l.layer),
                    _ => println!("{:<12} undefined", l.layer),
                }
            }
            if let Some(rho) = report.depth_trend() {
                println!("depth/error Spearman: {rho:.3}");
            }
            let down = descents.iter().filter(|d| d.is_descent()).count();
            let flat = descents.iter().filter(|d| d.flat).count();
            println!("descent: {down}/{} batches downhill, {flat} flat", descents.len());
        }
        Command::Grid { .. } => {
            let report = exp.run_grid()?;
            let (csv, _) = report.save(&out)?;
            print!("{}", report.to_csv());
            println!("float baseline: {:.2}%  ({})", report.float_baseline, csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidFormat(_) => ExitCode::from(2),
                Error::Io { .. } | Error::Json(_) | Error::Csv(_) | Error::Parse { .. } | Error::Truncated { .. } => {
                    ExitCode::from(3)
                }
                _ => ExitCode::FAILURE,
            }
        }
    }
}
