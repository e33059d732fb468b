use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use specprune::config::KvConfig;
use specprune::pipeline::{self, PruneRun};

/// Train small networks, prune them by covariance spectrum, and report bound terms.
///
/// Layer indices refer to node layers: layer 1 is the input, layers 2..=L are the
/// hidden layers that can be pruned.
#[derive(Parser, Debug)]
#[command(name = "specprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and save it into --out.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Write eigenvalue spectra and degrees-of-freedom curves of hidden layers.
    Spectrum {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Prune a trained model; writes the compressed model, selections and bound report.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a model, optionally against a second one.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Report ‖f − g‖_n against this model.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Prune repeatedly over widths, θ or λ and write sweep.csv.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<SweepArg>,
        /// Comma-separated sweep values.
        #[arg(long)]
        values: Option<String>,
        /// Layer being swept.
        #[arg(long)]
        layer: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the pruning run and write only the bound report.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepArg {
    Width,
    Theta,
    Lambda,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProcedureArg {
    Backward,
    Simultaneous,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Additional `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated node layers (2..=L).
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    theta: Option<f64>,
    /// λ as a multiple of Tr Σ̂ (one value, or one per layer).
    #[arg(long)]
    lambda_coef: Option<String>,
    /// Target widths, one per pruned layer.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long, value_enum)]
    procedure: Option<ProcedureArg>,
    /// Drop the leverage budget Σ 1/q̃_j ≤ (5/3) m m♯.
    #[arg(long)]
    no_budget_constraint: bool,
    /// Confidence parameter t in R_{n,t}.
    #[arg(long)]
    t: Option<f64>,
}

impl Common {
    fn config(&self, layers_key: &str) -> Result<KvConfig> {
        let mut kv = match &self.config {
            Some(path) => KvConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
            None => KvConfig::default(),
        };
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {pair:?}"))?;
            kv.set(k.trim(), v.trim())?;
        }
        let mut put = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                kv.set(key, v)?;
            }
            Ok(())
        };
        put("seed", self.seed.map(|s| s.to_string()))?;
        put(layers_key, self.layers.clone())?;
        put("prune.theta", self.theta.map(|t| t.to_string()))?;
        put("prune.lambda_coef", self.lambda_coef.clone())?;
        put("prune.widths", self.widths.clone())?;
        put(
            "prune.procedure",
            self.procedure.map(|p| match p {
                ProcedureArg::Backward => "backward".to_string(),
                ProcedureArg::Simultaneous => "simultaneous".to_string(),
            }),
        )?;
        put("prune.budget_constraint", self.no_budget_constraint.then(|| "false".to_string()))?;
        put("bound.t", self.t.map(|t| t.to_string()))?;
        Ok(kv)
    }

    fn out(&self) -> Result<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => bail!("--out is required for this command"),
        }
    }
}

fn print_prune(run: &PruneRun) {
    for sel in &run.outcome.selections {
        println!(
            "layer {}: kept {}/{} (requested {}), λ = {:.4e}, L^θ = {:.6e}{}",
            sel.layer,
            sel.indices.len(),
            sel.leverage.len(),
            sel.m_sharp,
            sel.lambda,
            sel.loss_theta,
            if sel.feasible { "" } else { "  [budget exhausted]" }
        );
    }
    let r = &run.report;
    println!("compression error ‖f̂ − f♯‖_n = {:.6e}", r.compression_error);
    println!("δ₁ = {:.6e}, δ₂ = {:.6e} (original widths {:.6e}), R_n,t = {:.6e}", r.delta1, r.delta2, r.delta2_original, r.r_nt);
    if let Some(ratio) = r.empirical_ratio {
        println!("empirical ratio ‖f̂ − f♯‖_n / δ₁ = {ratio:.4e}");
    }
    println!("bound = {:.6e}", r.bound);
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { common } => {
            let kv = common.config("prune.layers")?;
            let out = common.out()?;
            let s = pipeline::run_train(&kv, out)?;
            print!("train loss {:.6}", s.train.loss);
            if let Some(a) = s.train.accuracy {
                print!(", accuracy {a:.4}");
            }
            println!();
            if let Some(t) = s.test {
                println!("test loss {:.6}{}", t.loss, t.accuracy.map_or(String::new(), |a| format!(", accuracy {a:.4}")));
            }
            println!("model written to {}", out.display());
        }
        Command::Spectrum { model, common } => {
            let kv = common.config("spectrum.layers")?;
            let out = common.out()?;
            for r in pipeline::run_spectrum(&kv, &model, out)? {
                println!(
                    "layer {}: width {}, rank {}, N̂(1e-3·tr) = {:.3}, N̂(1e-6·tr) = {:.3}{}",
                    r.layer,
                    r.width,
                    r.rank,
                    r.dof_table,
                    r.dof_prune,
                    r.intrinsic_dim.map_or(String::new(), |d| format!(", N̂ℓN̂ℓ₊₁k² = {d:.3}"))
                );
            }
        }
        Command::Prune { model, common } => {
            let kv = common.config("prune.layers")?;
            let run = pipeline::run_prune(&kv, &model, common.out()?)?;
            print_prune(&run);
            if !run.feasible() {
                eprintln!("error: leverage budget left some layers short; partial output written");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval { model, compare, common } => {
            let kv = common.config("prune.layers")?;
            let s = pipeline::run_eval(&kv, &model, compare.as_deref(), common.out.as_deref())?;
            println!("{}", format_eval(&s));
        }
        Command::Sweep {
            model,
            kind,
            values,
            layer,
            common,
        } => {
            let mut kv = common.config("prune.layers")?;
            if let Some(k) = kind {
                kv.set(
                    "sweep.kind",
                    match k {
                        SweepArg::Width => "width",
                        SweepArg::Theta => "theta",
                        SweepArg::Lambda => "lambda",
                    },
                )?;
            }
            if let Some(v) = values {
                kv.set("sweep.values", v)?;
            }
            if let Some(l) = layer {
                kv.set("sweep.layer", l.to_string())?;
            }
            let out = common.out()?;
            let points = pipeline::run_sweep(&kv, &model, out)?;
            for p in &points {
                println!(
                    "{:>10.4e}  width {:>5}  rel. error {:.4e}{}",
                    p.value,
                    p.width,
                    p.relative_error,
                    p.test_accuracy.map_or(String::new(), |a| format!("  test acc {a:.4}"))
                );
            }
            println!("sweep written to {}", out.join("sweep.csv").display());
        }
        Command::Report { model, common } => {
            let kv = common.config("prune.layers")?;
            let run = pipeline::run_report(&kv, &model, common.out()?)?;
            print_prune(&run);
            if !run.feasible() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn format_eval(s: &pipeline::EvalSummary) -> String {
    let mut lines = vec![format!("train loss {:.6}", s.train.loss)];
    if let Some(a) = s.train.accuracy {
        lines.push(format!("train accuracy {a:.4}"));
    }
    lines.push(format!("train ‖f‖_n {:.6}", s.train.output_norm));
    if let Some(t) = &s.test {
        lines.push(format!("test loss {:.6}", t.loss));
        if let Some(a) = t.accuracy {
            lines.push(format!("test accuracy {a:.4}"));
        }
    }
    if let Some(e) = s.compression_error {
        lines.push(format!("‖f − g‖_n {e:.6e}"));
    }
    lines.join("\n")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
