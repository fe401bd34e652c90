//! `stopmc` — regression Monte Carlo for discrete-time optimal stopping.
//!
//! All experiments are driven by a flat key-value config file; see the
//! repository README for the key reference. Exit codes: 0 success,
//! 1 validation error, 2 runtime failure.

mod config;
mod study;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{build_model, build_payoff, build_schedule, build_spaces, Config};
use stopmc_core::bounds::{bound_report, BoundInputs};
use stopmc_core::lookahead::{eval_seed, fit_continuation, price, FittedContinuation};
use stopmc_core::oracle::exact_dp;
use stopmc_core::paths::{simulate, ModelSpec};
use stopmc_core::{Error, Result};

/// Regression Monte Carlo engine for optimal stopping problems.
///
/// Rewards are discounted inside the payoff: configure
/// `payoff.discount = exp(-r * dt)` per step. GBM drifts are taken as
/// given; for risk-neutral pricing supply
/// `model.drift = (r - sigma^2/2) * dt` yourself.
#[derive(Parser)]
#[command(name = "stopmc", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a path batch and write it as a binary path file.
    Simulate {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Output path file.
        #[arg(long)]
        out: PathBuf,
        /// Seed (default `study.seeds[0]`).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of paths (default `study.n[0]`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit a continuation estimate and write it as a text artifact.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Output continuation file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Price a fitted continuation on a fresh evaluation batch.
    Price {
        #[arg(long)]
        config: PathBuf,
        /// Continuation file written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Evaluation seed (default: fit seed offset by a fixed constant).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of evaluation paths (default `study.eval_n`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Exact reference values: chain DP tables or a CRR tree price.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        /// Optional CSV output of the DP tables (chains only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the error / sample-complexity bound calculators.
    Bounds {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the configured (n, seed) study grid and write results.csv.
    Study {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default `out.dir` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Omit the generated-at header and zero runtime_ms, making the
        /// CSV byte-reproducible.
        #[arg(long)]
        no_timestamp: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_)
        | Error::Argument(_)
        | Error::Data(_)
        | Error::Format(_)
        | Error::Unsupported(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Simulate { config, out, seed, n } => {
            let cfg = Config::load(&config)?;
            let model = build_model(&cfg)?;
            let seed = match seed {
                Some(s) => s,
                None => cfg.u64_list("study.seeds")?[0],
            };
            let n = match n {
                Some(n) => n,
                None => cfg.usize_list("study.n")?[0],
            };
            let batch = simulate(&model, n, seed)?;
            batch.write_to(BufWriter::new(File::create(&out)?))?;
            println!(
                "wrote {} paths, horizon {}, dim {}, seed {} to {}",
                batch.len(),
                batch.horizon(),
                batch.dim(),
                batch.seed(),
                out.display()
            );
            Ok(0)
        }
        Command::Fit { config, out, seed, n } => {
            let cfg = Config::load(&config)?;
            let model = build_model(&cfg)?;
            let payoff = build_payoff(&cfg, &model)?;
            let seed = match seed {
                Some(s) => s,
                None => cfg.u64_list("study.seeds")?[0],
            };
            let n = match n {
                Some(n) => n,
                None => cfg.usize_list("study.n")?[0],
            };
            let spaces = build_spaces(&cfg, &model, n)?;
            let schedule = build_schedule(&cfg, model.horizon())?;
            let batch = simulate(&model, n, seed)?;
            let fitted = fit_continuation(&batch, &payoff, &spaces, &schedule)?;
            fitted.write_to(BufWriter::new(File::create(&out)?))?;
            println!(
                "fitted {} slots ({} schedule) on {} paths, seed {}; wrote {}",
                fitted.horizon(),
                schedule.label(),
                n,
                seed,
                out.display()
            );
            Ok(0)
        }
        Command::Price { config, fit, seed, n } => {
            let cfg = Config::load(&config)?;
            let model = build_model(&cfg)?;
            let payoff = build_payoff(&cfg, &model)?;
            let fitted = FittedContinuation::read_from(BufReader::new(File::open(&fit)?))?;
            let seed = seed.unwrap_or_else(|| eval_seed(fitted.provenance().seed));
            let n = match n {
                Some(n) => n,
                None => cfg.usize("study.eval_n")?,
            };
            let eval = simulate(&model, n, seed)?;
            let estimate = price(&fitted, &eval, &payoff)?;
            println!(
                "price {} stderr {} n {} eval_seed {}",
                estimate.estimate, estimate.std_error, estimate.n, seed
            );
            if let Some(oracle) = study::oracle_value(&cfg, &model, &payoff)? {
                println!("oracle {} gap {}", oracle, oracle - estimate.estimate);
            }
            Ok(0)
        }
        Command::Oracle { config, out } => {
            let cfg = Config::load(&config)?;
            let model = build_model(&cfg)?;
            let payoff = build_payoff(&cfg, &model)?;
            match &model {
                ModelSpec::Chain(chain) => {
                    let sol = exact_dp(chain, &payoff)?;
                    println!("value {}", sol.value0);
                    if let Some(path) = out {
                        let mut w = BufWriter::new(File::create(&path)?);
                        writeln!(w, "t,state,q,v,stop")?;
                        for t in 0..sol.q.len() {
                            for j in 0..chain.num_states() {
                                writeln!(
                                    w,
                                    "{t},{j},{},{},{}",
                                    sol.q[t][j],
                                    sol.v[t][j],
                                    u8::from(sol.stop[t][j])
                                )?;
                            }
                        }
                        println!("wrote DP tables to {}", path.display());
                    }
                }
                _ => match study::oracle_value(&cfg, &model, &payoff)? {
                    Some(v) => println!("value {v}"),
                    None => {
                        return Err(Error::Unsupported(
                            "oracle: needs a chain model, or 1-D GBM with oracle.steps and a put/call payoff"
                                .into(),
                        ))
                    }
                },
            }
            Ok(0)
        }
        Command::Bounds { config } => {
            let cfg = Config::load(&config)?;
            let inputs = BoundInputs {
                d: cfg.usize("bounds.d")?,
                w: cfg.usize("bounds.w")?,
                beta: cfg.f64("bounds.beta")?,
                n: cfg.u64("bounds.n")?,
                epsilon: cfg.f64("bounds.epsilon")?,
                delta: cfg.f64("bounds.delta")?,
                horizon: cfg.usize("bounds.horizon")?,
                t: cfg.usize("bounds.t")?,
            };
            let approx = cfg.f64_or("bounds.approx_error", 0.0)?;
            let report = bound_report(&inputs, approx)?;
            println!("bound report");
            println!(
                "  inputs                d={} w={} beta={} n={} epsilon={} delta={} T={} t={} approx_error={}",
                inputs.d, inputs.w, inputs.beta, inputs.n, inputs.epsilon, inputs.delta,
                inputs.horizon, inputs.t, approx
            );
            println!("  c(w)                  {}", report.c_w);
            println!("  vc cash flow          {}", report.vc_cashflow);
            println!("  v                     {}", report.v);
            println!("  ln K                  {}", report.k.ln);
            println!("  K                     {}", report.k.value());
            println!("  ln covering           {}", report.covering.ln);
            println!("  covering              {}", report.covering.value());
            println!(
                "  error bound           {}  (sample {}, approx {}, valid for n >= {}: {})",
                report.error.value,
                report.error.sample_part,
                report.error.approx_part,
                report.error.n_threshold,
                report.error.valid
            );
            println!(
                "  sample complexity     {}  (ln {})",
                report
                    .complexity
                    .count
                    .map(|c| c.to_string())
                    .unwrap_or_else(|| "overflow".into()),
                report.complexity.ln
            );
            println!();
            println!("quantity,value,ln");
            println!("c_w,{},", report.c_w);
            println!("vc_cashflow,{},", report.vc_cashflow);
            println!("v,{},", report.v);
            println!("K,{},{}", report.k.value(), report.k.ln);
            println!("covering,{},{}", report.covering.value(), report.covering.ln);
            println!("error_bound,{},", report.error.value);
            println!("error_bound_sample,{},", report.error.sample_part);
            println!(
                "sample_complexity,{},{}",
                report
                    .complexity
                    .count
                    .map(|c| c.to_string())
                    .unwrap_or_default(),
                report.complexity.ln
            );
            Ok(0)
        }
        Command::Study {
            config,
            out,
            threads,
            no_timestamp,
        } => {
            let cfg = Config::load(&config)?;
            let out_dir = match out {
                Some(p) => p,
                None => PathBuf::from(cfg.require("out.dir")?),
            };
            let outcome = study::run_study(&cfg, &out_dir, threads, no_timestamp)?;
            println!("wrote {}", outcome.csv_path.display());
            if outcome.rows_failed > 0 {
                eprintln!("{} rows failed", outcome.rows_failed);
                return Ok(2);
            }
            Ok(0)
        }
    }
}
