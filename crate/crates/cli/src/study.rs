//! The study harness: fit/price grids over (n, seed) with CSV reporting.
//!
//! Rows execute in a worker pool; results are collected and written by a
//! single writer in (n, seed) order, so identical configs and seeds produce
//! identical files. `runtime_ms` is the one nondeterministic column; the
//! `--no-timestamp` mode zeroes it (and drops the generated-at header) so a
//! study can be checked byte-for-byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use stopmc_core::lookahead::{eval_seed, fit_continuation, price};
use stopmc_core::oracle::{crr_price, exact_dp, l2_norm_under, CrrParams, ExerciseStyle, OptionKind};
use stopmc_core::paths::{chain_marginals, simulate, ModelSpec};
use stopmc_core::payoff::{PayoffKind, PayoffSpec};
use stopmc_core::{Error, Result};

use crate::config::{build_model, build_payoff, build_schedule, build_spaces, build_study_settings, terms_for, Config};

/// Fixed column order of `results.csv`.
pub const CSV_HEADER: &str = "study_id,model,schedule,basis,degree,H,beta,n_fit,n_eval,seed,price,stderr,oracle_value,oracle_gap,l2_error_t0,runtime_ms,error";

/// One result row.
#[derive(Debug, Clone)]
struct Row {
    n_fit: usize,
    seed: u64,
    degree: usize,
    price: Option<f64>,
    stderr: Option<f64>,
    l2_error_t0: Option<f64>,
    runtime_ms: u128,
    error: Option<String>,
}

/// Outcome of a study run.
#[derive(Debug)]
pub struct StudyOutcome {
    /// Path of the written CSV.
    pub csv_path: PathBuf,
    /// Number of rows that recorded an error.
    pub rows_failed: usize,
}

/// The exact reference value for the configured problem, when computable:
/// the DP value for chains, a CRR tree price for one-dimensional GBM with
/// `oracle.steps` configured and a put/call payoff.
pub fn oracle_value(cfg: &Config, model: &ModelSpec, payoff: &PayoffSpec) -> Result<Option<f64>> {
    match model {
        ModelSpec::Chain(chain) => Ok(Some(exact_dp(chain, payoff)?.value0)),
        ModelSpec::Gbm(g) => {
            let steps = match cfg.get("oracle.steps") {
                Some(v) => v
                    .parse::<usize>()
                    .map_err(|_| Error::Validation("config: bad oracle.steps".into()))?,
                None => return Ok(None),
            };
            if g.dim != 1 {
                return Ok(None);
            }
            let (strike, discount, kind) = match payoff.kind() {
                PayoffKind::Put { strike, discount } => (*strike, *discount, OptionKind::Put),
                PayoffKind::Call { strike, discount } => (*strike, *discount, OptionKind::Call),
                _ => return Ok(None),
            };
            let horizon = g.horizon as f64;
            let vol_step = g.vol[0];
            let rate_total = -discount.ln() * horizon;
            // The tree prices the risk-neutral process implied by the
            // discount factor; warn when the configured drift disagrees.
            let implied = -discount.ln() - 0.5 * vol_step * vol_step;
            if (g.drift[0] - implied).abs() > 1e-10 {
                eprintln!(
                    "warning: gbm drift {} differs from the risk-neutral drift {} implied by payoff.discount; the tree oracle prices the risk-neutral process",
                    g.drift[0], implied
                );
            }
            let fractions: Vec<f64> = (0..=g.horizon).map(|t| t as f64 / horizon).collect();
            let value = crr_price(&CrrParams {
                s0: g.s0[0],
                strike,
                rate_step: rate_total / steps as f64,
                up: (vol_step * (horizon / steps as f64).sqrt()).exp(),
                steps,
                style: ExerciseStyle::Bermudan(fractions),
                kind,
            })?;
            Ok(Some(value))
        }
        ModelSpec::Custom(_) => Ok(None),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs the configured study and writes `results.csv` under `out_dir`.
pub fn run_study(
    cfg: &Config,
    out_dir: &Path,
    threads: Option<usize>,
    no_timestamp: bool,
) -> Result<StudyOutcome> {
    let settings = build_study_settings(cfg)?;
    let model = build_model(cfg)?;
    let payoff = build_payoff(cfg, &model)?;
    let schedule = build_schedule(cfg, model.horizon())?;
    // Validate the space construction for every n up front.
    for &n in &settings.n_list {
        build_spaces(cfg, &model, n)?;
    }
    let oracle = oracle_value(cfg, &model, &payoff)?;
    let chain_ref = match &model {
        ModelSpec::Chain(c) => {
            let sol = exact_dp(c, &payoff)?;
            let mu0 = chain_marginals(c).swap_remove(0);
            Some((sol.q[0].clone(), mu0))
        }
        _ => None,
    };

    let grid: Vec<(usize, u64)> = settings
        .n_list
        .iter()
        .flat_map(|&n| settings.seeds.iter().map(move |&s| (n, s)))
        .collect();

    let compute_row = |&(n, seed): &(usize, u64)| -> Row {
        let start = Instant::now();
        let degree = terms_for(cfg, &model, n).unwrap_or(0);
        let result: Result<(f64, f64, Option<f64>)> = (|| {
            let spaces = build_spaces(cfg, &model, n)?;
            let batch = simulate(&model, n, seed)?;
            let fitted = fit_continuation(&batch, &payoff, &spaces, &schedule)?;
            let eval = simulate(&model, settings.eval_n, eval_seed(seed))?;
            let estimate = price(&fitted, &eval, &payoff)?;
            let l2 = chain_ref.as_ref().map(|(q0, mu0)| {
                let chain = match &model {
                    ModelSpec::Chain(c) => c,
                    _ => unreachable!(),
                };
                let diff: Vec<f64> = chain
                    .states
                    .iter()
                    .enumerate()
                    .map(|(j, s)| fitted.predict(0, s) - q0[j])
                    .collect();
                l2_norm_under(mu0, &diff)
            });
            Ok((estimate.estimate, estimate.std_error, l2))
        })();
        let runtime_ms = start.elapsed().as_millis();
        match result {
            Ok((price, stderr, l2_error_t0)) => Row {
                n_fit: n,
                seed,
                degree,
                price: Some(price),
                stderr: Some(stderr),
                l2_error_t0,
                runtime_ms,
                error: None,
            },
            Err(e) => Row {
                n_fit: n,
                seed,
                degree,
                price: None,
                stderr: None,
                l2_error_t0: None,
                runtime_ms,
                error: Some(e.to_string().replace(',', ";").replace('\n', " ")),
            },
        }
    };

    let rows: Vec<Row> = match threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?
            .install(|| grid.par_iter().map(compute_row).collect()),
        None => grid.par_iter().map(compute_row).collect(),
    };

    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("results.csv");
    let mut out = String::new();
    if !no_timestamp {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        out.push_str(&format!("# generated_unix_secs={now}\n"));
    }
    out.push_str(CSV_HEADER);
    out.push('\n');

    let model_label = match &model {
        ModelSpec::Gbm(_) => "gbm",
        ModelSpec::Chain(_) => "chain",
        ModelSpec::Custom(_) => "custom",
    };
    let basis_label = cfg.get("approx.basis").unwrap_or("");
    let bound = cfg.get("approx.bound").unwrap_or("");
    let beta = payoff.truncation();

    let mut rows_failed = 0;
    for row in &rows {
        if row.error.is_some() {
            rows_failed += 1;
        }
        let runtime = if no_timestamp { 0 } else { row.runtime_ms };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            settings.id,
            model_label,
            schedule.label(),
            basis_label,
            row.degree,
            bound,
            beta.map(|b| b.to_string()).unwrap_or_default(),
            row.n_fit,
            settings.eval_n,
            row.seed,
            fmt_opt(row.price),
            fmt_opt(row.stderr),
            fmt_opt(oracle),
            fmt_opt(oracle.and_then(|o| row.price.map(|p| o - p))),
            fmt_opt(row.l2_error_t0),
            runtime,
            row.error.clone().unwrap_or_default(),
        ));
    }
    std::fs::write(&csv_path, out)?;
    Ok(StudyOutcome {
        csv_path,
        rows_failed,
    })
}
