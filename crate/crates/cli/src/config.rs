//! Flat key-value experiment configuration.
//!
//! The format is one `section.key=value` pair per line, `#` comments, blank
//! lines ignored. Dotted keys were chosen over a nested format because flat
//! files diff cleanly across experiment variants.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use stopmc_core::bounds::sobolev_degree;
use stopmc_core::lookahead::{make_schedule, LookaheadSchedule, ScheduleKind};
use stopmc_core::paths::{FiniteChain, GbmSpec, ModelSpec};
use stopmc_core::payoff::{PayoffKind, PayoffSpec, TablePayoff};
use stopmc_core::regress::{ApproxSpace, BasisKind};
use stopmc_core::{Error, Result};

/// Parsed key-value configuration.
#[derive(Debug, Clone, Default)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    /// Parses `section.key=value` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Validation(format!("config line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config { map })
    }

    /// Loads and parses a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Validation(format!("config: missing key `{key}`")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        parse(self.require(key)?, key)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(v) => parse(v, key),
            None => Ok(default),
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        parse(self.require(key)?, key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        parse(self.require(key)?, key)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(other) => Err(Error::Validation(format!("config: `{key}` must be true/false, got {other}"))),
            None => Ok(default),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        split_list(self.require(key)?, key)
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        split_list(self.require(key)?, key)
    }

    pub fn u64_list(&self, key: &str) -> Result<Vec<u64>> {
        split_list(self.require(key)?, key)
    }
}

fn parse<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Validation(format!("config: bad value `{v}` for `{key}`")))
}

fn split_list<T: std::str::FromStr>(v: &str, key: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(s, key))
        .collect()
}

/// `a|b|c` rows with comma-separated entries.
fn parse_rows(v: &str, key: &str) -> Result<Vec<Vec<f64>>> {
    v.split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|row| split_list(row, key))
        .collect()
}

/// Builds the model from `model.*` keys.
pub fn build_model(cfg: &Config) -> Result<ModelSpec> {
    match cfg.require("model.kind")? {
        "gbm" => {
            let s0 = cfg.f64_list("model.s0")?;
            let dim = s0.len();
            let drift = cfg.f64_list("model.drift")?;
            let vol_rows = parse_rows(cfg.require("model.vol")?, "model.vol")?;
            let mut vol = Vec::with_capacity(dim * dim);
            if vol_rows.len() == 1 && dim == 1 {
                vol.push(vol_rows[0][0]);
            } else {
                if vol_rows.len() != dim {
                    return Err(Error::Validation(format!(
                        "config: model.vol must have {dim} rows separated by |"
                    )));
                }
                for row in &vol_rows {
                    if row.len() != dim {
                        return Err(Error::Validation(format!(
                            "config: model.vol rows must have {dim} entries"
                        )));
                    }
                    vol.extend_from_slice(row);
                }
            }
            let model = ModelSpec::Gbm(GbmSpec {
                dim,
                s0,
                drift,
                vol,
                horizon: cfg.usize("model.horizon")?,
                allow_degenerate: cfg.bool_or("model.allow_degenerate", false)?,
            });
            model.validate()?;
            Ok(model)
        }
        "chain" => {
            let states = parse_rows(cfg.require("model.states")?, "model.states")?;
            let k = states.len();
            let initial = cfg.f64_list("model.initial")?;
            let transitions = match (cfg.get("model.transition"), cfg.get("model.transitions")) {
                (Some(one), None) => {
                    let horizon = cfg.usize("model.horizon")?;
                    let rows = parse_rows(one, "model.transition")?;
                    let m = rows_to_matrix(&rows, k, "model.transition")?;
                    vec![m; horizon]
                }
                (None, Some(many)) => many
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|spec| {
                        let rows = parse_rows(spec, "model.transitions")?;
                        rows_to_matrix(&rows, k, "model.transitions")
                    })
                    .collect::<Result<Vec<_>>>()?,
                _ => {
                    return Err(Error::Validation(
                        "config: chain model needs exactly one of model.transition / model.transitions"
                            .into(),
                    ))
                }
            };
            let model = ModelSpec::Chain(FiniteChain {
                states,
                transitions,
                initial,
            });
            model.validate()?;
            Ok(model)
        }
        other => Err(Error::Validation(format!("config: unknown model.kind `{other}`"))),
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], k: usize, key: &str) -> Result<DMatrix<f64>> {
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Validation(format!("config: `{key}` must be a {k} x {k} matrix")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(k, k, &flat))
}

/// Builds the payoff from `payoff.*` keys. Table payoffs need the chain.
pub fn build_payoff(cfg: &Config, model: &ModelSpec) -> Result<PayoffSpec> {
    let horizon = model.horizon();
    let payoff = match cfg.require("payoff.kind")? {
        "put" => PayoffSpec::put(horizon, cfg.f64("payoff.strike")?, cfg.f64_or("payoff.discount", 1.0)?)?,
        "call" => PayoffSpec::call(horizon, cfg.f64("payoff.strike")?, cfg.f64_or("payoff.discount", 1.0)?)?,
        "maxcall" => PayoffSpec::new(
            PayoffKind::MaxCall {
                strike: cfg.f64("payoff.strike")?,
                discount: cfg.f64_or("payoff.discount", 1.0)?,
            },
            horizon,
        )?,
        "table" => {
            let chain = match model {
                ModelSpec::Chain(c) => c,
                _ => {
                    return Err(Error::Validation(
                        "config: table payoffs require a chain model".into(),
                    ))
                }
            };
            let path = cfg.require("payoff.file")?;
            let rows = read_table_csv(Path::new(path))?;
            PayoffSpec::new(PayoffKind::Table(TablePayoff::from_rows(chain, &rows)?), horizon)?
        }
        other => return Err(Error::Validation(format!("config: unknown payoff.kind `{other}`"))),
    };
    match cfg.get("payoff.beta") {
        None | Some("none") => Ok(payoff),
        Some(b) => payoff.with_truncation(parse(b, "payoff.beta")?),
    }
}

/// Reads `t,state,value` CSV rows (header line optional).
pub fn read_table_csv(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 0 && parts[0].parse::<usize>().is_err() {
            continue; // header
        }
        if parts.len() != 3 {
            return Err(Error::Format(format!(
                "table csv line {}: expected t,state,value",
                lineno + 1
            )));
        }
        rows.push((
            parse(parts[0], "t")?,
            parse(parts[1], "state")?,
            parse(parts[2], "value")?,
        ));
    }
    Ok(rows)
}

/// The per-`n` basis size: either the fixed `approx.terms`, or the
/// degree schedule `round(n^{1/(m+2k)})` when `approx.terms=auto` with
/// smoothness `approx.smoothness`.
pub fn terms_for(cfg: &Config, model: &ModelSpec, n: usize) -> Result<usize> {
    match cfg.require("approx.terms")? {
        "auto" => {
            let k = cfg.usize("approx.smoothness")?;
            sobolev_degree(n as u64, model.dim(), k)
        }
        fixed => parse(fixed, "approx.terms"),
    }
}

/// Builds one approximation space per time step for a fit of size `n`.
pub fn build_spaces(cfg: &Config, model: &ModelSpec, n: usize) -> Result<Vec<ApproxSpace>> {
    let horizon = model.horizon();
    let bound = cfg.f64("approx.bound")?;
    let basis = match cfg.require("approx.basis")? {
        "monomials" => BasisKind::Monomials {
            terms: terms_for(cfg, model, n)?,
            dim: model.dim(),
        },
        "laguerre" => BasisKind::Laguerre {
            terms: terms_for(cfg, model, n)?,
        },
        "indicator" => match model {
            ModelSpec::Chain(c) => BasisKind::indicator_for(c),
            _ => {
                return Err(Error::Validation(
                    "config: indicator basis requires a chain model".into(),
                ))
            }
        },
        other => return Err(Error::Validation(format!("config: unknown approx.basis `{other}`"))),
    };
    let space = match cfg.get("approx.mode").unwrap_or("clip") {
        "clip" => ApproxSpace::clipped(basis, bound)?,
        "ball" => ApproxSpace::ball(basis, bound, cfg.f64("approx.radius")?)?,
        other => return Err(Error::Validation(format!("config: unknown approx.mode `{other}`"))),
    };
    Ok(vec![space; horizon])
}

/// Builds the look-ahead schedule from `schedule.*` keys.
pub fn build_schedule(cfg: &Config, horizon: usize) -> Result<LookaheadSchedule> {
    let kind = match cfg.require("schedule.kind")? {
        "ls" => ScheduleKind::LongstaffSchwartz,
        "tvr" => ScheduleKind::TsitsiklisVanRoy,
        "constant" => ScheduleKind::Constant(cfg.usize("schedule.w0")?),
        "custom" => ScheduleKind::Custom(cfg.usize_list("schedule.values")?),
        other => {
            return Err(Error::Validation(format!(
                "config: unknown schedule.kind `{other}`"
            )))
        }
    };
    make_schedule(&kind, horizon)
}

/// Checked study-level settings.
#[derive(Debug, Clone)]
pub struct StudySettings {
    pub id: String,
    pub n_list: Vec<usize>,
    pub eval_n: usize,
    pub seeds: Vec<u64>,
}

/// Extracts and validates `study.*` keys.
pub fn build_study_settings(cfg: &Config) -> Result<StudySettings> {
    let n_list = cfg.usize_list("study.n")?;
    if n_list.is_empty() {
        return Err(Error::Validation("config: study.n must be nonempty".into()));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(
            "config: study.n must be strictly ascending".into(),
        ));
    }
    let seeds = cfg.u64_list("study.seeds")?;
    if seeds.is_empty() {
        return Err(Error::Validation("config: study.seeds must be nonempty".into()));
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(Error::Validation("config: study.seeds must be distinct".into()));
    }
    Ok(StudySettings {
        id: cfg.get("study.id").unwrap_or("study").to_string(),
        n_list,
        eval_n: cfg.usize("study.eval_n")?,
        seeds,
    })
}
