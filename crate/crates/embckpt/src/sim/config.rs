//! Experiment config files.
//!
//! One `key = value` per line; `#` starts a comment. Unknown keys are
//! errors. Missing keys keep the defaults of [`WorkloadConfig`] and
//! [`RunConfig`].
//!
//! | key | value |
//! |-----|-------|
//! | `num_tables`, `rows_per_table`, `dim`, `num_shards`, `dense_len` | model shape; `rows_per_table` is one count or a comma list with one count per table |
//! | `aux_state` | `true` / `false` |
//! | `batch_size`, `zipf_s`, `batches_per_interval`, `num_intervals`, `lr`, `seed` | workload |
//! | `run_id`, `policy` | `full_only`, `one_shot_baseline`, `consecutive_increment`, `intermittent` |
//! | `quantization` | `off`, `symmetric`, `asymmetric`, `adaptive` |
//! | `bitwidth` | `auto`, `2`, `3`, `4`, `8` |
//! | `failure_p`, `failure_nodes`, `failure_hours` | failure model for `bitwidth = auto` |
//! | `adaptive_bins`, `adaptive_ratio` | search override, both or neither |
//! | `chunk_rows` | rows per pipeline chunk, or `whole` |
//! | `workers`, `keep_last`, `restore_fallback`, `record_timings` | engine and report |
//! | `failures` | comma list of `interval:offset` points |

use std::path::Path;
use std::str::FromStr;

use embckpt_core::quant::AdaptiveConfig;
use embckpt_core::BitWidth;

use super::runner::{FailurePoint, FailureSchedule, SimOptions};
use super::workload::WorkloadConfig;
use crate::engine::{QuantSetting, RangeChoice, RunConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub workload: WorkloadConfig,
    pub run: RunConfig,
    pub failures: FailureSchedule,
    pub options: SimOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let workload = WorkloadConfig::default();
        let run = RunConfig { checkpoint_interval: workload.batches_per_interval, ..RunConfig::default() };
        ExperimentConfig { workload, run, failures: FailureSchedule::none(), options: SimOptions::default() }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut num_tables: Option<usize> = None;
        let mut rows: Option<Vec<usize>> = None;
        let mut method = RangeChoice::Adaptive;
        let mut quant_off = false;
        let mut bitwidth: Option<BitWidth> = None;
        let (mut bins, mut ratio): (Option<u32>, Option<f64>) = (None, None);
        let mut interval_set = false;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            };
            let w = &mut cfg.workload;
            let r = &mut cfg.run;
            (|| -> Result<()> {
                match key {
                    "num_tables" => num_tables = Some(num(key, value)?),
                    "rows_per_table" => {
                        rows = Some(value.split(',').map(|v| num(key, v.trim())).collect::<Result<_>>()?)
                    }
                    "dim" => w.model.dim = num(key, value)?,
                    "num_shards" => w.model.num_shards = num(key, value)?,
                    "dense_len" => w.model.dense_len = num(key, value)?,
                    "aux_state" => w.model.has_aux_state = boolean(key, value)?,
                    "batch_size" => w.batch_size = num(key, value)?,
                    "zipf_s" => w.zipf_s = num(key, value)?,
                    "batches_per_interval" => {
                        w.batches_per_interval = num(key, value)?;
                        interval_set = true;
                    }
                    "num_intervals" => w.num_intervals = num(key, value)?,
                    "lr" => w.lr = num(key, value)?,
                    "seed" => w.seed = num(key, value)?,
                    "run_id" => r.run_id = value.to_owned(),
                    "policy" => r.policy = value.parse()?,
                    "quantization" => match value {
                        "off" => quant_off = true,
                        "symmetric" => method = RangeChoice::Symmetric,
                        "asymmetric" => method = RangeChoice::Asymmetric,
                        "adaptive" => method = RangeChoice::Adaptive,
                        _ => return Err(Error::Config(format!("`{key}`: unknown method `{value}`"))),
                    },
                    "bitwidth" => {
                        bitwidth = match value {
                            "auto" => None,
                            v => Some(BitWidth::from_bits(num(key, v)?)?),
                        }
                    }
                    "failure_p" => r.failure_model.p = num(key, value)?,
                    "failure_nodes" => r.failure_model.nodes = num(key, value)?,
                    "failure_hours" => r.failure_model.expected_duration_hours = num(key, value)?,
                    "adaptive_bins" => bins = Some(num(key, value)?),
                    "adaptive_ratio" => ratio = Some(num(key, value)?),
                    "chunk_rows" => {
                        r.chunk_rows = if value == "whole" { usize::MAX } else { num(key, value)? }
                    }
                    "workers" => r.workers = num(key, value)?,
                    "keep_last" => r.keep_last = num(key, value)?,
                    "restore_fallback" => r.restore_fallback = boolean(key, value)?,
                    "record_timings" => cfg.options.record_timings = boolean(key, value)?,
                    "failures" => {
                        let points = value
                            .split(',')
                            .map(str::trim)
                            .filter(|p| !p.is_empty())
                            .map(|p| {
                                let (i, o) = p.split_once(':').ok_or_else(|| {
                                    Error::Config(format!("`{key}`: expected interval:offset, got `{p}`"))
                                })?;
                                Ok(FailurePoint {
                                    interval: num(key, i.trim())?,
                                    offset: num(key, o.trim())?,
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        cfg.failures = FailureSchedule::new(points)?;
                    }
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            })()
            .map_err(at)?;
        }

        let model = &mut cfg.workload.model;
        match (num_tables, rows) {
            (Some(n), Some(r)) if r.len() == 1 => model.rows_per_table = vec![r[0]; n],
            (Some(n), Some(r)) if r.len() != n => {
                return Err(Error::Config(format!("num_tables is {n} but rows_per_table lists {}", r.len())))
            }
            (_, Some(r)) => model.rows_per_table = r,
            (Some(n), None) => {
                let per = model.rows_per_table.first().copied().unwrap_or(1);
                model.rows_per_table = vec![per; n];
            }
            (None, None) => {}
        }
        cfg.run.quant =
            if quant_off { QuantSetting::Off } else { QuantSetting::Uniform { method, bitwidth } };
        cfg.run.adaptive_override = match (bins, ratio) {
            (Some(b), Some(r)) => Some(AdaptiveConfig::new(b, r)?),
            (None, None) => None,
            _ => return Err(Error::Config("adaptive_bins and adaptive_ratio go together".into())),
        };
        if interval_set || cfg.run.checkpoint_interval != cfg.workload.batches_per_interval {
            cfg.run.checkpoint_interval = cfg.workload.batches_per_interval;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.workload.validate()?;
        self.run.validate()?;
        self.failures.validate_for(&self.workload)
    }
}
