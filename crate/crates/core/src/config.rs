//! Run configuration: a flat TOML table with `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::UpdateMode;
use crate::cpo::{BoundMode, TrustRegionConfig};
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::trace::PriceTable;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Ccpo,
    Random,
    FixedThreshold,
    Cpo,
    CpoBatch,
    CpoOnline,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ccpo,
        Method::Random,
        Method::FixedThreshold,
        Method::Cpo,
        Method::CpoBatch,
        Method::CpoOnline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ccpo => "ccpo",
            Method::Random => "random",
            Method::FixedThreshold => "fixed-threshold",
            Method::Cpo => "cpo",
            Method::CpoBatch => "cpo-batch",
            Method::CpoOnline => "cpo-online",
        }
    }

    /// Methods that run the policy-optimization loop.
    pub fn trains(self) -> bool {
        !matches!(self, Method::Random | Method::FixedThreshold)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method `{s}`")))
    }
}

/// How evaluation charges a conformal policy's branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostAccounting {
    /// Every visited round is paid once, whichever branches pass through it.
    #[default]
    Executed,
    /// Cost of one path drawn uniformly through each conformal set.
    SampledPath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub alpha: f64,
    pub lambda: f64,
    pub horizon: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub xi: f64,
    pub eta0: f64,
    pub rho_bar: f64,
    pub critic_lr: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub initial_kappa: f64,
    pub calibrator_mode: UpdateMode,
    pub bound_mode: BoundMode,
    pub cost_accounting: CostAccounting,
    pub granularity: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub damping: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub constraint_tol: f64,
    pub token_scale: f64,

    pub train_traces: Option<PathBuf>,
    pub calibration_traces: Option<PathBuf>,
    pub test_traces: Option<PathBuf>,
    /// Generator settings used when no trace files are given.
    pub synthetic_config: Option<PathBuf>,
    pub synthetic_seed: Option<u64>,
    pub synthetic_train: usize,
    pub synthetic_calibration: usize,
    pub synthetic_test: usize,

    pub price_base_input: f64,
    pub price_base_output: f64,
    pub price_guide_input: f64,
    pub price_guide_output: f64,

    /// Fixed-threshold cutoffs; grid-searched on the calibration split when unset.
    pub fixed_base_max: Option<f64>,
    pub fixed_guide_max: Option<f64>,

    pub output_dir: PathBuf,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let prices = PriceTable::default();
        let tr = TrustRegionConfig::default();
        Self {
            method: Method::Ccpo,
            alpha: 0.1,
            lambda: 0.0,
            horizon: 4,
            delta: tr.delta,
            epsilon: 0.01,
            xi: 0.1,
            eta0: 0.05,
            rho_bar: 1.0,
            critic_lr: 1e-3,
            hidden_width: 64,
            hidden_layers: 3,
            batch_size: 10,
            iterations: 1500,
            seed: 0,
            initial_kappa: 0.25,
            calibrator_mode: UpdateMode::SetEnlarging,
            bound_mode: BoundMode::UnionBound,
            cost_accounting: CostAccounting::Executed,
            granularity: 1e-6,
            cg_iters: tr.cg_iters,
            cg_tol: tr.cg_tol,
            damping: tr.damping,
            backtrack_factor: tr.backtrack_factor,
            max_backtracks: tr.max_backtracks,
            constraint_tol: tr.constraint_tol,
            token_scale: 1000.0,
            train_traces: None,
            calibration_traces: None,
            test_traces: None,
            synthetic_config: None,
            synthetic_seed: None,
            synthetic_train: 1000,
            synthetic_calibration: 200,
            synthetic_test: 1000,
            price_base_input: prices.base_input,
            price_base_output: prices.base_output,
            price_guide_input: prices.guide_input,
            price_guide_output: prices.guide_output,
            fixed_base_max: None,
            fixed_guide_max: None,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

/// Parses `key=value`, reading the value as TOML and falling back to a bare string.
pub fn parse_override(spec: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim().to_string();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative trace paths resolve against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.train_traces,
                &mut cfg.calibration_traces,
                &mut cfg.test_traces,
                &mut cfg.synthetic_config,
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(field, msg))
            }
        };
        check(self.alpha > 0.0 && self.alpha < 1.0, "alpha", "must lie in (0, 1)")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda", "must be nonnegative")?;
        check(self.horizon >= 1, "horizon", "must be at least 1")?;
        check(self.delta > 0.0, "delta", "must be positive")?;
        check(self.epsilon > 0.0, "epsilon", "must be positive")?;
        check(self.xi > 0.0 && self.xi < 0.5, "xi", "must lie in (0, 1/2)")?;
        check(self.eta0 > 0.0, "eta0", "must be positive")?;
        check(self.rho_bar > 0.0, "rho_bar", "must be positive")?;
        check(self.critic_lr > 0.0, "critic_lr", "must be positive")?;
        check(self.hidden_width >= 1, "hidden_width", "must be at least 1")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check((0.0..=1.0).contains(&self.initial_kappa), "initial_kappa", "must lie in [0, 1]")?;
        check(self.granularity > 0.0 && self.granularity <= 1.0, "granularity", "must lie in (0, 1]")?;
        check(self.token_scale > 0.0, "token_scale", "must be positive")?;
        for (name, v) in [("fixed_base_max", self.fixed_base_max), ("fixed_guide_max", self.fixed_guide_max)] {
            if let Some(v) = v {
                check((0.0..=1.0).contains(&v), name, "must lie in [0, 1]")?;
            }
        }
        self.prices().validate()?;
        self.trust_region().validate()
    }

    pub fn prices(&self) -> PriceTable {
        PriceTable {
            base_input: self.price_base_input,
            base_output: self.price_base_output,
            guide_input: self.price_guide_input,
            guide_output: self.price_guide_output,
        }
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            horizon: self.horizon,
            token_scale: self.token_scale,
        }
    }

    pub fn trust_region(&self) -> TrustRegionConfig {
        TrustRegionConfig {
            delta: self.delta,
            cg_iters: self.cg_iters,
            cg_tol: self.cg_tol,
            damping: self.damping,
            backtrack_factor: self.backtrack_factor,
            max_backtracks: self.max_backtracks,
            constraint_tol: self.constraint_tol,
        }
    }
}
