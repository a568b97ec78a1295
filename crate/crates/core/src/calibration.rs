//! Online threshold updates and held-out batch calibration.

use serde::{Deserialize, Serialize};

use crate::env::{answer_universe, coverage_indicator, enumerate_branches, observation_at, prediction_set, EnvConfig, RolloutTree};
use crate::error::{Error, Result};
use crate::numerics::{Categorical, FlatParams};
use crate::policy::{conformal_set, score};
use crate::trace::{PriceTable, Trace};

pub const DEFAULT_ETA0: f64 = 0.05;
pub const DEFAULT_XI: f64 = 0.1;
pub const DEFAULT_GRANULARITY: f64 = 1e-6;

/// Sign of the online threshold update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    /// A miss lowers the threshold, which enlarges future sets.
    #[default]
    SetEnlarging,
    /// A miss raises the threshold.
    SetShrinking,
}

/// Exponent of the step-size schedule, `-1/2 - xi`.
pub fn schedule_exponent(xi: f64) -> f64 {
    -0.5 - xi
}

/// `eta_k = eta0 * k^(-1/2 - xi)`.
pub fn step_size(k: u64, eta0: f64, xi: f64) -> Result<f64> {
    if k < 1 {
        return Err(Error::Usage("step-size index starts at 1".into()));
    }
    Ok(eta0 * (k as f64).powf(schedule_exponent(xi)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratorState {
    pub kappa: f64,
    /// Index of the next update (1-based).
    pub k: u64,
    pub eta0: f64,
    pub xi: f64,
    pub alpha: f64,
    pub mode: UpdateMode,
}

impl CalibratorState {
    pub fn new(kappa: f64, alpha: f64, eta0: f64, xi: f64, mode: UpdateMode) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::validation("alpha", format!("{alpha} not in (0, 1)")));
        }
        if !(xi > 0.0 && xi < 0.5) {
            return Err(Error::validation("xi", format!("{xi} not in (0, 1/2)")));
        }
        if !(eta0 > 0.0 && eta0.is_finite()) {
            return Err(Error::validation("eta0", format!("{eta0} must be positive")));
        }
        if !(0.0..=1.0).contains(&kappa) {
            return Err(Error::validation("kappa", format!("{kappa} not in [0, 1]")));
        }
        Ok(Self {
            kappa,
            k: 1,
            eta0,
            xi,
            alpha,
            mode,
        })
    }

    pub fn current_step(&self) -> f64 {
        self.eta0 * (self.k as f64).powf(schedule_exponent(self.xi))
    }

    /// Applies one episode's outcome and returns the step size used.
    pub fn online_update(&mut self, covered: bool) -> f64 {
        let eta = self.current_step();
        let err = if covered { 0.0 } else { 1.0 } - self.alpha;
        let signed = match self.mode {
            UpdateMode::SetEnlarging => -eta * err,
            UpdateMode::SetShrinking => eta * err,
        };
        self.kappa = (self.kappa + signed).clamp(0.0, 1.0);
        self.k += 1;
        eta
    }
}

/// Score distributions at every round of a trace.
pub fn trace_scores(params: &FlatParams, trace: &Trace, env: &EnvConfig) -> Result<Vec<Categorical>> {
    (1..=trace.horizon())
        .map(|r| score(params, &observation_at(trace, r, env.token_scale)))
        .collect()
}

/// Branch tree of the threshold policy given precomputed per-round scores.
pub fn conformal_tree(scores: &[Categorical], kappa: f64, trace: &Trace, env: &EnvConfig, prices: &PriceTable) -> RolloutTree {
    enumerate_branches(trace, env, prices, |obs| conformal_set(&scores[obs.round - 1], kappa))
}

pub fn conformal_covers(scores: &[Categorical], kappa: f64, trace: &Trace, env: &EnvConfig) -> Result<bool> {
    let tree = conformal_tree(scores, kappa, trace, env, &PriceTable::zero());
    coverage_indicator(&prediction_set(&tree), &answer_universe(trace), trace.true_answer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub kappa: f64,
    pub grid_size: u64,
    pub coverage: f64,
    pub n: usize,
    /// Number of covered calibration traces required.
    pub required: usize,
}

/// `ceil((n + 1)(1 - alpha))`.
pub fn required_count(n: usize, alpha: f64) -> usize {
    (((n + 1) as f64) * (1.0 - alpha) - 1e-12).ceil() as usize
}

/// Largest threshold at which a trace stays covered.
///
/// Sets only change when the threshold crosses one of the trace's score
/// probabilities, and coverage is monotone in the threshold, so checking
/// those values from the top is exact.
pub fn critical_threshold(scores: &[Categorical], trace: &Trace, env: &EnvConfig) -> Result<f64> {
    let mut cands: Vec<f64> = scores.iter().flat_map(|d| d.0).filter(|p| *p > 0.0).collect();
    cands.push(1.0);
    cands.sort_by(|a, b| b.total_cmp(a));
    cands.dedup();
    for c in cands {
        if conformal_covers(scores, c, trace, env)? {
            return Ok(c);
        }
    }
    Ok(0.0)
}

/// Largest grid threshold whose held-out coverage reaches `ceil((n+1)(1-alpha))/n`; 0 if none does.
pub fn batch_calibrate(
    params: &FlatParams,
    traces: &[Trace],
    alpha: f64,
    granularity: f64,
    env: &EnvConfig,
) -> Result<CalibrationReport> {
    if traces.is_empty() {
        return Err(Error::Usage("calibration set is empty".into()));
    }
    if !(granularity > 0.0 && granularity <= 1.0) {
        return Err(Error::validation("granularity", format!("{granularity} not in (0, 1]")));
    }
    let n = traces.len();
    let grid_steps = (1.0 / granularity).round() as u64;
    let required = required_count(n, alpha);
    let scores: Vec<Vec<Categorical>> = traces.iter().map(|t| trace_scores(params, t, env)).collect::<Result<_>>()?;
    let coverage_at = |kappa: f64| -> Result<usize> {
        let mut c = 0;
        for (t, s) in traces.iter().zip(&scores) {
            c += conformal_covers(s, kappa, t, env)? as usize;
        }
        Ok(c)
    };

    let mut kappa = 0.0;
    if required <= n {
        let mut taus: Vec<f64> = traces
            .iter()
            .zip(&scores)
            .map(|(t, s)| critical_threshold(s, t, env))
            .collect::<Result<_>>()?;
        taus.sort_by(|a, b| b.total_cmp(a));
        let tau = taus[required - 1];
        let mut m = ((tau * grid_steps as f64).floor() as u64).min(grid_steps);
        while m > 0 && coverage_at(m as f64 / grid_steps as f64)? < required {
            m -= 1;
        }
        kappa = m as f64 / grid_steps as f64;
    }
    let covered = coverage_at(kappa)?;
    Ok(CalibrationReport {
        kappa,
        grid_size: grid_steps + 1,
        coverage: covered as f64 / n as f64,
        n,
        required,
    })
}
