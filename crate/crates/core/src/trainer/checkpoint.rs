use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{Decider, Thresholds};
use super::TrainState;
use crate::config::{Method, RunConfig};
use crate::env::OBS_DIM;
use crate::error::{Error, Result};
use crate::trace::Trace;

pub const CHECKPOINT_FORMAT: &str = "ccpo-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained policy or fitted rule, with the run state needed to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub method: Method,
    pub horizon: usize,
    pub obs_dim: usize,
    /// Deployment threshold: calibrated after training, the training value before.
    pub kappa: f64,
    pub epsilon: f64,
    /// Training finished and `kappa` is the final threshold.
    pub complete: bool,
    pub thresholds: Option<Thresholds>,
    pub state: Option<TrainState>,
    pub config: RunConfig,
}

impl Checkpoint {
    fn base(cfg: &RunConfig) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            method: cfg.method,
            horizon: cfg.horizon,
            obs_dim: OBS_DIM,
            kappa: 1.0,
            epsilon: cfg.epsilon,
            complete: true,
            thresholds: None,
            state: None,
            config: cfg.clone(),
        }
    }

    pub fn rule(cfg: &RunConfig, thresholds: Option<Thresholds>) -> Self {
        Self {
            thresholds,
            ..Self::base(cfg)
        }
    }

    pub fn trained(cfg: &RunConfig, state: TrainState, kappa: f64, complete: bool) -> Self {
        Self {
            kappa,
            complete,
            state: Some(state),
            ..Self::base(cfg)
        }
    }

    pub fn decider(&self) -> Result<Decider> {
        match self.method {
            Method::Random => Ok(Decider::Random),
            Method::FixedThreshold => self
                .thresholds
                .map(Decider::FixedThreshold)
                .ok_or_else(|| Error::validation("thresholds", "missing for a fixed-threshold checkpoint")),
            _ => {
                let state = self
                    .state
                    .as_ref()
                    .ok_or_else(|| Error::validation("state", "missing for a trained checkpoint"))?;
                Ok(Decider::Conformal {
                    params: state.policy.clone(),
                    kappa: self.kappa,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::validation("format", format!("expected `{CHECKPOINT_FORMAT}`, found `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::validation("version", format!("unsupported version {}", self.version)));
        }
        if self.obs_dim != OBS_DIM {
            return Err(Error::validation("obs_dim", format!("expected {OBS_DIM}, found {}", self.obs_dim)));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::validation("kappa", format!("{} not in [0, 1]", self.kappa)));
        }
        if self.method != self.config.method || self.horizon != self.config.horizon {
            return Err(Error::validation("config", "disagrees with the checkpoint header"));
        }
        if let Some(s) = &self.state {
            if s.policy.shape.input_dim() != OBS_DIM {
                return Err(Error::validation("state.policy", "input width does not match the observation"));
            }
            s.policy.check_finite()?;
        }
        self.decider().map(|_| ())
    }

    /// Rejects traces the checkpoint was not built for.
    pub fn check_traces(&self, traces: &[Trace]) -> Result<()> {
        if let Some(t) = traces.iter().find(|t| t.horizon() != self.horizon) {
            return Err(Error::validation(
                "traces",
                format!(
                    "trace `{}` has horizon {}, checkpoint expects {}",
                    t.question_id,
                    t.horizon(),
                    self.horizon
                ),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        // Write-then-rename so an interrupted run never leaves a torn file.
        let tmp = path.with_extension("json.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(text.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        ck.validate()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{load_splits, run};

    fn cfg(method: Method) -> RunConfig {
        RunConfig {
            method,
            iterations: 2,
            hidden_width: 8,
            synthetic_train: 40,
            synthetic_calibration: 20,
            synthetic_test: 0,
            granularity: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        for m in [Method::Ccpo, Method::FixedThreshold, Method::Random] {
            let c = cfg(m);
            let out = run(&c, &load_splits(&c).unwrap()).unwrap();
            let p = dir.path().join(format!("{m}.json"));
            out.checkpoint.save(&p).unwrap();
            assert_eq!(Checkpoint::load(&p).unwrap(), out.checkpoint);
        }
    }

    #[test]
    fn rejects_foreign_files_and_mismatched_traces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        std::fs::write(&p, "{\"format\": 1}").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Parse { .. })));

        let c = cfg(Method::Random);
        let mut ck = Checkpoint::rule(&c, None);
        ck.format = "other".into();
        assert!(ck.validate().is_err());

        let ck = Checkpoint::rule(&RunConfig { horizon: 3, ..c.clone() }, None);
        let traces = load_splits(&c).unwrap().train;
        assert!(matches!(ck.check_traces(&traces), Err(Error::Validation { .. })));
        assert!(Checkpoint::rule(&cfg(Method::FixedThreshold), None).validate().is_err());
    }
}
