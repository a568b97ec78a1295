//! Outer optimization loop for every method, plus run-level plumbing.

pub mod checkpoint;
pub mod eval;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{batch_calibrate, conformal_covers, conformal_tree, required_count, trace_scores, CalibrationReport, CalibratorState};
use crate::config::{Method, RunConfig};
use crate::cpo::{cpo_update, ConstraintKind, CpoBatch, CpoEpisode, CpoStep, StepCase};
use crate::env::{
    answer_universe, coverage_indicator, observe, prediction_set, step, EpisodeState, EnvConfig, OBS_DIM,
};
use crate::error::{Error, Result};
use crate::numerics::{FlatParams, MlpShape, NUM_ACTIONS};
use crate::policy::{conformal_set, sample_action, score, soft_stochastic_conformal};
use crate::trace::{generate_synthetic, load_traces, step_cost, CallsMade, PriceTable, SyntheticConfig, Trace, TraceSet};
use crate::vtrace::{CriticPair, VTraceBatch, VTraceTrajectory};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use eval::{evaluate, search_thresholds, Decider, MetricsRecord, Thresholds};

/// Train, calibration and test traces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Trace>,
    pub calibration: Vec<Trace>,
    pub test: Vec<Trace>,
}

fn checked_split(set: TraceSet, horizon: usize, what: &str) -> Result<Vec<Trace>> {
    if set.horizon() != horizon {
        return Err(Error::validation(
            format!("{what}.horizon"),
            format!("traces have horizon {}, config expects {horizon}", set.horizon()),
        ));
    }
    Ok(set.traces)
}

/// Reads the configured trace files, or generates one synthetic corpus and
/// cuts it into consecutive train/calibration/test blocks.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    if let Some(train) = &cfg.train_traces {
        let cal = cfg
            .calibration_traces
            .as_ref()
            .ok_or_else(|| Error::Config("train_traces is set but calibration_traces is not".into()))?;
        let test = match &cfg.test_traces {
            Some(p) => checked_split(load_traces(p)?, cfg.horizon, "test_traces")?,
            None => Vec::new(),
        };
        return Ok(Splits {
            train: checked_split(load_traces(train)?, cfg.horizon, "train_traces")?,
            calibration: checked_split(load_traces(cal)?, cfg.horizon, "calibration_traces")?,
            test,
        });
    }
    let mut syn = match &cfg.synthetic_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SyntheticConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticConfig::default(),
    };
    syn.horizon = cfg.horizon;
    syn.seed = cfg.synthetic_seed.unwrap_or(cfg.seed);
    syn.num_traces = cfg.synthetic_train + cfg.synthetic_calibration + cfg.synthetic_test;
    let mut traces = generate_synthetic(&syn)?.traces;
    let test = traces.split_off(cfg.synthetic_train + cfg.synthetic_calibration);
    let calibration = traces.split_off(cfg.synthetic_train);
    Ok(Splits {
        train: traces,
        calibration,
        test,
    })
}

/// One line of the iteration log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    /// Mean API spend of the sampled episodes.
    pub mean_cost: f64,
    /// Differentiable constraint estimate before the update.
    pub surrogate_coverage: f64,
    /// Hard constraint estimate before the update.
    pub jbar: f64,
    pub objective: f64,
    pub slack: f64,
    pub kl: f64,
    pub step_norm: f64,
    pub case: StepCase,
    pub backtracks: usize,
    pub accepted: bool,
    /// Training threshold after this iteration's online updates.
    pub kappa: f64,
    /// Last online step size used, 0 when the method makes none.
    pub eta: f64,
}

/// Everything the loop mutates; enough to resume a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub policy: FlatParams,
    pub critics: CriticPair,
    pub calibrator: CalibratorState,
    pub rng: ChaCha8Rng,
    /// Iterations completed so far.
    pub iteration: usize,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let policy = FlatParams::init(MlpShape::hidden(OBS_DIM, cfg.hidden_width, cfg.hidden_layers, NUM_ACTIONS)?, &mut rng);
        let critics = CriticPair::init(MlpShape::hidden(OBS_DIM, cfg.hidden_width, cfg.hidden_layers, 1)?, &mut rng);
        let kappa = if uses_online_threshold(cfg.method) { cfg.initial_kappa } else { 1.0 };
        let calibrator = CalibratorState::new(kappa, cfg.alpha, cfg.eta0, cfg.xi, cfg.calibrator_mode)?;
        Ok(Self {
            policy,
            critics,
            calibrator,
            rng,
            iteration: 0,
        })
    }
}

fn uses_online_threshold(method: Method) -> bool {
    matches!(method, Method::Ccpo | Method::CpoOnline)
}

fn with_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::Numeric { context, message } => Error::Numeric {
            context: format!("iteration {iteration}: {context}"),
            message,
        },
        other => other,
    }
}

struct Rollout {
    trajectory: VTraceTrajectory,
    steps: Vec<(crate::env::Observation, crate::env::Action, usize)>,
    cost: f64,
    answered_correctly: bool,
    solvable: bool,
}

/// Samples one episode from the score network and attaches rewards and the
/// terminal coverage signal.
fn rollout(cfg: &RunConfig, env: &EnvConfig, prices: &PriceTable, state: &mut TrainState, trace: &Trace) -> Result<Rollout> {
    let kappa = state.calibrator.kappa;
    let conformal = cfg.method == Method::Ccpo;
    let universe = answer_universe(trace);
    // Terminal set size and coverage of the set-valued policy (conformal) or the sampled answer.
    let (set_size, set_covered) = if conformal {
        let scores = trace_scores(&state.policy, trace, env)?;
        let pred = prediction_set(&conformal_tree(&scores, kappa, trace, env, prices));
        (pred.len(), coverage_indicator(&pred, &universe, trace.true_answer)?)
    } else {
        (1, false)
    };

    let mut ep = EpisodeState::new(trace);
    let (mut features, mut actions, mut behavior, mut target, mut rewards, mut constraints, mut steps) =
        (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut cost = 0.0;
    loop {
        let obs = observe(&ep, env)?;
        let dist = score(&state.policy, &obs)?;
        let action = sample_action(&dist, &mut state.rng);
        let tprob = if conformal {
            soft_stochastic_conformal(&dist, kappa, cfg.epsilon).prob(action.index())
        } else {
            dist.prob(action.index())
        };
        cost += step_cost(trace.round(ep.round), CallsMade::ROUND, prices);
        let out = step(&ep, action, prices, cfg.lambda, set_size)?;
        features.push(obs.features);
        actions.push(action);
        behavior.push(dist.prob(action.index()));
        target.push(tprob);
        rewards.push(out.reward);
        constraints.push(0.0);
        steps.push((obs, action, conformal_set(&dist, kappa).len()));
        ep = out.state;
        if out.done {
            break;
        }
    }
    let answered_correctly = ep.chosen_answer == Some(trace.true_answer);
    let solvable = universe.contains(trace.true_answer);
    let covered = if conformal { set_covered } else { answered_correctly || !solvable };
    *constraints.last_mut().expect("episode has a step") = if covered { 1.0 } else { 0.0 };
    Ok(Rollout {
        trajectory: VTraceTrajectory::new(features, actions, behavior, target, rewards, constraints, cfg.rho_bar)?,
        steps,
        cost,
        answered_correctly,
        solvable,
    })
}

/// One iteration: rollouts, critic fit, policy update, online threshold updates.
pub fn iterate(cfg: &RunConfig, train: &[Trace], state: &mut TrainState) -> Result<IterationRecord> {
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let env = cfg.env();
    let prices = cfg.prices();
    let kappa = state.calibrator.kappa;
    let mut picked = Vec::with_capacity(cfg.batch_size);
    let mut rollouts = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let trace = &train[state.rng.random_range(0..train.len())];
        picked.push(trace);
        rollouts.push(rollout(cfg, &env, &prices, state, trace)?);
    }
    let mean_cost = rollouts.iter().map(|r| r.cost).sum::<f64>() / rollouts.len() as f64;

    let mut vt = VTraceBatch {
        trajectories: rollouts.iter().map(|r| r.trajectory.clone()).collect(),
    };
    vt.refresh(&state.critics)?;
    state.critics = state.critics.update(&vt, cfg.critic_lr)?;
    vt.refresh(&state.critics)?;

    let (target, constraint) = match cfg.method {
        Method::Ccpo => (
            crate::policy::Target::SoftConformal {
                kappa,
                epsilon: cfg.epsilon,
            },
            ConstraintKind::CoverageBound(cfg.bound_mode),
        ),
        _ => (crate::policy::Target::Score, ConstraintKind::Pointwise),
    };
    let episodes = rollouts
        .iter()
        .zip(&vt.trajectories)
        .map(|(r, t)| CpoEpisode {
            steps: r
                .steps
                .iter()
                .enumerate()
                .map(|(i, (obs, action, set_size))| CpoStep {
                    obs: *obs,
                    action: *action,
                    behavior_prob: t.behavior_probs[i],
                    rho: t.rhos[i],
                    advantage: t.advantages[i],
                    constraint_advantage: t.constraint_advantages[i],
                    set_size: *set_size,
                })
                .collect(),
            answered_correctly: r.answered_correctly,
            solvable: r.solvable,
        })
        .collect();
    let batch = CpoBatch {
        episodes,
        target,
        constraint,
        alpha: cfg.alpha,
    };
    let (params, report) = cpo_update(&state.policy, &batch, &cfg.trust_region())?;
    state.policy = params;

    let mut eta = 0.0;
    if uses_online_threshold(cfg.method) {
        for trace in picked {
            let scores = trace_scores(&state.policy, trace, &env)?;
            let covered = conformal_covers(&scores, state.calibrator.kappa, trace, &env)?;
            eta = state.calibrator.online_update(covered);
        }
    }
    state.iteration += 1;
    Ok(IterationRecord {
        iteration: state.iteration,
        mean_cost,
        surrogate_coverage: report.soft_constraint,
        jbar: report.constraint,
        objective: report.objective,
        slack: report.c_slack,
        kl: report.kl,
        step_norm: report.step_norm,
        case: report.case,
        backtracks: report.backtracks,
        accepted: report.accepted,
        kappa: state.calibrator.kappa,
        eta,
    })
}

/// Runs iterations until `cfg.iterations` have completed, calling `on_iteration`
/// after each one. Numeric errors carry the failing iteration index.
pub fn train_loop(
    cfg: &RunConfig,
    train: &[Trace],
    state: &mut TrainState,
    mut on_iteration: impl FnMut(&IterationRecord, &TrainState) -> Result<()>,
) -> Result<()> {
    if !cfg.method.trains() {
        return Err(Error::Usage(format!("method `{}` has no training loop", cfg.method)));
    }
    while state.iteration < cfg.iterations {
        let next = state.iteration + 1;
        let rec = iterate(cfg, train, state).map_err(|e| with_iteration(e, next))?;
        on_iteration(&rec, state)?;
    }
    Ok(())
}

fn coverage_report(params: &FlatParams, kappa: f64, traces: &[Trace], alpha: f64, env: &EnvConfig) -> Result<CalibrationReport> {
    let mut covered = 0;
    for t in traces {
        covered += conformal_covers(&trace_scores(params, t, env)?, kappa, t, env)? as usize;
    }
    Ok(CalibrationReport {
        kappa,
        grid_size: 0,
        coverage: if traces.is_empty() { 0.0 } else { covered as f64 / traces.len() as f64 },
        n: traces.len(),
        required: required_count(traces.len(), alpha),
    })
}

/// Deployment threshold for a trained policy and the calibration-split report.
pub fn final_threshold(cfg: &RunConfig, state: &TrainState, calibration: &[Trace]) -> Result<CalibrationReport> {
    let env = cfg.env();
    match cfg.method {
        Method::Ccpo | Method::CpoBatch => batch_calibrate(&state.policy, calibration, cfg.alpha, cfg.granularity, &env),
        Method::CpoOnline => coverage_report(&state.policy, state.calibrator.kappa, calibration, cfg.alpha, &env),
        Method::Cpo => coverage_report(&state.policy, 1.0, calibration, cfg.alpha, &env),
        Method::Random | Method::FixedThreshold => Err(Error::Usage(format!("method `{}` has no threshold", cfg.method))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<IterationRecord>,
    pub calibration: Option<CalibrationReport>,
    /// Test-split metrics, when a test split exists.
    pub metrics: Option<MetricsRecord>,
}

/// Trains (or fits) the configured method and evaluates it on the test split.
///
/// `resume` continues from a saved state; `on_iteration` sees every new log line.
pub fn run_with(
    cfg: &RunConfig,
    splits: &Splits,
    resume: Option<TrainState>,
    mut on_iteration: impl FnMut(&IterationRecord, &TrainState) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let env = cfg.env();
    let prices = cfg.prices();
    let mut log = Vec::new();
    let (checkpoint, calibration) = match cfg.method {
        Method::Random => (Checkpoint::rule(cfg, None), None),
        Method::FixedThreshold => {
            let t = match (cfg.fixed_base_max, cfg.fixed_guide_max) {
                (Some(base_max), Some(guide_max)) => Thresholds { base_max, guide_max },
                _ => search_thresholds(&splits.calibration, cfg.alpha, &env, &prices)?,
            };
            (Checkpoint::rule(cfg, Some(t)), None)
        }
        _ => {
            let mut state = match resume {
                Some(s) => s,
                None => TrainState::init(cfg)?,
            };
            train_loop(cfg, &splits.train, &mut state, |rec, st| {
                log.push(rec.clone());
                on_iteration(rec, st)
            })?;
            let report = final_threshold(cfg, &state, &splits.calibration)?;
            (Checkpoint::trained(cfg, state, report.kappa, true), Some(report))
        }
    };
    let metrics = if splits.test.is_empty() {
        None
    } else {
        Some(evaluate(&checkpoint.decider()?, &splits.test, &env, &prices, cfg.cost_accounting, cfg.seed)?)
    };
    Ok(RunOutcome {
        checkpoint,
        log,
        calibration,
        metrics,
    })
}

pub fn run(cfg: &RunConfig, splits: &Splits) -> Result<RunOutcome> {
    run_with(cfg, splits, None, |_, _| Ok(()))
}
