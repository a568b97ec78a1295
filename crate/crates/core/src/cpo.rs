//! Surrogate objective and coverage constraint, and the constrained
//! trust-region update with backtracking.
//!
//! Conventions: the objective is a cost and is minimized along `g`; the
//! constraint is `J(theta) >= 1 - alpha` with gradient `b`, written as
//! `c + B^T x <= 0` for `B = -b` and `c = (1 - alpha) - J`.

use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation};
use crate::error::{Error, Result};
use crate::numerics::{conjugate_gradient, dot, fisher_vector_product, kl_categorical, norm, Categorical, FlatParams};
use crate::policy::{PolicyPoint, Target};

/// How the solvable-question term enters the coverage bound.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    /// `mean product + (1 - solvable rate)`, a valid union bound.
    #[default]
    UnionBound,
    /// `mean product - solvable rate`.
    Literal,
}

/// Which coverage quantity the update constrains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintKind {
    /// Importance-weighted set-size product bound for conformal policies.
    CoverageBound(BoundMode),
    /// Empirical coverage of the sampled answer, for pointwise policies.
    Pointwise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpoStep {
    pub obs: Observation,
    pub action: Action,
    /// `pi_old(a_t | o_t)`, the probability the rollout sampled with.
    pub behavior_prob: f64,
    /// Clipped importance weight of the target policy against the behavior.
    pub rho: f64,
    pub advantage: f64,
    pub constraint_advantage: f64,
    /// `|C(o_t)|` of the hard conformal set at the current threshold.
    pub set_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpoEpisode {
    pub steps: Vec<CpoStep>,
    /// The sampled trajectory's answer equals the true answer.
    pub answered_correctly: bool,
    /// The true answer is reachable by some action sequence.
    pub solvable: bool,
}

impl CpoEpisode {
    /// Pointwise coverage of the sampled answer.
    pub fn covered(&self) -> bool {
        self.answered_correctly || !self.solvable
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpoBatch {
    pub episodes: Vec<CpoEpisode>,
    pub target: Target,
    pub constraint: ConstraintKind,
    pub alpha: f64,
}

impl CpoBatch {
    fn check(&self) -> Result<()> {
        if self.episodes.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        if self.episodes.iter().any(|e| e.steps.is_empty()) {
            return Err(Error::Usage("batch holds an episode with no steps".into()));
        }
        Ok(())
    }

    fn solvable_rate(&self) -> f64 {
        self.episodes.iter().filter(|e| e.solvable).count() as f64 / self.episodes.len() as f64
    }

    fn bound_offset(&self, mode: BoundMode) -> f64 {
        match mode {
            BoundMode::UnionBound => 1.0 - self.solvable_rate(),
            BoundMode::Literal => -self.solvable_rate(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }
}

/// `prod_t rho_t |C(o_t)|` times the correctness indicator.
pub fn episode_product(episode: &CpoEpisode) -> f64 {
    if !episode.answered_correctly {
        return 0.0;
    }
    episode.steps.iter().map(|s| s.rho * s.set_size as f64).product()
}

/// Hard estimate of the coverage bound from clipped weights and hard set sizes.
pub fn coverage_surrogate(episodes: &[CpoEpisode], mode: BoundMode) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let n = episodes.len() as f64;
    let mean: f64 = episodes.iter().map(episode_product).sum::<f64>() / n;
    let solvable = episodes.iter().filter(|e| e.solvable).count() as f64 / n;
    let v = match mode {
        BoundMode::UnionBound => mean + 1.0 - solvable,
        BoundMode::Literal => mean - solvable,
    };
    if !v.is_finite() {
        return Err(Error::numeric("coverage surrogate", format!("estimate {v}")));
    }
    Ok(v)
}

/// Current constraint estimate used for the slack.
pub fn constraint_estimate(batch: &CpoBatch) -> Result<f64> {
    batch.check()?;
    match batch.constraint {
        ConstraintKind::CoverageBound(mode) => coverage_surrogate(&batch.episodes, mode),
        ConstraintKind::Pointwise => {
            Ok(batch.episodes.iter().filter(|e| e.covered()).count() as f64 / batch.episodes.len() as f64)
        }
    }
}

/// Target-policy linearizations for every step, episode-major.
pub fn evaluate_points(params: &FlatParams, batch: &CpoBatch) -> Result<Vec<Vec<PolicyPoint>>> {
    batch
        .episodes
        .iter()
        .map(|e| e.steps.iter().map(|s| PolicyPoint::evaluate(params, &s.obs, batch.target)).collect())
        .collect()
}

/// Target probabilities of the taken actions at the old parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OldTargets {
    pub dists: Vec<Vec<Categorical>>,
}

impl OldTargets {
    pub fn from_points(points: &[Vec<PolicyPoint>]) -> Self {
        Self {
            dists: points.iter().map(|ep| ep.iter().map(|p| p.target).collect()).collect(),
        }
    }

    pub fn compute(params: &FlatParams, batch: &CpoBatch) -> Result<Self> {
        Ok(Self::from_points(&evaluate_points(params, batch)?))
    }
}

/// `mean_i sum_t rho_t A_t T_theta(a_t) / T_old(a_t)`.
pub fn surrogate_objective(params: &FlatParams, batch: &CpoBatch, old: &OldTargets) -> Result<f64> {
    batch.check()?;
    let mut total = 0.0;
    for (ei, ep) in batch.episodes.iter().enumerate() {
        for (ti, s) in ep.steps.iter().enumerate() {
            let pt = PolicyPoint::evaluate(params, &s.obs, batch.target)?;
            let a = s.action.index();
            total += s.rho * s.advantage * pt.target.prob(a) / old.dists[ei][ti].prob(a);
        }
    }
    Ok(total / batch.episodes.len() as f64)
}

/// Differentiable constraint value at `params`.
///
/// For the bound: `mean_i 1{correct} prod_t (T_theta(a_t)/pi_old(a_t)) sum_a w_a(o_t)`
/// plus the solvable-rate offset, with unclipped ratios and soft set sizes.
/// For pointwise coverage: the current rate plus the first-order
/// importance-weighted change in the constraint advantages.
pub fn soft_constraint(params: &FlatParams, batch: &CpoBatch, old: &OldTargets) -> Result<f64> {
    batch.check()?;
    let n = batch.episodes.len() as f64;
    match batch.constraint {
        ConstraintKind::CoverageBound(mode) => {
            let mut total = 0.0;
            for ep in batch.episodes.iter().filter(|e| e.answered_correctly) {
                let mut prod = 1.0;
                for s in &ep.steps {
                    let pt = PolicyPoint::evaluate(params, &s.obs, batch.target)?;
                    prod *= pt.target.prob(s.action.index()) / s.behavior_prob * pt.soft_set_size();
                }
                total += prod;
            }
            Ok(total / n + batch.bound_offset(mode))
        }
        ConstraintKind::Pointwise => {
            let base = constraint_estimate(batch)?;
            let mut delta = 0.0;
            for (ei, ep) in batch.episodes.iter().enumerate() {
                for (ti, s) in ep.steps.iter().enumerate() {
                    let pt = PolicyPoint::evaluate(params, &s.obs, batch.target)?;
                    let a = s.action.index();
                    let ratio_new = pt.target.prob(a) / s.behavior_prob;
                    let ratio_old = old.dists[ei][ti].prob(a) / s.behavior_prob;
                    delta += s.constraint_advantage * (ratio_new - ratio_old);
                }
            }
            Ok(base + delta / n)
        }
    }
}

/// Weights that entered each gradient, kept so tests can check which
/// estimator fed which path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientProvenance {
    /// Clipped weights multiplying the reward advantages in `g`.
    pub objective_weights: Vec<f64>,
    /// Raw target/behavior ratios used in `b`.
    pub constraint_ratios: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateGradients {
    pub g: Vec<f64>,
    pub b: Vec<f64>,
    /// `(1 - alpha) - J`, positive when the constraint is violated.
    pub c_slack: f64,
    pub objective: f64,
    /// Hard constraint estimate.
    pub constraint: f64,
    /// Differentiable constraint estimate at the current parameters.
    pub soft_constraint: f64,
    pub provenance: GradientProvenance,
}

pub fn surrogate_gradients(
    params: &FlatParams,
    batch: &CpoBatch,
    points: &[Vec<PolicyPoint>],
) -> Result<SurrogateGradients> {
    batch.check()?;
    let n = batch.episodes.len() as f64;
    let mut g = vec![0.0; params.len()];
    let mut b = vec![0.0; params.len()];
    let mut objective = 0.0;
    let mut soft = 0.0;
    let mut prov = GradientProvenance::default();

    for (ei, (ep, pts)) in batch.episodes.iter().zip(points).enumerate() {
        for (s, pt) in ep.steps.iter().zip(pts) {
            objective += s.rho * s.advantage;
            prov.objective_weights.push(s.rho);
            pt.add_grad_log_target(params, s.action, s.rho * s.advantage / n, &mut g);
        }
        match batch.constraint {
            ConstraintKind::CoverageBound(_) => {
                let ratios: Vec<f64> = ep
                    .steps
                    .iter()
                    .zip(pts)
                    .map(|(s, pt)| pt.target.prob(s.action.index()) / s.behavior_prob)
                    .collect();
                prov.constraint_ratios.extend(&ratios);
                if !ep.answered_correctly {
                    continue;
                }
                let prod: f64 = ratios.iter().zip(pts).map(|(r, pt)| r * pt.soft_set_size()).product();
                soft += prod;
                if prod == 0.0 {
                    continue;
                }
                for (s, pt) in ep.steps.iter().zip(pts) {
                    pt.add_grad_log_target(params, s.action, prod / n, &mut b);
                    pt.add_grad_soft_set_size(params, prod / (n * pt.soft_set_size()), &mut b);
                }
            }
            ConstraintKind::Pointwise => {
                for (s, pt) in ep.steps.iter().zip(pts) {
                    let ratio = pt.target.prob(s.action.index()) / s.behavior_prob;
                    prov.constraint_ratios.push(ratio);
                    pt.add_grad_log_target(params, s.action, s.constraint_advantage * ratio / n, &mut b);
                }
            }
        }
        if g.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::numeric("surrogate gradients", format!("episode {ei} gives a non-finite gradient")));
        }
    }

    let constraint = constraint_estimate(batch)?;
    let soft_constraint = match batch.constraint {
        ConstraintKind::CoverageBound(mode) => soft / n + batch.bound_offset(mode),
        ConstraintKind::Pointwise => constraint,
    };
    Ok(SurrogateGradients {
        g,
        b,
        c_slack: (1.0 - batch.alpha) - constraint,
        objective: objective / n,
        constraint,
        soft_constraint,
        provenance: prov,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrustRegionConfig {
    pub delta: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub damping: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Allowed drop of the constraint surrogate during the line search.
    pub constraint_tol: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            delta: 0.01,
            cg_iters: 10,
            cg_tol: 1e-10,
            damping: 0.1,
            backtrack_factor: 0.8,
            max_backtracks: 15,
            constraint_tol: 1e-3,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::validation("delta", "must be positive"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::validation("backtrack_factor", "must lie in (0, 1)"));
        }
        if self.damping < 0.0 {
            return Err(Error::validation("damping", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepCase {
    /// Constraint not binding; natural-gradient step.
    Inactive,
    /// Constraint binding; both multipliers positive.
    Active,
    /// No feasible point in the trust region; step purely toward feasibility.
    Recovery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrustRegionStep {
    /// Parameter increment (already signed; add it to the parameters).
    pub delta: Vec<f64>,
    pub case: StepCase,
    pub lambda: f64,
    pub nu: f64,
    /// `0.5 x^T H x` of the returned increment.
    pub model_kl: f64,
    pub cg_residual: f64,
}

const TINY: f64 = 1e-20;
/// Relative size of `q - r^2/s` below which `g` and `B` count as parallel.
const PARALLEL_TOL: f64 = 1e-8;

/// Solves `min g^T x` subject to `c + B^T x <= 0` and `0.5 x^T H x <= delta`
/// with `B = -b`, using conjugate gradient for `H^{-1} g` and `H^{-1} B`.
pub fn trust_region_step(
    grads: &SurrogateGradients,
    mut fvp: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    config: &TrustRegionConfig,
) -> Result<TrustRegionStep> {
    let delta_kl = config.delta;
    let g = &grads.g;
    let bc: Vec<f64> = grads.b.iter().map(|v| -v).collect();
    let c = grads.c_slack;

    let sol_v = conjugate_gradient(&mut fvp, g, config.cg_iters, config.cg_tol)?;
    let sol_w = conjugate_gradient(&mut fvp, &bc, config.cg_iters, config.cg_tol)?;
    let (v, w) = (&sol_v.x, &sol_w.x);
    let q = dot(g, v);
    let r = dot(g, w);
    let s = dot(&bc, w);
    let cg_residual = sol_v.residual_norm.max(sol_w.residual_norm);
    log::debug!("trust region: q {q:.3e} r {r:.3e} s {s:.3e} c {c:.3e}");

    // x is the descent increment: theta_new = theta + x.
    let natural = |scale: f64| -> Vec<f64> { v.iter().map(|vi| -scale * vi).collect() };
    let (mut x, case, lambda, nu) = if s <= TINY {
        // The constraint cannot be moved locally; only the objective is informative.
        if q <= TINY {
            (vec![0.0; g.len()], StepCase::Inactive, 0.0, 0.0)
        } else {
            let lam = (q / (2.0 * delta_kl)).sqrt();
            (natural(1.0 / lam), StepCase::Inactive, lam, 0.0)
        }
    } else {
        let a_coef = (q - r * r / s).max(0.0);
        let b_coef = 2.0 * delta_kl - c * c / s;
        if c > 0.0 && b_coef < 0.0 || (c > 0.0 && q <= TINY) {
            let nu = (2.0 * delta_kl / s).sqrt();
            (w.iter().map(|wi| -nu * wi).collect(), StepCase::Recovery, 0.0, nu)
        } else if q <= TINY {
            (vec![0.0; g.len()], StepCase::Inactive, 0.0, 0.0)
        } else if c < 0.0 && b_coef < 0.0 {
            let lam = (q / (2.0 * delta_kl)).sqrt();
            (natural(1.0 / lam), StepCase::Inactive, lam, 0.0)
        } else if a_coef <= PARALLEL_TOL * q {
            // g is parallel to B in the metric, so only y = B^T x matters:
            // minimize (r/s) y over |y| <= sqrt(2 delta s), y <= -c.
            let y_max = (2.0 * delta_kl * s).sqrt();
            let (y, case) = if r < 0.0 && -c < y_max {
                (-c, StepCase::Active)
            } else if r < 0.0 {
                (y_max, StepCase::Inactive)
            } else {
                (-y_max, StepCase::Inactive)
            };
            (w.iter().map(|wi| y / s * wi).collect(), case, 0.0, 0.0)
        } else {
            let (lo_a, hi_a, lo_b, hi_b) = if c < 0.0 {
                (0.0, r / c, r / c, f64::INFINITY)
            } else if c > 0.0 {
                (r / c, f64::INFINITY, 0.0, r / c)
            } else if r < 0.0 {
                (0.0, f64::INFINITY, 0.0, 0.0)
            } else {
                (0.0, 0.0, 0.0, f64::INFINITY)
            };
            let proj = |x: f64, lo: f64, hi: f64| lo.max(hi.min(x));
            let f_a = |lam: f64| -0.5 * (a_coef / lam + b_coef * lam) - r * c / s;
            let f_b = |lam: f64| -0.5 * (q / lam + 2.0 * delta_kl * lam);
            let lam_a = if b_coef > 0.0 {
                proj((a_coef / b_coef).sqrt(), lo_a, hi_a)
            } else {
                hi_a
            };
            let lam_b = proj((q / (2.0 * delta_kl)).sqrt(), lo_b, hi_b);
            let va = if lam_a > 0.0 && lam_a.is_finite() { f_a(lam_a) } else { f64::NEG_INFINITY };
            let vb = if lam_b > 0.0 && lam_b.is_finite() { f_b(lam_b) } else { f64::NEG_INFINITY };
            // Ties go to the branch that keeps the constraint multiplier.
            let lam = if va >= vb { lam_a } else { lam_b };
            if !(lam > 0.0 && lam.is_finite()) {
                return Err(Error::numeric(
                    "trust region step",
                    format!("no valid multiplier (q={q}, r={r}, s={s}, c={c})"),
                ));
            }
            let nu = ((lam * c - r) / s).max(0.0);
            let x: Vec<f64> = v.iter().zip(w).map(|(vi, wi)| -(vi + nu * wi) / lam).collect();
            (x, if nu > 0.0 { StepCase::Active } else { StepCase::Inactive }, lam, nu)
        }
    };

    let hx = fvp(&x)?;
    let mut model_kl = 0.5 * dot(&x, &hx);
    if model_kl > delta_kl {
        let scale = (delta_kl / model_kl).sqrt();
        x.iter_mut().for_each(|xi| *xi *= scale);
        model_kl = delta_kl;
    }
    if x.iter().any(|xi| !xi.is_finite()) {
        return Err(Error::numeric("trust region step", "increment is not finite"));
    }
    Ok(TrustRegionStep {
        delta: x,
        case,
        lambda,
        nu,
        model_kl,
        cg_residual,
    })
}

/// Mean `KL(T_new(.|o) || T_old(.|o))` over every step of the batch.
pub fn mean_kl(params: &FlatParams, batch: &CpoBatch, old: &OldTargets) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (ei, ep) in batch.episodes.iter().enumerate() {
        for (ti, s) in ep.steps.iter().enumerate() {
            let pt = PolicyPoint::evaluate(params, &s.obs, batch.target)?;
            total += kl_categorical(&pt.target, &old.dists[ei][ti])?;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineSearchOutcome {
    pub params: FlatParams,
    pub accepted: bool,
    pub backtracks: usize,
    pub kl: f64,
    pub soft_constraint: f64,
    pub step_fraction: f64,
}

/// Backtracks along `step` until the realized KL is within `delta` and the
/// soft constraint has not dropped below `min(old, 1 - alpha) - tol`.
/// Falls back to the old parameters when every trial fails.
pub fn line_search(
    old_params: &FlatParams,
    step: &[f64],
    batch: &CpoBatch,
    old: &OldTargets,
    old_soft_constraint: f64,
    config: &TrustRegionConfig,
) -> Result<LineSearchOutcome> {
    let floor = old_soft_constraint.min(1.0 - batch.alpha) - config.constraint_tol;
    if step.iter().all(|v| *v == 0.0) {
        return Ok(LineSearchOutcome {
            params: old_params.clone(),
            accepted: true,
            backtracks: 0,
            kl: 0.0,
            soft_constraint: old_soft_constraint,
            step_fraction: 0.0,
        });
    }
    let mut frac = 1.0;
    for k in 0..=config.max_backtracks {
        let trial = old_params.offset(step, frac);
        if trial.check_finite().is_ok() {
            let kl = mean_kl(&trial, batch, old)?;
            let soft = soft_constraint(&trial, batch, old)?;
            if kl <= config.delta && soft.is_finite() && soft >= floor {
                return Ok(LineSearchOutcome {
                    params: trial,
                    accepted: true,
                    backtracks: k,
                    kl,
                    soft_constraint: soft,
                    step_fraction: frac,
                });
            }
        }
        frac *= config.backtrack_factor;
    }
    log::debug!("line search rejected every trial step");
    Ok(LineSearchOutcome {
        params: old_params.clone(),
        accepted: false,
        backtracks: config.max_backtracks + 1,
        kl: 0.0,
        soft_constraint: old_soft_constraint,
        step_fraction: 0.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub objective: f64,
    pub constraint: f64,
    pub soft_constraint: f64,
    pub c_slack: f64,
    pub kl: f64,
    pub model_kl: f64,
    pub step_norm: f64,
    pub case: StepCase,
    pub backtracks: usize,
    pub accepted: bool,
    pub cg_residual: f64,
}

/// Full policy update on one batch: gradients, trust-region step, line search.
pub fn cpo_update(params: &FlatParams, batch: &CpoBatch, config: &TrustRegionConfig) -> Result<(FlatParams, UpdateReport)> {
    config.validate()?;
    batch.check()?;
    let points = evaluate_points(params, batch)?;
    let grads = surrogate_gradients(params, batch, &points)?;
    let old = OldTargets::from_points(&points);
    let dpoints: Vec<_> = points.iter().flatten().map(|p| p.distribution_point()).collect();
    let step = trust_region_step(
        &grads,
        |v: &[f64]| fisher_vector_product(params, &dpoints, v, config.damping),
        config,
    )?;
    let ls = line_search(params, &step.delta, batch, &old, grads.soft_constraint, config)?;
    let report = UpdateReport {
        objective: grads.objective,
        constraint: grads.constraint,
        soft_constraint: grads.soft_constraint,
        c_slack: grads.c_slack,
        kl: ls.kl,
        model_kl: step.model_kl,
        step_norm: norm(&step.delta) * ls.step_fraction,
        case: step.case,
        backtracks: ls.backtracks,
        accepted: ls.accepted,
        cg_residual: step.cg_residual,
    };
    Ok((ls.params, report))
}
