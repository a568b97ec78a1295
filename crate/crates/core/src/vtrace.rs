//! Truncated importance weights, V-trace targets, critic fitting and advantages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, OBS_DIM};
use crate::error::{Error, Result};
use crate::numerics::{backward_into, forward, Categorical, FlatParams, MlpShape};

pub const DEFAULT_RHO_BAR: f64 = 1.0;

/// `min(rho_bar, target / behavior)` for a single step.
pub fn truncated_ratio(behavior: f64, target: f64, rho_bar: f64) -> Result<f64> {
    if !(behavior > 0.0) || !behavior.is_finite() {
        return Err(Error::numeric("importance weight", format!("behavior probability {behavior}")));
    }
    if !(target >= 0.0) || !target.is_finite() {
        return Err(Error::numeric("importance weight", format!("target probability {target}")));
    }
    Ok((target / behavior).min(rho_bar))
}

pub fn importance_weights(
    behavior: &[Categorical],
    target: &[Categorical],
    actions: &[Action],
    rho_bar: f64,
) -> Result<Vec<f64>> {
    if behavior.len() != target.len() || behavior.len() != actions.len() {
        return Err(Error::Usage(format!(
            "misaligned inputs: {} behavior, {} target, {} actions",
            behavior.len(),
            target.len(),
            actions.len()
        )));
    }
    actions
        .iter()
        .zip(behavior.iter().zip(target))
        .map(|(a, (b, t))| truncated_ratio(b.prob(a.index()), t.prob(a.index()), rho_bar))
        .collect()
}

/// Backward V-trace recursion.
///
/// `values` holds `V(o_1..o_n)` followed by the bootstrap value after the last
/// step (0 for a terminated episode), so it is one longer than `rewards`.
pub fn vtrace_targets(values: &[f64], rewards: &[f64], rhos: &[f64]) -> Result<Vec<f64>> {
    let n = rewards.len();
    if values.len() != n + 1 || rhos.len() != n {
        return Err(Error::Usage(format!(
            "misaligned inputs: {} values, {} rewards, {} weights",
            values.len(),
            n,
            rhos.len()
        )));
    }
    let mut out = vec![0.0; n];
    let mut next_target = values[n];
    for t in (0..n).rev() {
        let delta = rhos[t] * (rewards[t] + values[t + 1] - values[t]);
        out[t] = values[t] + delta + rhos[t] * (next_target - values[t + 1]);
        next_target = out[t];
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric("vtrace targets", format!("step {i} is not finite")));
    }
    Ok(out)
}

/// `A_t = r_t + v_{t+1} - V(o_t)` with `v_{n+1} = 0`.
pub fn advantages(rewards: &[f64], targets: &[f64], values: &[f64]) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let next = if t + 1 < n { targets[t + 1] } else { 0.0 };
            rewards[t] + next - values[t]
        })
        .collect()
}

pub fn critic_shape() -> MlpShape {
    MlpShape::standard(OBS_DIM, 1)
}

pub fn critic_value(params: &FlatParams, features: &[f64]) -> Result<f64> {
    Ok(forward(params, features)?.output()[0])
}

/// One step of `theta <- theta - nu * sum_i (V(x_i) - v_i) grad V(x_i)`.
pub fn critic_step(params: &FlatParams, features: &[&[f64]], targets: &[f64], nu: f64) -> Result<FlatParams> {
    if features.len() != targets.len() {
        return Err(Error::Usage(format!(
            "{} feature rows for {} targets",
            features.len(),
            targets.len()
        )));
    }
    let mut grad = vec![0.0; params.len()];
    for (x, v) in features.iter().zip(targets) {
        let cache = forward(params, x)?;
        let err = cache.output()[0] - v;
        backward_into(params, &cache, &[err], &mut grad);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("critic update", "gradient is not finite"));
    }
    Ok(params.offset(&grad, -nu))
}

/// Half the summed squared error of the critic on a batch.
pub fn critic_loss(params: &FlatParams, features: &[&[f64]], targets: &[f64]) -> Result<f64> {
    let mut loss = 0.0;
    for (x, v) in features.iter().zip(targets) {
        let e = critic_value(params, x)? - v;
        loss += 0.5 * e * e;
    }
    Ok(loss)
}

/// Reward critic and constraint critic; same architecture, separate parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticPair {
    pub value: FlatParams,
    pub constraint: FlatParams,
}

impl CriticPair {
    pub fn init(shape: MlpShape, rng: &mut impl Rng) -> Self {
        let value = FlatParams::init(shape.clone(), rng);
        let constraint = FlatParams::init(shape, rng);
        Self { value, constraint }
    }

    pub fn update(&self, batch: &VTraceBatch, nu: f64) -> Result<CriticPair> {
        let features: Vec<&[f64]> = batch
            .trajectories
            .iter()
            .flat_map(|t| t.features.iter().map(|f| f.as_slice()))
            .collect();
        let targets: Vec<f64> = batch.trajectories.iter().flat_map(|t| t.targets.iter().copied()).collect();
        let ctargets: Vec<f64> = batch
            .trajectories
            .iter()
            .flat_map(|t| t.constraint_targets.iter().copied())
            .collect();
        Ok(CriticPair {
            value: critic_step(&self.value, &features, &targets, nu)?,
            constraint: critic_step(&self.constraint, &features, &ctargets, nu)?,
        })
    }
}

/// One sampled trajectory with its V-trace quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct VTraceTrajectory {
    pub features: Vec<[f64; OBS_DIM]>,
    pub actions: Vec<Action>,
    pub behavior_probs: Vec<f64>,
    pub target_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub constraints: Vec<f64>,
    pub rhos: Vec<f64>,
    pub values: Vec<f64>,
    pub constraint_values: Vec<f64>,
    pub targets: Vec<f64>,
    pub constraint_targets: Vec<f64>,
    pub advantages: Vec<f64>,
    pub constraint_advantages: Vec<f64>,
}

impl VTraceTrajectory {
    pub fn new(
        features: Vec<[f64; OBS_DIM]>,
        actions: Vec<Action>,
        behavior_probs: Vec<f64>,
        target_probs: Vec<f64>,
        rewards: Vec<f64>,
        constraints: Vec<f64>,
        rho_bar: f64,
    ) -> Result<Self> {
        let n = features.len();
        if [actions.len(), behavior_probs.len(), target_probs.len(), rewards.len(), constraints.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Usage("trajectory fields have different lengths".into()));
        }
        let rhos = behavior_probs
            .iter()
            .zip(&target_probs)
            .map(|(b, t)| truncated_ratio(*b, *t, rho_bar))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features,
            actions,
            behavior_probs,
            target_probs,
            rewards,
            constraints,
            rhos,
            values: vec![0.0; n],
            constraint_values: vec![0.0; n],
            targets: vec![0.0; n],
            constraint_targets: vec![0.0; n],
            advantages: vec![0.0; n],
            constraint_advantages: vec![0.0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Recomputes critic predictions, targets and advantages under `critics`.
    pub fn refresh(&mut self, critics: &CriticPair) -> Result<()> {
        let mut values = Vec::with_capacity(self.len() + 1);
        let mut cvalues = Vec::with_capacity(self.len() + 1);
        for f in &self.features {
            values.push(critic_value(&critics.value, f)?);
            cvalues.push(critic_value(&critics.constraint, f)?);
        }
        values.push(0.0);
        cvalues.push(0.0);
        self.targets = vtrace_targets(&values, &self.rewards, &self.rhos)?;
        self.constraint_targets = vtrace_targets(&cvalues, &self.constraints, &self.rhos)?;
        values.pop();
        cvalues.pop();
        self.advantages = advantages(&self.rewards, &self.targets, &values);
        self.constraint_advantages = advantages(&self.constraints, &self.constraint_targets, &cvalues);
        self.values = values;
        self.constraint_values = cvalues;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VTraceBatch {
    pub trajectories: Vec<VTraceTrajectory>,
}

impl VTraceBatch {
    pub fn refresh(&mut self, critics: &CriticPair) -> Result<()> {
        self.trajectories.iter_mut().try_for_each(|t| t.refresh(critics))
    }

    pub fn max_rho(&self) -> f64 {
        self.trajectories
            .iter()
            .flat_map(|t| t.rhos.iter().copied())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// v_t = V_t + sum_{s>=t} (prod_{i=t}^{s-1} rho_i) rho_s (r_s + V_{s+1} - V_s)
    fn expanded(values: &[f64], rewards: &[f64], rhos: &[f64]) -> Vec<f64> {
        let n = rewards.len();
        (0..n)
            .map(|t| {
                let mut acc = values[t];
                let mut coef = 1.0;
                for s in t..n {
                    acc += coef * rhos[s] * (rewards[s] + values[s + 1] - values[s]);
                    coef *= rhos[s];
                }
                acc
            })
            .collect()
    }

    #[test]
    fn weight_examples() {
        assert_eq!(truncated_ratio(0.3, 0.3, 1.0).unwrap(), 1.0);
        assert_eq!(truncated_ratio(0.2, 0.5, 1.0).unwrap(), 1.0);
        assert_eq!(truncated_ratio(0.5, 0.25, 1.0).unwrap(), 0.5);
        assert!(matches!(truncated_ratio(0.0, 0.5, 1.0), Err(Error::Numeric { .. })));
        let b = [Categorical([0.2, 0.3, 0.5]), Categorical([0.5, 0.5, 0.0])];
        let t = [Categorical([0.6, 0.3, 0.1]), Categorical([0.75, 0.25, 0.0])];
        let w = importance_weights(&b, &t, &[Action::GuideAnswer, Action::BaseAnswer], 1.0).unwrap();
        assert_eq!(w, vec![1.0, 0.5]);
    }

    #[test]
    fn target_examples() {
        let v = vtrace_targets(&[7.0, -2.0, 0.5, 0.0], &[1.0, 2.0, 3.0], &[1.0; 3]).unwrap();
        assert_eq!(v, vec![6.0, 5.0, 3.0]);
        let v = vtrace_targets(&[7.0, -2.0, 0.5, 0.0], &[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert_eq!(v, vec![7.0, -2.0, 0.5]);
        assert!(matches!(vtrace_targets(&[0.0], &[1.0], &[1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn advantage_examples() {
        let targets = vtrace_targets(&[0.0; 4], &[1.0, 2.0, 3.0], &[1.0; 3]).unwrap();
        assert_eq!(advantages(&[1.0, 2.0, 3.0], &targets, &[0.0; 3]), vec![6.0, 5.0, 3.0]);
        // A perfect critic on a deterministic path has zero advantage.
        let values = [6.0, 5.0, 3.0, 0.0];
        let targets = vtrace_targets(&values, &[1.0, 2.0, 3.0], &[1.0; 3]).unwrap();
        assert_eq!(advantages(&[1.0, 2.0, 3.0], &targets, &values[..3]), vec![0.0; 3]);
    }

    #[test]
    fn recursion_matches_forward_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let n = rng.random_range(1..=6);
            let mut values: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            values.push(0.0);
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let rhos: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..=1.0)).collect();
            let got = vtrace_targets(&values, &rewards, &rhos).unwrap();
            for (a, b) in got.iter().zip(expanded(&values, &rewards, &rhos)) {
                assert!((a - b).abs() <= 1e-10);
            }
            let ones = vec![1.0; n];
            let mc = vtrace_targets(&values, &rewards, &ones).unwrap();
            for t in 0..n {
                let ret: f64 = rewards[t..].iter().sum();
                assert!((mc[t] - ret).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn targets_are_monotone_in_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let n = rng.random_range(1..=5);
            let mut values: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            values.push(0.0);
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let rhos: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
            let base = vtrace_targets(&values, &rewards, &rhos).unwrap();
            let s = rng.random_range(0..n);
            let mut bumped = rewards.clone();
            bumped[s] += 0.5;
            let after = vtrace_targets(&values, &bumped, &rhos).unwrap();
            for t in 0..=s {
                assert!(after[t] >= base[t] - 1e-12);
            }
        }
    }

    #[test]
    fn two_parameter_critic_step_matches_hand_gradient() {
        // V(x) = w x + b.
        let shape = MlpShape::new(vec![1, 1]).unwrap();
        let p = FlatParams::from_values(shape, vec![0.5, -0.25]).unwrap();
        let x = [2.0];
        let v = 3.0;
        let nu = 0.1;
        let pred = 0.5 * 2.0 - 0.25;
        let next = critic_step(&p, &[&x], &[v], nu).unwrap();
        let want = [0.5 - nu * (pred - v) * 2.0, -0.25 - nu * (pred - v)];
        for (a, b) in next.values.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let fixed = critic_step(&p, &[&x], &[pred], nu).unwrap();
        assert_eq!(fixed, p);
    }

    fn fixed_batch(rng: &mut ChaCha8Rng) -> (Vec<[f64; OBS_DIM]>, Vec<f64>) {
        let xs: Vec<[f64; OBS_DIM]> = (0..8)
            .map(|_| {
                let mut f = [0.0; OBS_DIM];
                for v in f.iter_mut().take(OBS_DIM - 1) {
                    *v = rng.random_range(0.0..1.0);
                }
                f[OBS_DIM - 1] = 1.0;
                f
            })
            .collect();
        let ys = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        (xs, ys)
    }

    #[test]
    fn small_rate_updates_do_not_increase_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = FlatParams::init(critic_shape(), &mut rng);
        let (xs, ys) = fixed_batch(&mut rng);
        let rows: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let mut prev = critic_loss(&p, &rows, &ys).unwrap();
        for _ in 0..50 {
            p = critic_step(&p, &rows, &ys, 1e-4).unwrap();
            let l = critic_loss(&p, &rows, &ys).unwrap();
            assert!(l <= prev + 1e-15);
            prev = l;
        }
    }

    #[test]
    fn repeated_updates_fit_a_fixed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = FlatParams::init(critic_shape(), &mut rng);
        let (xs, ys) = fixed_batch(&mut rng);
        let rows: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        for _ in 0..5000 {
            p = critic_step(&p, &rows, &ys, 1e-2).unwrap();
        }
        let mse: f64 = 2.0 * critic_loss(&p, &rows, &ys).unwrap() / ys.len() as f64;
        assert!(mse < 1e-4, "mse {mse}");
    }

    #[test]
    fn critics_update_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let critics = CriticPair::init(critic_shape(), &mut rng);
        let f = [[0.0, 0.5, 0.25, 0.1, 0.0, 1.0], [1.0, 0.3, 0.5, 0.2, 1.0, 1.0]];
        let mut traj = VTraceTrajectory::new(
            f.to_vec(),
            vec![Action::NextRound, Action::BaseAnswer],
            vec![0.4, 0.5],
            vec![0.5, 0.5],
            vec![0.3, 1.2],
            vec![0.0, 1.0],
            1.0,
        )
        .unwrap();
        traj.refresh(&critics).unwrap();
        let before = traj.constraint_advantages.clone();
        let mut other = traj.clone();
        other.rewards = vec![5.0, -1.0];
        other.refresh(&critics).unwrap();
        assert_eq!(other.constraint_advantages, before);
        assert_ne!(other.advantages, traj.advantages);

        // Constraint targets equal to predictions leave the constraint critic fixed.
        let mut batch = VTraceBatch { trajectories: vec![traj] };
        batch.trajectories[0].constraint_targets = batch.trajectories[0].constraint_values.clone();
        let next = critics.update(&batch, 1e-3).unwrap();
        assert_eq!(next.constraint, critics.constraint);
        assert_ne!(next.value, critics.value);
        assert!(batch.max_rho() <= 1.0);
    }
}
