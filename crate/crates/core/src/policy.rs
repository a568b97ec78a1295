//! Score network, threshold conformal sets and their stochastic surrogates.
//!
//! The score network gives `pi(a|o)`. The conformal policy is the set of
//! actions with `pi(a|o) >= kappa`; its stochastic form is uniform over that
//! set. For gradients the hard membership indicator is replaced with
//! `sigmoid((pi(a|o) - kappa) / epsilon)`.

use rand::Rng;

use crate::env::{Action, ActionSet, Observation, OBS_DIM};
use crate::error::{Error, Result};
use crate::numerics::{
    backward_into, forward, masked_softmax, Categorical, DistributionPoint, FlatParams, ForwardCache,
    Jacobian3, MlpShape, NUM_ACTIONS,
};

pub const DEFAULT_EPSILON: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct ConformalPolicy {
    pub params: FlatParams,
    pub kappa: f64,
    pub epsilon: f64,
}

impl ConformalPolicy {
    pub fn new(params: FlatParams, kappa: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&kappa) {
            return Err(Error::validation("kappa", format!("{kappa} not in [0, 1]")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::validation("epsilon", format!("{epsilon} must be positive")));
        }
        if params.shape.input_dim() != OBS_DIM || params.shape.output_dim() != NUM_ACTIONS {
            return Err(Error::validation(
                "params.shape",
                format!("expected {OBS_DIM} inputs and {NUM_ACTIONS} outputs"),
            ));
        }
        Ok(Self { params, kappa, epsilon })
    }

    pub fn init(rng: &mut impl Rng, kappa: f64, epsilon: f64) -> Result<Self> {
        Self::new(FlatParams::init(MlpShape::standard(OBS_DIM, NUM_ACTIONS), rng), kappa, epsilon)
    }

    pub fn score(&self, obs: &Observation) -> Result<Categorical> {
        score(&self.params, obs)
    }

    pub fn conformal_set(&self, obs: &Observation) -> Result<ActionSet> {
        Ok(conformal_set(&self.score(obs)?, self.kappa))
    }
}

pub fn legal_mask(obs: &Observation) -> [bool; NUM_ACTIONS] {
    let legal = obs.legal();
    Action::ALL.map(|a| legal.contains(a))
}

/// `pi(.|o)` with illegal actions masked and the probability floor applied.
pub fn score(params: &FlatParams, obs: &Observation) -> Result<Categorical> {
    let cache = forward(params, &obs.features)?;
    Ok(masked_softmax(cache.output(), legal_mask(obs)).0)
}

/// `{a : dist(a) >= kappa}` over supported actions, or `{argmax}` when that is empty.
pub fn conformal_set(dist: &Categorical, kappa: f64) -> ActionSet {
    let set: ActionSet = Action::ALL
        .into_iter()
        .filter(|a| {
            let p = dist.prob(a.index());
            p > 0.0 && p >= kappa
        })
        .collect();
    if set.is_empty() {
        ActionSet::single(Action::from_index(dist.argmax()).expect("index < 3"))
    } else {
        set
    }
}

/// Uniform distribution over [`conformal_set`].
pub fn stochastic_conformal(dist: &Categorical, kappa: f64) -> Categorical {
    let set = conformal_set(dist, kappa);
    let mass = 1.0 / set.len() as f64;
    Categorical(Action::ALL.map(|a| if set.contains(a) { mass } else { 0.0 }))
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft membership `sigmoid((dist(a) - kappa) / epsilon)`; zero for unsupported actions.
pub fn softmask(dist: &Categorical, kappa: f64, epsilon: f64) -> [f64; NUM_ACTIONS] {
    dist.0.map(|p| if p > 0.0 { sigmoid((p - kappa) / epsilon) } else { 0.0 })
}

/// Soft memberships renormalized into a distribution (computed in log space).
pub fn soft_stochastic_conformal(dist: &Categorical, kappa: f64, epsilon: f64) -> Categorical {
    let logw = dist.0.map(|p| if p > 0.0 { log_sigmoid((p - kappa) / epsilon) } else { f64::NEG_INFINITY });
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logw.map(|l| (l - m).exp());
    let z: f64 = e.iter().sum();
    Categorical(e.map(|v| v / z))
}

pub fn sample_action(dist: &Categorical, rng: &mut impl Rng) -> Action {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for a in Action::ALL {
        let p = dist.prob(a.index());
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(a);
        if u < acc {
            return a;
        }
    }
    last.expect("distribution has support")
}

/// Which distribution the optimizer treats as the target policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    /// Softmasked stochastic conformal policy at a fixed threshold.
    SoftConformal { kappa: f64, epsilon: f64 },
    /// The score distribution itself (pointwise policies).
    Score,
}

/// The policy network evaluated at one observation, with every Jacobian
/// (with respect to the logits) needed by the optimizer.
#[derive(Clone, Debug)]
pub struct PolicyPoint {
    pub cache: ForwardCache,
    pub score: Categorical,
    score_jac: Jacobian3,
    /// Soft memberships; zero for illegal actions. Only meaningful for `SoftConformal`.
    pub weights: [f64; NUM_ACTIONS],
    weights_jac: Jacobian3,
    pub target: Categorical,
    log_target_jac: Jacobian3,
}

impl PolicyPoint {
    pub fn evaluate(params: &FlatParams, obs: &Observation, target: Target) -> Result<Self> {
        let cache = forward(params, &obs.features)?;
        let (score, score_jac) = masked_softmax(cache.output(), legal_mask(obs));
        let mut weights = [0.0; NUM_ACTIONS];
        let mut weights_jac = [[0.0; NUM_ACTIONS]; NUM_ACTIONS];
        let mut log_target_jac = [[0.0; NUM_ACTIONS]; NUM_ACTIONS];
        let target_dist = match target {
            Target::Score => {
                for a in 0..NUM_ACTIONS {
                    if score.0[a] > 0.0 {
                        for b in 0..NUM_ACTIONS {
                            log_target_jac[a][b] = score_jac[a][b] / score.0[a];
                        }
                    }
                }
                score
            }
            Target::SoftConformal { kappa, epsilon } => {
                let s = soft_stochastic_conformal(&score, kappa, epsilon);
                weights = softmask(&score, kappa, epsilon);
                // d log w_a / d z_b = (1 - w_a) / eps * d pi_a / d z_b
                let mut dlogw = [[0.0; NUM_ACTIONS]; NUM_ACTIONS];
                for a in 0..NUM_ACTIONS {
                    if score.0[a] <= 0.0 {
                        continue;
                    }
                    let w = weights[a];
                    for b in 0..NUM_ACTIONS {
                        dlogw[a][b] = (1.0 - w) / epsilon * score_jac[a][b];
                        weights_jac[a][b] = w * dlogw[a][b];
                    }
                }
                for b in 0..NUM_ACTIONS {
                    let mean: f64 = (0..NUM_ACTIONS).map(|c| s.0[c] * dlogw[c][b]).sum();
                    for a in 0..NUM_ACTIONS {
                        if score.0[a] > 0.0 {
                            log_target_jac[a][b] = dlogw[a][b] - mean;
                        }
                    }
                }
                s
            }
        };
        Ok(Self {
            cache,
            score,
            score_jac,
            weights,
            weights_jac,
            target: target_dist,
            log_target_jac,
        })
    }

    pub fn soft_set_size(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn pullback(&self, params: &FlatParams, logit_grad: &[f64; NUM_ACTIONS], scale: f64, out: &mut [f64]) {
        let up: Vec<f64> = logit_grad.iter().map(|g| g * scale).collect();
        backward_into(params, &self.cache, &up, out);
    }

    /// Accumulates `scale * grad log target(action)` into `out`.
    pub fn add_grad_log_target(&self, params: &FlatParams, action: Action, scale: f64, out: &mut [f64]) {
        self.pullback(params, &self.log_target_jac[action.index()], scale, out);
    }

    /// Accumulates `scale * grad log pi(action)` into `out`.
    pub fn add_grad_log_score(&self, params: &FlatParams, action: Action, scale: f64, out: &mut [f64]) {
        let a = action.index();
        let p = self.score.0[a];
        let row = self.score_jac[a].map(|j| j / p);
        self.pullback(params, &row, scale, out);
    }

    /// Accumulates `scale * grad softmask(action)` into `out`.
    pub fn add_grad_weight(&self, params: &FlatParams, action: Action, scale: f64, out: &mut [f64]) {
        self.pullback(params, &self.weights_jac[action.index()], scale, out);
    }

    /// Accumulates `scale * grad sum_a softmask(a)` into `out`.
    pub fn add_grad_soft_set_size(&self, params: &FlatParams, scale: f64, out: &mut [f64]) {
        let mut row = [0.0; NUM_ACTIONS];
        for (b, r) in row.iter_mut().enumerate() {
            *r = (0..NUM_ACTIONS).map(|a| self.weights_jac[a][b]).sum();
        }
        self.pullback(params, &row, scale, out);
    }

    /// Linearization of the target distribution for Fisher-vector products.
    pub fn distribution_point(&self) -> DistributionPoint {
        let mut jac = [[0.0; NUM_ACTIONS]; NUM_ACTIONS];
        for a in 0..NUM_ACTIONS {
            for b in 0..NUM_ACTIONS {
                jac[a][b] = self.target.0[a] * self.log_target_jac[a][b];
            }
        }
        DistributionPoint {
            cache: self.cache.clone(),
            probs: self.target.0,
            jac,
        }
    }
}
