use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{conformal_tree, trace_scores};
use crate::config::CostAccounting;
use crate::env::{
    answer_universe, coverage_indicator, enumerate_branches, legal_actions, prediction_set, slot, Action, ActionSet,
    EnvConfig, Observation, RolloutTree,
};
use crate::error::{Error, Result};
use crate::numerics::FlatParams;
use crate::trace::{PriceTable, Trace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Total spend over the evaluated traces.
    pub cost_cents: f64,
    pub coverage: f64,
    pub avg_len: f64,
    pub set_size: f64,
    pub n_episodes: usize,
}

/// Uncertainty cutoffs of the fixed-threshold rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Take the base answer when the guide agrees and its uncertainty is below this.
    pub base_max: f64,
    /// Otherwise take the guide's answer when its uncertainty is at most this.
    pub guide_max: f64,
}

impl Thresholds {
    pub fn decide(&self, obs: &Observation) -> Action {
        let agrees = obs.features[slot::GUIDE_AGREES] > 0.5;
        let u = obs.features[slot::GUIDE_UNCERTAINTY];
        if agrees && u < self.base_max {
            Action::BaseAnswer
        } else if u <= self.guide_max || obs.is_last_round() {
            Action::GuideAnswer
        } else {
            Action::NextRound
        }
    }
}

/// Anything that maps observations to action sets.
#[derive(Clone, Debug, PartialEq)]
pub enum Decider {
    Conformal { params: FlatParams, kappa: f64 },
    /// Uniform over legal actions, one sampled path.
    Random,
    FixedThreshold(Thresholds),
}

fn sampled_path_cost(tree: &RolloutTree, rng: &mut ChaCha8Rng) -> f64 {
    let mut cost = 0.0;
    for node in &tree.nodes {
        cost += node.step_cost;
        let acts: Vec<Action> = node.actions.iter().collect();
        if acts[rng.random_range(0..acts.len())].is_answer() {
            break;
        }
    }
    cost
}

/// Cost, coverage, length and set size of `decider` on `traces`.
///
/// Conformal deciders are evaluated on their full branch tree; the others
/// produce single paths.
pub fn evaluate(
    decider: &Decider,
    traces: &[Trace],
    env: &EnvConfig,
    prices: &PriceTable,
    accounting: CostAccounting,
    seed: u64,
) -> Result<MetricsRecord> {
    if traces.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut cost, mut covered, mut len, mut size) = (0.0, 0usize, 0usize, 0usize);
    for trace in traces {
        let tree = match decider {
            Decider::Conformal { params, kappa } => {
                let scores = trace_scores(params, trace, env)?;
                conformal_tree(&scores, *kappa, trace, env, prices)
            }
            Decider::Random => enumerate_branches(trace, env, prices, |obs| {
                let legal: Vec<Action> = legal_actions(obs.round, obs.horizon).iter().collect();
                ActionSet::single(legal[rng.random_range(0..legal.len())])
            }),
            Decider::FixedThreshold(t) => enumerate_branches(trace, env, prices, |obs| ActionSet::single(t.decide(obs))),
        };
        let pred = prediction_set(&tree);
        covered += coverage_indicator(&pred, &answer_universe(trace), trace.true_answer)? as usize;
        len += tree.depth();
        size += pred.len();
        cost += match (decider, accounting) {
            (Decider::Conformal { .. }, CostAccounting::SampledPath) => sampled_path_cost(&tree, &mut rng),
            _ => tree.executed_cost(),
        };
    }
    let n = traces.len() as f64;
    Ok(MetricsRecord {
        cost_cents: cost,
        coverage: covered as f64 / n,
        avg_len: len as f64 / n,
        set_size: size as f64 / n,
        n_episodes: traces.len(),
    })
}

/// Picks fixed-threshold cutoffs on a 0.05 grid: cheapest pair whose coverage
/// reaches `1 - alpha`, or the highest-coverage pair when none does.
pub fn search_thresholds(traces: &[Trace], alpha: f64, env: &EnvConfig, prices: &PriceTable) -> Result<Thresholds> {
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let mut best: Option<(bool, f64, f64, Thresholds)> = None;
    for &base_max in &grid {
        for &guide_max in &grid {
            let t = Thresholds { base_max, guide_max };
            let m = evaluate(&Decider::FixedThreshold(t), traces, env, prices, CostAccounting::Executed, 0)?;
            let ok = m.coverage >= 1.0 - alpha;
            let better = match &best {
                None => true,
                Some((bok, bcov, bcost, _)) => match (ok, *bok) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => m.cost_cents < *bcost,
                    (false, false) => m.coverage > *bcov || (m.coverage == *bcov && m.cost_cents < *bcost),
                },
            };
            if better {
                best = Some((ok, m.coverage, m.cost_cents, t));
            }
        }
    }
    Ok(best.expect("non-empty grid").3)
}

/// Extracts per-round action sets under a conformal decider, for inspection.
pub fn conformal_sets(params: &FlatParams, kappa: f64, trace: &Trace, env: &EnvConfig) -> Result<Vec<ActionSet>> {
    let scores = trace_scores(params, trace, env)?;
    Ok(conformal_tree(&scores, kappa, trace, env, &PriceTable::zero())
        .nodes
        .iter()
        .map(|n| n.actions)
        .collect())
}
