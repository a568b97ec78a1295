//! Finite-horizon orchestration environment replayed over a [`Trace`].
//!
//! Each round runs the base model, then the guide model, and the policy then
//! picks one of [`Action`]. Because a trace pre-materializes every round,
//! the observation at round `t` depends only on the trace and `t`; this is
//! what makes full branch enumeration for set-valued policies cheap.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{step_cost, AnswerId, CallsMade, PriceTable, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    GuideAnswer,
    BaseAnswer,
    NextRound,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::GuideAnswer, Action::BaseAnswer, Action::NextRound];

    pub fn index(self) -> usize {
        match self {
            Action::GuideAnswer => 0,
            Action::BaseAnswer => 1,
            Action::NextRound => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn is_answer(self) -> bool {
        !matches!(self, Action::NextRound)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::GuideAnswer => "guide",
            Action::BaseAnswer => "base",
            Action::NextRound => "next",
        })
    }
}

/// A subset of the three actions, stored as a bitmask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSet(u8);

impl ActionSet {
    pub const EMPTY: ActionSet = ActionSet(0);
    pub const FULL: ActionSet = ActionSet(0b111);
    pub const ANSWERS: ActionSet = ActionSet(0b011);

    pub fn single(a: Action) -> Self {
        ActionSet(1 << a.index())
    }

    pub fn contains(self, a: Action) -> bool {
        self.0 & (1 << a.index()) != 0
    }

    pub fn insert(&mut self, a: Action) {
        self.0 |= 1 << a.index();
    }

    pub fn remove(&mut self, a: Action) {
        self.0 &= !(1 << a.index());
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: ActionSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Action> {
        Action::ALL.into_iter().filter(move |a| self.contains(*a))
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

impl FromIterator<Action> for ActionSet {
    fn from_iter<I: IntoIterator<Item = Action>>(iter: I) -> Self {
        let mut s = ActionSet::EMPTY;
        for a in iter {
            s.insert(a);
        }
        s
    }
}

impl fmt::Debug for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Actions legal at a 1-based round: everything except `NextRound` on the last round.
pub fn legal_actions(round: usize, horizon: usize) -> ActionSet {
    if round >= horizon {
        ActionSet::ANSWERS
    } else {
        ActionSet::FULL
    }
}

pub const OBS_DIM: usize = 6;

/// Slot layout of [`Observation::features`].
pub mod slot {
    pub const GUIDE_AGREES: usize = 0;
    pub const GUIDE_UNCERTAINTY: usize = 1;
    pub const ROUND_INDEX: usize = 2;
    pub const CUMULATIVE_GUIDE_TOKENS: usize = 3;
    pub const BASE_ANSWER_REPEAT: usize = 4;
    pub const BIAS: usize = 5;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub features: [f64; OBS_DIM],
    pub round: usize,
    pub horizon: usize,
}

impl Observation {
    pub fn legal(&self) -> ActionSet {
        legal_actions(self.round, self.horizon)
    }

    pub fn is_last_round(&self) -> bool {
        self.round >= self.horizon
    }
}

/// Environment constants shared by rollouts and enumeration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub horizon: usize,
    /// Divisor applied to cumulative guide tokens in the observation.
    pub token_scale: f64,
}

impl EnvConfig {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            token_scale: 1000.0,
        }
    }
}

/// Observation at a 1-based round; a pure function of the trace.
pub fn observation_at(trace: &Trace, round: usize, token_scale: f64) -> Observation {
    let horizon = trace.horizon();
    let rec = trace.round(round);
    let prior_guide_tokens: u64 = trace.rounds[..round - 1].iter().map(|r| r.guide_tokens()).sum();
    let repeat = round > 1 && trace.round(round - 1).base_answer == rec.base_answer;
    let mut f = [0.0; OBS_DIM];
    f[slot::GUIDE_AGREES] = if rec.guide_agrees { 1.0 } else { 0.0 };
    f[slot::GUIDE_UNCERTAINTY] = rec.guide_uncertainty;
    f[slot::ROUND_INDEX] = round as f64 / horizon as f64;
    f[slot::CUMULATIVE_GUIDE_TOKENS] = prior_guide_tokens as f64 / token_scale;
    f[slot::BASE_ANSWER_REPEAT] = if repeat { 1.0 } else { 0.0 };
    f[slot::BIAS] = 1.0;
    Observation {
        features: f,
        round,
        horizon,
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeState<'a> {
    pub trace: &'a Trace,
    pub round: usize,
    pub cumulative_guide_tokens: u64,
    pub terminated: bool,
    pub chosen_answer: Option<AnswerId>,
}

impl<'a> EpisodeState<'a> {
    pub fn new(trace: &'a Trace) -> Self {
        Self {
            trace,
            round: 1,
            cumulative_guide_tokens: 0,
            terminated: false,
            chosen_answer: None,
        }
    }
}

pub fn observe(state: &EpisodeState<'_>, config: &EnvConfig) -> Result<Observation> {
    if state.terminated {
        return Err(Error::Usage("observe called on a terminated episode".into()));
    }
    if state.round == 0 || state.round > state.trace.horizon() {
        return Err(Error::Usage(format!("round {} out of range", state.round)));
    }
    Ok(observation_at(state.trace, state.round, config.token_scale))
}

#[derive(Clone, Debug)]
pub struct StepOutcome<'a> {
    pub state: EpisodeState<'a>,
    pub reward: f64,
    /// Always 0 here; the trainer fills in the coverage indicator at termination.
    pub constraint: f64,
    pub done: bool,
}

/// Advances one step. The reward is the round's API cost, plus `lambda * set_size`
/// if the action terminates the episode.
pub fn step<'a>(
    state: &EpisodeState<'a>,
    action: Action,
    prices: &PriceTable,
    lambda: f64,
    set_size_at_termination: usize,
) -> Result<StepOutcome<'a>> {
    if state.terminated {
        return Err(Error::Usage("step called on a terminated episode".into()));
    }
    let horizon = state.trace.horizon();
    if !legal_actions(state.round, horizon).contains(action) {
        return Err(Error::Usage(format!(
            "action {action} is illegal at round {}/{horizon}",
            state.round
        )));
    }
    let rec = state.trace.round(state.round);
    let mut reward = step_cost(rec, CallsMade::ROUND, prices);
    let mut next = state.clone();
    match action {
        Action::GuideAnswer | Action::BaseAnswer => {
            next.terminated = true;
            next.chosen_answer = Some(if action == Action::GuideAnswer {
                rec.guide_answer
            } else {
                rec.base_answer
            });
            reward += lambda * set_size_at_termination as f64;
        }
        Action::NextRound => {
            next.cumulative_guide_tokens += rec.guide_tokens();
            next.round += 1;
        }
    }
    Ok(StepOutcome {
        done: next.terminated,
        state: next,
        reward,
        constraint: 0.0,
    })
}

/// One step of a rollout under the behavior policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub features: [f64; OBS_DIM],
    pub round: usize,
    pub action: Action,
    pub behavior_prob: f64,
    pub reward: f64,
    pub constraint: f64,
    pub done: bool,
}

/// A set of answer ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet(BTreeSet<AnswerId>);

impl AnswerSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: AnswerId) {
        self.0.insert(a);
    }

    pub fn contains(&self, a: AnswerId) -> bool {
        self.0.contains(&a)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_subset(&self, other: &AnswerSet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = AnswerId> + '_ {
        self.0.iter().copied()
    }
}

impl FromIterator<AnswerId> for AnswerSet {
    fn from_iter<I: IntoIterator<Item = AnswerId>>(iter: I) -> Self {
        AnswerSet(iter.into_iter().collect())
    }
}

/// Every answer any action sequence can produce: all base and guide answers.
pub fn answer_universe(trace: &Trace) -> AnswerSet {
    trace
        .rounds
        .iter()
        .flat_map(|r| [r.base_answer, r.guide_answer])
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub round: usize,
    pub actions: ActionSet,
    /// Cost of the calls made at this round (paid once however many branches leave it).
    pub step_cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Leaf {
    pub answer: AnswerId,
    pub action: Action,
    /// Sum of step costs from round 1 to the leaf's round.
    pub cost: f64,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTree {
    pub nodes: Vec<TreeNode>,
    pub leaves: Vec<Leaf>,
}

impl RolloutTree {
    /// Deepest round reached by any branch.
    pub fn depth(&self) -> usize {
        self.nodes.last().map_or(0, |n| n.round)
    }

    /// Spend of executing every branch: each visited round is paid for once.
    pub fn executed_cost(&self) -> f64 {
        self.nodes.iter().map(|n| n.step_cost).sum()
    }
}

/// Expands every action of every conformal set along the episode.
///
/// `set_fn` may return illegal or empty sets; `NextRound` is dropped on the
/// last round and an empty set at that point falls back to both answers.
pub fn enumerate_branches(
    trace: &Trace,
    env: &EnvConfig,
    prices: &PriceTable,
    mut set_fn: impl FnMut(&Observation) -> ActionSet,
) -> RolloutTree {
    let horizon = trace.horizon();
    let mut nodes = Vec::with_capacity(horizon);
    let mut leaves = Vec::new();
    let mut path_cost = 0.0;
    for round in 1..=horizon {
        let obs = observation_at(trace, round, env.token_scale);
        let legal = legal_actions(round, horizon);
        let mut set = ActionSet(set_fn(&obs).0 & legal.0);
        if set.is_empty() {
            set = if round == horizon {
                ActionSet::ANSWERS
            } else {
                ActionSet::single(Action::NextRound)
            };
        }
        let rec = trace.round(round);
        let cost = step_cost(rec, CallsMade::ROUND, prices);
        path_cost += cost;
        nodes.push(TreeNode {
            round,
            actions: set,
            step_cost: cost,
        });
        for a in set.iter().filter(|a| a.is_answer()) {
            leaves.push(Leaf {
                answer: if a == Action::GuideAnswer {
                    rec.guide_answer
                } else {
                    rec.base_answer
                },
                action: a,
                cost: path_cost,
                length: round,
            });
        }
        if !set.contains(Action::NextRound) {
            break;
        }
    }
    RolloutTree { nodes, leaves }
}

pub fn prediction_set(tree: &RolloutTree) -> AnswerSet {
    tree.leaves.iter().map(|l| l.answer).collect()
}

/// 1 when the prediction set holds the true answer or no action sequence could reach it.
pub fn coverage_indicator(pred: &AnswerSet, universe: &AnswerSet, y_star: AnswerId) -> Result<bool> {
    if !pred.is_subset(universe) {
        return Err(Error::Usage("prediction set is not a subset of the answer universe".into()));
    }
    Ok(pred.contains(y_star) || !universe.contains(y_star))
}
