//! History-based Monte-Carlo tree search over an arbitrary environment model.
//!
//! The tree alternates decision nodes (one child per action) and chance nodes
//! (one child per sampled percept). Each simulation descends with UCB action
//! selection, samples percepts from the model while updating it, expands one
//! new decision node, finishes the horizon with a uniformly random rollout and
//! backs up the discounted utility. The model is rolled back after every
//! simulation, so search never changes the caller's beliefs.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{EnvironmentModel, ModelError};
use crate::primitives::{Action, DiscountFunction, Percept, UtilityFunction, UtilityKind};

/// Clock checks in time-budget mode happen once per this many simulations.
const CLOCK_STRIDE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("planner config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("exact expectimax would expand more than {0} nodes")]
    TooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Samples(usize),
    TimeMs(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub budget: Budget,
    /// UCB exploration constant `C`.
    pub exploration: f64,
    pub discount: DiscountFunction,
    /// Record one line per simulation for debugging.
    #[serde(default)]
    pub trace: bool,
}

impl PlannerConfig {
    pub fn new(horizon: usize, samples: usize) -> Self {
        Self {
            horizon,
            budget: Budget::Samples(samples),
            exploration: std::f64::consts::SQRT_2,
            discount: DiscountFunction::default(),
            trace: false,
        }
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.horizon == 0 {
            return Err(PlannerError::Config("horizon must be at least 1".into()));
        }
        match self.budget {
            Budget::Samples(0) => return Err(PlannerError::Config("sample budget must be at least 1".into())),
            Budget::TimeMs(0) => return Err(PlannerError::Config("time budget must be at least 1 ms".into())),
            _ => {}
        }
        if !(self.exploration > 0.0) {
            return Err(PlannerError::Config(format!("exploration constant {} must be positive", self.exploration)));
        }
        Ok(())
    }
}

/// Maps accumulated discounted utility over `horizon` steps into `[0, 1]`:
/// subtract the smallest attainable sum, divide by `horizon * (beta - alpha)`.
#[derive(Debug, Clone, Copy)]
pub struct Normalizer {
    lower: f64,
    upper: f64,
    horizon: usize,
    discount: DiscountFunction,
}

impl Normalizer {
    pub fn new(utility: &UtilityFunction, horizon: usize, discount: DiscountFunction) -> Self {
        let (lower, upper) = utility.bounds();
        Self { lower, upper, horizon, discount }
    }

    pub fn for_horizon(&self, horizon: usize) -> Self {
        Self { horizon, ..*self }
    }

    pub fn normalize(&self, value: f64) -> f64 {
        if self.horizon == 0 {
            return 0.0;
        }
        let floor = self.lower * self.discount.partial_sum(self.horizon);
        (value - floor) / (self.horizon as f64 * (self.upper - self.lower))
    }
}

/// Normalized value of an accumulated `horizon`-step utility.
pub fn normalize_utility(value: f64, utility: &UtilityFunction, horizon: usize, discount: &DiscountFunction) -> f64 {
    Normalizer::new(utility, horizon, *discount).normalize(value)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActionStats {
    pub visits: u64,
    /// Mean return in utility units.
    pub mean: f64,
}

/// UCB choice among a decision node's actions. Unvisited actions come first,
/// in action order; otherwise maximizes normalized value plus
/// `C * sqrt(ln T / T_a)`.
pub fn uct_select(children: &[ActionStats], norm: &Normalizer, exploration: f64) -> Action {
    if let Some(i) = children.iter().position(|s| s.visits == 0) {
        return Action(i);
    }
    let total: u64 = children.iter().map(|s| s.visits).sum();
    let log_total = (total as f64).ln();
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, s) in children.iter().enumerate() {
        let score = norm.normalize(s.mean) + exploration * (log_total / s.visits as f64).sqrt();
        if score > best.0 {
            best = (score, i);
        }
    }
    Action(best.1)
}

#[derive(Debug, Clone)]
struct DecisionNode {
    visits: u64,
    mean: f64,
    children: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
struct ChanceNode {
    visits: u64,
    mean: f64,
    children: Vec<(Percept, usize)>,
}

fn record(visits: &mut u64, mean: &mut f64, value: f64) {
    *visits += 1;
    *mean += (value - *mean) / *visits as f64;
}

/// One line of the optional search trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub simulation: usize,
    pub actions: Vec<usize>,
    pub percepts: Vec<(u32, f64)>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub action: Action,
    /// Mean return per root action in utility units; `None` if never tried.
    pub values: Vec<Option<f64>>,
    pub visits: Vec<u64>,
    pub samples: usize,
    /// Deepest decision level reached by the tree.
    pub depth: usize,
    pub trace: Vec<SimulationRecord>,
}

impl SearchResult {
    /// Largest estimated root value.
    pub fn best_value(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

struct Search<'a, M, R: ?Sized> {
    model: &'a mut M,
    rng: &'a mut R,
    cfg: &'a PlannerConfig,
    utility: &'a UtilityFunction,
    norm: Normalizer,
    num_actions: usize,
    decisions: Vec<DecisionNode>,
    chances: Vec<ChanceNode>,
    depth: usize,
    path: Option<(Vec<usize>, Vec<(u32, f64)>)>,
}

impl<M: EnvironmentModel, R: Rng + ?Sized> Search<'_, M, R> {
    fn new_decision(&mut self) -> usize {
        self.decisions.push(DecisionNode { visits: 0, mean: 0.0, children: vec![None; self.num_actions] });
        self.decisions.len() - 1
    }

    fn step(&mut self, action: Action) -> Result<f64, PlannerError> {
        let percept = self.model.sample(action, self.rng);
        self.apply(action, percept)
    }

    fn rollout(&mut self, steps: usize) -> Result<f64, PlannerError> {
        let mut total = 0.0;
        let mut weight = 1.0;
        for _ in 0..steps {
            let a = Action(self.rng.gen_range(0..self.num_actions));
            total += weight * self.step(a)?;
            weight *= self.cfg.discount.gamma();
        }
        Ok(total)
    }

    fn visit_decision(&mut self, node: usize, depth: usize) -> Result<f64, PlannerError> {
        self.depth = self.depth.max(depth + 1);
        let stats: Vec<ActionStats> = self.decisions[node]
            .children
            .iter()
            .map(|c| c.map_or(ActionStats::default(), |i| ActionStats { visits: self.chances[i].visits, mean: self.chances[i].mean }))
            .collect();
        let norm = self.norm.for_horizon(self.cfg.horizon - depth);
        let action = uct_select(&stats, &norm, self.cfg.exploration);
        let chance = match self.decisions[node].children[action.index()] {
            Some(c) => c,
            None => {
                self.chances.push(ChanceNode { visits: 0, mean: 0.0, children: Vec::new() });
                let c = self.chances.len() - 1;
                self.decisions[node].children[action.index()] = Some(c);
                c
            }
        };
        let value = self.visit_chance(chance, action, depth)?;
        let n = &mut self.decisions[node];
        record(&mut n.visits, &mut n.mean, value);
        Ok(value)
    }

    fn visit_chance(&mut self, chance: usize, action: Action, depth: usize) -> Result<f64, PlannerError> {
        let percept = self.model.sample(action, self.rng);
        let utility = self.apply(action, percept)?;
        let remaining = self.cfg.horizon - depth - 1;
        let gamma = self.cfg.discount.gamma();
        let value = if remaining == 0 {
            utility
        } else {
            let child = self.chances[chance].children.iter().find(|(e, _)| *e == percept).map(|(_, d)| *d);
            match child {
                Some(d) => utility + gamma * self.visit_decision(d, depth + 1)?,
                None => {
                    let d = self.new_decision();
                    self.chances[chance].children.push((percept, d));
                    self.depth = self.depth.max(depth + 2);
                    utility + gamma * self.rollout(remaining)?
                }
            }
        };
        let c = &mut self.chances[chance];
        record(&mut c.visits, &mut c.mean, value);
        Ok(value)
    }

    /// Conditions the model on a sampled percept and scores it.
    fn apply(&mut self, action: Action, percept: Percept) -> Result<f64, PlannerError> {
        let probability =
            if self.utility.needs_probability() { self.model.probability(action, &percept) } else { 1.0 };
        self.model.update(action, &percept)?;
        let gain = match self.utility.kind {
            UtilityKind::KlInformationGain => self.model.info_gain_of_last_update()?,
            _ => 0.0,
        };
        if let Some((actions, percepts)) = &mut self.path {
            actions.push(action.index());
            percepts.push((percept.observation, percept.reward));
        }
        Ok(self.utility.evaluate(&percept, probability, gain))
    }
}

/// Runs rho-UCT from the model's current belief state and returns the root
/// action with the highest estimated value (ties broken uniformly at random).
pub fn search<M, R>(
    model: &mut M,
    cfg: &PlannerConfig,
    utility: &UtilityFunction,
    rng: &mut R,
) -> Result<SearchResult, PlannerError>
where
    M: EnvironmentModel,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let num_actions = model.num_actions();
    let mut s = Search {
        num_actions,
        norm: Normalizer::new(utility, cfg.horizon, cfg.discount),
        model,
        rng,
        cfg,
        utility,
        decisions: Vec::new(),
        chances: Vec::new(),
        depth: 0,
        path: None,
    };
    let root = s.new_decision();
    let started = Instant::now();
    let mut trace = Vec::new();
    let mut samples = 0;
    loop {
        match cfg.budget {
            Budget::Samples(k) if samples >= k => break,
            Budget::TimeMs(ms) if samples > 0 && samples % CLOCK_STRIDE == 0 => {
                if started.elapsed() >= Duration::from_millis(ms) {
                    break;
                }
            }
            _ => {}
        }
        if cfg.trace {
            s.path = Some((Vec::new(), Vec::new()));
        }
        let token = s.model.checkpoint();
        let value = s.visit_decision(root, 0);
        s.model.rollback(token)?;
        let value = value?;
        if let Some((actions, percepts)) = s.path.take() {
            trace.push(SimulationRecord { simulation: samples, actions, percepts, value });
        }
        samples += 1;
    }

    let mut values = Vec::with_capacity(num_actions);
    let mut visits = Vec::with_capacity(num_actions);
    for child in &s.decisions[root].children {
        match child {
            Some(c) if s.chances[*c].visits > 0 => {
                values.push(Some(s.chances[*c].mean));
                visits.push(s.chances[*c].visits);
            }
            _ => {
                values.push(None);
                visits.push(0);
            }
        }
    }
    let best = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let maximizers: Vec<usize> = (0..num_actions).filter(|&a| values[a] == Some(best)).collect();
    let action = Action(*maximizers.choose(s.rng).expect("at least one simulation"));
    Ok(SearchResult { action, values, visits, samples, depth: s.depth, trace })
}

/// Exact finite-horizon expectimax value of each root action, enumerating
/// every percept branch through model checkpoints. Refuses when more than
/// `node_cap` branches would be expanded.
pub fn expectimax_exact<M: EnvironmentModel>(
    model: &mut M,
    horizon: usize,
    utility: &UtilityFunction,
    discount: &DiscountFunction,
    node_cap: usize,
) -> Result<Vec<f64>, PlannerError> {
    let mut expanded = 0;
    (0..model.num_actions())
        .map(|a| action_value(model, Action(a), horizon, utility, discount, node_cap, &mut expanded))
        .collect()
}

fn action_value<M: EnvironmentModel>(
    model: &mut M,
    action: Action,
    horizon: usize,
    utility: &UtilityFunction,
    discount: &DiscountFunction,
    cap: usize,
    expanded: &mut usize,
) -> Result<f64, PlannerError> {
    if horizon == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (percept, p) in model.percept_distribution(action) {
        if p <= 0.0 {
            continue;
        }
        *expanded += 1;
        if *expanded > cap {
            return Err(PlannerError::TooLarge(cap));
        }
        let token = model.checkpoint();
        model.update(action, &percept)?;
        let gain = match utility.kind {
            UtilityKind::KlInformationGain => model.info_gain_of_last_update()?,
            _ => 0.0,
        };
        let mut value = utility.evaluate(&percept, p, gain);
        if horizon > 1 {
            let mut best = f64::NEG_INFINITY;
            for next in 0..model.num_actions() {
                best = best.max(action_value(model, Action(next), horizon - 1, utility, discount, cap, expanded)?);
            }
            value += discount.gamma() * best;
        }
        model.rollback(token)?;
        total += p * value;
    }
    Ok(total)
}
