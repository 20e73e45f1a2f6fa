//! The agent zoo.
//!
//! Every agent follows the same Bayesian interaction loop: plan an action
//! against its beliefs, act, receive a percept, condition the model on it.
//! What differs is the utility being maximized and which model the planner
//! sees:
//!
//! | agent        | plans against                 | utility                    |
//! |--------------|-------------------------------|----------------------------|
//! | `aixi`       | Bayes mixture or Dirichlet    | reward                     |
//! | `aimu`       | the true environment          | reward                     |
//! | `ksa-*`      | Bayes mixture or Dirichlet    | `-xi`, `-ln xi`, info gain |
//! | `bayesexp`   | mixture, in bursts of IG      | reward / info gain         |
//! | `thompson`   | one posterior sample for `m`  | reward                     |
//! | `mdl`        | simplest unfalsified member   | reward                     |
//!
//! The planning horizon `m` stands in for the effective horizon wherever an
//! algorithm commits to a policy for one effective horizon.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{GridSpec, Tile, NUM_ACTIONS, REWARD_BOUNDS};
use crate::models::{
    Checkpoint, DirichletGridModel, EnvironmentModel, GridModel, MixtureModel, ModelError, PosteriorSnapshot,
};
use crate::planner::{search, Budget, PlannerConfig, PlannerError, SearchResult, SimulationRecord};
use crate::primitives::{Action, DiscountFunction, DomainError, Percept, PerceptDistribution, UtilityFunction, UtilityKind};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent config: {0}")]
    Config(String),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentType {
    Aixi,
    Aimu,
    KsaSquare,
    KsaShannon,
    KsaKl,
    Bayesexp,
    Thompson,
    Mdl,
    /// Uniformly random baseline.
    Random,
}

impl AgentType {
    pub fn is_knowledge_seeking(self) -> bool {
        matches!(self, AgentType::KsaSquare | AgentType::KsaShannon | AgentType::KsaKl)
    }
}

impl fmt::Display for AgentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializable");
        write!(f, "{}", s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelClass {
    /// Bayes mixture over dispenser locations.
    Mixture,
    /// Factorized per-tile wall/payout model.
    Dirichlet,
}

fn default_horizon() -> usize {
    6
}
fn default_samples() -> Option<usize> {
    Some(600)
}
fn default_ucb_c() -> f64 {
    std::f64::consts::SQRT_2
}
fn default_gamma() -> f64 {
    0.99
}
fn default_epsilon0() -> f64 {
    0.05
}
fn default_beta_cap() -> f64 {
    1e6f64.ln()
}
fn default_model() -> ModelClass {
    ModelClass::Mixture
}

/// The `agent` section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(rename = "type")]
    pub kind: AgentType,
    #[serde(default = "default_model")]
    pub model: ModelClass,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_samples")]
    pub samples: Option<usize>,
    #[serde(default)]
    pub time_budget_ms: Option<u64>,
    #[serde(default = "default_ucb_c")]
    pub ucb_c: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Initial BayesExp threshold; compared against unnormalized expected
    /// discounted information gain.
    #[serde(default = "default_epsilon0")]
    pub epsilon0: f64,
    /// Power-law decay exponent of the exploration schedule (0 = constant).
    #[serde(default)]
    pub epsilon_decay: f64,
    /// MDL likelihood weight.
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_beta_cap")]
    pub shannon_beta_cap: f64,
    /// Symmetric bound on KL utility under the Dirichlet model; defaults to
    /// `ln 2 * N^2`.
    #[serde(default)]
    pub kl_dirichlet_cap: Option<f64>,
}

impl AgentConfig {
    pub fn new(kind: AgentType) -> Self {
        Self {
            kind,
            model: default_model(),
            horizon: default_horizon(),
            samples: default_samples(),
            time_budget_ms: None,
            ucb_c: default_ucb_c(),
            gamma: default_gamma(),
            epsilon0: default_epsilon0(),
            epsilon_decay: 0.0,
            lambda: 0.0,
            shannon_beta_cap: default_beta_cap(),
            kl_dirichlet_cap: None,
        }
    }

    pub fn with_model(mut self, model: ModelClass) -> Self {
        self.model = model;
        self
    }

    pub fn planner(&self) -> Result<PlannerConfig, AgentError> {
        let budget = match (self.time_budget_ms, self.samples) {
            (Some(ms), _) => Budget::TimeMs(ms),
            (None, Some(k)) => Budget::Samples(k),
            (None, None) => return Err(AgentError::Config("one of samples or time_budget_ms is required".into())),
        };
        let cfg = PlannerConfig {
            horizon: self.horizon,
            budget,
            exploration: self.ucb_c,
            discount: DiscountFunction::geometric(self.gamma)?,
            trace: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `epsilon_t = epsilon0 * t^(-decay)` for cycles `t >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub epsilon0: f64,
    pub decay: f64,
}

impl ExplorationSchedule {
    pub fn constant(epsilon0: f64) -> Self {
        Self { epsilon0, decay: 0.0 }
    }

    pub fn epsilon(&self, t: usize) -> f64 {
        if self.decay == 0.0 {
            return self.epsilon0;
        }
        self.epsilon0 * (t.max(1) as f64).powf(-self.decay)
    }
}

/// What the agent is currently committed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum AgentMode {
    Exploit,
    /// BayesExp information-seeking burst.
    ExploreBurst { remaining: usize },
    /// Thompson sampling commitment to one hypothesis.
    Committed { hypothesis: usize, remaining: usize },
    /// MDL's current choice.
    Selected { hypothesis: usize },
}

impl fmt::Display for AgentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentMode::Exploit => write!(f, "exploit"),
            AgentMode::ExploreBurst { remaining } => write!(f, "explore:{remaining}"),
            AgentMode::Committed { hypothesis, remaining } => write!(f, "commit:{hypothesis}:{remaining}"),
            AgentMode::Selected { hypothesis } => write!(f, "select:{hypothesis}"),
        }
    }
}

/// The belief representation an agent plans with.
#[derive(Debug, Clone)]
pub enum Belief {
    Mixture(MixtureModel<GridModel>),
    Dirichlet(DirichletGridModel),
    Truth(GridModel),
}

macro_rules! delegate {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            Belief::Mixture($m) => $body,
            Belief::Dirichlet($m) => $body,
            Belief::Truth($m) => $body,
        }
    };
}

impl EnvironmentModel for Belief {
    fn num_actions(&self) -> usize {
        delegate!(self, m => m.num_actions())
    }

    fn percept_distribution(&self, action: Action) -> PerceptDistribution {
        delegate!(self, m => m.percept_distribution(action))
    }

    fn probability(&self, action: Action, percept: &Percept) -> f64 {
        delegate!(self, m => EnvironmentModel::probability(m, action, percept))
    }

    fn sample<R: Rng + ?Sized>(&self, action: Action, rng: &mut R) -> Percept {
        delegate!(self, m => EnvironmentModel::sample(m, action, rng))
    }

    fn update(&mut self, action: Action, percept: &Percept) -> Result<(), ModelError> {
        delegate!(self, m => m.update(action, percept))
    }

    fn checkpoint(&mut self) -> Checkpoint {
        delegate!(self, m => m.checkpoint())
    }

    fn rollback(&mut self, token: Checkpoint) -> Result<(), ModelError> {
        delegate!(self, m => m.rollback(token))
    }

    fn info_gain_of_last_update(&self) -> Result<f64, ModelError> {
        delegate!(self, m => m.info_gain_of_last_update())
    }

    fn snapshot(&self) -> PosteriorSnapshot {
        delegate!(self, m => m.snapshot())
    }
}

/// Utility range a knowledge-seeking agent plans with.
///
/// Square utility lies in `[-1, 0]`. Information gain over a discrete class
/// with uniform prior lies in `[0, Ent(prior)]`; under the Dirichlet model
/// it is bounded by a symmetric cap. Shannon utility has no principled upper
/// bound, so it is capped at `shannon_beta_cap`.
pub fn ksa_bounds(kind: UtilityKind, belief: &Belief, cfg: &AgentConfig) -> (f64, f64) {
    match kind {
        UtilityKind::Square => (-1.0, 0.0),
        UtilityKind::Shannon => (0.0, cfg.shannon_beta_cap),
        UtilityKind::KlInformationGain => match belief {
            Belief::Mixture(m) => (0.0, m.entropy().max(f64::MIN_POSITIVE)),
            Belief::Dirichlet(d) => {
                let cap = cfg
                    .kl_dirichlet_cap
                    .unwrap_or(std::f64::consts::LN_2 * (d.size() * d.size()) as f64);
                (-cap, cap)
            }
            Belief::Truth(_) => (0.0, f64::MIN_POSITIVE),
        },
        UtilityKind::ExtrinsicReward => REWARD_BOUNDS,
    }
}

/// Conditions `model` on `(action, percept)` and returns the
/// knowledge-seeking utility of that percept.
pub fn ksa_utility<M: EnvironmentModel>(
    utility: &UtilityFunction,
    model: &mut M,
    action: Action,
    percept: &Percept,
) -> Result<f64, ModelError> {
    let probability = model.probability(action, percept);
    model.update(action, percept)?;
    let gain = match utility.kind {
        UtilityKind::KlInformationGain => model.info_gain_of_last_update()?,
        _ => 0.0,
    };
    Ok(utility.evaluate(percept, probability, gain))
}

/// A Bayesian agent: beliefs, planner settings, utility and mode state.
#[derive(Debug, Clone)]
pub struct Agent {
    kind: AgentType,
    belief: Belief,
    planner: PlannerConfig,
    utility: UtilityFunction,
    /// BayesExp's information-seeking utility.
    explore_utility: Option<UtilityFunction>,
    schedule: ExplorationSchedule,
    lambda: f64,
    mode: AgentMode,
    /// Hypotheses MDL may select: dispenser tiles reachable in the known layout.
    eligible: Vec<bool>,
    cycle: usize,
    last_utility: Option<f64>,
    last_search: Option<SearchResult>,
}

impl Agent {
    /// Builds the agent described by `cfg` for an environment whose true
    /// layout is `truth`. The location mixture uses the layout's walls and
    /// the payout probability of its first dispenser.
    pub fn new(cfg: &AgentConfig, truth: &Arc<GridSpec>) -> Result<Self, AgentError> {
        let planner = cfg.planner()?;
        let theta = truth.dispensers().first().map(|d| d.1).ok_or_else(|| AgentError::Config("no dispenser".into()))?;
        let belief = match (cfg.kind, cfg.model) {
            (AgentType::Aimu, _) => Belief::Truth(GridModel::new(truth.clone())),
            (AgentType::Thompson | AgentType::Mdl, ModelClass::Dirichlet) => {
                return Err(AgentError::Config(format!(
                    "{} needs an explicit hypothesis class; use model = mixture",
                    cfg.kind
                )))
            }
            (_, ModelClass::Mixture) => Belief::Mixture(MixtureModel::dispenser_locations(truth, theta)?),
            (_, ModelClass::Dirichlet) => {
                // The percept alphabet is part of the interface, not of the unknown world.
                let alphabet = truth
                    .tiles()
                    .iter()
                    .filter_map(|t| match t {
                        Tile::Noise { alphabet } => Some(*alphabet),
                        _ => None,
                    })
                    .max()
                    .unwrap_or(16);
                Belief::Dirichlet(DirichletGridModel::new(truth.size()).with_observation_alphabet(alphabet))
            }
        };
        let kind_of = |t: AgentType| match t {
            AgentType::KsaSquare => UtilityKind::Square,
            AgentType::KsaShannon => UtilityKind::Shannon,
            AgentType::KsaKl => UtilityKind::KlInformationGain,
            _ => UtilityKind::ExtrinsicReward,
        };
        let make = |k: UtilityKind| {
            let (lo, hi) = ksa_bounds(k, &belief, cfg);
            UtilityFunction::new(k, lo, hi)
        };
        let utility = make(kind_of(cfg.kind))?;
        let explore_utility = match cfg.kind {
            AgentType::Bayesexp => Some(make(UtilityKind::KlInformationGain)?),
            _ => None,
        };
        if !(cfg.epsilon0 >= 0.0) || cfg.epsilon_decay < 0.0 {
            return Err(AgentError::Config("epsilon0 and epsilon_decay must be non-negative".into()));
        }
        if !(cfg.lambda >= 0.0) {
            return Err(AgentError::Config("lambda must be non-negative".into()));
        }
        let reachable = truth.reachable();
        Ok(Self {
            kind: cfg.kind,
            belief,
            planner,
            utility,
            explore_utility,
            schedule: ExplorationSchedule { epsilon0: cfg.epsilon0, decay: cfg.epsilon_decay },
            lambda: cfg.lambda,
            mode: AgentMode::Exploit,
            eligible: reachable,
            cycle: 0,
            last_utility: None,
            last_search: None,
        })
    }

    /// An agent over an arbitrary belief, for tests and custom setups.
    pub fn with_belief(
        kind: AgentType,
        belief: Belief,
        planner: PlannerConfig,
        utility: UtilityFunction,
    ) -> Self {
        let n = match &belief {
            Belief::Mixture(m) => m.len(),
            _ => 0,
        };
        let explore_utility = (kind == AgentType::Bayesexp).then(|| {
            let (lo, hi) = ksa_bounds(UtilityKind::KlInformationGain, &belief, &AgentConfig::new(kind));
            UtilityFunction::new(UtilityKind::KlInformationGain, lo, hi).expect("valid bounds")
        });
        Self {
            kind,
            belief,
            planner,
            utility,
            explore_utility,
            schedule: ExplorationSchedule::constant(default_epsilon0()),
            lambda: 0.0,
            mode: AgentMode::Exploit,
            eligible: vec![true; n],
            cycle: 0,
            last_utility: None,
            last_search: None,
        }
    }

    pub fn set_schedule(&mut self, schedule: ExplorationSchedule) {
        self.schedule = schedule;
    }

    pub fn set_planner_trace(&mut self, enabled: bool) {
        self.planner.trace = enabled;
    }

    pub fn kind(&self) -> AgentType {
        self.kind
    }

    pub fn belief(&self) -> &Belief {
        &self.belief
    }

    pub fn mode(&self) -> AgentMode {
        self.mode
    }

    pub fn planner_config(&self) -> &PlannerConfig {
        &self.planner
    }

    pub fn utility(&self) -> &UtilityFunction {
        &self.utility
    }

    /// Utility the agent assigned to its most recent real percept.
    pub fn last_utility(&self) -> Option<f64> {
        self.last_utility
    }

    pub fn last_search(&self) -> Option<&SearchResult> {
        self.last_search.as_ref()
    }

    /// Search trace of the most recent planning call, if tracing is enabled.
    pub fn take_trace(&mut self) -> Vec<SimulationRecord> {
        self.last_search.as_mut().map(|s| std::mem::take(&mut s.trace)).unwrap_or_default()
    }

    fn mixture(&self) -> Result<&MixtureModel<GridModel>, AgentError> {
        match &self.belief {
            Belief::Mixture(m) => Ok(m),
            _ => Err(AgentError::Config(format!("{} needs the mixture model", self.kind))),
        }
    }

    fn plan<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Action, AgentError> {
        let result = search(&mut self.belief, &self.planner, &self.utility, rng)?;
        let action = result.action;
        self.last_search = Some(result);
        Ok(action)
    }

    fn plan_with_hypothesis<R: Rng + ?Sized>(&mut self, hypothesis: usize, rng: &mut R) -> Result<Action, AgentError> {
        let mut model = self.mixture()?.component(hypothesis).clone();
        let result = search(&mut model, &self.planner, &self.utility, rng)?;
        let action = result.action;
        self.last_search = Some(result);
        Ok(action)
    }

    /// Chooses the next action.
    pub fn act<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Action, AgentError> {
        match self.kind {
            AgentType::Random => Ok(Action(rng.gen_range(0..NUM_ACTIONS))),
            AgentType::Aixi | AgentType::Aimu | AgentType::KsaSquare | AgentType::KsaShannon | AgentType::KsaKl => {
                self.plan(rng)
            }
            AgentType::Bayesexp => self.bayesexp_step(rng),
            AgentType::Thompson => self.thompson_step(rng),
            AgentType::Mdl => self.mdl_step(rng),
        }
    }

    fn bayesexp_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Action, AgentError> {
        let explore = self.explore_utility.expect("bayesexp has an exploration utility");
        if let AgentMode::ExploreBurst { remaining } = self.mode {
            if remaining > 0 {
                let result = search(&mut self.belief, &self.planner, &explore, rng)?;
                self.mode = AgentMode::ExploreBurst { remaining: remaining - 1 };
                let action = result.action;
                self.last_search = Some(result);
                return Ok(action);
            }
        }
        let epsilon = self.schedule.epsilon(self.cycle + 1);
        let probe = search(&mut self.belief, &self.planner, &explore, rng)?;
        if probe.best_value() > epsilon {
            self.mode = AgentMode::ExploreBurst { remaining: self.planner.horizon - 1 };
            let action = probe.action;
            self.last_search = Some(probe);
            Ok(action)
        } else {
            self.mode = AgentMode::Exploit;
            self.plan(rng)
        }
    }

    fn thompson_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Action, AgentError> {
        let (hypothesis, remaining) = match self.mode {
            AgentMode::Committed { hypothesis, remaining } if remaining > 0 => (hypothesis, remaining),
            _ => (self.mixture()?.posterior_sample(rng), self.planner.horizon),
        };
        self.mode = AgentMode::Committed { hypothesis, remaining: remaining - 1 };
        self.plan_with_hypothesis(hypothesis, rng)
    }

    fn mdl_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Action, AgentError> {
        let mixture = self.mixture()?;
        let complexity: Vec<u64> = (0..mixture.len() as u64).collect();
        let eligible = &self.eligible;
        let hypothesis = mixture.mdl_select(self.lambda, &complexity, |i| eligible.get(i).copied().unwrap_or(true))?;
        self.mode = AgentMode::Selected { hypothesis };
        self.plan_with_hypothesis(hypothesis, rng)
    }

    /// Conditions the beliefs on the real percept and returns the realized utility.
    pub fn update(&mut self, action: Action, percept: &Percept) -> Result<f64, AgentError> {
        let u = match self.kind {
            AgentType::Random => {
                // The random baseline still tracks its beliefs for snapshots.
                self.belief.update(action, percept)?;
                percept.reward
            }
            _ => ksa_utility(&self.utility, &mut self.belief, action, percept)?,
        };
        self.cycle += 1;
        self.last_utility = Some(u);
        Ok(u)
    }

    pub fn cycles(&self) -> usize {
        self.cycle
    }

    pub fn snapshot(&self) -> PosteriorSnapshot {
        self.belief.snapshot()
    }
}
