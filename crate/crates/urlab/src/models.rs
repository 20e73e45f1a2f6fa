//! Bayesian environment models.
//!
//! Every model predicts the next percept given an action, conditions on the
//! percept that actually arrived, and supports nested checkpoints so the
//! planner can simulate futures through it and restore the belief state.
//!
//! Three families live here:
//! * [`GridModel`]: a fully known gridworld (the truth, or one hypothesis);
//! * [`MixtureModel`]: an explicit Bayes mixture over hypotheses, e.g. the
//!   class of gridworlds that differ only in dispenser location;
//! * [`DirichletGridModel`]: a factorized per-tile model that is uncertain
//!   about walls, dispenser payouts and noise sources.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::gridworld::{GridSpec, Pos, Tile, NUM_ACTIONS, REWARD_DISPENSER, REWARD_EMPTY, REWARD_WALL};
use crate::primitives::{
    accumulate, entropy_unchecked, probability_of, Action, History, Percept, PerceptDistribution, Policy,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("percept {percept:?} after action {action} has zero predictive probability")]
    ImpossiblePercept { action: Action, percept: Percept },
    #[error("no update has happened yet")]
    NoUpdate,
    #[error("checkpoint belongs to a different model")]
    ForeignCheckpoint,
    #[error("checkpoint at depth {0} has already been consumed")]
    StaleCheckpoint(usize),
    #[error("every hypothesis has been falsified")]
    EmptyClass,
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Token returned by [`EnvironmentModel::checkpoint`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Checkpoint {
    owner: u64,
    depth: usize,
}

static NEXT_OWNER: AtomicU64 = AtomicU64::new(1);

/// Stack of saved states keyed by tokens that only this stack accepts.
/// Clones get a fresh identity so tokens never cross model copies. The
/// identity is assigned lazily on first use; zero means unassigned.
#[derive(Debug)]
pub(crate) struct CheckpointStack<S> {
    owner: u64,
    saved: Vec<S>,
}

fn fresh_owner() -> u64 {
    NEXT_OWNER.fetch_add(1, Ordering::Relaxed)
}

impl<S> CheckpointStack<S> {
    pub(crate) fn new() -> Self {
        Self { owner: 0, saved: Vec::new() }
    }

    pub(crate) fn push(&mut self, state: S) -> Checkpoint {
        if self.owner == 0 {
            self.owner = fresh_owner();
        }
        self.saved.push(state);
        Checkpoint { owner: self.owner, depth: self.saved.len() - 1 }
    }

    /// Pops back to `token`, discarding any checkpoints taken after it.
    pub(crate) fn pop(&mut self, token: Checkpoint) -> Result<S, ModelError> {
        if token.owner != self.owner || self.owner == 0 {
            return Err(ModelError::ForeignCheckpoint);
        }
        if token.depth >= self.saved.len() {
            return Err(ModelError::StaleCheckpoint(token.depth));
        }
        self.saved.truncate(token.depth + 1);
        Ok(self.saved.pop().expect("non-empty after truncate"))
    }

    pub(crate) fn is_active(&self) -> bool {
        !self.saved.is_empty()
    }
}

impl<S: Clone> Clone for CheckpointStack<S> {
    fn clone(&self) -> Self {
        let owner = if self.saved.is_empty() { 0 } else { fresh_owner() };
        Self { owner, saved: self.saved.clone() }
    }
}

impl<S> Default for CheckpointStack<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Serializable view of a model's beliefs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum PosteriorSnapshot {
    /// Known environment; no uncertainty.
    Known { position: Pos },
    /// Hypothesis weights; `rows` holds them as a row-major matrix when the
    /// hypotheses are indexed by grid tile.
    Mixture { weights: Vec<f64>, rows: Option<Vec<Vec<f64>>>, entropy: f64 },
    Dirichlet { size: usize, position: Pos, tiles: Vec<TileRecord> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub x: usize,
    pub y: usize,
    pub wall: WallBelief,
    pub payouts: u32,
    pub visits: u32,
    /// Posterior mean payout probability `(s + 1) / (n + 2)`.
    pub payout_mean: f64,
    /// Observations counted as noise; nonzero marks a noise source.
    #[serde(default)]
    pub noise_observations: u32,
}

/// The predictive-model contract shared by every belief representation.
pub trait EnvironmentModel {
    fn num_actions(&self) -> usize;

    /// Full predictive distribution over the next percept after `action`.
    fn percept_distribution(&self, action: Action) -> PerceptDistribution;

    fn probability(&self, action: Action, percept: &Percept) -> f64 {
        probability_of(&self.percept_distribution(action), percept)
    }

    fn sample<R: Rng + ?Sized>(&self, action: Action, rng: &mut R) -> Percept;

    /// Conditions on `percept` having followed `action`.
    fn update(&mut self, action: Action, percept: &Percept) -> Result<(), ModelError>;

    fn checkpoint(&mut self) -> Checkpoint;

    fn rollback(&mut self, token: Checkpoint) -> Result<(), ModelError>;

    /// Entropy of the beliefs before the most recent update minus after it.
    fn info_gain_of_last_update(&self) -> Result<f64, ModelError>;

    fn snapshot(&self) -> PosteriorSnapshot;
}

/// A hypothesis usable as a mixture component: a predictor whose internal
/// state can be advanced even on percepts it considers impossible.
pub trait Hypothesis: Clone {
    fn percept_distribution(&self, action: Action) -> PerceptDistribution;
    fn probability(&self, action: Action, percept: &Percept) -> f64;
    fn sample<R: Rng + ?Sized>(&self, action: Action, rng: &mut R) -> Percept;
    fn advance(&mut self, action: Action, percept: &Percept);
}

fn sample_from<R: Rng + ?Sized>(dist: &[(Percept, f64)], rng: &mut R) -> Percept {
    let mut u = rng.gen::<f64>();
    for (e, p) in dist {
        if u < *p {
            return *e;
        }
        u -= p;
    }
    dist.iter().rev().find(|(_, p)| *p > 0.0).map(|(e, _)| *e).expect("empty distribution")
}

/// Probability of `history` under `policy` interacting with `model`:
/// the product of action and percept probabilities along the history.
/// The model is restored before returning.
pub fn history_probability<P, M>(policy: &P, model: &mut M, history: &History) -> Result<f64, ModelError>
where
    P: Policy + ?Sized,
    M: EnvironmentModel,
{
    let token = model.checkpoint();
    let mut prefix = History::new();
    let mut p = 1.0;
    for &(a, e) in history.iter() {
        p *= policy.action_probability(&prefix, a);
        let q = model.probability(a, &e);
        p *= q;
        if p == 0.0 {
            break;
        }
        model.update(a, &e)?;
        prefix.push(a, e);
    }
    model.rollback(token)?;
    Ok(p)
}

/// A fully specified gridworld with a tracked agent position.
#[derive(Debug, Clone)]
pub struct GridModel {
    spec: Arc<GridSpec>,
    pos: Pos,
    updated: bool,
    checkpoints: CheckpointStack<(Pos, bool)>,
}

impl GridModel {
    pub fn new(spec: Arc<GridSpec>) -> Self {
        Self { spec, pos: Pos::START, updated: false, checkpoints: CheckpointStack::new() }
    }

    pub fn at(spec: Arc<GridSpec>, pos: Pos) -> Self {
        Self { pos, ..Self::new(spec) }
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn position(&self) -> Pos {
        self.pos
    }
}

impl Hypothesis for GridModel {
    fn percept_distribution(&self, action: Action) -> PerceptDistribution {
        self.spec.percept_distribution(self.pos, action)
    }

    fn probability(&self, action: Action, percept: &Percept) -> f64 {
        let (dest, bumped) = self.spec.destination(self.pos, action);
        let tile = self.spec.tile(dest);
        let obs_p = match tile {
            Tile::Noise { alphabet } => {
                if percept.observation < alphabet {
                    1.0 / alphabet as f64
                } else {
                    0.0
                }
            }
            _ if percept.observation == self.spec.wall_bits(dest) => 1.0,
            _ => 0.0,
        };
        if obs_p == 0.0 {
            return 0.0;
        }
        let r = percept.reward;
        let reward_p = if bumped {
            if r == REWARD_WALL {
                1.0
            } else {
                0.0
            }
        } else {
            match tile {
                Tile::Dispenser { theta } if r == REWARD_DISPENSER => theta,
                Tile::Dispenser { theta } if r == REWARD_EMPTY => 1.0 - theta,
                Tile::Dispenser { .. } => 0.0,
                _ if r == REWARD_EMPTY => 1.0,
                _ => 0.0,
            }
        };
        obs_p * reward_p
    }

    fn sample<R: Rng + ?Sized>(&self, action: Action, rng: &mut R) -> Percept {
        self.spec.step(self.pos, action, rng).1
    }

    fn advance(&mut self, action: Action, _percept: &Percept) {
        self.pos = self.spec.destination(self.pos, action).0;
    }
}

impl EnvironmentModel for GridModel {
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn percept_distribution(&self, action: Action) -> PerceptDistribution {
        Hypothesis::percept_distribution(self, action)
    }

    fn probability(&self, action: Action, percept: &Percept) -> f64 {
        Hypothesis::probability(self, action, percept)
    }

    fn sample<R: Rng + ?Sized>(&self, action: Action, rng: &mut R) -> Percept {
        Hypothesis::sample(self, action, rng)
    }

    fn update(&mut self, action: Action, percept: &Percept) -> Result<(), ModelError> {
        if Hypothesis::probability(self, action, percept) <= 0.0 {
            return Err(ModelError::ImpossiblePercept { action, percept: *percept });
        }
        self.advance(action, percept);
        self.updated = true;
        Ok(())
    }

    fn checkpoint(&mut self) -> Checkpoint {
        self.checkpoints.push((self.pos, self.updated))
    }

    fn rollback(&mut self, token: Checkpoint) -> Result<(), ModelError> {
        (self.pos, self.updated) = self.checkpoints.pop(token)?;
        Ok(())
    }

    fn info_gain_of_last_update(&self) -> Result<f64, ModelError> {
        if self.updated {
            Ok(0.0)
        } else {
            Err(ModelError::NoUpdate)
        }
    }

    fn snapshot(&self) -> PosteriorSnapshot {
        PosteriorSnapshot::Known { position: self.pos }
    }
}

/// History-independent model: each action has a fixed percept distribution
/// (a multi-armed bandit).
#[derive(Debug, Clone)]
pub struct StationaryModel {
    arms: Vec<PerceptDistribution>,
    updated: bool,
    checkpoints: CheckpointStack<bool>,
}

impl StationaryModel {
    pub fn new(arms: Vec<PerceptDistribution>) -> Result<Self, ModelError> {
        if arms.is_empty() {
            return Err(ModelError::Invalid("no actions".into()));
        }
        for (a, arm) in arms.iter().enumerate() {
            let mass: f64 = arm.iter().map(|(_, p)| p).sum();
            if arm.iter().any(|(_, p)| *p < 0.0) || (mass - 1.0).abs() > 1e-9 {
                return Err(ModelError::Invalid(format!("action {a} has mass {mass}")));
            }
        }
        Ok(Self { arms, updated: false, checkpoints: CheckpointStack::new() })
    }

    /// Bernoulli bandit paying reward 1 with the given probabilities, else 0.
    pub fn bernoulli(payouts: &[f64]) -> Result<Self, ModelError> {
        Self::new(
            payouts
                .iter()
                .map(|&p| vec![(Percept::new(0, 1.0), p), (Percept::new(0, 0.0), 1.0 - p)])
                .collect(),
        )
    }
}

impl Hypothesis for StationaryModel {
    fn percept_distribution(&self, action: Action) -> PerceptDistribution {
        self.arms[action.index()].clone()
    }

    fn probability(&self, action: Action, percept: &Percept) -> f64 {
        probability_of(&self.arms[action.index()], percept)
    }

    fn sample<R: Rng + ?Sized>(&self, action: Action, rng: &mut R) -> Percept {
        sample_from(&self.arms[action.index()], rng)
    }

    fn advance(&mut self, _action: Action, _percept: &Percept) {}
}

impl EnvironmentModel for StationaryModel {
    fn num_actions(&self) -> usize {
        self.arms.len()
    }

    fn percept_distribution(&self, action: Action) -> PerceptDistribution {
        Hypothesis::percept_distribution(self, action)
    }

    fn sample<R: Rng + ?Sized>(&self, action: Action, rng: &mut R) -> Percept {
        Hypothesis::sample(self, action, rng)
    }

    fn update(&mut self, action: Action, percept: &Percept) -> Result<(), ModelError> {
        if Hypothesis::probability(self, action, percept) <= 0.0 {
            return Err(ModelError::ImpossiblePercept { action, percept: *percept });
        }
        self.updated = true;
        Ok(())
    }

    fn checkpoint(&mut self) -> Checkpoint {
        self.checkpoints.push(self.updated)
    }

    fn rollback(&mut self, token: Checkpoint) -> Result<(), ModelError> {
        self.updated = self.checkpoints.pop(token)?;
        Ok(())
    }

    fn info_gain_of_last_update(&self) -> Result<f64, ModelError> {
        if self.updated {
            Ok(0.0)
        } else {
            Err(ModelError::NoUpdate)
        }
    }

    fn snapshot(&self) -> PosteriorSnapshot {
        PosteriorSnapshot::Known { position: Pos::START }
    }
}

#[derive(Debug, Clone)]
struct MixtureState<C> {
    components: Vec<C>,
    weights: Vec<f64>,
    log_likelihoods: Vec<f64>,
    entropy: f64,
    last_info_gain: Option<f64>,
}

/// Bayes mixture `xi(e) = sum_nu w_nu nu(e)` over a finite hypothesis class.
///
/// Weights are kept normalized. A component that assigns probability zero to
/// an observed percept is falsified: its weight becomes exactly zero and its
/// log-likelihood negative infinity, permanently.
#[derive(Debug, Clone)]
pub struct MixtureModel<C> {
    state: MixtureState<C>,
    num_actions: usize,
    grid_size: Option<usize>,
    checkpoints: CheckpointStack<MixtureState<C>>,
}

impl<C: Hypothesis> MixtureModel<C> {
    pub fn new(components: Vec<C>, prior: Vec<f64>, num_actions: usize) -> Result<Self, ModelError> {
        if components.is_empty() || components.len() != prior.len() {
            return Err(ModelError::Invalid(format!(
                "{} components but {} prior weights",
                components.len(),
                prior.len()
            )));
        }
        if prior.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(ModelError::Invalid("prior weights must be finite and non-negative".into()));
        }
        let mass: f64 = prior.iter().sum();
        if mass <= 0.0 {
            return Err(ModelError::Invalid("prior has no mass".into()));
        }
        let weights: Vec<f64> = prior.iter().map(|w| w / mass).collect();
        let n = components.len();
        Ok(Self {
            state: MixtureState {
                components,
                entropy: entropy_unchecked(&weights, 1.0),
                weights,
                log_likelihoods: vec![0.0; n],
                last_info_gain: None,
            },
            num_actions,
            grid_size: None,
            checkpoints: CheckpointStack::new(),
        })
    }

    pub fn uniform(components: Vec<C>, num_actions: usize) -> Result<Self, ModelError> {
        let n = components.len();
        Self::new(components, vec![1.0; n], num_actions)
    }

    pub fn len(&self) -> usize {
        self.state.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.state.components.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.state.weights
    }

    pub fn components(&self) -> &[C] {
        &self.state.components
    }

    pub fn component(&self, index: usize) -> &C {
        &self.state.components[index]
    }

    /// Running `sum_k ln nu(e_k | ...)` per hypothesis.
    pub fn log_likelihoods(&self) -> &[f64] {
        &self.state.log_likelihoods
    }

    pub fn is_falsified(&self, index: usize) -> bool {
        self.state.log_likelihoods[index] == f64::NEG_INFINITY
    }

    /// Entropy of the current posterior weights.
    pub fn entropy(&self) -> f64 {
        self.state.entropy
    }

    /// Posterior predictive `xi(e | a)`.
    pub fn predict(&self, action: Action) -> PerceptDistribution {
        let mut dist = PerceptDistribution::new();
        for (c, &w) in self.state.components.iter().zip(&self.state.weights) {
            if w == 0.0 {
                continue;
            }
            for (e, p) in c.percept_distribution(action) {
                accumulate(&mut dist, e, w * p);
            }
        }
        dist.retain(|(_, p)| *p > 0.0);
        dist
    }

    /// Draws a hypothesis index with probability equal to its weight.
    pub fn posterior_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let mut u = rng.gen::<f64>();
        let mut last = 0;
        for (i, &w) in self.state.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            if u < w {
                return i;
            }
            u -= w;
            last = i;
        }
        last
    }

    /// Minimum-description-length choice: among unfalsified hypotheses
    /// accepted by `eligible`, the one minimizing
    /// `complexity - lambda * log_likelihood`, ties going to lower complexity
    /// and then lower index.
    pub fn mdl_select(
        &self,
        lambda: f64,
        complexity: &[u64],
        eligible: impl Fn(usize) -> bool,
    ) -> Result<usize, ModelError> {
        let mut best: Option<(f64, u64, usize)> = None;
        for i in 0..self.len() {
            if self.is_falsified(i) || !eligible(i) {
                continue;
            }
            let score = complexity[i] as f64 - lambda * self.state.log_likelihoods[i];
            let candidate = (score, complexity[i], i);
            best = match best {
                Some(b) if (b.0, b.1, b.2) <= (candidate.0, candidate.1, candidate.2) => Some(b),
                _ => Some(candidate),
            };
        }
        best.map(|b| b.2).ok_or(ModelError::EmptyClass)
    }

    pub fn with_grid_size(mut self, size: usize) -> Self {
        self.grid_size = Some(size);
        self
    }
}

impl MixtureModel<GridModel> {
    /// The class of gridworlds sharing `layout`'s walls and noise tiles that
    /// differ only in where a single dispenser with payout `theta` sits:
    /// one hypothesis per tile, `N^2` in total, in row-major order.
    /// Dispensers in `layout` itself are treated as empty tiles.
    pub fn dispenser_locations(layout: &GridSpec, theta: f64) -> Result<Self, ModelError> {
        let base: Vec<Tile> = layout
            .tiles()
            .iter()
            .map(|t| if matches!(t, Tile::Dispenser { .. }) { Tile::Empty } else { *t })
            .collect();
        let n = layout.size();
        let mut components = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut tiles = base.clone();
            if !tiles[i].is_wall() {
                tiles[i] = Tile::Dispenser { theta };
            }
            let spec = GridSpec::new_unchecked(n, tiles);
            components.push(GridModel::new(Arc::new(spec)));
        }
        Ok(Self::uniform(components, NUM_ACTIONS)?.with_grid_size(n))
    }
}

impl<C: Hypothesis> EnvironmentModel for MixtureModel<C> {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn percept_distribution(&self, action: Action) -> PerceptDistribution {
        self.predict(action)
    }

    fn probability(&self, action: Action, percept: &Percept) -> f64 {
        self.state
            .components
            .iter()
            .zip(&self.state.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(c, &w)| w * c.probability(action, percept))
            .sum()
    }

    fn sample<R: Rng + ?Sized>(&self, action: Action, rng: &mut R) -> Percept {
        let i = self.posterior_sample(rng);
        self.state.components[i].sample(action, rng)
    }

    fn update(&mut self, action: Action, percept: &Percept) -> Result<(), ModelError> {
        let state = &mut self.state;
        let likelihoods: Vec<f64> = state.components.iter().map(|c| c.probability(action, percept)).collect();
        let xi: f64 = likelihoods.iter().zip(&state.weights).map(|(p, w)| p * w).sum();
        if !(xi > 0.0) {
            return Err(ModelError::ImpossiblePercept { action, percept: *percept });
        }
        let before = state.entropy;
        let mut mass = 0.0;
        for ((w, &p), ll) in state.weights.iter_mut().zip(&likelihoods).zip(&mut state.log_likelihoods) {
            *w = *w * p / xi;
            mass += *w;
            if p != 1.0 {
                *ll += p.ln();
            }
        }
        for w in &mut state.weights {
            *w /= mass;
        }
        for c in &mut state.components {
            c.advance(action, percept);
        }
        state.entropy = entropy_unchecked(&state.weights, 1.0);
        state.last_info_gain = Some(before - state.entropy);
        Ok(())
    }

    fn checkpoint(&mut self) -> Checkpoint {
        self.checkpoints.push(self.state.clone())
    }

    fn rollback(&mut self, token: Checkpoint) -> Result<(), ModelError> {
        self.state = self.checkpoints.pop(token)?;
        Ok(())
    }

    fn info_gain_of_last_update(&self) -> Result<f64, ModelError> {
        self.state.last_info_gain.ok_or(ModelError::NoUpdate)
    }

    fn snapshot(&self) -> PosteriorSnapshot {
        let weights = self.state.weights.clone();
        let rows = self.grid_size.map(|n| weights.chunks(n).map(<[f64]>::to_vec).collect());
        PosteriorSnapshot::Mixture { weights, rows, entropy: self.state.entropy }
    }
}

/// Belief about whether a tile is a wall. Unobserved tiles start `Unknown`
/// (predictive probability one half); a single observation settles them for good.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WallBelief {
    Unknown,
    Wall,
    Open,
}

impl WallBelief {
    fn wall_probability(self) -> f64 {
        match self {
            WallBelief::Unknown => 0.5,
            WallBelief::Wall => 1.0,
            WallBelief::Open => 0.0,
        }
    }

    fn entropy(self) -> f64 {
        match self {
            WallBelief::Unknown => std::f64::consts::LN_2,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TileBelief {
    wall: WallBelief,
    payouts: u32,
    visits: u32,
    /// Observations counted since the tile was caught emitting noise; zero
    /// while everything seen there agrees with the wall beliefs.
    noise: u32,
}

impl TileBelief {
    const PRIOR: TileBelief = TileBelief { wall: WallBelief::Unknown, payouts: 0, visits: 0, noise: 0 };

    /// Posterior mean of the payout probability under a Beta(1, 1) prior.
    fn payout_mean(&self) -> f64 {
        (self.payouts as f64 + 1.0) / (self.visits as f64 + 2.0)
    }
}

/// Differential entropy of Beta(a, b) in nats.
pub fn beta_entropy(a: f64, b: f64) -> f64 {
    let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    ln_beta - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b) + (a + b - 2.0) * digamma(a + b)
}

/// Differential entropy of Dirichlet(1 + counts) in nats.
pub fn dirichlet_entropy(counts: &[u32]) -> f64 {
    let k = counts.len() as f64;
    let n: f64 = counts.iter().map(|&c| c as f64).sum();
    let a0 = n + k;
    let mut h = -ln_gamma(a0) + n * digamma(a0);
    for &c in counts.iter().filter(|&&c| c > 0) {
        let a = c as f64 + 1.0;
        h += ln_gamma(a) - c as f64 * digamma(a);
    }
    h
}

#[derive(Debug, Clone, Copy)]
struct DirichletSaved {
    undo_len: usize,
    pos: Pos,
    last_info_gain: Option<f64>,
    touched: usize,
}

#[derive(Debug, Clone, Copy)]
enum Undo {
    Tile(usize, TileBelief),
    /// Decrement this entry of the noise counts.
    Count(usize),
}

/// Factorized gridworld model: an independent wall belief and Beta payout
/// estimator per tile, plus the agent's position. The grid size and the start
/// tile are known; everything else is learned. Updates touch at most five
/// tiles (the observed tile and its four neighbours).
///
/// A tile whose observation contradicts the known walls around it is taken
/// to be a noise source. From then on its observations are predicted by a
/// Dirichlet-categorical estimator over the observation alphabet, with a
/// uniform prior.
#[derive(Debug, Clone)]
pub struct DirichletGridModel {
    size: usize,
    alphabet: u32,
    tiles: Vec<TileBelief>,
    /// `alphabet` counts per tile, allocated on the first noise observation.
    noise_counts: Vec<u32>,
    pos: Pos,
    last_info_gain: Option<f64>,
    touched: usize,
    undo: Vec<Undo>,
    checkpoints: CheckpointStack<DirichletSaved>,
}

/// Outcome of an attempted move as seen by the model.
enum Move {
    Bump,
    Enter(Pos),
    /// Destination wall status unknown: bump or enter with probability one half each.
    Uncertain(Pos),
}

impl DirichletGridModel {
    pub fn new(size: usize) -> Self {
        let mut tiles = vec![TileBelief::PRIOR; size * size];
        tiles[0].wall = WallBelief::Open;
        Self {
            size,
            alphabet: 16,
            tiles,
            noise_counts: Vec::new(),
            pos: Pos::START,
            last_info_gain: None,
            touched: 0,
            undo: Vec::new(),
            checkpoints: CheckpointStack::new(),
        }
    }

    /// Widens the observation alphabet noise tiles are assumed to draw from
    /// (never below the 16 wall-bit patterns).
    pub fn with_observation_alphabet(mut self, alphabet: u32) -> Self {
        self.alphabet = alphabet.max(16);
        self.noise_counts.clear();
        self
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn position(&self) -> Pos {
        self.pos
    }

    fn index(&self, pos: Pos) -> usize {
        pos.y * self.size + pos.x
    }

    pub fn wall_belief(&self, pos: Pos) -> WallBelief {
        self.tiles[self.index(pos)].wall
    }

    /// (payouts, visits) counted on the tile.
    pub fn payout_counts(&self, pos: Pos) -> (u32, u32) {
        let t = self.tiles[self.index(pos)];
        (t.payouts, t.visits)
    }

    pub fn payout_mean(&self, pos: Pos) -> f64 {
        self.tiles[self.index(pos)].payout_mean()
    }

    /// Whether the tile has been caught emitting noise.
    pub fn is_noisy(&self, pos: Pos) -> bool {
        self.tiles[self.index(pos)].noise > 0
    }

    /// Number of tiles whose belief the last update examined.
    pub fn last_touched(&self) -> usize {
        self.touched
    }

    fn counts(&self, i: usize) -> &[u32] {
        let k = self.alphabet as usize;
        &self.noise_counts[i * k..(i + 1) * k]
    }

    fn tile_entropy(&self, i: usize) -> f64 {
        let t = &self.tiles[i];
        let mut h = t.wall.entropy() + beta_entropy(t.payouts as f64 + 1.0, (t.visits - t.payouts) as f64 + 1.0);
        if t.noise > 0 {
            // Measured from the uniform prior, so catching a noise source is
            // not itself a windfall of information.
            h += dirichlet_entropy(self.counts(i)) + ln_gamma(self.alphabet as f64);
        }
        h
    }

    fn neighbour(&self, pos: Pos, dir: usize) -> Option<Pos> {
        let n = self.size as i64;
        let (dx, dy) = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1), (0, 0)][dir];
        let (x, y) = (pos.x as i64 + dx, pos.y as i64 + dy);
        ((0..n).contains(&x) && (0..n).contains(&y)).then(|| Pos::new(x as usize, y as usize))
    }

    fn neighbour_wall(&self, pos: Pos, dir: usize) -> WallBelief {
        self.neighbour(pos, dir).map_or(WallBelief::Wall, |q| self.wall_belief(q))
    }

    fn resolve(&self, action: Action) -> Move {
        match self.neighbour(self.pos, action.index()) {
            None => Move::Bump,
            Some(t) => match self.wall_belief(t) {
                WallBelief::Wall => Move::Bump,
                WallBelief::Open => Move::Enter(t),
                WallBelief::Unknown => Move::Uncertain(t),
            },
        }
    }

    /// Probability of `observation` while standing on `at`.
    fn observation_probability(&self, at: Pos, observation: u32) -> f64 {
        let i = self.index(at);
        let noise = self.tiles[i].noise;
        if noise > 0 {
            if observation >= self.alphabet {
                return 0.0;
            }
            let c = self.counts(i)[observation as usize];
            return (c as f64 + 1.0) / (noise as f64 + self.alphabet as f64);
        }
        if observation >= 16 {
            return 0.0;
        }
        (0..4)
            .map(|dir| {
                let pw = self.neighbour_wall(at, dir).wall_probability();
                if observation & (1 << dir) != 0 {
                    pw
                } else {
                    1.0 - pw
                }
            })
            .product()
    }

    fn observation_distribution(&self, at: Pos) -> Vec<(u32, f64)> {
        if self.tiles[self.index(at)].noise > 0 {
            return (0..self.alphabet).map(|o| (o, self.observation_probability(at, o))).collect();
        }
        let mut observations = vec![(0u32, 1.0)];
        for dir in 0..4 {
            let pw = self.neighbour_wall(at, dir).wall_probability();
            observations = observations
                .into_iter()
                .flat_map(|(bits, p)| [(bits | (1 << dir), p * pw), (bits, p * (1.0 - pw))])
                .filter(|(_, p)| *p > 0.0)
                .collect();
        }
        observations
    }

    fn sample_observation<R: Rng + ?Sized>(&self, at: Pos, rng: &mut R) -> u32 {
        let i = self.index(at);
        let noise = self.tiles[i].noise;
        if noise > 0 {
            let mut u = rng.gen::<f64>() * (noise + self.alphabet) as f64;
            for (o, &c) in self.counts(i).iter().enumerate() {
                u -= c as f64 + 1.0;
                if u < 0.0 {
                    return o as u32;
                }
            }
            return self.alphabet - 1;
        }
        let mut bits = 0;
        for dir in 0..4 {
            let pw = self.neighbour_wall(at, dir).wall_probability();
            if pw == 1.0 || (pw > 0.0 && rng.gen::<f64>() < pw) {
                bits |= 1 << dir;
            }
        }
        bits
    }

    fn enter_distribution(&self, dest: Pos, mass: f64, dist: &mut PerceptDistribution) {
        let payout = self.tiles[self.index(dest)].payout_mean();
        for (bits, p) in self.observation_distribution(dest) {
            accumulate(dist, Percept::new(bits, REWARD_DISPENSER), mass * p * payout);
            accumulate(dist, Percept::new(bits, REWARD_EMPTY), mass * p * (1.0 - payout));
        }
    }

    fn bump_distribution(&self, mass: f64, dist: &mut PerceptDistribution) {
        for (bits, p) in self.observation_distribution(self.pos) {
            accumulate(dist, Percept::new(bits, REWARD_WALL), mass * p);
        }
    }

    fn set_tile(&mut self, index: usize, belief: TileBelief) {
        if self.checkpoints.is_active() {
            self.undo.push(Undo::Tile(index, self.tiles[index]));
        }
        self.tiles[index] = belief;
    }

    fn touch(&self, i: usize, touched: &mut Vec<(usize, f64)>) {
        if !touched.iter().any(|&(j, _)| j == i) {
            touched.push((i, self.tile_entropy(i)));
        }
    }

    /// Sets a wall belief. Observation bits only settle unknown tiles;
    /// movement evidence (`force`) also overrides earlier beliefs, which
    /// can only be wrong if they were read off a noise source.
    fn mark_wall(&mut self, pos: Pos, belief: WallBelief, force: bool, touched: &mut Vec<(usize, f64)>) {
        let i = self.index(pos);
        let current = self.tiles[i].wall;
        if current == belief || (current != WallBelief::Unknown && !force) {
            return;
        }
        self.touch(i, touched);
        let t = TileBelief { wall: belief, ..self.tiles[i] };
        self.set_tile(i, t);
    }

    fn observe(&mut self, at: Pos, observation: u32, touched: &mut Vec<(usize, f64)>) {
        let i = self.index(at);
        if self.tiles[i].noise == 0 && self.observation_probability(at, observation) > 0.0 {
            for dir in 0..4 {
                if let Some(q) = self.neighbour(at, dir) {
                    let observed = if observation & (1 << dir) != 0 { WallBelief::Wall } else { WallBelief::Open };
                    self.mark_wall(q, observed, false, touched);
                }
            }
            return;
        }
        if observation >= self.alphabet {
            return;
        }
        let k = self.alphabet as usize;
        if self.noise_counts.is_empty() {
            self.noise_counts = vec![0; self.tiles.len() * k];
        }
        self.touch(i, touched);
        let t = TileBelief { noise: self.tiles[i].noise + 1, ..self.tiles[i] };
        self.set_tile(i, t);
        let c = i * k + observation as usize;
        self.noise_counts[c] += 1;
        if self.checkpoints.is_active() {
            self.undo.push(Undo::Count(c));
        }
    }

    /// Per-tile belief records in row-major order.
    pub fn tile_records(&self) -> Vec<TileRecord> {
        self.tiles
            .iter()
            .enumerate()
            .map(|(i, t)| TileRecord {
                x: i % self.size,
                y: i / self.size,
                wall: t.wall,
                payouts: t.payouts,
                visits: t.visits,
                payout_mean: t.payout_mean(),
                noise_observations: t.noise,
            })
            .collect()
    }
}

impl EnvironmentModel for DirichletGridModel {
    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn percept_distribution(&self, action: Action) -> PerceptDistribution {
        let mut dist = PerceptDistribution::new();
        match self.resolve(action) {
            Move::Bump => self.bump_distribution(1.0, &mut dist),
            Move::Enter(t) => self.enter_distribution(t, 1.0, &mut dist),
            Move::Uncertain(t) => {
                self.bump_distribution(0.5, &mut dist);
                self.enter_distribution(t, 0.5, &mut dist);
            }
        }
        dist
    }

    fn probability(&self, action: Action, percept: &Percept) -> f64 {
        let enter = |t: Pos| {
            let payout = self.payout_mean(t);
            let rp = if percept.reward == REWARD_DISPENSER {
                payout
            } else if percept.reward == REWARD_EMPTY {
                1.0 - payout
            } else {
                0.0
            };
            rp * self.observation_probability(t, percept.observation)
        };
        let bump = || {
            if percept.reward == REWARD_WALL {
                self.observation_probability(self.pos, percept.observation)
            } else {
                0.0
            }
        };
        match self.resolve(action) {
            Move::Bump => bump(),
            Move::Enter(t) => enter(t),
            Move::Uncertain(t) => 0.5 * bump() + 0.5 * enter(t),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, action: Action, rng: &mut R) -> Percept {
        let dest = match self.resolve(action) {
            Move::Bump => return Percept::new(self.sample_observation(self.pos, rng), REWARD_WALL),
            Move::Enter(t) => t,
            Move::Uncertain(t) => {
                if rng.gen::<bool>() {
                    return Percept::new(self.sample_observation(self.pos, rng), REWARD_WALL);
                }
                t
            }
        };
        let bits = self.sample_observation(dest, rng);
        let reward = if rng.gen::<f64>() < self.payout_mean(dest) { REWARD_DISPENSER } else { REWARD_EMPTY };
        Percept::new(bits, reward)
    }

    fn update(&mut self, action: Action, percept: &Percept) -> Result<(), ModelError> {
        let mut touched: Vec<(usize, f64)> = Vec::with_capacity(5);
        let target = self.neighbour(self.pos, action.index());
        if percept.reward == REWARD_WALL {
            if let Some(t) = target.filter(|&t| t != self.pos) {
                self.mark_wall(t, WallBelief::Wall, true, &mut touched);
            }
        } else if let Some(dest) = target {
            self.mark_wall(dest, WallBelief::Open, true, &mut touched);
            let i = self.index(dest);
            if percept.reward == REWARD_DISPENSER || percept.reward == REWARD_EMPTY {
                self.touch(i, &mut touched);
                let mut belief = self.tiles[i];
                belief.visits += 1;
                if percept.reward == REWARD_DISPENSER {
                    belief.payouts += 1;
                }
                self.set_tile(i, belief);
            }
            self.pos = dest;
        }
        self.observe(self.pos, percept.observation, &mut touched);
        let gain: f64 = touched.iter().map(|&(i, before)| before - self.tile_entropy(i)).sum();
        self.touched = touched.len();
        self.last_info_gain = Some(gain);
        Ok(())
    }

    fn checkpoint(&mut self) -> Checkpoint {
        self.checkpoints.push(DirichletSaved {
            undo_len: self.undo.len(),
            pos: self.pos,
            last_info_gain: self.last_info_gain,
            touched: self.touched,
        })
    }

    fn rollback(&mut self, token: Checkpoint) -> Result<(), ModelError> {
        let saved = self.checkpoints.pop(token)?;
        while self.undo.len() > saved.undo_len {
            match self.undo.pop().expect("undo entry") {
                Undo::Tile(i, belief) => self.tiles[i] = belief,
                Undo::Count(c) => self.noise_counts[c] -= 1,
            }
        }
        if !self.checkpoints.is_active() {
            self.undo.clear();
        }
        self.pos = saved.pos;
        self.last_info_gain = saved.last_info_gain;
        self.touched = saved.touched;
        Ok(())
    }

    fn info_gain_of_last_update(&self) -> Result<f64, ModelError> {
        self.last_info_gain.ok_or(ModelError::NoUpdate)
    }

    fn snapshot(&self) -> PosteriorSnapshot {
        PosteriorSnapshot::Dirichlet { size: self.size, position: self.pos, tiles: self.tile_records() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{DOWN, LEFT, NOOP, RIGHT};
    use crate::primitives::{entropy, ConstantPolicy, UniformPolicy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e(obs: u32, r: f64) -> Percept {
        Percept::new(obs, r)
    }

    fn two_arm(p1: f64, p2: f64) -> MixtureModel<StationaryModel> {
        // Each hypothesis is a one-action model emitting percept A with probability p.
        let h = |p: f64| StationaryModel::new(vec![vec![(e(0, 1.0), p), (e(0, 0.0), 1.0 - p)]]).unwrap();
        MixtureModel::uniform(vec![h(p1), h(p2)], 1).unwrap()
    }

    #[test]
    fn mixture_prediction_and_update() {
        let m = two_arm(1.0, 0.0);
        assert_eq!(m.probability(Action(0), &e(0, 1.0)), 0.5);
        let degenerate = MixtureModel::new(
            vec![StationaryModel::bernoulli(&[0.3]).unwrap(), StationaryModel::bernoulli(&[0.9]).unwrap()],
            vec![1.0, 0.0],
            1,
        )
        .unwrap();
        assert_eq!(degenerate.predict(Action(0)), StationaryModel::bernoulli(&[0.3]).unwrap().arms[0]);

        let mut m = two_arm(1.0, 0.0);
        m.update(Action(0), &e(0, 1.0)).unwrap();
        assert_eq!(m.weights(), &[1.0, 0.0]);
        assert!((m.info_gain_of_last_update().unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(m.is_falsified(1));
        m.update(Action(0), &e(0, 1.0)).unwrap();
        assert_eq!(m.weights()[1], 0.0);

        let mut m = two_arm(0.75, 0.25);
        m.update(Action(0), &e(0, 1.0)).unwrap();
        assert!((m.weights()[0] - 0.75).abs() < 1e-12);
        assert!((m.weights()[1] - 0.25).abs() < 1e-12);

        let mut m = two_arm(1.0, 0.0);
        assert!(matches!(m.info_gain_of_last_update(), Err(ModelError::NoUpdate)));
        m.update(Action(0), &e(0, 1.0)).unwrap();
        assert!(matches!(m.update(Action(0), &e(0, 0.0)), Err(ModelError::ImpossiblePercept { .. })));
    }

    #[test]
    fn unchanged_weights_give_zero_gain() {
        let mut m = two_arm(0.5, 0.5);
        m.update(Action(0), &e(0, 1.0)).unwrap();
        assert_eq!(m.info_gain_of_last_update().unwrap(), 0.0);
    }

    #[test]
    fn location_mixture_predicts_payout_under_foot() {
        let mut rows = vec![".".repeat(10); 10];
        rows[9] = ".........D".into();
        let layout = GridSpec::from_rows(&rows, &[0.75], 16).unwrap();
        let m = MixtureModel::dispenser_locations(&layout, 0.75).unwrap();
        assert_eq!(m.len(), 100);
        let dist = m.predict(RIGHT);
        let p100: f64 = dist.iter().filter(|(e, _)| e.reward == 100.0).map(|(_, p)| p).sum();
        assert!((p100 - 0.01 * 0.75).abs() < 1e-12);
    }

    #[test]
    fn mdl_selection() {
        let layout = GridSpec::parse("...\n...\n..D\n", &[1.0], 16).unwrap();
        let mut m = MixtureModel::dispenser_locations(&layout, 1.0).unwrap();
        let complexity: Vec<u64> = (0..9).collect();
        assert_eq!(m.mdl_select(0.0, &complexity, |_| true).unwrap(), 0);
        // Standing on the start tile without payout falsifies hypothesis 0.
        m.update(NOOP, &e(0b0101, -1.0)).unwrap();
        assert_eq!(m.mdl_select(0.0, &complexity, |_| true).unwrap(), 1);
        let only = |i: usize| i == 8;
        assert_eq!(m.mdl_select(0.0, &complexity, only).unwrap(), 8);
        assert!(matches!(m.mdl_select(0.0, &complexity, |i| i == 0), Err(ModelError::EmptyClass)));

        // With a large lambda the likelihood term dominates the index.
        let mut m = two_arm(0.2, 0.9);
        for _ in 0..5 {
            m.update(Action(0), &e(0, 1.0)).unwrap();
        }
        assert_eq!(m.mdl_select(0.0, &[0, 1], |_| true).unwrap(), 0);
        assert_eq!(m.mdl_select(100.0, &[0, 1], |_| true).unwrap(), 1);
    }

    #[test]
    fn posterior_sampling() {
        let m = MixtureModel::new(
            vec![StationaryModel::bernoulli(&[0.3]).unwrap(), StationaryModel::bernoulli(&[0.4]).unwrap()],
            vec![1.0, 0.0],
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| m.posterior_sample(&mut rng) == 0));

        let m = two_arm(0.5, 0.1);
        let n = 10_000;
        let zeros = (0..n).filter(|_| m.posterior_sample(&mut rng) == 0).count() as f64;
        assert!((zeros - 5000.0).abs() < 3.0 * (n as f64 * 0.25).sqrt());

        let comps = vec![StationaryModel::bernoulli(&[0.5]).unwrap(); 100];
        let m = MixtureModel::uniform(comps, 1).unwrap();
        let mut counts = [0usize; 100];
        for _ in 0..100_000 {
            counts[m.posterior_sample(&mut rng)] += 1;
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        // Critical value of chi-square with 99 degrees of freedom at p = 0.001.
        assert!(chi2 < 148.23, "chi2 = {chi2}");
    }

    #[test]
    fn checkpoint_contract() {
        let layout = GridSpec::parse("...\n.#.\n..D\n", &[0.75], 16).unwrap();
        let mut m = MixtureModel::dispenser_locations(&layout, 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let before: Vec<_> = (0..5).map(|a| m.predict(Action(a))).collect();
        let c = m.checkpoint();
        for a in [RIGHT, RIGHT, DOWN, DOWN, NOOP] {
            let p = m.sample(a, &mut rng);
            m.update(a, &p).unwrap();
        }
        m.rollback(c).unwrap();
        let after: Vec<_> = (0..5).map(|a| m.predict(Action(a))).collect();
        assert_eq!(before, after);
        assert!(matches!(m.rollback(c), Err(ModelError::StaleCheckpoint(0))));

        let c1 = m.checkpoint();
        m.update(RIGHT, &e(0b1100, -1.0)).unwrap();
        let c2 = m.checkpoint();
        m.update(RIGHT, &e(0b0110, -1.0)).unwrap();
        m.rollback(c2).unwrap();
        m.rollback(c1).unwrap();
        assert_eq!(before, (0..5).map(|a| m.predict(Action(a))).collect::<Vec<_>>());

        let mut other = m.clone();
        let foreign = other.checkpoint();
        assert!(matches!(m.rollback(foreign), Err(ModelError::ForeignCheckpoint)));
    }

    #[test]
    fn dirichlet_prior_predictions() {
        let m = DirichletGridModel::new(4);
        // Moving right into an unknown tile: half bump, half enter.
        let dist = m.percept_distribution(RIGHT);
        let total: f64 = dist.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let p100: f64 = dist.iter().filter(|(e, _)| e.reward == 100.0).map(|(_, p)| p).sum();
        assert!((p100 - 0.25).abs() < 1e-12);
        // Off-grid moves always bump; the observation still reveals the two
        // unknown neighbours.
        let bump = m.percept_distribution(LEFT);
        assert_eq!(bump.len(), 4);
        assert!(bump.iter().all(|(e, p)| e.reward == -10.0 && *p == 0.25));
    }

    #[test]
    fn dirichlet_updates() {
        let mut m = DirichletGridModel::new(4);
        // Stay on the start tile and learn its neighbourhood: left/up off-grid, right/down open.
        m.update(NOOP, &e(0b0101, -1.0)).unwrap();
        assert_eq!(m.wall_belief(Pos::new(1, 0)), WallBelief::Open);
        assert_eq!(m.wall_belief(Pos::new(0, 1)), WallBelief::Open);
        assert!(m.last_touched() <= 5);
        // Both neighbours settled: ln 2 each, plus the payout estimator sharpening.
        let ig = m.info_gain_of_last_update().unwrap();
        assert!((ig - (2.0 * 2f64.ln() - beta_entropy(1.0, 2.0))).abs() < 1e-9);
        // Every neighbour is known, so an unvisited open tile predicts payout 1/2.
        let dist = m.percept_distribution(RIGHT);
        let p100: f64 = dist.iter().filter(|(e, _)| e.reward == 100.0).map(|(_, p)| p).sum();
        assert!((p100 - 0.5).abs() < 1e-12);

        m.update(RIGHT, &e(0b0100, 100.0)).unwrap();
        assert_eq!(m.position(), Pos::new(1, 0));
        assert_eq!(m.wall_belief(Pos::new(2, 0)), WallBelief::Open);
        assert_eq!(m.wall_belief(Pos::new(1, 1)), WallBelief::Open);
        for r in [-1.0, -1.0, 100.0] {
            m.update(NOOP, &e(0b0100, r)).unwrap();
        }
        assert_eq!(m.payout_counts(Pos::new(1, 0)), (2, 4));
        assert!((m.payout_mean(Pos::new(1, 0)) - 0.5).abs() < 1e-12);

        let mut t = DirichletGridModel::new(4);
        for r in [100.0, -1.0, -1.0] {
            t.update(NOOP, &e(0b0101, r)).unwrap();
        }
        assert!((t.payout_mean(Pos::START) - 0.4).abs() < 1e-12);
        t.update(NOOP, &e(0b0101, 100.0)).unwrap();
        assert_eq!(t.payout_counts(Pos::START), (2, 4));

        // Observed walls are predicted with certainty afterwards.
        let mut w = DirichletGridModel::new(4);
        w.update(NOOP, &e(0b0111, -1.0)).unwrap();
        assert_eq!(w.wall_belief(Pos::new(1, 0)), WallBelief::Wall);
        assert_eq!(w.percept_distribution(RIGHT), vec![(e(0b0111, -10.0), 1.0)]);

        // A bump marks the attempted destination as a wall and leaves the position.
        let mut b = DirichletGridModel::new(4);
        b.update(RIGHT, &e(0b0111, -10.0)).unwrap();
        assert_eq!(b.wall_belief(Pos::new(1, 0)), WallBelief::Wall);
        assert_eq!(b.position(), Pos::START);
        assert_eq!(b.wall_belief(Pos::new(0, 1)), WallBelief::Open);
        assert!((b.info_gain_of_last_update().unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_noise_source() {
        let mut m = DirichletGridModel::new(4);
        m.update(NOOP, &e(0b0101, -1.0)).unwrap();
        assert!(!m.is_noisy(Pos::START));
        // Claims the right neighbour is a wall, which it is known not to be.
        m.update(NOOP, &e(0b0111, -1.0)).unwrap();
        assert!(m.is_noisy(Pos::START));
        assert_eq!(m.wall_belief(Pos::new(1, 0)), WallBelief::Open);
        // Dirichlet-categorical predictive: (1 + 1) / (1 + 16) for the seen symbol.
        assert!((m.observation_probability(Pos::START, 0b0111) - 2.0 / 17.0).abs() < 1e-12);
        assert!((m.observation_probability(Pos::START, 3) - 1.0 / 17.0).abs() < 1e-12);
        let total: f64 = m.percept_distribution(NOOP).iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // A repeated symbol sharpens the estimator: positive information gain.
        let c = m.checkpoint();
        m.update(NOOP, &e(0b0111, -1.0)).unwrap();
        let payout_gain = beta_entropy(1.0, 3.0) - beta_entropy(1.0, 4.0);
        let noise_gain = dirichlet_entropy(&one_hot(7, 1)) - dirichlet_entropy(&one_hot(7, 2));
        assert!((m.info_gain_of_last_update().unwrap() - payout_gain - noise_gain).abs() < 1e-9);
        assert!(noise_gain > 0.0);
        m.rollback(c).unwrap();
        assert!((m.observation_probability(Pos::START, 0b0111) - 2.0 / 17.0).abs() < 1e-12);
    }

    fn one_hot(i: usize, c: u32) -> Vec<u32> {
        let mut v = vec![0; 16];
        v[i] = c;
        v
    }

    #[test]
    fn dirichlet_entropy_reference() {
        // Dirichlet(1, 1) is uniform on the simplex: entropy 0. Dirichlet(2, 1)
        // is Beta(2, 1).
        assert!(dirichlet_entropy(&[0, 0]).abs() < 1e-12);
        assert!((dirichlet_entropy(&[1, 0]) - beta_entropy(2.0, 1.0)).abs() < 1e-12);
        assert!((dirichlet_entropy(&[0; 16]) + ln_gamma(16.0)).abs() < 1e-9);
    }

    #[test]
    fn dirichlet_rollback_is_exact() {
        let mut m = DirichletGridModel::new(6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = m.checkpoint();
        let before = m.snapshot();
        for _ in 0..30 {
            let a = Action(rng.gen_range(0..5));
            let p = m.sample(a, &mut rng);
            m.update(a, &p).unwrap();
            assert!(m.last_touched() <= 5);
            let total: f64 = (0..5).map(|a| m.percept_distribution(Action(a)).iter().map(|(_, p)| p).sum::<f64>()).sum();
            assert!((total - 5.0).abs() < 1e-9);
        }
        m.rollback(c).unwrap();
        assert_eq!(before, m.snapshot());
        assert!(m.info_gain_of_last_update().is_err());
    }

    #[test]
    fn dirichlet_probability_matches_distribution() {
        let mut m = DirichletGridModel::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..40 {
            for a in 0..5 {
                let dist = m.percept_distribution(Action(a));
                for (p, q) in &dist {
                    assert!((m.probability(Action(a), p) - q).abs() < 1e-12);
                }
            }
            let a = Action(rng.gen_range(0..5));
            let p = m.sample(a, &mut rng);
            assert!(m.probability(a, &p) > 0.0);
            m.update(a, &p).unwrap();
        }
    }

    #[test]
    fn history_probabilities() {
        let spec = Arc::new(GridSpec::parse("...\n...\n..D\n", &[1.0], 16).unwrap());
        let mut model = GridModel::new(spec.clone());
        let empty = History::new();
        assert_eq!(history_probability(&UniformPolicy { num_actions: 5 }, &mut model, &empty).unwrap(), 1.0);
        let mut h = History::new();
        h.push(RIGHT, e(0b0100, -1.0));
        assert_eq!(history_probability(&ConstantPolicy(RIGHT), &mut model, &h).unwrap(), 1.0);
        assert!((history_probability(&UniformPolicy { num_actions: 5 }, &mut model, &h).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(model.position(), Pos::START);
    }

    #[test]
    fn batch_posterior_entropy_matches() {
        let mut m = two_arm(0.3, 0.6);
        let prior = m.weights().to_vec();
        let seq = [1.0, 0.0, 1.0, 1.0];
        for r in seq {
            m.update(Action(0), &e(0, r)).unwrap();
        }
        let lik = |p: f64| seq.iter().map(|&r| if r == 1.0 { p } else { 1.0 - p }).product::<f64>();
        let raw = [prior[0] * lik(0.3), prior[1] * lik(0.6)];
        let z = raw[0] + raw[1];
        assert!((m.weights()[0] - raw[0] / z).abs() < 1e-12);
        assert!((m.entropy() - entropy(&[raw[0] / z, raw[1] / z]).unwrap()).abs() < 1e-12);
    }
}
