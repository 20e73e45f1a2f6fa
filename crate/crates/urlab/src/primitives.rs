//! Histories, percepts, discounting, utilities and the information-theoretic
//! helpers shared by models and agents.
//!
//! All logarithms are natural, so entropies and information gains are in nats.

use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mass deviations up to this size are renormalized silently; larger ones are errors.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("epsilon must lie in (0, 1], got {0}")]
    Epsilon(f64),
    #[error("discount factor must lie in (0, 1), got {0}")]
    Gamma(f64),
    #[error("negative probability {0} in distribution")]
    NegativeProbability(f64),
    #[error("distribution mass {0} deviates from 1 by more than {RENORMALIZE_TOLERANCE}")]
    Unnormalized(f64),
    #[error("distributions have different support sizes ({0} vs {1})")]
    SupportMismatch(usize, usize),
    #[error("utility bounds must satisfy lower < upper, got [{0}, {1}]")]
    Bounds(f64, f64),
}

/// Index into an environment's finite action space.
///
/// Gridworlds use five actions: left, right, up, down, no-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action(pub usize);

impl Action {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An (observation, reward) pair emitted by the environment each cycle.
///
/// The observation is a packed bit vector; gridworlds use four wall bits in
/// the order left, right, up, down (bit 0 = left). Equality and hashing use
/// the exact bit pattern of the reward so percepts can key search-tree nodes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Percept {
    pub observation: u32,
    pub reward: f64,
}

impl Percept {
    pub fn new(observation: u32, reward: f64) -> Self {
        Self { observation, reward }
    }
}

impl PartialEq for Percept {
    fn eq(&self, other: &Self) -> bool {
        self.observation == other.observation && self.reward.to_bits() == other.reward.to_bits()
    }
}

impl Eq for Percept {}

impl Hash for Percept {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.observation.hash(state);
        self.reward.to_bits().hash(state);
    }
}

/// A finite-support distribution over percepts, as (percept, probability) pairs.
pub type PerceptDistribution = Vec<(Percept, f64)>;

/// Adds `p` to the entry for `percept`, creating it if absent.
pub fn accumulate(dist: &mut PerceptDistribution, percept: Percept, p: f64) {
    match dist.iter_mut().find(|(e, _)| *e == percept) {
        Some((_, q)) => *q += p,
        None => dist.push((percept, p)),
    }
}

/// Probability assigned to `percept` by `dist` (zero if absent).
pub fn probability_of(dist: &[(Percept, f64)], percept: &Percept) -> f64 {
    dist.iter()
        .filter(|(e, _)| e == percept)
        .map(|(_, p)| *p)
        .sum()
}

/// Append-only interaction record of (action, percept) pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    steps: Vec<(Action, Percept)>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, action: Action, percept: Percept) {
        self.steps.push((action, percept));
    }

    /// Number of completed interaction cycles.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[(Action, Percept)] {
        &self.steps
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Action, Percept)> {
        self.steps.iter()
    }
}

/// Geometric discounting, the only family the experiments instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscountFunction {
    gamma: f64,
}

impl DiscountFunction {
    pub fn geometric(gamma: f64) -> Result<Self, DomainError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(DomainError::Gamma(gamma));
        }
        Ok(Self { gamma })
    }

    /// Undiscounted sums, for tests.
    #[cfg(test)]
    pub(crate) fn unit() -> Self {
        Self { gamma: 1.0 }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Weight of the utility `k` steps into the future.
    pub fn weight(&self, k: usize) -> f64 {
        self.gamma.powi(k as i32)
    }

    /// Sum of the first `steps` weights.
    pub fn partial_sum(&self, steps: usize) -> f64 {
        (0..steps).map(|k| self.weight(k)).sum()
    }

    /// Tail mass from any time step onward: 1 / (1 - gamma).
    pub fn tail_mass(&self) -> f64 {
        1.0 / (1.0 - self.gamma)
    }
}

impl Default for DiscountFunction {
    fn default() -> Self {
        Self { gamma: 0.99 }
    }
}

/// Smallest horizon `H` such that the discounted tail beyond `H` is at most an
/// `epsilon` fraction of the total. For geometric discounting this is
/// `ceil(ln epsilon / ln gamma)`, independent of the current time.
pub fn effective_horizon(discount: &DiscountFunction, epsilon: f64) -> Result<usize, DomainError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(DomainError::Epsilon(epsilon));
    }
    if epsilon == 1.0 {
        return Ok(0);
    }
    let raw = (epsilon.ln() / discount.gamma().ln()).ceil();
    let mut h = raw.max(0.0) as usize;
    // Guard the ceiling against rounding in the log ratio.
    while h > 0 && discount.gamma().powi(h as i32 - 1) <= epsilon {
        h -= 1;
    }
    while discount.gamma().powi(h as i32) > epsilon {
        h += 1;
    }
    Ok(h)
}

/// `sum_k gamma^k r_k` with the first reward undiscounted.
pub fn discounted_return(rewards: &[f64], discount: &DiscountFunction) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += weight * r;
        weight *= discount.gamma();
    }
    total
}

fn checked_mass(p: &[f64]) -> Result<f64, DomainError> {
    if let Some(&bad) = p.iter().find(|&&x| x < 0.0 || x.is_nan()) {
        return Err(DomainError::NegativeProbability(bad));
    }
    let mass: f64 = p.iter().sum();
    if (mass - 1.0).abs() > RENORMALIZE_TOLERANCE {
        return Err(DomainError::Unnormalized(mass));
    }
    Ok(mass)
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64, DomainError> {
    let mass = checked_mass(p)?;
    Ok(entropy_unchecked(p, mass))
}

/// Entropy of weights that are known to be non-negative, normalized by `mass`.
pub(crate) fn entropy_unchecked(p: &[f64], mass: f64) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let q = x / mass;
            -q * q.ln()
        })
        .sum();
    h.max(0.0)
}

/// Kullback-Leibler divergence `KL(p || q)` in nats.
///
/// Returns `f64::INFINITY` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, DomainError> {
    if p.len() != q.len() {
        return Err(DomainError::SupportMismatch(p.len(), q.len()));
    }
    let pm = checked_mass(p)?;
    let qm = checked_mass(q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        let (pi, qi) = (pi / pm, qi / qm);
        total += pi * (pi / qi).ln();
    }
    Ok(total.max(0.0))
}

/// How an agent scores its own experience.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UtilityKind {
    /// `u = r_t`, the environment's reward.
    ExtrinsicReward,
    /// `u = -xi(e)`.
    Square,
    /// `u = -ln xi(e)`.
    Shannon,
    /// `u` = entropy of the posterior before the update minus after it.
    KlInformationGain,
}

/// A utility kind together with the range its values are clamped into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityFunction {
    pub kind: UtilityKind,
    lower: f64,
    upper: f64,
}

impl UtilityFunction {
    pub fn new(kind: UtilityKind, lower: f64, upper: f64) -> Result<Self, DomainError> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(DomainError::Bounds(lower, upper));
        }
        Ok(Self { kind, lower, upper })
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn clamp(&self, u: f64) -> f64 {
        if u.is_nan() {
            return self.upper;
        }
        u.clamp(self.lower, self.upper)
    }

    /// Utility of a single cycle.
    ///
    /// `probability` is the model's predictive probability of `percept`
    /// before the update; `info_gain` is the realized entropy reduction of
    /// that update. Extrinsic rewards pass through unclamped.
    pub fn evaluate(&self, percept: &Percept, probability: f64, info_gain: f64) -> f64 {
        match self.kind {
            UtilityKind::ExtrinsicReward => percept.reward,
            UtilityKind::Square => self.clamp(-probability),
            UtilityKind::Shannon => {
                if probability <= 0.0 {
                    self.upper
                } else {
                    self.clamp(-probability.ln())
                }
            }
            UtilityKind::KlInformationGain => self.clamp(info_gain),
        }
    }

    /// Whether evaluation needs the predictive probability of the percept.
    pub fn needs_probability(&self) -> bool {
        matches!(self.kind, UtilityKind::Square | UtilityKind::Shannon)
    }
}

/// A (possibly stochastic) action-selection rule conditioned on history.
pub trait Policy {
    fn action_probability(&self, history: &History, action: Action) -> f64;
}

/// Uniformly random over a fixed number of actions.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub num_actions: usize,
}

impl Policy for UniformPolicy {
    fn action_probability(&self, _history: &History, action: Action) -> f64 {
        if action.index() < self.num_actions {
            1.0 / self.num_actions as f64
        } else {
            0.0
        }
    }
}

/// Always plays the same action.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub Action);

impl Policy for ConstantPolicy {
    fn action_probability(&self, _history: &History, action: Action) -> f64 {
        if action == self.0 {
            1.0
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iterative_horizon(gamma: f64, epsilon: f64) -> usize {
        // Gamma_{t+H} / Gamma_t = gamma^H for geometric discounting.
        let mut h = 0;
        let mut ratio = 1.0f64;
        while ratio > epsilon {
            ratio *= gamma;
            h += 1;
        }
        h
    }

    #[test]
    fn horizon_examples() {
        let d = DiscountFunction::geometric(0.99).unwrap();
        assert_eq!(effective_horizon(&d, 1.0).unwrap(), 0);
        assert_eq!(iterative_horizon(0.99, 0.01), 459);
        assert_eq!(effective_horizon(&d, 0.01).unwrap(), 459);
        let half = DiscountFunction::geometric(0.5).unwrap();
        assert_eq!(effective_horizon(&half, 0.25).unwrap(), 2);
    }

    #[test]
    fn horizon_rejects_bad_epsilon() {
        let d = DiscountFunction::default();
        assert!(matches!(effective_horizon(&d, 0.0), Err(DomainError::Epsilon(_))));
        assert!(matches!(effective_horizon(&d, 1.5), Err(DomainError::Epsilon(_))));
        assert!(DiscountFunction::geometric(1.0).is_err());
    }

    #[test]
    fn returns() {
        let d = DiscountFunction::geometric(0.99).unwrap();
        assert_eq!(discounted_return(&[], &d), 0.0);
        assert_eq!(discounted_return(&[100.0], &d), 100.0);
        let half = DiscountFunction::geometric(0.5).unwrap();
        assert!((discounted_return(&[1.0, 1.0, 1.0], &half) - 1.75).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert!((entropy(&[0.25; 4]).unwrap() - 1.386_294_361_119_890_6).abs() < 1e-12);
        assert!(matches!(entropy(&[-0.1, 1.1]), Err(DomainError::NegativeProbability(_))));
        assert!(matches!(entropy(&[0.5, 0.4]), Err(DomainError::Unnormalized(_))));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        assert!(kl_divergence(&[-1.0, 2.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn utility_kinds() {
        let e = Percept::new(0, 7.0);
        let ext = UtilityFunction::new(UtilityKind::ExtrinsicReward, -10.0, 100.0).unwrap();
        assert_eq!(ext.evaluate(&e, 0.3, 0.0), 7.0);
        let sq = UtilityFunction::new(UtilityKind::Square, -1.0, 0.0).unwrap();
        assert_eq!(sq.evaluate(&e, 0.25, 0.0), -0.25);
        let sh = UtilityFunction::new(UtilityKind::Shannon, 0.0, 1e6f64.ln()).unwrap();
        assert!((sh.evaluate(&e, 0.25, 0.0) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(sh.evaluate(&e, 0.0, 0.0), 1e6f64.ln());
        let kl = UtilityFunction::new(UtilityKind::KlInformationGain, 0.0, 1.0).unwrap();
        assert_eq!(kl.evaluate(&e, 0.5, 2f64.ln()), 2f64.ln());
        assert_eq!(kl.evaluate(&e, 0.5, 5.0), 1.0);
        assert!(UtilityFunction::new(UtilityKind::Square, 0.0, 0.0).is_err());
    }

    fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-9).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn entropy_bounded_by_uniform(p in distribution(6)) {
            let h = entropy(&p).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= 6f64.ln() + 1e-12);
        }

        #[test]
        fn kl_non_negative((p, q) in (distribution(5), distribution(5))) {
            let d = kl_divergence(&p, &q).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        }

        #[test]
        fn horizon_monotone(g in 0.05f64..0.999, e1 in 0.001f64..1.0, e2 in 0.001f64..1.0) {
            let d = DiscountFunction::geometric(g).unwrap();
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(effective_horizon(&d, lo).unwrap() >= effective_horizon(&d, hi).unwrap());
            prop_assert_eq!(effective_horizon(&d, e1).unwrap(), iterative_horizon(g, e1));
        }
    }
}
