//! Brute-force reference checks for the Bayes update, information gain,
//! the planner and the effective horizon.
//!
//! Each check recomputes its quantity from first principles and reports the
//! worst discrepancy against the incremental implementation.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::gridworld::{GridSpec, Pos, NUM_ACTIONS, REWARD_BOUNDS};
use crate::models::{EnvironmentModel, GridModel, MixtureModel, StationaryModel};
use crate::planner::{expectimax_exact, normalize_utility, search, PlannerConfig};
use crate::primitives::{
    effective_horizon, kl_divergence, probability_of, Action, DiscountFunction, Percept, UtilityFunction, UtilityKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Bayes,
    InfoGain,
    Planner,
    Horizon,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Suite> {
        Some(match s {
            "bayes" => Suite::Bayes,
            "info-gain" => Suite::InfoGain,
            "planner" => Suite::Planner,
            "horizon" => Suite::Horizon,
            "all" => Suite::All,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} cases, worst {:.3e} (tolerance {:.1e}){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance,
            if self.detail.is_empty() { String::new() } else { format!("; {}", self.detail) }
        )
    }
}

/// 3x3 location class used by the Bayes check.
pub const BAYES_LAYOUT: &str = "...\n.#.\n..D\n";

/// Tracks one hypothesis through a history with the raw gridworld dynamics.
fn replay_likelihood(spec: &GridSpec, steps: &[(Action, Percept)]) -> f64 {
    let mut pos = Pos::START;
    let mut likelihood = 1.0;
    for (a, e) in steps {
        likelihood *= probability_of(&spec.percept_distribution(pos, *a), e);
        if likelihood == 0.0 {
            return 0.0;
        }
        pos = spec.destination(pos, *a).0;
    }
    likelihood
}

/// Compares incremental mixture posteriors against batch posteriors
/// recomputed from the full history, for every action/percept sequence of
/// length up to `max_len` with positive probability.
pub fn check_bayes(max_len: usize, theta: f64) -> CheckReport {
    let layout = GridSpec::parse(BAYES_LAYOUT, &[theta], 16).expect("valid layout");
    let mixture = MixtureModel::dispenser_locations(&layout, theta).expect("valid class");
    let specs: Vec<Arc<GridSpec>> = mixture.components().iter().map(|c| c.spec().clone()).collect();
    let prior = mixture.weights().to_vec();
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    let mut history = Vec::new();
    fn walk(
        m: &MixtureModel<GridModel>,
        history: &mut Vec<(Action, Percept)>,
        depth: usize,
        specs: &[Arc<GridSpec>],
        prior: &[f64],
        worst: &mut f64,
        cases: &mut usize,
    ) {
        if !history.is_empty() {
            let joint: Vec<f64> =
                specs.iter().zip(prior).map(|(s, w)| w * replay_likelihood(s, history)).collect();
            let z: f64 = joint.iter().sum();
            for (i, j) in joint.iter().enumerate() {
                *worst = worst.max((j / z - m.weights()[i]).abs());
            }
            *cases += 1;
        }
        if depth == 0 {
            return;
        }
        for a in 0..NUM_ACTIONS {
            for (e, p) in m.predict(Action(a)) {
                if p <= 0.0 {
                    continue;
                }
                let mut next = m.clone();
                next.update(Action(a), &e).expect("positive predictive probability");
                history.push((Action(a), e));
                walk(&next, history, depth - 1, specs, prior, worst, cases);
                history.pop();
            }
        }
    }
    walk(&mixture, &mut history, max_len, &specs, &prior, &mut worst, &mut cases);
    let tolerance = 1e-9;
    CheckReport {
        name: "bayes".into(),
        passed: worst <= tolerance,
        cases,
        worst,
        tolerance,
        detail: format!("9 hypotheses, sequences up to length {max_len}"),
    }
}

fn random_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    // Bounded away from zero so every percept stays possible.
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

/// Checks `sum_e xi(e) IG(e) = sum_nu w_nu KL(nu || xi)` on random classes
/// of two and three hypotheses over a single action.
pub fn check_info_gain(instances: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let hypotheses = 2 + i % 2;
        let k = rng.gen_range(2..=5);
        let percepts: Vec<Percept> = (0..k).map(|o| Percept::new(o as u32, 0.0)).collect();
        let likelihoods: Vec<Vec<f64>> = (0..hypotheses).map(|_| random_simplex(&mut rng, k)).collect();
        let prior = random_simplex(&mut rng, hypotheses);
        let components: Vec<StationaryModel> = likelihoods
            .iter()
            .map(|l| StationaryModel::new(vec![percepts.iter().copied().zip(l.iter().copied()).collect()]).unwrap())
            .collect();
        let mixture = MixtureModel::new(components, prior.clone(), 1).unwrap();
        let xi: Vec<f64> = (0..k).map(|e| prior.iter().zip(&likelihoods).map(|(w, l)| w * l[e]).sum()).collect();
        let mut lhs = 0.0;
        for (e, percept) in percepts.iter().enumerate() {
            let mut m = mixture.clone();
            m.update(Action(0), percept).unwrap();
            lhs += xi[e] * m.info_gain_of_last_update().unwrap();
        }
        let rhs: f64 = prior.iter().zip(&likelihoods).map(|(w, l)| w * kl_divergence(l, &xi).unwrap()).sum();
        worst = worst.max((lhs - rhs).abs());
    }
    let tolerance = 1e-6;
    CheckReport {
        name: "info-gain".into(),
        passed: worst <= tolerance,
        cases: instances,
        worst,
        tolerance,
        detail: String::new(),
    }
}

/// A small planning problem with a known exact solution.
pub struct PlannerInstance {
    pub name: &'static str,
    pub horizon: usize,
    pub utility: UtilityFunction,
    pub model: InstanceModel,
}

pub enum InstanceModel {
    Bandit(StationaryModel),
    Grid(GridModel),
}

impl PlannerInstance {
    /// Exact root action values.
    pub fn exact(&self, discount: &DiscountFunction) -> Vec<f64> {
        let cap = 10_000_000;
        match &self.model {
            InstanceModel::Bandit(m) => expectimax_exact(&mut m.clone(), self.horizon, &self.utility, discount, cap),
            InstanceModel::Grid(m) => expectimax_exact(&mut m.clone(), self.horizon, &self.utility, discount, cap),
        }
        .expect("small instance")
    }

    /// Root value estimates and chosen action from one search.
    pub fn search<R: Rng>(&self, cfg: &PlannerConfig, rng: &mut R) -> (Vec<Option<f64>>, Action) {
        let r = match &self.model {
            InstanceModel::Bandit(m) => search(&mut m.clone(), cfg, &self.utility, rng),
            InstanceModel::Grid(m) => search(&mut m.clone(), cfg, &self.utility, rng),
        }
        .expect("valid search");
        (r.values, r.action)
    }
}

/// The fixed planner benchmark: Bernoulli bandits and a known 3x3 grid.
pub fn planner_instances() -> Vec<PlannerInstance> {
    let unit = UtilityFunction::new(UtilityKind::ExtrinsicReward, 0.0, 1.0).unwrap();
    let reward = UtilityFunction::new(UtilityKind::ExtrinsicReward, REWARD_BOUNDS.0, REWARD_BOUNDS.1).unwrap();
    let grid = |layout: &str, theta: f64, pos: Pos| {
        let spec = Arc::new(GridSpec::parse(layout, &[theta], 16).unwrap());
        InstanceModel::Grid(GridModel::at(spec, pos))
    };
    vec![
        PlannerInstance {
            name: "bandit-2",
            horizon: 1,
            utility: unit,
            model: InstanceModel::Bandit(StationaryModel::bernoulli(&[0.8, 0.2]).unwrap()),
        },
        PlannerInstance {
            name: "bandit-3",
            horizon: 2,
            utility: unit,
            model: InstanceModel::Bandit(StationaryModel::bernoulli(&[0.3, 0.6, 0.45]).unwrap()),
        },
        PlannerInstance {
            name: "grid-adjacent",
            horizon: 2,
            utility: reward,
            model: grid("...\n...\n..D\n", 1.0, Pos::new(1, 2)),
        },
        PlannerInstance {
            name: "grid-wall",
            horizon: 3,
            utility: reward,
            model: grid("...\n.#.\n..D\n", 0.5, Pos::new(2, 0)),
        },
        PlannerInstance {
            name: "grid-noise",
            horizon: 3,
            utility: reward,
            model: grid("..N\n...\nD..\n", 0.75, Pos::new(1, 1)),
        },
    ]
}

/// Runs ρUCT `searches` times per instance with `samples` simulations and
/// compares against exact expectimax: normalized value of the chosen action
/// within 0.05, and the chosen action an exact maximizer.
pub fn check_planner(samples: usize, searches_per_instance: usize, seed: u64) -> Vec<CheckReport> {
    let discount = DiscountFunction::default();
    let mut reports = Vec::new();
    for (k, inst) in planner_instances().iter().enumerate() {
        let exact = inst.exact(&discount);
        let best = exact.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let maximizers: Vec<usize> = (0..exact.len()).filter(|&a| best - exact[a] <= 1e-9).collect();
        let mut cfg = PlannerConfig::new(inst.horizon, samples);
        cfg.discount = discount;
        let norm = |v: f64| normalize_utility(v, &inst.utility, inst.horizon, &discount);
        let mut worst = 0.0f64;
        let mut hits = 0;
        for s in 0..searches_per_instance {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((k * 1_000_003 + s) as u64));
            let (values, action) = inst.search(&cfg, &mut rng);
            if maximizers.contains(&action.index()) {
                hits += 1;
            }
            let v = values[action.index()].unwrap_or(f64::NEG_INFINITY);
            worst = worst.max((norm(v) - norm(best)).abs());
        }
        let tolerance = 0.05;
        let needed = (searches_per_instance * 95).div_ceil(100);
        reports.push(CheckReport {
            name: format!("planner/{}", inst.name),
            passed: worst <= tolerance && hits >= needed,
            cases: searches_per_instance,
            worst,
            tolerance,
            detail: format!("argmax {hits}/{searches_per_instance}"),
        });
    }
    reports
}

/// Smallest `H` with `gamma^H <= epsilon`, by repeated multiplication.
pub fn iterative_horizon(gamma: f64, epsilon: f64) -> usize {
    let mut h = 0;
    let mut ratio = 1.0f64;
    while ratio > epsilon {
        ratio *= gamma;
        h += 1;
    }
    h
}

pub fn check_horizon(pairs: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let mut detail = String::new();
    for _ in 0..pairs {
        let gamma = rng.gen_range(0.5..0.999);
        let epsilon = rng.gen_range(1e-4..0.5);
        let d = DiscountFunction::geometric(gamma).unwrap();
        let closed = effective_horizon(&d, epsilon).unwrap();
        let iter = iterative_horizon(gamma, epsilon);
        if closed != iter {
            mismatches += 1;
            detail = format!("gamma {gamma} epsilon {epsilon}: {closed} vs {iter}");
        }
    }
    CheckReport {
        name: "horizon".into(),
        passed: mismatches == 0,
        cases: pairs,
        worst: mismatches as f64,
        tolerance: 0.0,
        detail,
    }
}

/// Runs a suite at its default size.
pub fn run_suite(suite: Suite) -> Vec<CheckReport> {
    match suite {
        Suite::Bayes => vec![check_bayes(6, 0.75)],
        Suite::InfoGain => vec![check_info_gain(1000, 1)],
        Suite::Planner => check_planner(100_000, 100, 1),
        Suite::Horizon => vec![check_horizon(100, 1)],
        Suite::All => [Suite::Bayes, Suite::InfoGain, Suite::Planner, Suite::Horizon]
            .into_iter()
            .flat_map(run_suite)
            .collect(),
    }
}
