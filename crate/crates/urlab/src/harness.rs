//! Experiment orchestration: seeded multi-run simulation, score series,
//! summary statistics, comparisons and file outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::agents::{Agent, AgentConfig, AgentError, AgentType, ModelClass};
use crate::gridworld::{
    generate_spec, GridError, GridGeneratorConfig, GridSpec, Gridworld, Tile, DEFAULT_NOISE_ALPHABET,
};
use crate::models::PosteriorSnapshot;
use crate::primitives::Action;

/// A 10x10 maze with a single dispenser in the far corner region.
pub const MAZE_10: [&str; 10] = [
    "...#......",
    ".#.#.####.",
    ".#...#....",
    ".####.#.##",
    "......#...",
    "##.##.###.",
    "...#...#..",
    ".#.#.#.#.#",
    ".#...#....",
    ".###..##D.",
];

/// [`MAZE_10`] with a noise tile four steps from the start.
pub const NOISY_MAZE_10: [&str; 10] = [
    "...#......",
    ".#.#.####.",
    ".#N..#....",
    ".####.#.##",
    "......#...",
    "##.##.###.",
    "...#...#..",
    ".#.#.#.#.#",
    ".#...#....",
    ".###..##D.",
];

/// Fraction of cycles at the end of a run that make up the final window.
pub const FINAL_WINDOW: f64 = 0.1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Agent(AgentError::Config(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinLayout {
    /// [`MAZE_10`].
    Maze,
    /// [`NOISY_MAZE_10`].
    NoisyMaze,
}

impl BuiltinLayout {
    pub fn rows(self) -> Vec<String> {
        match self {
            BuiltinLayout::Maze => MAZE_10.iter().map(|r| r.to_string()).collect(),
            BuiltinLayout::NoisyMaze => NOISY_MAZE_10.iter().map(|r| r.to_string()).collect(),
        }
    }
}

fn default_size() -> usize {
    10
}
fn default_thetas() -> Vec<f64> {
    vec![0.75]
}
fn default_alphabet() -> u32 {
    DEFAULT_NOISE_ALPHABET
}

/// Where the gridworld comes from: a built-in maze, explicit layout rows,
/// or random generation (one grid per run, drawn from the run's seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<BuiltinLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Vec<String>>,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub wall_density: f64,
    #[serde(default = "default_thetas")]
    pub thetas: Vec<f64>,
    #[serde(default = "default_alphabet")]
    pub noise_alphabet: u32,
    #[serde(default)]
    pub noise_tiles: usize,
    /// Move the layout's dispensers to random reachable tiles, drawn per run.
    #[serde(default)]
    pub random_dispensers: bool,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            builtin: Some(BuiltinLayout::Maze),
            layout: None,
            size: default_size(),
            wall_density: 0.0,
            thetas: default_thetas(),
            noise_alphabet: default_alphabet(),
            noise_tiles: 0,
            random_dispensers: false,
        }
    }
}

impl EnvironmentConfig {
    fn generator(&self) -> GridGeneratorConfig {
        GridGeneratorConfig {
            size: self.size,
            layout: self.layout.clone(),
            wall_density: self.wall_density,
            thetas: self.thetas.clone(),
            noise_alphabet: self.noise_alphabet,
            noise_tiles: self.noise_tiles,
        }
    }
}

/// What the per-cycle score measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    /// Exploration for knowledge-seeking agents, reward otherwise.
    #[default]
    Auto,
    Reward,
    Exploration,
}

impl ScoreKind {
    pub fn resolve(self, agent: AgentType) -> ScoreKind {
        match self {
            ScoreKind::Auto if agent.is_knowledge_seeking() => ScoreKind::Exploration,
            ScoreKind::Auto => ScoreKind::Reward,
            k => k,
        }
    }
}

/// Named parameter sets. `smoke` is a desk-scale reduction of `full`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Smoke,
    Full,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        match s {
            "smoke" => Some(Preset::Smoke),
            "full" => Some(Preset::Full),
            _ => None,
        }
    }

    /// (runs, cycles, samples, horizon)
    pub fn parameters(self) -> (usize, usize, usize, usize) {
        match self {
            Preset::Smoke => (10, 300, 200, 4),
            Preset::Full => (50, 500, 600, 6),
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let (runs, cycles, samples, horizon) = self.parameters();
        cfg.runs = runs;
        cfg.cycles = cycles;
        cfg.agent.samples = Some(samples);
        cfg.agent.time_budget_ms = None;
        cfg.agent.horizon = horizon;
        cfg.agent.gamma = 0.99;
    }
}

fn default_runs() -> usize {
    Preset::Smoke.parameters().0
}
fn default_cycles() -> usize {
    Preset::Smoke.parameters().1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub environment: EnvironmentConfig,
    pub agent: AgentConfig,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Run `i` is seeded with `seed + i`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub score: ScoreKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Dump every planner simulation to `search_trace_<run>.jsonl`.
    #[serde(default)]
    pub search_trace: bool,
}

impl ExperimentConfig {
    pub fn new(agent: AgentConfig) -> Self {
        Self {
            label: String::new(),
            environment: EnvironmentConfig::default(),
            agent,
            cycles: default_cycles(),
            runs: default_runs(),
            seed: 0,
            score: ScoreKind::Auto,
            output: None,
            search_trace: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Fills in derived defaults and checks everything that can be checked
    /// without running: the built-in layout becomes explicit rows, the
    /// label is filled, and an agent is built once against the environment.
    pub fn resolve(mut self) -> Result<Self, HarnessError> {
        if self.cycles == 0 || self.runs == 0 {
            return Err(HarnessError::Config("cycles and runs must be at least 1".into()));
        }
        if let Some(b) = self.environment.builtin.take() {
            if self.environment.layout.is_some() {
                return Err(HarnessError::Config("environment: give builtin or layout, not both".into()));
            }
            self.environment.layout = Some(b.rows());
        }
        if let Some(rows) = &self.environment.layout {
            self.environment.size = rows.len();
        }
        self.score = self.score.resolve(self.agent.kind);
        if self.label.is_empty() {
            let model = match (self.agent.kind, self.agent.model) {
                (AgentType::Aimu, _) => "truth",
                (_, ModelClass::Mixture) => "mixture",
                (_, ModelClass::Dirichlet) => "dirichlet",
            };
            self.label = format!("{}-{}", self.agent.kind, model);
        }
        if self.label.contains(['\n', '\r']) {
            return Err(HarnessError::Config("label must be a single line".into()));
        }
        let spec = environment_for_run(&self, 0).map_err(|e| HarnessError::Config(format!("environment: {e}")))?;
        Agent::new(&self.agent, &Arc::new(spec)).map_err(|e| HarnessError::Config(format!("agent: {e}")))?;
        Ok(self)
    }
}

fn run_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let env = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = ChaCha8Rng::seed_from_u64(seed);
    agent.set_stream(1);
    (env, agent)
}

/// The gridworld for run `run`. Explicit layouts are shared; generated
/// grids are drawn from a stream reserved for generation.
pub fn environment_for_run(cfg: &ExperimentConfig, run: usize) -> Result<GridSpec, GridError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(run as u64));
    rng.set_stream(2);
    let spec = generate_spec(&cfg.environment.generator(), &mut rng)?;
    if !cfg.environment.random_dispensers {
        return Ok(spec);
    }
    let reachable = spec.reachable();
    let mut tiles: Vec<Tile> =
        spec.tiles().iter().map(|t| if matches!(t, Tile::Dispenser { .. }) { Tile::Empty } else { *t }).collect();
    let mut candidates: Vec<usize> =
        (1..tiles.len()).filter(|&i| reachable[i] && tiles[i] == Tile::Empty).collect();
    for (_, theta) in spec.dispensers() {
        if candidates.is_empty() {
            return Err(GridError::Invalid("too few free tiles for the dispensers".into()));
        }
        let k = rng.gen_range(0..candidates.len());
        tiles[candidates.swap_remove(k)] = Tile::Dispenser { theta };
    }
    GridSpec::new(spec.size(), tiles)
}

/// One cycle of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub run: usize,
    pub t: usize,
    pub score: f64,
    pub cum_avg: f64,
    /// Percentage of reachable tiles visited so far.
    pub explored_frac: f64,
    pub mode: String,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub run: usize,
    pub seed: u64,
    pub records: Vec<CycleRecord>,
    pub posterior: PosteriorSnapshot,
}

impl RunTrace {
    fn window(&self, f: impl Fn(&CycleRecord) -> f64) -> f64 {
        let n = self.records.len();
        let w = final_window_len(n);
        self.records[n - w..].iter().map(f).sum::<f64>() / w as f64
    }
}

/// Number of cycles in the final window: the last tenth, at least one.
pub fn final_window_len(cycles: usize) -> usize {
    ((cycles as f64 * FINAL_WINDOW).ceil() as usize).clamp(1, cycles.max(1))
}

/// Per-run means over the final window. `cum_avg` is the mean of the
/// plotted curve (the run's cumulative average score); the other fields
/// average the instantaneous series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalWindow {
    pub label: String,
    pub run: usize,
    pub cum_avg: f64,
    pub score: f64,
    pub reward: f64,
    pub explored_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    pub label: String,
    pub cycles: usize,
    pub runs: usize,
    /// `mean[t-1]` is the score averaged over runs and the first `t` cycles.
    pub mean: Vec<f64>,
    /// Standard deviation across runs of each run's cumulative average.
    pub sd: Vec<f64>,
    pub final_explored_mean: f64,
    pub final_explored_sd: f64,
    pub final_window: Vec<FinalWindow>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SummaryStats {
    pub fn from_traces(label: &str, traces: &[RunTrace]) -> Self {
        let runs = traces.len();
        let cycles = traces.first().map_or(0, |t| t.records.len());
        let mut mean = Vec::with_capacity(cycles);
        let mut sd = Vec::with_capacity(cycles);
        let mut sums = vec![0.0; runs];
        for t in 0..cycles {
            let mut total = 0.0;
            let mut cum = Vec::with_capacity(runs);
            for (i, trace) in traces.iter().enumerate() {
                sums[i] += trace.records[t].score;
                total += sums[i];
                cum.push(sums[i] / (t + 1) as f64);
            }
            mean.push(total / ((t + 1) * runs) as f64);
            sd.push(mean_sd(&cum).1);
        }
        let finals: Vec<f64> = traces.iter().map(|t| t.records.last().map_or(0.0, |r| r.explored_frac)).collect();
        let (final_explored_mean, final_explored_sd) = mean_sd(&finals);
        let final_window = traces
            .iter()
            .map(|t| FinalWindow {
                label: label.to_string(),
                run: t.run,
                cum_avg: t.window(|r| r.cum_avg),
                score: t.window(|r| r.score),
                reward: t.window(|r| r.reward),
                explored_frac: t.window(|r| r.explored_frac),
            })
            .collect();
        Self { label: label.to_string(), cycles, runs, mean, sd, final_explored_mean, final_explored_sd, final_window }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub summary: SummaryStats,
    pub traces: Vec<RunTrace>,
}

struct SearchTraceSink {
    path: PathBuf,
    out: BufWriter<File>,
}

/// Runs one simulation: `cfg.cycles` agent-environment interaction cycles.
pub fn run_single(cfg: &ExperimentConfig, run: usize, trace_dir: Option<&Path>) -> Result<RunTrace, HarnessError> {
    let seed = cfg.seed.wrapping_add(run as u64);
    let spec = Arc::new(environment_for_run(cfg, run)?);
    let (mut env_rng, mut agent_rng) = run_rngs(seed);
    let mut agent = Agent::new(&cfg.agent, &spec)?;
    let mut env = Gridworld::new(spec.clone());
    let mut sink = match trace_dir.filter(|_| cfg.search_trace) {
        Some(dir) => {
            agent.set_planner_trace(true);
            let path = dir.join(format!("search_trace_{run}.jsonl"));
            let out = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
            Some(SearchTraceSink { path, out })
        }
        None => None,
    };
    let score_kind = cfg.score.resolve(cfg.agent.kind);
    let reachable = spec.reachable_count() as f64;
    let mut visited = vec![false; spec.num_tiles()];
    visited[spec.index(env.state().pos)] = true;
    let mut visited_count = 1usize;
    let mut total = 0.0;
    let mut records = Vec::with_capacity(cfg.cycles);
    for t in 1..=cfg.cycles {
        let action: Action = agent.act(&mut agent_rng)?;
        let mode = agent.mode().to_string();
        if let Some(sink) = sink.as_mut() {
            for rec in agent.take_trace() {
                let line = serde_json::json!({
                    "run": run, "t": t, "simulation": rec.simulation,
                    "actions": rec.actions, "percepts": rec.percepts, "value": rec.value,
                });
                writeln!(sink.out, "{line}").map_err(io_err(&sink.path))?;
            }
        }
        let percept = env.step(action, &mut env_rng);
        agent.update(action, &percept)?;
        let i = spec.index(env.state().pos);
        if !visited[i] {
            visited[i] = true;
            visited_count += 1;
        }
        let explored = 100.0 * visited_count as f64 / reachable;
        let score = match score_kind {
            ScoreKind::Exploration => explored,
            _ => percept.reward,
        };
        total += score;
        records.push(CycleRecord {
            run,
            t,
            score,
            cum_avg: total / t as f64,
            explored_frac: explored,
            mode,
            reward: percept.reward,
        });
    }
    if let Some(mut sink) = sink {
        sink.out.flush().map_err(io_err(&sink.path))?;
    }
    Ok(RunTrace { run, seed, records, posterior: agent.snapshot() })
}

/// Runs all `cfg.runs` simulations, on up to `parallel` threads, and writes
/// the outputs if `cfg.output` is set. Results do not depend on `parallel`.
pub fn run_experiment(cfg: ExperimentConfig, parallel: Option<usize>) -> Result<ExperimentResult, HarnessError> {
    let cfg = cfg.resolve()?;
    if let Some(dir) = &cfg.output {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let trace_dir = cfg.output.as_deref();
    let work = || (0..cfg.runs).into_par_iter().map(|i| run_single(&cfg, i, trace_dir)).collect::<Result<Vec<_>, _>>();
    let traces = match parallel {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let summary = SummaryStats::from_traces(&cfg.label, &traces);
    let result = ExperimentResult { config: cfg, summary, traces };
    if let Some(dir) = &result.config.output {
        emit_outputs(&result, dir)?;
    }
    Ok(result)
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    label: &'a str,
    t: usize,
    mean: f64,
    sd: f64,
}

#[derive(Deserialize)]
struct SummaryRowOwned {
    label: String,
    t: usize,
    mean: f64,
    sd: f64,
}

/// Writes `summary.csv`, `final_window.csv`, one `trace_<run>.csv` and
/// `posterior_final_<run>.json` per run, and `config.resolved.json`.
pub fn emit_outputs(result: &ExperimentResult, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let s = &result.summary;

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for t in 0..s.cycles {
        w.serialize(SummaryRow { label: &s.label, t: t + 1, mean: s.mean[t], sd: s.sd[t] }).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("final_window.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for f in &s.final_window {
        w.serialize(f).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    for trace in &result.traces {
        let path = dir.join(format!("trace_{}.csv", trace.run));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        for r in &trace.records {
            w.serialize(r).map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;

        let path = dir.join(format!("posterior_final_{}.json", trace.run));
        let json = serde_json::to_string_pretty(&trace.posterior).expect("snapshot serializes");
        fs::write(&path, json + "\n").map_err(io_err(&path))?;
    }

    let path = dir.join("config.resolved.json");
    let json = serde_json::to_string_pretty(&result.config).expect("config serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(())
}

/// Two-sample Welch t-test, two-sided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchTest {
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

impl WelchTest {
    /// True when `a` has the larger mean and the difference is significant at `alpha`.
    pub fn a_greater(&self, alpha: f64) -> bool {
        self.mean_a > self.mean_b && self.p_value < alpha
    }
}

pub fn welch_test(a: &[f64], b: &[f64]) -> WelchTest {
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let va = sa * sa / na;
    let vb = sb * sb / nb;
    let se2 = va + vb;
    if se2 == 0.0 || a.len() < 2 || b.len() < 2 {
        let p_value = if ma == mb { 1.0 } else if se2 == 0.0 { 0.0 } else { f64::NAN };
        let t = if ma == mb { 0.0 } else { (ma - mb).signum() * f64::INFINITY };
        return WelchTest { mean_a: ma, mean_b: mb, t, df: f64::NAN, p_value };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    WelchTest { mean_a: ma, mean_b: mb, t, df, p_value }
}

/// One experiment as seen by [`compare`]: its curve and final-window scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub final_scores: Vec<f64>,
}

impl From<&SummaryStats> for Curve {
    fn from(s: &SummaryStats) -> Self {
        Self {
            label: s.label.clone(),
            mean: s.mean.clone(),
            sd: s.sd.clone(),
            final_scores: s.final_window.iter().map(|f| f.cum_avg).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub test: WelchTest,
}

#[derive(Serialize)]
struct TestRow<'a> {
    a: &'a str,
    b: &'a str,
    mean_a: f64,
    mean_b: f64,
    t: f64,
    df: f64,
    p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub cycles: usize,
    pub curves: Vec<Curve>,
    pub tests: Vec<PairwiseTest>,
}

impl Comparison {
    /// Long-format table, one row per experiment and cycle.
    pub fn write_table<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for c in &self.curves {
            for t in 0..self.cycles {
                w.serialize(SummaryRow { label: &c.label, t: t + 1, mean: c.mean[t], sd: c.sd[t] })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_tests<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.tests {
            let t = &p.test;
            w.serialize(TestRow {
                a: &p.a,
                b: &p.b,
                mean_a: t.mean_a,
                mean_b: t.mean_b,
                t: t.t,
                df: t.df,
                p_value: t.p_value,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Compares experiments pairwise on the final-window means of their curves.
pub fn compare(curves: Vec<Curve>) -> Result<Comparison, HarnessError> {
    let cycles = curves.first().map_or(0, |c| c.mean.len());
    if let Some(c) = curves.iter().find(|c| c.mean.len() != cycles) {
        return Err(HarnessError::Config(format!(
            "cannot compare {} cycles of {} with {} cycles",
            c.mean.len(),
            c.label,
            cycles
        )));
    }
    let mut tests = Vec::new();
    for i in 0..curves.len() {
        for j in i + 1..curves.len() {
            tests.push(PairwiseTest {
                a: curves[i].label.clone(),
                b: curves[j].label.clone(),
                test: welch_test(&curves[i].final_scores, &curves[j].final_scores),
            });
        }
    }
    Ok(Comparison { cycles, curves, tests })
}

/// Reads a `summary.csv` and the `final_window.csv` next to it.
pub fn load_curve(summary: &Path) -> Result<Curve, HarnessError> {
    let mut r = csv::Reader::from_path(summary).map_err(csv_err(summary))?;
    let mut label = None;
    let mut mean = Vec::new();
    let mut sd = Vec::new();
    for row in r.deserialize::<SummaryRowOwned>() {
        let row = row.map_err(csv_err(summary))?;
        if row.t != mean.len() + 1 {
            return Err(HarnessError::Config(format!("{}: cycle {} out of order", summary.display(), row.t)));
        }
        if label.get_or_insert_with(|| row.label.clone()) != &row.label {
            return Err(HarnessError::Config(format!("{}: more than one label", summary.display())));
        }
        mean.push(row.mean);
        sd.push(row.sd);
    }
    let label = label.ok_or_else(|| HarnessError::Config(format!("{}: empty summary", summary.display())))?;
    let finals = summary.with_file_name("final_window.csv");
    let mut final_scores = Vec::new();
    if finals.exists() {
        let mut r = csv::Reader::from_path(&finals).map_err(csv_err(&finals))?;
        for row in r.deserialize::<FinalWindow>() {
            final_scores.push(row.map_err(csv_err(&finals))?.cum_avg);
        }
    }
    Ok(Curve { label, mean, sd, final_scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::AgentConfig;

    fn quick(kind: AgentType) -> ExperimentConfig {
        let mut agent = AgentConfig::new(kind);
        agent.samples = Some(50);
        agent.horizon = 3;
        ExperimentConfig { runs: 2, cycles: 10, seed: 7, ..ExperimentConfig::new(agent) }
    }

    #[test]
    fn builtin_maze_is_connected() {
        let spec = GridSpec::from_rows(&MAZE_10, &[0.75], 16).unwrap();
        let open = spec.tiles().iter().filter(|t| !t.is_wall()).count();
        assert_eq!(spec.reachable_count(), open);
        assert_eq!(spec.dispensers().len(), 1);
    }

    #[test]
    fn resolve_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"agent": {"type": "ksa-kl", "model": "dirichlet"}}"#)
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(cfg.label, "ksa-kl-dirichlet");
        assert_eq!(cfg.score, ScoreKind::Exploration);
        assert_eq!(cfg.environment.layout.as_ref().unwrap().len(), 10);
        assert!(cfg.environment.builtin.is_none());
        let again = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap().resolve().unwrap();
        assert_eq!(again, cfg);
        assert!(ExperimentConfig::from_json(r#"{"agent": {"type": "aixi"}, "cycles": 0}"#).unwrap().resolve().is_err());
        let err = ExperimentConfig::from_json(r#"{"agent": {"type": "aixi"}, "cyclez": 3}"#).unwrap_err();
        assert!(err.to_string().contains("cyclez"));
    }

    #[test]
    fn trace_contract() {
        let result = run_experiment(quick(AgentType::Random), None).unwrap();
        assert_eq!(result.traces.len(), 2);
        for trace in &result.traces {
            assert_eq!(trace.records.len(), 10);
            let mut sum = 0.0;
            let mut last = 0.0;
            for r in &trace.records {
                sum += r.score;
                assert!((r.cum_avg - sum / r.t as f64).abs() < 1e-12);
                assert!(r.explored_frac >= last);
                last = r.explored_frac;
            }
        }
        for t in 0..10 {
            let raw: f64 = result.traces.iter().flat_map(|tr| &tr.records[..=t]).map(|r| r.score).sum();
            assert!((raw / ((t + 1) * 2) as f64 - result.summary.mean[t]).abs() < 1e-9);
        }
    }

    #[test]
    fn exploration_score_starts_from_start_tile() {
        let mut cfg = quick(AgentType::KsaKl);
        cfg.environment = EnvironmentConfig { builtin: None, layout: Some(vec!["..".into(), ".D".into()]), ..Default::default() };
        cfg.cycles = 1;
        let result = run_experiment(cfg, None).unwrap();
        let r = &result.traces[0].records[0];
        assert!(r.explored_frac == 25.0 || r.explored_frac == 50.0);
    }

    #[test]
    fn seed_isolation_and_parallel_equivalence() {
        let base = run_experiment(quick(AgentType::Aixi), Some(1)).unwrap();
        let par = run_experiment(quick(AgentType::Aixi), Some(2)).unwrap();
        assert_eq!(base.traces, par.traces);
        let mut shifted = quick(AgentType::Aixi);
        shifted.seed = 8;
        shifted.runs = 1;
        let other = run_experiment(shifted, None).unwrap();
        assert_eq!(other.traces[0].records, base.traces[1].records.iter().map(|r| CycleRecord { run: 0, ..r.clone() }).collect::<Vec<_>>());
    }

    #[test]
    fn welch_matches_reference() {
        // Reference: scipy.stats.ttest_ind(a, b, equal_var=False).
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0];
        let w = welch_test(&a, &b);
        assert!((w.t - -2.2514363231593695).abs() < 1e-12);
        assert!((w.df - 5.520787746170677).abs() < 1e-9);
        assert!((w.p_value - 0.06913359319239236).abs() < 1e-9);
        let same = welch_test(&a, &a);
        assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn compare_rejects_mismatched_lengths() {
        let c = |n: usize| Curve { label: format!("c{n}"), mean: vec![0.0; n], sd: vec![0.0; n], final_scores: vec![1.0, 2.0] };
        assert!(compare(vec![c(3), c(4)]).is_err());
        let cmp = compare(vec![c(3), c(3)]).unwrap();
        assert_eq!(cmp.tests[0].test.t, 0.0);
        let mut out = Vec::new();
        cmp.write_tests(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "a,b,mean_a,mean_b,t,df,p_value");
    }

    #[test]
    fn outputs_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick(AgentType::Aixi);
        cfg.runs = 1;
        cfg.output = Some(dir.path().join("a"));
        run_experiment(cfg.clone(), None).unwrap();
        cfg.output = Some(dir.path().join("b"));
        run_experiment(cfg, None).unwrap();
        for f in ["summary.csv", "trace_0.csv", "posterior_final_0.json", "final_window.csv"] {
            let a = fs::read(dir.path().join("a").join(f)).unwrap();
            let b = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let trace = fs::read_to_string(dir.path().join("a/trace_0.csv")).unwrap();
        assert_eq!(trace.lines().count(), 11);
        assert_eq!(trace.lines().next().unwrap(), "run,t,score,cum_avg,explored_frac,mode,reward");
        let curve = load_curve(&dir.path().join("a/summary.csv")).unwrap();
        assert_eq!(curve.mean.len(), 10);
        assert_eq!(curve.final_scores.len(), 1);
    }
}
