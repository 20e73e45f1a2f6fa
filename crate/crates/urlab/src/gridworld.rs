//! Partially observable gridworld with walls, stochastic reward dispensers and
//! noise tiles.
//!
//! Coordinates are `(x, y)` with `x` the column and `y` the row, starting at
//! the top-left corner. Tiles are stored in row-major order, so tile `(x, y)`
//! has index `y * size + x`. Off-grid neighbours behave exactly like walls.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::{Action, Percept, PerceptDistribution};

pub const REWARD_EMPTY: f64 = -1.0;
pub const REWARD_WALL: f64 = -10.0;
pub const REWARD_DISPENSER: f64 = 100.0;
/// Reward range `[alpha, beta]` handed to agents as environment metadata.
pub const REWARD_BOUNDS: (f64, f64) = (REWARD_WALL, REWARD_DISPENSER);
pub const DEFAULT_NOISE_ALPHABET: u32 = 16;
pub const OBSERVATION_BITS: u32 = 4;
pub const NUM_ACTIONS: usize = 5;

pub const LEFT: Action = Action(0);
pub const RIGHT: Action = Action(1);
pub const UP: Action = Action(2);
pub const DOWN: Action = Action(3);
pub const NOOP: Action = Action(4);

/// Unit moves for left, right, up, down, no-op.
const OFFSETS: [(i64, i64); NUM_ACTIONS] = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("layout line {line}: {reason}")]
    Layout { line: usize, reason: String },
    #[error("position ({0}, {1}) is inside a wall")]
    InsideWall(usize, usize),
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("grid generation failed after {0} attempts: {1}")]
    Generation(usize, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Tile {
    Empty,
    Wall,
    Dispenser { theta: f64 },
    Noise { alphabet: u32 },
}

impl Tile {
    pub fn is_wall(&self) -> bool {
        matches!(self, Tile::Wall)
    }

    fn symbol(&self) -> char {
        match self {
            Tile::Empty => '.',
            Tile::Wall => '#',
            Tile::Dispenser { .. } => 'D',
            Tile::Noise { .. } => 'N',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub const START: Pos = Pos { x: 0, y: 0 };

    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Immutable description of an `N x N` gridworld. The agent always starts at `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    size: usize,
    tiles: Vec<Tile>,
}

impl GridSpec {
    pub fn new(size: usize, tiles: Vec<Tile>) -> Result<Self, GridError> {
        if size < 2 {
            return Err(GridError::Invalid(format!("side length {size} < 2")));
        }
        if tiles.len() != size * size {
            return Err(GridError::Invalid(format!(
                "expected {} tiles, got {}",
                size * size,
                tiles.len()
            )));
        }
        for t in &tiles {
            match *t {
                Tile::Dispenser { theta } if !(theta > 0.0 && theta <= 1.0) => {
                    return Err(GridError::Invalid(format!("dispenser theta {theta} outside (0, 1]")));
                }
                Tile::Noise { alphabet } if alphabet < 2 => {
                    return Err(GridError::Invalid(format!("noise alphabet {alphabet} < 2")));
                }
                _ => {}
            }
        }
        let spec = Self { size, tiles };
        if spec.tile(Pos::START).is_wall() {
            return Err(GridError::Invalid("start tile (0, 0) is a wall".into()));
        }
        if !spec.tiles.iter().any(|t| matches!(t, Tile::Dispenser { .. })) {
            return Err(GridError::Invalid("no dispenser".into()));
        }
        Ok(spec)
    }

    /// Builds a spec without validation, for hypothesis classes whose members
    /// may legitimately lack a reachable dispenser.
    pub(crate) fn new_unchecked(size: usize, tiles: Vec<Tile>) -> Self {
        Self { size, tiles }
    }

    /// Parses the text layout: one row per line, `.` empty, `#` wall,
    /// `D` dispenser, `N` noise. Dispenser payout probabilities are taken
    /// from `thetas` in row-major order.
    pub fn parse(layout: &str, thetas: &[f64], noise_alphabet: u32) -> Result<Self, GridError> {
        let rows: Vec<&str> = layout.strip_suffix('\n').unwrap_or(layout).split('\n').collect();
        Self::from_rows(&rows, thetas, noise_alphabet)
    }

    pub fn from_rows<S: AsRef<str>>(
        rows: &[S],
        thetas: &[f64],
        noise_alphabet: u32,
    ) -> Result<Self, GridError> {
        let size = rows.len();
        let mut tiles = Vec::with_capacity(size * size);
        let mut thetas = thetas.iter();
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            let line = i + 1;
            if row.ends_with(char::is_whitespace) {
                return Err(GridError::Layout { line, reason: "trailing whitespace".into() });
            }
            if row.chars().count() != size {
                return Err(GridError::Layout {
                    line,
                    reason: format!("expected {size} columns, got {}", row.chars().count()),
                });
            }
            for c in row.chars() {
                tiles.push(match c {
                    '.' => Tile::Empty,
                    '#' => Tile::Wall,
                    'N' => Tile::Noise { alphabet: noise_alphabet },
                    'D' => Tile::Dispenser {
                        theta: *thetas.next().ok_or_else(|| GridError::Layout {
                            line,
                            reason: "more dispensers than theta values".into(),
                        })?,
                    },
                    other => {
                        return Err(GridError::Layout { line, reason: format!("unknown tile {other:?}") })
                    }
                });
            }
        }
        if thetas.next().is_some() {
            return Err(GridError::Invalid("more theta values than dispensers".into()));
        }
        Self::new(size, tiles)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    pub fn index(&self, pos: Pos) -> usize {
        pos.y * self.size + pos.x
    }

    pub fn pos_of(&self, index: usize) -> Pos {
        Pos::new(index % self.size, index / self.size)
    }

    pub fn tile(&self, pos: Pos) -> Tile {
        self.tiles[self.index(pos)]
    }

    /// Neighbour of `pos` in the direction of `action`, or `None` off-grid.
    pub fn neighbour(&self, pos: Pos, action: Action) -> Option<Pos> {
        let (dx, dy) = OFFSETS[action.index()];
        let x = pos.x as i64 + dx;
        let y = pos.y as i64 + dy;
        let n = self.size as i64;
        (0..n).contains(&x).then_some(())?;
        (0..n).contains(&y).then_some(())?;
        Some(Pos::new(x as usize, y as usize))
    }

    fn blocked(&self, pos: Option<Pos>) -> bool {
        pos.map_or(true, |p| self.tile(p).is_wall())
    }

    /// Where `action` leads from `pos`, and whether the move bumped into a wall.
    pub fn destination(&self, pos: Pos, action: Action) -> (Pos, bool) {
        let target = self.neighbour(pos, action);
        if self.blocked(target) {
            (pos, true)
        } else {
            (target.unwrap_or(pos), false)
        }
    }

    /// Four-bit wall adjacency vector: bit `i` is set iff the neighbour in
    /// direction `i` (left, right, up, down) is a wall or off-grid.
    pub fn observe_bits(&self, pos: Pos) -> Result<u32, GridError> {
        if self.tile(pos).is_wall() {
            return Err(GridError::InsideWall(pos.x, pos.y));
        }
        Ok(self.wall_bits(pos))
    }

    pub(crate) fn wall_bits(&self, pos: Pos) -> u32 {
        (0..4).fold(0, |bits, dir| {
            if self.blocked(self.neighbour(pos, Action(dir))) {
                bits | (1 << dir)
            } else {
                bits
            }
        })
    }

    /// Non-wall tiles reachable from the start by cardinal moves.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.tiles.len()];
        let mut queue = VecDeque::from([Pos::START]);
        seen[self.index(Pos::START)] = true;
        while let Some(p) = queue.pop_front() {
            for dir in 0..4 {
                if let Some(q) = self.neighbour(p, Action(dir)) {
                    let i = self.index(q);
                    if !seen[i] && !self.tile(q).is_wall() {
                        seen[i] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        seen
    }

    pub fn reachable_count(&self) -> usize {
        self.reachable().iter().filter(|&&r| r).count()
    }

    /// Dispenser tiles as (index, theta) in row-major order.
    pub fn dispensers(&self) -> Vec<(usize, f64)> {
        self.tiles
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match t {
                Tile::Dispenser { theta } => Some((i, *theta)),
                _ => None,
            })
            .collect()
    }

    /// Layout rows in the text format accepted by [`GridSpec::parse`].
    pub fn layout_rows(&self) -> Vec<String> {
        self.tiles
            .chunks(self.size)
            .map(|row| row.iter().map(Tile::symbol).collect())
            .collect()
    }

    /// Exact distribution of the percept produced by taking `action` from `pos`.
    pub fn percept_distribution(&self, pos: Pos, action: Action) -> PerceptDistribution {
        let (dest, bumped) = self.destination(pos, action);
        let tile = self.tile(dest);
        let reward_dist: Vec<(f64, f64)> = if bumped {
            vec![(REWARD_WALL, 1.0)]
        } else {
            match tile {
                Tile::Dispenser { theta } if theta >= 1.0 => vec![(REWARD_DISPENSER, 1.0)],
                Tile::Dispenser { theta } => {
                    vec![(REWARD_DISPENSER, theta), (REWARD_EMPTY, 1.0 - theta)]
                }
                _ => vec![(REWARD_EMPTY, 1.0)],
            }
        };
        match tile {
            Tile::Noise { alphabet } => {
                let p = 1.0 / alphabet as f64;
                (0..alphabet)
                    .flat_map(|o| reward_dist.iter().map(move |&(r, q)| (Percept::new(o, r), p * q)))
                    .collect()
            }
            _ => {
                let bits = self.wall_bits(dest);
                reward_dist.into_iter().map(|(r, q)| (Percept::new(bits, r), q)).collect()
            }
        }
    }

    /// Samples one transition; returns the new position and the emitted percept.
    pub fn step<R: Rng + ?Sized>(&self, pos: Pos, action: Action, rng: &mut R) -> (Pos, Percept) {
        let (dest, bumped) = self.destination(pos, action);
        let tile = self.tile(dest);
        let reward = if bumped {
            REWARD_WALL
        } else {
            match tile {
                Tile::Dispenser { theta } if rng.gen::<f64>() < theta => REWARD_DISPENSER,
                _ => REWARD_EMPTY,
            }
        };
        let observation = match tile {
            Tile::Noise { alphabet } => rng.gen_range(0..alphabet),
            _ => self.wall_bits(dest),
        };
        (dest, Percept::new(observation, reward))
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.layout_rows() {
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

/// Hidden state of a running gridworld.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridState {
    pub pos: Pos,
}

impl Default for GridState {
    fn default() -> Self {
        Self { pos: Pos::START }
    }
}

/// The ground-truth environment: a spec plus the agent's current position.
#[derive(Debug, Clone)]
pub struct Gridworld {
    spec: Arc<GridSpec>,
    state: GridState,
}

impl Gridworld {
    pub fn new(spec: Arc<GridSpec>) -> Self {
        Self { spec, state: GridState::default() }
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn state(&self) -> GridState {
        self.state
    }

    pub fn step<R: Rng + ?Sized>(&mut self, action: Action, rng: &mut R) -> Percept {
        let (pos, percept) = self.spec.step(self.state.pos, action, rng);
        self.state.pos = pos;
        percept
    }
}

/// Parameters for [`generate_spec`]. An explicit layout takes precedence
/// over random generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeneratorConfig {
    pub size: usize,
    #[serde(default)]
    pub layout: Option<Vec<String>>,
    #[serde(default)]
    pub wall_density: f64,
    pub thetas: Vec<f64>,
    #[serde(default = "default_alphabet")]
    pub noise_alphabet: u32,
    /// Number of noise tiles placed by random generation.
    #[serde(default)]
    pub noise_tiles: usize,
}

fn default_alphabet() -> u32 {
    DEFAULT_NOISE_ALPHABET
}

const GENERATION_ATTEMPTS: usize = 1000;

/// Builds a grid from an explicit layout, or samples walls independently with
/// probability `wall_density` and places the dispensers on distinct reachable
/// tiles other than the start.
pub fn generate_spec<R: Rng + ?Sized>(cfg: &GridGeneratorConfig, rng: &mut R) -> Result<GridSpec, GridError> {
    if let Some(rows) = &cfg.layout {
        return GridSpec::from_rows(rows, &cfg.thetas, cfg.noise_alphabet);
    }
    if cfg.thetas.is_empty() {
        return Err(GridError::Invalid("no dispensers requested".into()));
    }
    if !(0.0..=1.0).contains(&cfg.wall_density) {
        return Err(GridError::Invalid(format!("wall density {} outside [0, 1]", cfg.wall_density)));
    }
    let n = cfg.size;
    let mut last_reason = String::new();
    for _ in 0..GENERATION_ATTEMPTS {
        let mut tiles: Vec<Tile> = (0..n * n)
            .map(|_| if rng.gen::<f64>() < cfg.wall_density { Tile::Wall } else { Tile::Empty })
            .collect();
        if tiles[0].is_wall() {
            last_reason = "start tile walled".into();
            continue;
        }
        let placeholder_theta = cfg.thetas[0];
        // Reachability does not depend on dispenser placement, so probe with
        // a throwaway dispenser on the start tile.
        let mut probe_tiles = tiles.clone();
        probe_tiles[0] = Tile::Dispenser { theta: placeholder_theta };
        let probe = GridSpec::new(n, probe_tiles)?;
        let mut candidates: Vec<usize> =
            probe.reachable().iter().enumerate().filter(|&(i, &r)| r && i != 0).map(|(i, _)| i).collect();
        if candidates.len() < cfg.thetas.len() + cfg.noise_tiles {
            last_reason = "too few reachable tiles".into();
            continue;
        }
        for &theta in &cfg.thetas {
            let k = rng.gen_range(0..candidates.len());
            tiles[candidates.swap_remove(k)] = Tile::Dispenser { theta };
        }
        for _ in 0..cfg.noise_tiles {
            let k = rng.gen_range(0..candidates.len());
            tiles[candidates.swap_remove(k)] = Tile::Noise { alphabet: cfg.noise_alphabet };
        }
        return GridSpec::new(n, tiles);
    }
    Err(GridError::Generation(GENERATION_ATTEMPTS, last_reason))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn open(n: usize) -> GridSpec {
        let mut tiles = vec![Tile::Empty; n * n];
        tiles[n * n - 1] = Tile::Dispenser { theta: 0.75 };
        GridSpec::new(n, tiles).unwrap()
    }

    #[test]
    fn bump_into_wall() {
        let spec = GridSpec::parse(".#\n.D\n", &[1.0], 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pos, e) = spec.step(Pos::START, RIGHT, &mut rng);
        assert_eq!(pos, Pos::START);
        assert_eq!(e.reward, -10.0);
        let (pos, e) = spec.step(Pos::START, UP, &mut rng);
        assert_eq!(pos, Pos::START);
        assert_eq!(e.reward, -10.0);
    }

    #[test]
    fn empty_and_dispenser_rewards() {
        let spec = GridSpec::parse("..\n.D\n", &[1.0], 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pos, e) = spec.step(Pos::START, NOOP, &mut rng);
        assert_eq!((pos, e.reward), (Pos::START, -1.0));
        let (pos, e) = spec.step(Pos::new(1, 0), DOWN, &mut rng);
        assert_eq!((pos, e.reward), (Pos::new(1, 1), 100.0));
        let (_, e) = spec.step(pos, NOOP, &mut rng);
        assert_eq!(e.reward, 100.0);
    }

    #[test]
    fn observation_bits() {
        let spec = open(10);
        assert_eq!(spec.observe_bits(Pos::START).unwrap(), 0b0101);
        assert_eq!(spec.observe_bits(Pos::new(4, 4)).unwrap(), 0);
        let boxed = GridSpec::parse("D#.\n#.#\n.#.\n", &[0.5], 16).unwrap();
        assert_eq!(boxed.wall_bits(Pos::new(1, 1)), 0b1111);
        assert!(matches!(boxed.observe_bits(Pos::new(1, 0)), Err(GridError::InsideWall(1, 0))));
    }

    #[test]
    fn reachability() {
        assert_eq!(GridSpec::parse("..\n.D\n", &[0.5], 16).unwrap().reachable_count(), 4);
        assert_eq!(GridSpec::parse(".#.\nD#.\n.#.\n", &[0.5], 16).unwrap().reachable_count(), 3);
        let walled = GridSpec::parse(".#.\n.#D\n.#.\n", &[0.5], 16).unwrap();
        assert_eq!(walled.reachable_count(), 3);
        assert!(!walled.reachable()[walled.index(Pos::new(2, 1))]);
    }

    #[test]
    fn exact_distributions() {
        let spec = GridSpec::parse("..N\n.D.\n...\n", &[0.75], 16).unwrap();
        let d = spec.percept_distribution(Pos::START, NOOP);
        assert_eq!(d, vec![(Percept::new(0b0101, -1.0), 1.0)]);
        let d = spec.percept_distribution(Pos::new(1, 0), DOWN);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0], (Percept::new(0, 100.0), 0.75));
        assert_eq!(d[1], (Percept::new(0, -1.0), 0.25));
        let d = spec.percept_distribution(Pos::new(1, 0), RIGHT);
        assert_eq!(d.len(), 16);
        assert!(d.iter().all(|(_, p)| (*p - 1.0 / 16.0).abs() < 1e-15));
        for pos in [Pos::START, Pos::new(1, 1), Pos::new(2, 0)] {
            for a in 0..NUM_ACTIONS {
                let total: f64 = spec.percept_distribution(pos, Action(a)).iter().map(|(_, p)| p).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dispenser_frequency_within_three_sigma() {
        let spec = GridSpec::parse("D.\n..\n", &[0.75], 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let hits = (0..n).filter(|_| spec.step(Pos::START, NOOP, &mut rng).1.reward == 100.0).count();
        let sigma = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((hits as f64 - 0.75 * n as f64).abs() < 3.0 * sigma, "hits = {hits}");
    }

    #[test]
    fn layout_parsing_errors() {
        assert!(matches!(GridSpec::parse(".. \n.D\n", &[0.5], 16), Err(GridError::Layout { line: 1, .. })));
        assert!(matches!(GridSpec::parse("..\n.X\n", &[0.5], 16), Err(GridError::Layout { line: 2, .. })));
        assert!(GridSpec::parse("..\n.D\n", &[], 16).is_err());
        assert!(GridSpec::parse("#.\n.D\n", &[0.5], 16).is_err());
        assert!(GridSpec::parse("..\n..\n", &[], 16).is_err());
        let spec = GridSpec::parse(".N\n#D\n", &[0.3], 16).unwrap();
        assert_eq!(GridSpec::parse(&spec.to_string(), &[0.3], 16).unwrap(), spec);
    }

    #[test]
    fn generator_is_reproducible() {
        let cfg = GridGeneratorConfig {
            size: 10,
            layout: None,
            wall_density: 0.2,
            thetas: vec![0.75],
            noise_alphabet: 16,
            noise_tiles: 0,
        };
        let a = generate_spec(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_spec(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let (d, _) = a.dispensers()[0];
        assert!(a.reachable()[d]);
        let full = GridGeneratorConfig { wall_density: 1.0, ..cfg.clone() };
        assert!(matches!(
            generate_spec(&full, &mut ChaCha8Rng::seed_from_u64(3)),
            Err(GridError::Generation(..))
        ));
        let explicit = GridGeneratorConfig {
            layout: Some(vec!["..".into(), ".D".into()]),
            thetas: vec![0.5],
            ..cfg
        };
        let s = generate_spec(&explicit, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s, GridSpec::parse("..\n.D\n", &[0.5], 16).unwrap());
    }
}
