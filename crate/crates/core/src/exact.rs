//! Exhaustive reference solvers for tiny instances: enumeration of τ-grid
//! perturbations and backward induction over the whole game tree.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::game::{reward_of_terminal, Game, GameConfig, GameError, GameState, Goal, Move, Player2Role, Turn};
use crate::image::{distance, Image, ImageError};
use crate::oracle::{Oracle, OracleError};

/// Largest number of candidate images the grid enumerators will visit.
pub const ENUMERATION_LIMIT: u128 = 10_000_000;
/// Largest number of distinct game states the exact solver will visit.
pub const STATE_LIMIT: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum ExactError {
    #[error("enumeration would visit {count} candidates, limit is {limit}")]
    Budget { count: u128, limit: u128 },
    #[error("game tree has more than {0} states")]
    StateBudget(usize),
    #[error("invalid grid specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridMode {
    /// Every channel of a changed pixel moves by the same `n·τ`, `1 ≤ |n| ≤ levels`.
    StepLevels(usize),
    /// Every channel of a changed pixel is set to 0 or to 1.
    Saturate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridEnumSpec {
    pub tau: f64,
    pub max_changed_pixels: usize,
    pub mode: GridMode,
}

impl GridEnumSpec {
    pub fn validate(&self) -> Result<(), ExactError> {
        if self.max_changed_pixels == 0 {
            return Err(ExactError::InvalidSpec("max_changed_pixels must be at least 1".into()));
        }
        if let GridMode::StepLevels(levels) = self.mode {
            if !(self.tau > 0.0) || levels == 0 || levels as f64 * self.tau > 1.0 + 1e-12 {
                return Err(ExactError::InvalidSpec(format!(
                    "need tau > 0 and 1 <= levels with levels*tau <= 1, got tau={} levels={levels}",
                    self.tau
                )));
            }
        }
        Ok(())
    }

    fn values_per_pixel(&self) -> usize {
        match self.mode {
            GridMode::Saturate => 2,
            GridMode::StepLevels(levels) => 2 * levels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridWitness {
    pub image: Image,
    pub severity: f64,
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of candidate images [`brute_force_min_severity`] would classify.
pub fn grid_candidate_count(pixels: usize, spec: &GridEnumSpec) -> u128 {
    let v = spec.values_per_pixel() as u128;
    (1..=spec.max_changed_pixels.min(pixels))
        .map(|s| binomial(pixels, s).saturating_mul(v.saturating_pow(s as u32)))
        .fold(0u128, u128::saturating_add)
}

/// Advances `c` to the next `k`-combination of `0..n` in lexicographic order.
fn next_combination(c: &mut [usize], n: usize) -> bool {
    let k = c.len();
    for i in (0..k).rev() {
        if c[i] < n - k + i {
            c[i] += 1;
            for j in i + 1..k {
                c[j] = c[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn next_odometer(v: &mut [usize], base: usize) -> bool {
    for digit in v.iter_mut().rev() {
        *digit += 1;
        if *digit < base {
            return true;
        }
        *digit = 0;
    }
    false
}

/// Value assigned to one channel by the `choice`-th option of a grid mode, or
/// `None` when it would leave `[0, 1]`.
fn grid_value(original: f64, choice: usize, spec: &GridEnumSpec) -> Option<f64> {
    match spec.mode {
        GridMode::Saturate => Some(if choice == 0 { 0.0 } else { 1.0 }),
        GridMode::StepLevels(levels) => {
            // choices run -levels..=-1 then 1..=levels
            let n = if choice < levels {
                choice as f64 - levels as f64
            } else {
                (choice - levels + 1) as f64
            };
            let v = original + n * spec.tau;
            if (-1e-12..=1.0 + 1e-12).contains(&v) {
                Some(v.clamp(0.0, 1.0))
            } else {
                None
            }
        }
    }
}

/// Sort key giving enumeration order: fewer pixels first, then lexicographic
/// pixel indices, then value choices.
type CandidateKey = (usize, Vec<usize>, Vec<usize>);

/// Severity order that treats values within rounding noise as ties.
pub fn compare_severity(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= SEVERITY_TOLERANCE * a.abs().max(b.abs()).max(1.0) {
        Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

/// Relative tolerance under which two severities count as equal.
pub const SEVERITY_TOLERANCE: f64 = 1e-12;

fn better(a: &(f64, CandidateKey, Image), b: &(f64, CandidateKey, Image)) -> bool {
    match compare_severity(a.0, b.0) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => a.1 < b.1,
    }
}

fn goal_met(goal: Goal, original_class: usize, label: usize) -> bool {
    match goal {
        Goal::Targeted(c) => label == c,
        Goal::NonTargeted => label != original_class,
    }
}

/// Classifies every image obtained from `alpha` by changing at most
/// `spec.max_changed_pixels` pixels to τ-grid values and returns the
/// adversarial one of least severity inside `η(alpha, k, d)`, or `None`.
pub fn brute_force_min_severity(
    alpha: &Image,
    oracle: &dyn Oracle,
    config: &GameConfig,
    spec: &GridEnumSpec,
) -> Result<Option<GridWitness>, ExactError> {
    spec.validate()?;
    let pixels = alpha.width() * alpha.height();
    let count = grid_candidate_count(pixels, spec);
    if count > ENUMERATION_LIMIT {
        return Err(ExactError::Budget {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let original_class = oracle.label(alpha)?;
    let shards: Vec<(usize, usize)> = (1..=spec.max_changed_pixels.min(pixels))
        .flat_map(|s| (0..=pixels - s).map(move |first| (s, first)))
        .collect();
    let base = spec.values_per_pixel();
    let width = alpha.width();
    let channels = alpha.channels();

    let results = shards
        .par_iter()
        .map(|&(size, first)| -> Result<Option<(f64, CandidateKey, Image)>, ExactError> {
            let mut best: Option<(f64, CandidateKey, Image)> = None;
            // Remaining pixels are a combination of first+1..pixels.
            let mut rest: Vec<usize> = (first + 1..first + size).collect();
            loop {
                let mut subset = vec![first];
                subset.extend(&rest);
                let mut choices = vec![0usize; size];
                loop {
                    let mut data = alpha.data().to_vec();
                    let mut valid = true;
                    'pixels: for (&p, &choice) in subset.iter().zip(&choices) {
                        let start = ((p / width) * width + p % width) * channels;
                        for v in &mut data[start..start + channels] {
                            match grid_value(*v, choice, spec) {
                                Some(nv) => *v = nv,
                                None => {
                                    valid = false;
                                    break 'pixels;
                                }
                            }
                        }
                    }
                    if valid {
                        let candidate = Image::new(alpha.width(), alpha.height(), channels, data)?;
                        let severity = distance(&candidate, alpha, config.norm)?;
                        if severity <= config.distance_bound
                            && goal_met(config.goal, original_class, oracle.label(&candidate)?)
                        {
                            let entry = (severity, (size, subset.clone(), choices.clone()), candidate);
                            if best.as_ref().is_none_or(|b| better(&entry, b)) {
                                best = Some(entry);
                            }
                        }
                    }
                    if !next_odometer(&mut choices, base) {
                        break;
                    }
                }
                if size == 1 || !next_combination_offset(&mut rest, first + 1, pixels) {
                    break;
                }
            }
            Ok(best)
        })
        .collect::<Vec<_>>();

    let mut best: Option<(f64, CandidateKey, Image)> = None;
    for r in results {
        if let Some(entry) = r? {
            if best.as_ref().is_none_or(|b| better(&entry, b)) {
                best = Some(entry);
            }
        }
    }
    Ok(best.map(|(severity, _, image)| GridWitness { image, severity }))
}

/// [`next_combination`] over the range `lo..n`.
fn next_combination_offset(c: &mut [usize], lo: usize, n: usize) -> bool {
    c.iter_mut().for_each(|v| *v -= lo);
    let more = next_combination(c, n - lo);
    c.iter_mut().for_each(|v| *v += lo);
    more
}

/// Number of per-dimension τ-grid points `alpha + n·τ` inside `[0, 1]` with
/// `Σ|n_i|·τ ≤ d`, capped at `limit + 1`.
pub fn l1_grid_count(alpha: &Image, tau: f64, d: f64, limit: u128) -> u128 {
    let budget = (d / tau + 1e-9).floor() as usize;
    // ways[b] = number of partial assignments using exactly b steps
    let mut ways = vec![0u128; budget + 1];
    ways[0] = 1;
    for &v in alpha.data() {
        let up = ((1.0 - v) / tau + 1e-9).floor() as usize;
        let down = (v / tau + 1e-9).floor() as usize;
        let mut next = vec![0u128; budget + 1];
        for (used, &w) in ways.iter().enumerate() {
            if w == 0 {
                continue;
            }
            next[used] = next[used].saturating_add(w);
            for n in 1..=budget - used {
                let options = u128::from(n <= up) + u128::from(n <= down);
                if options == 0 {
                    break;
                }
                next[used + n] = next[used + n].saturating_add(w.saturating_mul(options));
            }
        }
        ways = next.into_iter().map(|w| w.min(limit + 1)).collect();
    }
    ways.iter().fold(0u128, |a, &w| a.saturating_add(w)).min(limit + 1)
}

/// Visits every per-dimension τ-grid image of the closed L1 ball of radius `d`
/// around `alpha`, `alpha` itself included. Stops early when `visit` returns
/// `false`.
pub fn for_each_l1_grid_point(
    alpha: &Image,
    tau: f64,
    d: f64,
    limit: u128,
    mut visit: impl FnMut(&Image) -> Result<bool, ExactError>,
) -> Result<u128, ExactError> {
    let count = l1_grid_count(alpha, tau, d, limit);
    if count > limit {
        return Err(ExactError::Budget { count, limit });
    }
    let budget = (d / tau + 1e-9).floor() as i64;
    let mut offsets = vec![0i64; alpha.dims()];
    let mut visited = 0u128;
    fn recurse(
        alpha: &Image,
        tau: f64,
        dim: usize,
        left: i64,
        offsets: &mut Vec<i64>,
        visited: &mut u128,
        visit: &mut dyn FnMut(&Image) -> Result<bool, ExactError>,
    ) -> Result<bool, ExactError> {
        if dim == alpha.dims() {
            let data = alpha
                .data()
                .iter()
                .zip(offsets.iter())
                .map(|(v, &n)| (v + n as f64 * tau).clamp(0.0, 1.0))
                .collect();
            *visited += 1;
            return visit(&Image::new(alpha.width(), alpha.height(), alpha.channels(), data)?);
        }
        let v = alpha.data()[dim];
        for n in -left..=left {
            let nv = v + n as f64 * tau;
            if !(-1e-9..=1.0 + 1e-9).contains(&nv) {
                continue;
            }
            offsets[dim] = n;
            if !recurse(alpha, tau, dim + 1, left - n.abs(), offsets, visited, visit)? {
                return Ok(false);
            }
        }
        offsets[dim] = 0;
        Ok(true)
    }
    recurse(alpha, tau, 0, budget, &mut offsets, &mut visited, &mut visit)?;
    Ok(visited)
}

/// Backward-induction values of every reachable state.
pub struct GameSolution {
    values: HashMap<(Vec<u64>, usize, Turn), f64>,
    opt: Player2Role,
}

impl GameSolution {
    pub fn value_of(&self, state: &GameState) -> Option<f64> {
        self.values.get(&state.key()).copied()
    }

    pub fn state_count(&self) -> usize {
        self.values.len()
    }

    pub fn opt(&self) -> Player2Role {
        self.opt
    }
}

struct Solver<'g, 'a> {
    game: &'g Game<'a>,
    opt: Player2Role,
    values: HashMap<(Vec<u64>, usize, Turn), f64>,
}

impl Solver<'_, '_> {
    fn value(&mut self, state: &GameState) -> Result<f64, ExactError> {
        let key = state.key();
        if let Some(&v) = self.values.get(&key) {
            return Ok(v);
        }
        if self.values.len() >= STATE_LIMIT {
            return Err(ExactError::StateBudget(STATE_LIMIT));
        }
        let v = match state.turn {
            Turn::Player1 => {
                let status = self.game.terminal_status(state)?;
                if status.is_terminal() {
                    reward_of_terminal(status)?
                } else {
                    let mut best = f64::NEG_INFINITY;
                    for (mv, _) in self.game.weighted_moves(state) {
                        best = best.max(self.value(&self.game.step(state, mv)?)?);
                    }
                    best
                }
            }
            Turn::Player2 { .. } => {
                let moves = self.game.weighted_moves(state);
                let mut acc = match self.opt {
                    Player2Role::Cooperative => f64::NEG_INFINITY,
                    Player2Role::Adversarial => f64::INFINITY,
                    Player2Role::Nature => 0.0,
                };
                for (mv, weight) in moves {
                    let child = self.value(&self.game.step(state, mv)?)?;
                    acc = match self.opt {
                        Player2Role::Cooperative => acc.max(child),
                        Player2Role::Adversarial => acc.min(child),
                        Player2Role::Nature => acc + weight * child,
                    };
                }
                acc
            }
        };
        self.values.insert(key, v);
        Ok(v)
    }
}

/// Solves the game from its initial state with player II playing `opt`.
/// Player I always maximises.
pub fn solve_game(game: &Game, opt: Player2Role) -> Result<(f64, GameSolution), ExactError> {
    let mut solver = Solver {
        game,
        opt,
        values: HashMap::new(),
    };
    let root = solver.value(&game.initial_state()?)?;
    Ok((
        root,
        GameSolution {
            values: solver.values,
            opt,
        },
    ))
}

/// Value `max_{σ_I} opt_{σ_II} R` of the game, or `None` when it is 0 (no
/// adversarial example is reachable under `opt`).
pub fn solve_game_exact(game: &Game, opt: Player2Role) -> Result<Option<f64>, ExactError> {
    let (v, _) = solve_game(game, opt)?;
    Ok((v > 0.0).then_some(v))
}

/// A deterministic memoryless strategy profile: one move per state.
pub type Strategy = HashMap<(Vec<u64>, usize, Turn), Move>;

/// Picks, in every solved state, the first child achieving the state's value.
/// Nature states get no entry.
pub fn extract_strategy(game: &Game, solution: &GameSolution) -> Result<Strategy, ExactError> {
    let mut strategy = Strategy::new();
    let mut stack = vec![game.initial_state()?];
    while let Some(state) = stack.pop() {
        let key = state.key();
        if strategy.contains_key(&key) {
            continue;
        }
        if state.turn == Turn::Player1 && game.terminal_status(&state)?.is_terminal() {
            continue;
        }
        let target = solution.value_of(&state).expect("state was solved");
        let children = game
            .weighted_moves(&state)
            .into_iter()
            .map(|(mv, _)| Ok((mv, game.step(&state, mv)?)))
            .collect::<Result<Vec<_>, ExactError>>()?;
        let nature = matches!(state.turn, Turn::Player2 { .. }) && solution.opt == Player2Role::Nature;
        if nature {
            stack.extend(children.into_iter().map(|c| c.1));
            continue;
        }
        let (mv, child) = children
            .into_iter()
            .find(|(_, c)| solution.value_of(c) == Some(target))
            .expect("some child attains the value");
        strategy.insert(key, mv);
        stack.push(child);
    }
    Ok(strategy)
}

/// Expected reward of following `strategy`, with nature states averaged by
/// their move weights when `opt` is `Nature`.
pub fn evaluate_strategy(game: &Game, strategy: &Strategy, opt: Player2Role) -> Result<f64, ExactError> {
    fn go(game: &Game, strategy: &Strategy, opt: Player2Role, state: &GameState) -> Result<f64, ExactError> {
        if state.turn == Turn::Player1 {
            let status = game.terminal_status(state)?;
            if status.is_terminal() {
                return Ok(reward_of_terminal(status)?);
            }
        }
        if matches!(state.turn, Turn::Player2 { .. }) && opt == Player2Role::Nature {
            let mut acc = 0.0;
            for (mv, w) in game.weighted_moves(state) {
                acc += w * go(game, strategy, opt, &game.step(state, mv)?)?;
            }
            return Ok(acc);
        }
        let mv = strategy
            .get(&state.key())
            .ok_or_else(|| ExactError::InvalidSpec("strategy has no move for a reached state".into()))?;
        go(game, strategy, opt, &game.step(state, *mv)?)
    }
    go(game, strategy, opt, &game.initial_state()?)
}
