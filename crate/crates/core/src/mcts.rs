//! Monte Carlo tree search over the perturbation game.
//!
//! Each outer iteration runs a batch of selection / expansion / simulation /
//! backpropagation rounds from the current root and then commits one move. The
//! tree is kept in an arena; statistics are propagated all the way up to the
//! initial position so its visit count equals the number of simulations.
//! Subtrees whose every leaf is terminal are marked solved with their exact
//! value, which lets the search stop once the game is exhausted.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::game::{reward_of_terminal, Game, GameError, GameState, Move, Player2Role, TerminalStatus, Turn};
use crate::image::{distance, Image};
use crate::saliency::sample_index;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("invalid termination conditions: {0}")]
    Conditions(String),
    #[error("cannot commit: the root has no visited children")]
    NoVisitedChildren,
    #[error("cannot build thread pool: {0}")]
    ThreadPool(String),
}

/// `mean + √(2 ln parent / child)`, infinite for an unvisited child.
pub fn ucb_score(child_mean: f64, parent_visits: u64, child_visits: u64) -> f64 {
    if child_visits == 0 {
        return f64::INFINITY;
    }
    child_mean + (2.0 * (parent_visits.max(1) as f64).ln() / child_visits as f64).sqrt()
}

/// A budget in iterations, wall-clock time, or both (whichever runs out first).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Budget {
    pub iterations: Option<u64>,
    pub seconds: Option<f64>,
}

impl Budget {
    pub fn iterations(n: u64) -> Self {
        Budget {
            iterations: Some(n),
            seconds: None,
        }
    }

    fn validate(&self, name: &str) -> Result<(), SearchError> {
        if self.iterations.is_none() && self.seconds.is_none() {
            return Err(SearchError::Conditions(format!("{name} needs an iteration or time budget")));
        }
        if self.iterations == Some(0) || self.seconds.is_some_and(|s| !(s > 0.0)) {
            return Err(SearchError::Conditions(format!("{name} budgets must be positive")));
        }
        Ok(())
    }

    fn spent(&self, iterations: u64, started: Instant) -> bool {
        self.iterations.is_some_and(|n| iterations >= n)
            || self.seconds.is_some_and(|s| started.elapsed() >= Duration::from_secs_f64(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminationConditions {
    /// Outer iterations (committed moves).
    pub tc1: Budget,
    /// Search rounds per committed move.
    pub tc2: Budget,
    /// Stop once the best severity is unimproved for `⌈1/ε⌉` iterations.
    pub epsilon: Option<f64>,
}

impl TerminationConditions {
    pub fn validate(&self) -> Result<(), SearchError> {
        self.tc1.validate("tc1")?;
        self.tc2.validate("tc2")?;
        if self.epsilon.is_some_and(|e| !(e > 0.0)) {
            return Err(SearchError::Conditions("epsilon must be positive".into()));
        }
        Ok(())
    }

    /// `⌈1/ε⌉`.
    pub fn patience(&self) -> Option<u64> {
        self.epsilon.map(|e| (1.0 / e - 1e-9).ceil().max(1.0) as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    /// Most children an expanded player-II node gets; larger move sets are
    /// subsampled without replacement by saliency mass.
    pub child_cap: usize,
    /// Worker threads for simulations; 1 runs everything on the caller.
    pub threads: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            child_cap: 64,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminatedBy {
    Tc1,
    EpsilonConverged,
    Exhausted,
}

impl std::fmt::Display for TerminatedBy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TerminatedBy::Tc1 => "TC1",
            TerminatedBy::EpsilonConverged => "EPSILON_CONVERGED",
            TerminatedBy::Exhausted => "EXHAUSTED",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub best: Option<f64>,
    pub current: Option<f64>,
    pub window: Option<f64>,
}

/// `iteration,best,current,window` with empty fields where nothing was found.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let field = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("iteration,best,current,window\n");
    for row in trace {
        writeln!(
            out,
            "{},{},{},{}",
            row.iteration,
            field(row.best),
            field(row.current),
            field(row.window)
        )
        .expect("writing to a String");
    }
    out
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub best_image: Option<Image>,
    pub best_severity: Option<f64>,
    pub trace: Vec<TraceRow>,
    pub iterations_used: u64,
    pub terminated_by: TerminatedBy,
    pub total_simulations: u64,
    /// Backed-up value of the initial position under the run's player-II role.
    pub game_value: f64,
    /// Severity at the end of the line obtained by repeatedly committing from
    /// the final root, when that line ends in an adversarial example.
    pub committed_severity: Option<f64>,
}

impl AttackResult {
    /// `1 / game_value`, the severity the role-specific game guarantees.
    pub fn game_severity(&self) -> Option<f64> {
        (self.game_value > 0.0).then(|| 1.0 / self.game_value)
    }
}

#[derive(Debug, Clone)]
pub struct SearchNode {
    pub state: GameState,
    pub parent: Option<usize>,
    pub mv: Option<Move>,
    /// Probability a random player gives the move leading here.
    pub prior: f64,
    pub reward: f64,
    pub visits: u64,
    pub children: Vec<usize>,
    pub expanded: bool,
    pub status: TerminalStatus,
    /// Exact value once every leaf below is terminal.
    pub solved: Option<f64>,
}

impl SearchNode {
    pub fn mean(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.reward / self.visits as f64
        }
    }
}

/// One random play to a terminal position.
#[derive(Debug, Clone)]
pub struct Playout {
    pub status: TerminalStatus,
    pub reward: f64,
    pub image: Image,
}

/// Plays both sides at random: player I picks features by response weight,
/// player II picks a pixel from the feature's disc and a uniform direction.
pub fn simulate_playout<R: Rng + ?Sized>(game: &Game, state: &GameState, rng: &mut R) -> Result<Playout, GameError> {
    let mut state = state.clone();
    loop {
        if state.turn == Turn::Player1 {
            let status = game.terminal_status(&state)?;
            if status.is_terminal() {
                return Ok(Playout {
                    status,
                    reward: reward_of_terminal(status)?,
                    image: state.image,
                });
            }
        }
        let mv = game.random_move(&state, rng);
        state = game.step(&state, mv)?;
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed number `counter` of stream `stream` under `master`.
pub fn derive_seed(master: u64, stream: u64, counter: u64) -> u64 {
    splitmix(splitmix(master ^ splitmix(stream)) ^ counter)
}

const STREAM_PLAYOUT: u64 = 1;
const STREAM_EXPAND: u64 = 2;
const STREAM_COMMIT: u64 = 3;

/// Search state for one attack; see [`run_attack`].
pub struct Search<'g, 'a> {
    game: &'g Game<'a>,
    nodes: Vec<SearchNode>,
    root: usize,
    options: SearchOptions,
    seed: u64,
    counter: u64,
    best: Option<(f64, Image)>,
    pool: Option<rayon::ThreadPool>,
}

impl<'g, 'a> Search<'g, 'a> {
    pub fn new(game: &'g Game<'a>, options: SearchOptions, seed: u64) -> Result<Self, SearchError> {
        let state = game.initial_state()?;
        let status = game.terminal_status(&state)?;
        let pool = if options.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(options.threads)
                    .build()
                    .map_err(|e| SearchError::ThreadPool(e.to_string()))?,
            )
        } else {
            None
        };
        let solved = if status.is_terminal() {
            Some(reward_of_terminal(status)?)
        } else {
            None
        };
        Ok(Search {
            game,
            nodes: vec![SearchNode {
                state,
                parent: None,
                mv: None,
                prior: 1.0,
                reward: 0.0,
                visits: 0,
                children: Vec::new(),
                expanded: false,
                status,
                solved,
            }],
            root: 0,
            options,
            seed,
            counter: 0,
            best: None,
            pool,
        })
    }

    pub fn nodes(&self) -> &[SearchNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn best(&self) -> Option<(f64, &Image)> {
        self.best.as_ref().map(|(s, i)| (*s, i))
    }

    fn next_seed(&mut self, stream: u64) -> u64 {
        self.counter += 1;
        derive_seed(self.seed, stream, self.counter)
    }

    fn role(&self) -> Player2Role {
        self.game.config().player2_role
    }

    fn record(&mut self, status: TerminalStatus, image: &Image) {
        if let Some(severity) = status.severity() {
            if self.best.as_ref().is_none_or(|(b, _)| severity < *b) {
                self.best = Some((severity, image.clone()));
            }
        }
    }

    fn is_player2(&self, node: usize) -> bool {
        matches!(self.nodes[node].state.turn, Turn::Player2 { .. })
    }

    /// Descends by UCB through unsolved children. Player-II nodes of an
    /// adversarial role rank children by negated mean.
    fn select(&self) -> usize {
        let mut node = self.root;
        while self.nodes[node].expanded && self.nodes[node].solved.is_none() {
            let parent_visits = self.nodes[node].visits;
            let minimise = self.is_player2(node) && self.role() == Player2Role::Adversarial;
            let mut best: Option<(f64, usize)> = None;
            for &c in &self.nodes[node].children {
                let child = &self.nodes[c];
                if child.solved.is_some() {
                    continue;
                }
                let mean = if minimise { -child.mean() } else { child.mean() };
                let score = ucb_score(mean, parent_visits, child.visits);
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, c));
                }
            }
            match best {
                Some((_, c)) => node = c,
                None => break,
            }
        }
        node
    }

    fn child_moves(&mut self, node: usize) -> Vec<(Move, f64)> {
        let mut moves = self.game.weighted_moves(&self.nodes[node].state);
        let cap = self.options.child_cap.max(1);
        if self.is_player2(node) && moves.len() > cap {
            // Weighted sampling without replacement: keep the `cap` largest u^(1/w).
            let mut rng = ChaCha8Rng::seed_from_u64(self.next_seed(STREAM_EXPAND));
            let mut keyed: Vec<(f64, usize)> = moves
                .iter()
                .enumerate()
                .map(|(i, (_, w))| (rng.gen::<f64>().ln() / w.max(f64::MIN_POSITIVE), i))
                .collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut keep: Vec<usize> = keyed[..cap].iter().map(|k| k.1).collect();
            keep.sort_unstable();
            moves = keep.into_iter().map(|i| moves[i]).collect();
        }
        moves
    }

    fn par_map<T: Send, U: Send>(&self, items: Vec<T>, f: impl Fn(T) -> U + Send + Sync) -> Vec<U> {
        match &self.pool {
            Some(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
            None => items.into_iter().map(f).collect(),
        }
    }

    /// Adds every child of `node` and simulates each once.
    fn expand(&mut self, node: usize) -> Result<(), SearchError> {
        let moves = self.child_moves(node);
        let seeds: Vec<u64> = moves.iter().map(|_| self.next_seed(STREAM_PLAYOUT)).collect();
        let game = self.game;
        let parent_state = self.nodes[node].state.clone();
        let outcomes = self.par_map(
            moves.into_iter().zip(seeds).collect(),
            |((mv, prior), seed)| -> Result<_, GameError> {
                let state = game.step(&parent_state, mv)?;
                let status = if state.turn == Turn::Player1 {
                    game.terminal_status(&state)?
                } else {
                    TerminalStatus::NonTerminal
                };
                let playout = if status.is_terminal() {
                    None
                } else {
                    Some(simulate_playout(game, &state, &mut ChaCha8Rng::seed_from_u64(seed))?)
                };
                Ok((mv, prior, state, status, playout))
            },
        );
        self.nodes[node].expanded = true;
        for outcome in outcomes {
            let (mv, prior, state, status, playout) = outcome?;
            let id = self.nodes.len();
            let (solved, value) = if status.is_terminal() {
                let r = reward_of_terminal(status)?;
                self.record(status, &state.image);
                (Some(r), r)
            } else {
                let p = playout.expect("non-terminal child was simulated");
                self.record(p.status, &p.image);
                (None, p.reward)
            };
            self.nodes.push(SearchNode {
                state,
                parent: Some(node),
                mv: Some(mv),
                prior,
                reward: 0.0,
                visits: 0,
                children: Vec::new(),
                expanded: false,
                status,
                solved,
            });
            self.nodes[node].children.push(id);
            self.backpropagate(id, value);
        }
        self.refresh_solved(node);
        Ok(())
    }

    /// Adds `value` to the reward and one to the visits of `node` and every
    /// ancestor up to the initial position.
    pub fn backpropagate(&mut self, node: usize, value: f64) {
        let mut cur = Some(node);
        while let Some(i) = cur {
            self.nodes[i].reward += value;
            self.nodes[i].visits += 1;
            cur = self.nodes[i].parent;
        }
    }

    fn combine(&self, node: usize, values: &[(f64, f64)]) -> f64 {
        if !self.is_player2(node) {
            return values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        }
        match self.role() {
            Player2Role::Cooperative => values.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max),
            Player2Role::Adversarial => values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min),
            Player2Role::Nature => {
                let mass: f64 = values.iter().map(|v| v.0).sum();
                values.iter().map(|v| v.0 * v.1).sum::<f64>() / mass
            }
        }
    }

    /// Marks `node` and its ancestors solved when all their children are.
    fn refresh_solved(&mut self, node: usize) {
        let mut cur = Some(node);
        while let Some(i) = cur {
            if self.nodes[i].solved.is_some() || !self.nodes[i].expanded {
                break;
            }
            let values: Option<Vec<(f64, f64)>> = self.nodes[i]
                .children
                .iter()
                .map(|&c| self.nodes[c].solved.map(|v| (self.nodes[c].prior, v)))
                .collect();
            match values {
                Some(values) if !values.is_empty() => {
                    let v = self.combine(i, &values);
                    self.nodes[i].solved = Some(v);
                }
                _ => break,
            }
            cur = self.nodes[i].parent;
        }
    }

    /// One selection / expansion / simulation / backpropagation round.
    pub fn search_round(&mut self) -> Result<(), SearchError> {
        let leaf = self.select();
        if self.nodes[leaf].solved.is_some() {
            // Only reachable when the root itself is solved or terminal.
            let v = self.nodes[leaf].solved.expect("checked");
            self.backpropagate(leaf, v);
            return Ok(());
        }
        self.expand(leaf)
    }

    fn child_value(&self, c: usize, exact: bool) -> f64 {
        if exact {
            self.nodes[c].solved.expect("all children solved")
        } else {
            self.nodes[c].mean()
        }
    }

    /// Picks the child to commit to: the best mean for player I and a
    /// cooperative player II, the worst for an adversarial one, and a
    /// saliency-weighted draw for nature. Exact values replace means once all
    /// children are solved.
    pub fn choose_commit(&mut self, node: usize) -> Result<usize, SearchError> {
        let visited: Vec<usize> = self.nodes[node]
            .children
            .iter()
            .copied()
            .filter(|&c| self.nodes[c].visits > 0)
            .collect();
        if visited.is_empty() {
            return Err(SearchError::NoVisitedChildren);
        }
        let exact = visited.iter().all(|&c| self.nodes[c].solved.is_some());
        let role = if self.is_player2(node) {
            self.role()
        } else {
            Player2Role::Cooperative
        };
        let pick = match role {
            Player2Role::Cooperative | Player2Role::Adversarial => {
                let mut best = visited[0];
                for &c in &visited[1..] {
                    let (v, b) = (self.child_value(c, exact), self.child_value(best, exact));
                    let better = if role == Player2Role::Cooperative { v > b } else { v < b };
                    if better {
                        best = c;
                    }
                }
                best
            }
            Player2Role::Nature => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.next_seed(STREAM_COMMIT));
                visited[sample_index(visited.iter().map(|&c| self.nodes[c].prior), &mut rng)]
            }
        };
        Ok(pick)
    }

    /// Backed-up value of `node`: the exact value when solved, otherwise the
    /// role's operator over visited children, bottoming out at mean rewards.
    pub fn estimate_value(&self, node: usize) -> f64 {
        let n = &self.nodes[node];
        if let Some(v) = n.solved {
            return v;
        }
        let values: Vec<(f64, f64)> = n
            .children
            .iter()
            .filter(|&&c| self.nodes[c].visits > 0)
            .map(|&c| (self.nodes[c].prior, self.estimate_value(c)))
            .collect();
        if values.is_empty() {
            n.mean()
        } else {
            self.combine(node, &values)
        }
    }

    fn committed_line_severity(&mut self) -> Result<Option<f64>, SearchError> {
        let mut node = self.root;
        loop {
            let n = &self.nodes[node];
            if n.status.is_terminal() {
                return Ok(n.status.severity());
            }
            if n.children.is_empty() {
                return Ok(None);
            }
            node = self.choose_commit(node)?;
        }
    }

    /// Runs the full attack loop.
    pub fn run(&mut self, tcs: &TerminationConditions) -> Result<AttackResult, SearchError> {
        tcs.validate()?;
        let started = Instant::now();
        let patience = tcs.patience();
        let mut trace: Vec<TraceRow> = Vec::new();
        let mut currents: Vec<Option<f64>> = Vec::new();
        let mut unimproved = 0u64;
        let mut iteration = 0u64;
        let terminated_by = loop {
            if self.nodes[self.root].solved.is_some() {
                break TerminatedBy::Exhausted;
            }
            if tcs.tc1.spent(iteration, started) {
                break TerminatedBy::Tc1;
            }
            let before = self.best.as_ref().map(|b| b.0);
            let inner_started = Instant::now();
            let mut rounds = 0u64;
            let mut iteration_best: Option<f64> = None;
            while !tcs.tc2.spent(rounds, inner_started) && self.nodes[self.root].solved.is_none() {
                let prev = self.best.as_ref().map(|b| b.0);
                self.search_round()?;
                rounds += 1;
                if let Some((s, _)) = &self.best {
                    if prev != Some(*s) {
                        iteration_best = Some(iteration_best.map_or(*s, |b: f64| b.min(*s)));
                    }
                }
            }
            if self.nodes[self.root].solved.is_none() && !self.nodes[self.root].children.is_empty() {
                self.root = self.choose_commit(self.root)?;
            }
            iteration += 1;
            let best = self.best.as_ref().map(|b| b.0);
            let current = iteration_best.or(best);
            currents.push(current);
            let recent: Vec<f64> = currents.iter().rev().take(10).flatten().copied().collect();
            let window = (!recent.is_empty()).then(|| recent.iter().sum::<f64>() / recent.len() as f64);
            trace.push(TraceRow {
                iteration,
                best,
                current,
                window,
            });
            if best.is_some() && best != before {
                unimproved = 0;
            } else {
                unimproved += 1;
            }
            if self.nodes[self.root].solved.is_some() || self.nodes[self.root].status.is_terminal() {
                break TerminatedBy::Exhausted;
            }
            if patience.is_some_and(|p| unimproved >= p) {
                break TerminatedBy::EpsilonConverged;
            }
        };
        let committed_severity = self.committed_line_severity()?;
        Ok(AttackResult {
            best_image: self.best.as_ref().map(|b| b.1.clone()),
            best_severity: self.best.as_ref().map(|b| b.0),
            trace,
            iterations_used: iteration,
            terminated_by,
            total_simulations: self.nodes[0].visits,
            game_value: self.estimate_value(0),
            committed_severity,
        })
    }
}

/// Searches for an adversarial example of least severity.
pub fn run_attack(
    game: &Game,
    tcs: &TerminationConditions,
    options: SearchOptions,
    seed: u64,
) -> Result<AttackResult, SearchError> {
    game.ensure_attackable()?;
    let mut search = Search::new(game, options, seed)?;
    let result = search.run(tcs)?;
    debug_assert!(result
        .best_image
        .as_ref()
        .zip(result.best_severity)
        .is_none_or(|(img, s)| distance(img, game.original(), game.config().norm).ok() == Some(s)));
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct SeverityInterval {
    /// Least severity found with a cooperative player II.
    pub lo: Option<f64>,
    /// Severity guaranteed by the adversarial game.
    pub hi: Option<f64>,
    /// Severity of the game against nature.
    pub nature: Option<f64>,
    pub runs: [AttackResult; 3],
}

/// Runs the cooperative, adversarial and nature games with independent seeds
/// derived from `seed`.
pub fn severity_interval(
    game: &Game,
    tcs: &TerminationConditions,
    options: SearchOptions,
    seed: u64,
) -> Result<SeverityInterval, SearchError> {
    let mut runs = Vec::with_capacity(3);
    for (i, role) in Player2Role::ALL.into_iter().enumerate() {
        let config = crate::game::GameConfig {
            player2_role: role,
            ..game.config().clone()
        };
        let g = game.with_config(config)?;
        runs.push(run_attack(&g, tcs, options, derive_seed(seed, 0x5e7, i as u64))?);
    }
    let runs: [AttackResult; 3] = runs.try_into().expect("three runs");
    Ok(SeverityInterval {
        lo: runs[0].best_severity,
        hi: runs[1].game_severity(),
        nature: runs[2].game_severity(),
        runs,
    })
}
