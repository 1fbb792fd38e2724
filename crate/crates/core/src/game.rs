//! The two-player game played over an image: player I picks a keypoint,
//! player II picks a pixel inside that keypoint's disc and a direction, and a
//! play ends once the classifier is fooled or the perturbation budget is spent.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::features::Keypoint;
use crate::image::{apply_manipulation, distance, Image, ImageError, Instruction, ManipulationMode, ManipulationSpec, NormOrder};
use crate::oracle::{ClassProbs, Oracle, OracleError};
use crate::saliency::{build_saliency, disc_pixels, SaliencyError, SaliencyModel, WeightedPixel};

#[derive(Debug, Error)]
pub enum GameError {
    #[error("invalid game configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error("game needs at least one keypoint")]
    NoKeypoints,
    #[error("move requested for the wrong player")]
    WrongTurn,
    #[error("illegal move: {0}")]
    IllegalMove(String),
    #[error("status is not terminal")]
    NonTerminal,
    #[error("the original image already satisfies the attack goal (class {0})")]
    AlreadyAdversarial(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Goal {
    Targeted(usize),
    NonTargeted,
}

/// How player II plays: with player I (`max`), against it (`min`), or at random
/// following the saliency distribution (`nat`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Player2Role {
    Cooperative,
    Adversarial,
    Nature,
}

impl Player2Role {
    pub const ALL: [Player2Role; 3] = [Player2Role::Cooperative, Player2Role::Adversarial, Player2Role::Nature];
}

impl fmt::Display for Player2Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Player2Role::Cooperative => "coop",
            Player2Role::Adversarial => "adv",
            Player2Role::Nature => "nature",
        })
    }
}

impl FromStr for Player2Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "coop" | "cooperative" | "max" => Ok(Player2Role::Cooperative),
            "adv" | "adversarial" | "min" => Ok(Player2Role::Adversarial),
            "nature" | "nat" => Ok(Player2Role::Nature),
            other => Err(format!("unknown player II role '{other}', expected coop, adv or nature")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameConfig {
    pub norm: NormOrder,
    pub distance_bound: f64,
    pub tau: f64,
    pub mode: ManipulationMode,
    pub goal: Goal,
    pub player2_role: Player2Role,
    pub feature_radius_sigmas: f64,
    pub max_depth: usize,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            norm: NormOrder::L0,
            distance_bound: 10.0,
            tau: 1.0,
            mode: ManipulationMode::Saturate,
            goal: Goal::NonTargeted,
            player2_role: Player2Role::Cooperative,
            feature_radius_sigmas: 2.0,
            max_depth: 1000,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), GameError> {
        if !(self.distance_bound >= 0.0) {
            return Err(GameError::Config(format!("distance bound must be >= 0, got {}", self.distance_bound)));
        }
        if !(self.tau > 0.0) {
            return Err(GameError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.feature_radius_sigmas > 0.0) {
            return Err(GameError::Config(format!(
                "feature radius must be > 0, got {}",
                self.feature_radius_sigmas
            )));
        }
        if self.max_depth == 0 {
            return Err(GameError::Config("max_depth must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Turn {
    Player1,
    Player2 { feature: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Move {
    Feature(usize),
    Manipulate { x: usize, y: usize, instruction: Instruction },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TerminalStatus {
    NonTerminal,
    AdversarialFound { severity: f64 },
    OutOfBounds,
    DepthCapped,
}

impl TerminalStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, TerminalStatus::NonTerminal)
    }

    pub fn severity(&self) -> Option<f64> {
        match self {
            TerminalStatus::AdversarialFound { severity } => Some(*severity),
            _ => None,
        }
    }
}

/// `1/severity` for an adversarial terminal and 0 for a failed one.
pub fn reward_of_terminal(status: TerminalStatus) -> Result<f64, GameError> {
    match status {
        TerminalStatus::NonTerminal => Err(GameError::NonTerminal),
        TerminalStatus::AdversarialFound { severity } => Ok(1.0 / severity),
        TerminalStatus::OutOfBounds | TerminalStatus::DepthCapped => Ok(0.0),
    }
}

/// A position: the current image, how many manipulations led to it, its
/// classification and whose turn it is. States are never mutated.
#[derive(Debug, Clone, PartialEq)]
pub struct GameState {
    pub image: Image,
    pub depth: usize,
    pub probs: ClassProbs,
    pub turn: Turn,
}

impl GameState {
    /// Identifies the position for memoisation.
    pub fn key(&self) -> (Vec<u64>, usize, Turn) {
        (self.image.key(), self.depth, self.turn)
    }
}

/// Everything that stays fixed during a game: the original image and its
/// class, the keypoints with their pixel discs, the classifier and the rules.
pub struct Game<'a> {
    original: Image,
    original_class: usize,
    keypoints: Vec<Keypoint>,
    saliency: SaliencyModel,
    discs: Vec<Vec<WeightedPixel>>,
    oracle: &'a dyn Oracle,
    config: GameConfig,
}

impl<'a> Game<'a> {
    pub fn new(
        original: Image,
        oracle: &'a dyn Oracle,
        keypoints: Vec<Keypoint>,
        config: GameConfig,
    ) -> Result<Self, GameError> {
        config.validate()?;
        if keypoints.is_empty() {
            return Err(GameError::NoKeypoints);
        }
        let (w, h) = (original.width(), original.height());
        let saliency = build_saliency(&keypoints, w, h)?;
        let discs = keypoints
            .iter()
            .map(|k| disc_pixels(k.x, k.y, k.size, config.feature_radius_sigmas, w, h))
            .collect();
        let original_class = oracle.label(&original)?;
        if let Goal::Targeted(c) = config.goal {
            if c >= oracle.class_count() {
                return Err(GameError::Config(format!(
                    "target class {c} but the classifier has {} classes",
                    oracle.class_count()
                )));
            }
        }
        Ok(Game {
            original,
            original_class,
            keypoints,
            saliency,
            discs,
            oracle,
            config,
        })
    }

    pub fn original(&self) -> &Image {
        &self.original
    }

    pub fn original_class(&self) -> usize {
        self.original_class
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn saliency(&self) -> &SaliencyModel {
        &self.saliency
    }

    pub fn oracle(&self) -> &dyn Oracle {
        self.oracle
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    /// Pixels player II may touch after feature `i` was chosen, with their
    /// probabilities under the feature's truncated Gaussian.
    pub fn disc(&self, feature: usize) -> &[WeightedPixel] {
        &self.discs[feature]
    }

    pub fn with_config(&self, config: GameConfig) -> Result<Game<'a>, GameError> {
        Game::new(self.original.clone(), self.oracle, self.keypoints.clone(), config)
    }

    pub fn initial_state(&self) -> Result<GameState, GameError> {
        Ok(GameState {
            image: self.original.clone(),
            depth: 0,
            probs: self.oracle.classify(&self.original)?,
            turn: Turn::Player1,
        })
    }

    /// Whether a classification meets the attack goal.
    pub fn goal_met(&self, probs: &ClassProbs) -> bool {
        match self.config.goal {
            Goal::Targeted(c) => probs.argmax() == c,
            Goal::NonTargeted => probs.argmax() != self.original_class,
        }
    }

    /// Errors when the unperturbed image already satisfies the goal.
    pub fn ensure_attackable(&self) -> Result<(), GameError> {
        let probs = self.oracle.classify(&self.original)?;
        if self.goal_met(&probs) {
            return Err(GameError::AlreadyAdversarial(probs.argmax()));
        }
        Ok(())
    }

    pub fn player1_moves(&self, state: &GameState) -> Result<Vec<usize>, GameError> {
        match state.turn {
            Turn::Player1 => Ok((0..self.keypoints.len()).collect()),
            Turn::Player2 { .. } => Err(GameError::WrongTurn),
        }
    }

    /// Pixels of the chosen feature's disc in `(y, x)` order, each with `Plus`
    /// before `Minus`.
    pub fn player2_moves(&self, state: &GameState) -> Result<Vec<(usize, usize, Instruction)>, GameError> {
        match state.turn {
            Turn::Player2 { feature } => Ok(self.discs[feature]
                .iter()
                .flat_map(|p| Instruction::BOTH.map(|i| (p.x, p.y, i)))
                .collect()),
            Turn::Player1 => Err(GameError::WrongTurn),
        }
    }

    /// Legal moves with the probability a random (nature) player assigns to
    /// each: `λ_r / Σ λ_r` for features, disc mass times 1/2 for manipulations.
    pub fn weighted_moves(&self, state: &GameState) -> Vec<(Move, f64)> {
        match state.turn {
            Turn::Player1 => self
                .saliency
                .weights()
                .iter()
                .enumerate()
                .map(|(i, &w)| (Move::Feature(i), w))
                .collect(),
            Turn::Player2 { feature } => self.discs[feature]
                .iter()
                .flat_map(|p| {
                    Instruction::BOTH.map(|instruction| {
                        (
                            Move::Manipulate {
                                x: p.x,
                                y: p.y,
                                instruction,
                            },
                            p.prob / 2.0,
                        )
                    })
                })
                .collect(),
        }
    }

    /// Samples a move the way a random player does during playouts.
    pub fn random_move<R: Rng + ?Sized>(&self, state: &GameState, rng: &mut R) -> Move {
        match state.turn {
            Turn::Player1 => Move::Feature(crate::saliency::sample_index(self.saliency.weights().iter().copied(), rng)),
            Turn::Player2 { feature } => {
                let disc = &self.discs[feature];
                let p = disc[crate::saliency::sample_index(disc.iter().map(|p| p.prob), rng)];
                let instruction = if rng.gen_bool(0.5) { Instruction::Plus } else { Instruction::Minus };
                Move::Manipulate {
                    x: p.x,
                    y: p.y,
                    instruction,
                }
            }
        }
    }

    pub fn step(&self, state: &GameState, mv: Move) -> Result<GameState, GameError> {
        match (state.turn, mv) {
            (Turn::Player1, Move::Feature(i)) => {
                if i >= self.keypoints.len() {
                    return Err(GameError::IllegalMove(format!(
                        "feature {i} but only {} keypoints",
                        self.keypoints.len()
                    )));
                }
                Ok(GameState {
                    turn: Turn::Player2 { feature: i },
                    ..state.clone()
                })
            }
            (Turn::Player2 { feature }, Move::Manipulate { x, y, instruction }) => {
                if !self.discs[feature].iter().any(|p| p.x == x && p.y == y) {
                    return Err(GameError::IllegalMove(format!(
                        "pixel ({x}, {y}) is outside the disc of feature {feature}"
                    )));
                }
                let spec = ManipulationSpec::single(x, y, instruction, self.config.tau, self.config.mode);
                let image = apply_manipulation(&state.image, &spec)?;
                let probs = self.oracle.classify(&image)?;
                Ok(GameState {
                    image,
                    depth: state.depth + 1,
                    probs,
                    turn: Turn::Player1,
                })
            }
            _ => Err(GameError::WrongTurn),
        }
    }

    /// Checks, in order: goal met inside the distance bound, bound exceeded,
    /// depth cap reached.
    pub fn terminal_status(&self, state: &GameState) -> Result<TerminalStatus, GameError> {
        if state.turn != Turn::Player1 {
            return Err(GameError::WrongTurn);
        }
        let dist = distance(&state.image, &self.original, self.config.norm)?;
        let status = if self.goal_met(&state.probs) && dist <= self.config.distance_bound {
            TerminalStatus::AdversarialFound { severity: dist }
        } else if dist > self.config.distance_bound {
            TerminalStatus::OutOfBounds
        } else if state.depth >= self.config.max_depth {
            TerminalStatus::DepthCapped
        } else {
            TerminalStatus::NonTerminal
        };
        Ok(status)
    }

    /// Plays `moves` from the initial state.
    pub fn replay(&self, moves: &[Move]) -> Result<GameState, GameError> {
        moves.iter().try_fold(self.initial_state()?, |s, &m| self.step(&s, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::fallback_grid;
    use crate::oracle::{BuiltInModel, Layer};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Class 1 once the pixel sum exceeds `threshold`.
    fn sum_model(dims: usize, threshold: f64) -> BuiltInModel {
        let mut weights = vec![0.0; dims];
        weights.extend(vec![10.0; dims]);
        BuiltInModel::linear(Layer::new(2, dims, weights, vec![0.0, -10.0 * threshold]).unwrap())
    }

    fn config(d: f64) -> GameConfig {
        GameConfig {
            distance_bound: d,
            ..GameConfig::default()
        }
    }

    #[test]
    fn moves_enumeration() {
        let model = sum_model(25, 10.0);
        let img = Image::filled(5, 5, 1, 0.0).unwrap();
        let game = Game::new(img.clone(), &model, fallback_grid(5, 5), config(3.0)).unwrap();
        let s0 = game.initial_state().unwrap();
        assert_eq!(game.player1_moves(&s0).unwrap(), (0..16).collect::<Vec<_>>());
        assert!(matches!(game.player2_moves(&s0), Err(GameError::WrongTurn)));

        let game = Game::new(img.clone(), &model, vec![Keypoint::new(2.0, 2.0, 0.4, 1.0)], config(3.0)).unwrap();
        let s1 = game.step(&game.initial_state().unwrap(), Move::Feature(0)).unwrap();
        assert_eq!(
            game.player2_moves(&s1).unwrap(),
            vec![(2, 2, Instruction::Plus), (2, 2, Instruction::Minus)]
        );
        assert!(matches!(game.player1_moves(&s1), Err(GameError::WrongTurn)));

        let game = Game::new(img, &model, vec![Keypoint::new(0.0, 0.0, 1.0, 1.0)], config(3.0)).unwrap();
        let s1 = game.step(&game.initial_state().unwrap(), Move::Feature(0)).unwrap();
        let moves = game.player2_moves(&s1).unwrap();
        assert_eq!(moves.len(), 2 * game.disc(0).len());
        assert_eq!(game.disc(0).len(), 6);
        assert!(moves.windows(2).all(|w| (w[0].1, w[0].0, w[0].2) < (w[1].1, w[1].0, w[1].2)));
    }

    #[test]
    fn no_keypoints_is_an_error() {
        let model = sum_model(4, 1.0);
        let img = Image::filled(2, 2, 1, 0.0).unwrap();
        assert!(matches!(Game::new(img, &model, vec![], config(1.0)), Err(GameError::NoKeypoints)));
    }

    #[test]
    fn steps_and_statuses() {
        let model = sum_model(9, 1.5);
        let img = Image::filled(3, 3, 1, 0.0).unwrap();
        let game = Game::new(img.clone(), &model, vec![Keypoint::new(1.0, 1.0, 1.0, 1.0)], config(2.0)).unwrap();
        let s0 = game.initial_state().unwrap();
        assert_eq!(game.terminal_status(&s0).unwrap(), TerminalStatus::NonTerminal);

        let s1 = game.step(&s0, Move::Feature(0)).unwrap();
        assert_eq!(s1.image, s0.image);
        assert!(matches!(game.terminal_status(&s1), Err(GameError::WrongTurn)));

        let plus = |x, y| Move::Manipulate {
            x,
            y,
            instruction: Instruction::Plus,
        };
        let s2 = game.step(&s1, plus(0, 0)).unwrap();
        assert_eq!(s2.depth, 1);
        assert_eq!(s2.image.pixel(0, 0), &[1.0]);
        assert_eq!(s0.image, img);
        assert_eq!(game.terminal_status(&s2).unwrap(), TerminalStatus::NonTerminal);

        let s4 = game.step(&game.step(&s2, Move::Feature(0)).unwrap(), plus(2, 2)).unwrap();
        assert_eq!(
            game.terminal_status(&s4).unwrap(),
            TerminalStatus::AdversarialFound { severity: 2.0 }
        );

        // A third saturated pixel without a class change exceeds d = 2.
        let model = sum_model(9, 5.0);
        let game = Game::new(img, &model, vec![Keypoint::new(1.0, 1.0, 1.0, 1.0)], config(2.0)).unwrap();
        let s = game
            .replay(&[Move::Feature(0), plus(0, 0), Move::Feature(0), plus(1, 0), Move::Feature(0), plus(2, 0)])
            .unwrap();
        assert_eq!(game.terminal_status(&s).unwrap(), TerminalStatus::OutOfBounds);

        assert!(matches!(game.step(&s0, plus(0, 0)), Err(GameError::WrongTurn)));
        assert!(matches!(game.step(&s0, Move::Feature(3)), Err(GameError::IllegalMove(_))));
    }

    #[test]
    fn adversarial_outside_the_bound_is_out_of_bounds() {
        // One colour pixel changes three L0 dimensions at once.
        let mut weights = vec![0.0; 12];
        weights.extend(vec![10.0; 12]);
        let model = BuiltInModel::linear(Layer::new(2, 12, weights, vec![0.0, -25.0]).unwrap());
        let img = Image::filled(2, 2, 3, 0.0).unwrap();
        let game = Game::new(img, &model, vec![Keypoint::new(0.5, 0.5, 1.0, 1.0)], config(2.0)).unwrap();
        let s = game
            .replay(&[
                Move::Feature(0),
                Move::Manipulate {
                    x: 0,
                    y: 0,
                    instruction: Instruction::Plus,
                },
            ])
            .unwrap();
        assert_eq!(s.probs.argmax(), 1);
        assert_eq!(game.terminal_status(&s).unwrap(), TerminalStatus::OutOfBounds);
    }

    #[test]
    fn depth_cap() {
        let model = sum_model(1, 5.0);
        let img = Image::filled(1, 1, 1, 0.5).unwrap();
        let cfg = GameConfig {
            mode: ManipulationMode::Step,
            tau: 0.1,
            norm: NormOrder::L1,
            max_depth: 2,
            ..config(1.0)
        };
        let game = Game::new(img, &model, vec![Keypoint::new(0.0, 0.0, 1.0, 1.0)], cfg).unwrap();
        let up = Move::Manipulate {
            x: 0,
            y: 0,
            instruction: Instruction::Plus,
        };
        let down = Move::Manipulate {
            x: 0,
            y: 0,
            instruction: Instruction::Minus,
        };
        let s = game.replay(&[Move::Feature(0), up, Move::Feature(0), down]).unwrap();
        assert_eq!(game.terminal_status(&s).unwrap(), TerminalStatus::DepthCapped);
    }

    #[test]
    fn rewards() {
        assert_eq!(reward_of_terminal(TerminalStatus::AdversarialFound { severity: 4.0 }).unwrap(), 0.25);
        assert_eq!(reward_of_terminal(TerminalStatus::AdversarialFound { severity: 0.5 }).unwrap(), 2.0);
        assert_eq!(reward_of_terminal(TerminalStatus::OutOfBounds).unwrap(), 0.0);
        assert_eq!(reward_of_terminal(TerminalStatus::DepthCapped).unwrap(), 0.0);
        assert!(matches!(reward_of_terminal(TerminalStatus::NonTerminal), Err(GameError::NonTerminal)));
    }

    #[test]
    fn config_validation() {
        assert!(config(0.0).validate().is_ok());
        assert!(config(-1.0).validate().is_err());
        assert!(GameConfig { tau: 0.0, ..config(1.0) }.validate().is_err());
        assert!(GameConfig { max_depth: 0, ..config(1.0) }.validate().is_err());
        let model = sum_model(4, 1.0);
        let img = Image::filled(2, 2, 1, 0.0).unwrap();
        let cfg = GameConfig {
            goal: Goal::Targeted(2),
            ..config(1.0)
        };
        assert!(matches!(Game::new(img, &model, fallback_grid(2, 2), cfg), Err(GameError::Config(_))));
        assert_eq!("adv".parse::<Player2Role>().unwrap(), Player2Role::Adversarial);
        assert!("x".parse::<Player2Role>().is_err());
    }

    #[test]
    fn weighted_moves_are_distributions() {
        let model = sum_model(36, 100.0);
        let img = Image::filled(6, 6, 1, 0.3).unwrap();
        let game = Game::new(img, &model, fallback_grid(6, 6), config(3.0)).unwrap();
        let s0 = game.initial_state().unwrap();
        let total: f64 = game.weighted_moves(&s0).iter().map(|m| m.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let s1 = game.step(&s0, Move::Feature(5)).unwrap();
        let moves = game.weighted_moves(&s1);
        assert_eq!(moves.len(), game.player2_moves(&s1).unwrap().len());
        assert!((moves.iter().map(|m| m.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn saturate_l0_is_monotone_and_replay_is_exact(seed in 0u64..500) {
            let model = sum_model(16, 100.0);
            // Strictly inside (0, 1): saturating back can never restore an original value.
            let img = Image::new(4, 4, 1, (0..16).map(|i| (i as f64 + 1.0) / 17.0).collect()).unwrap();
            let game = Game::new(img, &model, fallback_grid(4, 4), config(100.0)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = game.initial_state().unwrap();
            let mut moves = Vec::new();
            let mut last = 0.0;
            for _ in 0..20 {
                let mv = game.random_move(&state, &mut rng);
                moves.push(mv);
                state = game.step(&state, mv).unwrap();
                let d = distance(&state.image, game.original(), NormOrder::L0).unwrap();
                prop_assert!(d >= last);
                last = d;
            }
            let again = game.replay(&moves).unwrap();
            prop_assert_eq!(again, state);
        }
    }
}
