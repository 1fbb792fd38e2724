//! Safety certificates for an L1 neighbourhood from a Lipschitz constant `ħ`
//! and a confidence gap `ℓ`.
//!
//! Every τ-grid image of the neighbourhood is classified. If none is
//! adversarial, safety of the whole neighbourhood follows once every point is
//! close enough to a correctly classified grid image that a class change would
//! need a confidence swing of at least `ℓ`, i.e. once the grid's covering radius
//! `r` satisfies `ħ·r < ℓ`. An estimated `ℓ` can overstate the true gap, so
//! each grid image's own margin is also required to exceed `2ħ·r`.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::exact::{compare_severity, for_each_l1_grid_point, ExactError, ENUMERATION_LIMIT};
use crate::game::{GameConfig, Goal};
use crate::image::{distance, Image, NormOrder};
use crate::oracle::{Oracle, OracleError};

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("invalid Lipschitz data: {0}")]
    InvalidLipschitz(String),
    #[error("aggregator radius must be positive, got {0}")]
    InvalidBeta(f64),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Exact(#[from] ExactError),
}

/// `2ℓ/ħ`, the largest grid step for which every grid image is a
/// misclassification aggregator with radius `τ/2`.
pub fn max_safe_tau(hbar: f64, ell: f64) -> Result<f64, CertifyError> {
    if !(hbar > 0.0) {
        return Err(CertifyError::InvalidLipschitz(format!("hbar must be > 0, got {hbar}")));
    }
    if !(0.0..=1.0).contains(&ell) {
        return Err(CertifyError::InvalidLipschitz(format!("ell must be in [0, 1], got {ell}")));
    }
    Ok(2.0 * ell / hbar)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Safe,
    Unsafe,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Safe => "SAFE",
            Verdict::Unsafe => "UNSAFE",
            Verdict::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub verdict: Verdict,
    pub witness: Option<Image>,
    pub witness_severity: Option<f64>,
    pub tau_used: f64,
    pub tau_max: f64,
    pub grid_count: u128,
    pub rationale: String,
}

impl Certificate {
    /// Machine-readable `key=value` lines.
    pub fn key_values(&self) -> String {
        let mut out = format!(
            "verdict={}\ntau_used={}\ntau_max={}\ngrid_count={}\nrationale={}\n",
            self.verdict, self.tau_used, self.tau_max, self.grid_count, self.rationale
        );
        if let Some(s) = self.witness_severity {
            out.push_str(&format!("witness_severity={s}\n"));
        }
        out
    }
}

/// How far `probs` is from meeting the goal: the original class's lead over
/// the runner-up, or the best other class's lead over the target.
fn goal_margin(goal: Goal, original_class: usize, probs: &[f64]) -> f64 {
    let best_except = |skip: usize| {
        probs
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != skip)
            .map(|(_, &p)| p)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    match goal {
        Goal::NonTargeted => probs[original_class] - best_except(original_class),
        Goal::Targeted(t) => best_except(t) - probs[t],
    }
}

fn goal_met(goal: Goal, original_class: usize, label: usize) -> bool {
    match goal {
        Goal::Targeted(c) => label == c,
        Goal::NonTargeted => label != original_class,
    }
}

/// Decides whether `η(alpha, 1, d)` contains an adversarial example.
///
/// The verdict is `Unsafe` with the least-severity grid witness as soon as a
/// grid image meets the goal. `Safe` needs `τ ≤ 2ℓ/ħ`, a clean grid, a
/// covering radius `r = min(d, P0·τ)` small enough that `ħ·r < ℓ`, and every
/// grid image at least `2ħ·r` away from meeting the goal. Anything else,
/// including norms other than L1 and grids above the enumeration limit, is
/// `Inconclusive`.
pub fn certify_safety(
    alpha: &Image,
    oracle: &dyn Oracle,
    config: &GameConfig,
    hbar: f64,
    ell: f64,
) -> Result<Certificate, CertifyError> {
    let tau_max = max_safe_tau(hbar, ell)?;
    let tau = config.tau;
    let d = config.distance_bound;
    let inconclusive = |grid_count, rationale: &str| Certificate {
        verdict: Verdict::Inconclusive,
        witness: None,
        witness_severity: None,
        tau_used: tau,
        tau_max,
        grid_count,
        rationale: rationale.to_string(),
    };
    if config.norm != NormOrder::L1 {
        return Ok(inconclusive(0, "certificates are defined for the L1 distance only"));
    }
    if tau > tau_max {
        return Ok(inconclusive(0, "Lipschitz condition unmet"));
    }

    let original_class = oracle.label(alpha)?;
    let mut best: Option<(f64, Image)> = None;
    let mut min_margin = f64::INFINITY;
    let visited = for_each_l1_grid_point(alpha, tau, d, ENUMERATION_LIMIT, |img| {
        let probs = oracle.classify(img)?;
        if goal_met(config.goal, original_class, probs.argmax()) {
            let s = distance(img, alpha, NormOrder::L1)?;
            if best.as_ref().is_none_or(|b| compare_severity(s, b.0) == Ordering::Less) {
                best = Some((s, img.clone()));
            }
        } else {
            min_margin = min_margin.min(goal_margin(config.goal, original_class, probs.probs()));
        }
        Ok(true)
    });
    let grid_count = match visited {
        Ok(n) => n,
        Err(ExactError::Budget { count, .. }) => return Ok(inconclusive(count, "budget")),
        Err(e) => return Err(e.into()),
    };
    if let Some((severity, witness)) = best {
        return Ok(Certificate {
            verdict: Verdict::Unsafe,
            witness: Some(witness),
            witness_severity: Some(severity),
            tau_used: tau,
            tau_max,
            grid_count,
            rationale: "adversarial tau-grid image inside the neighbourhood".into(),
        });
    }
    // Truncating each offset towards alpha lands on a grid image of the same
    // ball less than tau away per dimension; alpha itself is within d.
    let radius = (alpha.dims() as f64 * tau).min(d);
    let covered = hbar * alpha.dims() as f64 * tau <= ell || hbar * d < ell;
    if !covered {
        return Ok(inconclusive(grid_count, "grid covering radius exceeds ell/hbar"));
    }
    // Two confidences can close a gap at rate at most 2ħ, so a grid margin
    // above 2ħ·r rules out a class change within r of every grid image.
    if min_margin <= 2.0 * hbar * radius {
        return Ok(inconclusive(grid_count, "grid margin below 2*hbar*r"));
    }
    Ok(Certificate {
        verdict: Verdict::Safe,
        witness: None,
        witness_severity: None,
        tau_used: tau,
        tau_max,
        grid_count,
        rationale: "no adversarial grid image and every point lies within ell/hbar of one".into(),
    })
}

/// A point drawn uniformly from the L1 ball of `radius` around `center`,
/// clamped to `[0, 1]` (clamping only shortens the offset).
pub fn sample_l1_ball<R: Rng + ?Sized>(center: &Image, radius: f64, rng: &mut R) -> Image {
    let n = center.dims();
    // n+1 exponentials normalised give a uniform point of the simplex; dropping
    // the slack coordinate and adding signs gives the ball.
    let e: Vec<f64> = (0..=n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    let data = center
        .data()
        .iter()
        .zip(&e)
        .map(|(v, ei)| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (v + sign * radius * ei / total).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(center.width(), center.height(), center.channels(), data).expect("clamped values keep the shape valid")
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggregatorCheck {
    NoCounterexample,
    Counterexample(Image),
}

/// Tries to falsify that `alpha1` is a misclassification aggregator with
/// radius `beta`: a correctly classified `alpha1` with a misclassified point in
/// its L1 ball. Finding none is not a proof.
pub fn check_aggregator<R: Rng + ?Sized>(
    alpha1: &Image,
    oracle: &dyn Oracle,
    alpha: &Image,
    beta: f64,
    samples: usize,
    rng: &mut R,
) -> Result<AggregatorCheck, CertifyError> {
    if !(beta > 0.0) {
        return Err(CertifyError::InvalidBeta(beta));
    }
    let class = oracle.label(alpha)?;
    if oracle.label(alpha1)? != class {
        return Ok(AggregatorCheck::NoCounterexample);
    }
    for _ in 0..samples {
        let alpha2 = sample_l1_ball(alpha1, beta, rng);
        if oracle.label(&alpha2)? != class {
            return Ok(AggregatorCheck::Counterexample(alpha2));
        }
    }
    Ok(AggregatorCheck::NoCounterexample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{brute_force_min_severity, GridEnumSpec, GridMode};
    use crate::image::ManipulationMode;
    use crate::oracle::{BuiltInModel, ClassProbs, Layer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Class 1 when `w·x` exceeds `threshold`.
    fn halfspace(w: Vec<f64>, threshold: f64) -> BuiltInModel {
        let n = w.len();
        let mut weights = vec![0.0; n];
        weights.extend(w);
        BuiltInModel::linear(Layer::new(2, n, weights, vec![0.0, -threshold]).unwrap())
    }

    fn l1_config(d: f64, tau: f64) -> GameConfig {
        GameConfig {
            norm: NormOrder::L1,
            distance_bound: d,
            tau,
            mode: ManipulationMode::Step,
            ..GameConfig::default()
        }
    }

    #[test]
    fn tau_formula() {
        assert_eq!(max_safe_tau(1.0, 0.5).unwrap(), 1.0);
        assert_eq!(max_safe_tau(1.0, 0.0).unwrap(), 0.0);
        assert!((max_safe_tau(2.0, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!(max_safe_tau(0.0, 0.3).is_err());
    }

    #[test]
    fn far_from_boundary_is_safe() {
        let model = halfspace(vec![1.0, 1.0, 1.0, 1.0], 3.0);
        let alpha = Image::filled(2, 2, 1, 0.1).unwrap();
        let hbar = model.lipschitz_bound_l1();
        let cert = certify_safety(&alpha, &model, &l1_config(0.2, 0.1), hbar, 0.3).unwrap();
        assert_eq!(cert.verdict, Verdict::Safe, "{}", cert.rationale);
        assert!(cert.tau_used <= cert.tau_max);
        assert!(cert.grid_count > 1);
    }

    #[test]
    fn adjacent_to_boundary_is_unsafe_with_brute_force_witness() {
        let model = halfspace(vec![4.0, 1.0, 1.0, 1.0], 1.0);
        let alpha = Image::new(2, 2, 1, vec![0.2, 0.05, 0.05, 0.05]).unwrap();
        let config = l1_config(0.25, 0.125);
        let cert = certify_safety(&alpha, &model, &config, model.lipschitz_bound_l1(), 0.2).unwrap();
        assert_eq!(cert.verdict, Verdict::Unsafe);
        let witness = cert.witness.clone().unwrap();
        let changed = witness
            .data()
            .iter()
            .zip(alpha.data())
            .filter(|(a, b)| (*a - *b).abs() > 1e-12)
            .count();
        assert_eq!(changed, 1);
        let spec = GridEnumSpec {
            tau: 0.125,
            max_changed_pixels: 1,
            mode: GridMode::StepLevels(2),
        };
        let brute = brute_force_min_severity(&alpha, &model, &config, &spec).unwrap().unwrap();
        assert!((brute.severity - cert.witness_severity.unwrap()).abs() < 1e-12);
        assert_ne!(model.label(&brute.image).unwrap(), model.label(&alpha).unwrap());
    }

    #[test]
    fn gates() {
        let model = halfspace(vec![1.0, 1.0, 1.0, 1.0], 3.0);
        let alpha = Image::filled(2, 2, 1, 0.1).unwrap();
        let cert = certify_safety(&alpha, &model, &l1_config(0.2, 0.5), 0.5, 0.1).unwrap();
        assert_eq!(cert.verdict, Verdict::Inconclusive);
        assert_eq!(cert.rationale, "Lipschitz condition unmet");

        let cfg = GameConfig {
            norm: NormOrder::L2,
            ..l1_config(0.2, 0.1)
        };
        assert_eq!(certify_safety(&alpha, &model, &cfg, 0.5, 0.3).unwrap().verdict, Verdict::Inconclusive);

        let big = Image::filled(10, 10, 1, 0.5).unwrap();
        let model = halfspace(vec![0.01; 100], 100.0);
        let cert = certify_safety(&big, &model, &l1_config(1.0, 0.01), 0.005, 1.0).unwrap();
        assert_eq!(cert.rationale, "budget");
        assert!(cert.grid_count > ENUMERATION_LIMIT);
    }

    #[test]
    fn safe_is_monotone_in_d() {
        let model = halfspace(vec![1.0, 2.0, 1.0, 0.5], 3.5);
        let alpha = Image::new(2, 2, 1, vec![0.2, 0.3, 0.1, 0.4]).unwrap();
        let hbar = model.lipschitz_bound_l1();
        let verdict = |d| certify_safety(&alpha, &model, &l1_config(d, 0.05), hbar, 0.5).unwrap().verdict;
        assert_eq!(verdict(0.4), Verdict::Safe);
        for d in [0.3, 0.2, 0.1, 0.05] {
            assert_eq!(verdict(d), Verdict::Safe);
        }
    }

    #[test]
    fn overstated_ell_is_caught_by_grid_margin() {
        // Grid images sit just inside the boundary; a generous ell alone would pass.
        let model = halfspace(vec![1.0, 1.0, 1.0, 1.0], 0.9);
        let alpha = Image::filled(2, 2, 1, 0.2).unwrap();
        let hbar = model.lipschitz_bound_l1();
        let cert = certify_safety(&alpha, &model, &l1_config(0.08, 0.02), hbar, 0.5).unwrap();
        assert_eq!(cert.verdict, Verdict::Inconclusive);
        assert_eq!(cert.rationale, "grid margin below 2*hbar*r");
    }

    #[test]
    fn l1_ball_samples_stay_inside() {
        let center = Image::new(3, 1, 1, vec![0.5, 0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mean_dist = 0.0;
        for _ in 0..2000 {
            let p = sample_l1_ball(&center, 0.3, &mut rng);
            let d = distance(&p, &center, NormOrder::L1).unwrap();
            assert!(d <= 0.3 + 1e-12);
            mean_dist += d;
        }
        assert!(mean_dist / 2000.0 > 0.05);
    }

    struct Constant;

    impl Oracle for Constant {
        fn class_count(&self) -> usize {
            3
        }

        fn classify(&self, _: &Image) -> Result<ClassProbs, OracleError> {
            ClassProbs::new(vec![0.2, 0.5, 0.3])
        }
    }

    #[test]
    fn aggregator_falsifier() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let alpha = Image::filled(1, 1, 1, 0.5).unwrap();
        assert_eq!(
            check_aggregator(&alpha, &Constant, &alpha, 0.5, 1000, &mut rng).unwrap(),
            AggregatorCheck::NoCounterexample
        );
        assert!(check_aggregator(&alpha, &Constant, &alpha, 0.0, 10, &mut rng).is_err());

        // Class flips at x = 0.55, inside the radius-0.05 ball around 0.5 (β = 0.1).
        let model = halfspace(vec![100.0], 55.0);
        let beta = 0.2;
        let found = check_aggregator(&alpha, &model, &alpha, beta, 10_000, &mut rng).unwrap();
        assert!(matches!(found, AggregatorCheck::Counterexample(ref img) if img.data()[0] > 0.55));

        // A misclassified alpha1 is vacuously fine.
        let alpha1 = Image::filled(1, 1, 1, 0.9).unwrap();
        assert_eq!(
            check_aggregator(&alpha1, &model, &alpha, beta, 100, &mut rng).unwrap(),
            AggregatorCheck::NoCounterexample
        );
    }
}
