//! Black-box classifiers: the [`Oracle`] trait, built-in linear and one-hidden-layer
//! models, external classifiers over a line protocol, and the constants used by
//! safety certificates.

mod external;
mod model;

use thiserror::Error;

use crate::image::Image;

pub use external::{serve, ExternalOracle, ServeFault, DEFAULT_TIMEOUT};
pub use model::{load_model, save_model, BuiltInModel, Layer, ModelKind};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("input has {found} dimensions, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("probability {value} at class {index} is outside [0, 1]")]
    ProbOutOfRange { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, expected 1 within 1e-6")]
    NotNormalized { sum: f64 },
    #[error("empty probability vector")]
    NoClasses,
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("oracle did not answer within {0:?}")]
    Timeout(std::time::Duration),
    #[error("oracle session aborted earlier: {0}")]
    SessionBroken(String),
    #[error("cannot estimate a confidence gap from an empty dataset")]
    EmptyDataset,
}

/// Per-class confidences `N(α, c)`. Entries lie in `[0, 1]` and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs {
    probs: Vec<f64>,
}

impl ClassProbs {
    pub fn new(probs: Vec<f64>) -> Result<Self, OracleError> {
        if probs.is_empty() {
            return Err(OracleError::NoClasses);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(OracleError::ProbOutOfRange { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(OracleError::NotNormalized { sum });
        }
        Ok(ClassProbs { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    pub fn confidence(&self, class: usize) -> f64 {
        self.probs[class]
    }

    /// Most confident class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub trait Oracle: Send + Sync {
    fn class_count(&self) -> usize;

    fn classify(&self, image: &Image) -> Result<ClassProbs, OracleError>;

    fn label(&self, image: &Image) -> Result<usize, OracleError> {
        Ok(self.classify(image)?.argmax())
    }
}

impl<T: Oracle + ?Sized> Oracle for Box<T> {
    fn class_count(&self) -> usize {
        (**self).class_count()
    }

    fn classify(&self, image: &Image) -> Result<ClassProbs, OracleError> {
        (**self).classify(image)
    }
}

impl<T: Oracle + ?Sized> Oracle for &T {
    fn class_count(&self) -> usize {
        (**self).class_count()
    }

    fn classify(&self, image: &Image) -> Result<ClassProbs, OracleError> {
        (**self).classify(image)
    }
}

/// Ties a user-supplied or analytic Lipschitz constant to a confidence gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzInfo {
    pub hbar: f64,
    pub ell: f64,
    pub tau_max: f64,
}

impl LipschitzInfo {
    pub fn new(hbar: f64, ell: f64) -> Result<Self, OracleError> {
        if !(hbar > 0.0) || !(0.0..=1.0).contains(&ell) {
            return Err(OracleError::InvalidModel(format!(
                "need hbar > 0 and ell in [0, 1], got hbar={hbar}, ell={ell}"
            )));
        }
        Ok(LipschitzInfo {
            hbar,
            ell,
            tau_max: 2.0 * ell / hbar,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapEstimate {
    pub ell: f64,
    /// Set when no two images in the dataset were classified differently, in
    /// which case `ell` is the uninformative value 1.
    pub no_class_change: bool,
}

/// Smallest confidence gap `|N(α′, N(α)) − N(α, N(α))|` over dataset pairs that
/// the oracle labels differently.
pub fn estimate_confidence_gap(oracle: &dyn Oracle, dataset: &[Image]) -> Result<GapEstimate, OracleError> {
    if dataset.is_empty() {
        return Err(OracleError::EmptyDataset);
    }
    let probs = dataset
        .iter()
        .map(|img| oracle.classify(img))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = probs.iter().map(ClassProbs::argmax).collect();
    let mut gap: Option<f64> = None;
    for (i, a) in probs.iter().enumerate() {
        let c = labels[i];
        for (j, b) in probs.iter().enumerate() {
            if labels[j] != c {
                let g = (b.confidence(c) - a.confidence(c)).abs();
                gap = Some(gap.map_or(g, |m: f64| m.min(g)));
            }
        }
    }
    Ok(match gap {
        Some(ell) => GapEstimate {
            ell,
            no_class_change: false,
        },
        None => GapEstimate {
            ell: 1.0,
            no_class_change: true,
        },
    })
}
