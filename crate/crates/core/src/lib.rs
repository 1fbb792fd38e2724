//! Feature-guided black-box robustness testing for image classifiers.

// `!(x > 0.0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod exact;
pub mod features;
pub mod game;
pub mod image;
pub mod mcts;
pub mod oracle;
pub mod saliency;
