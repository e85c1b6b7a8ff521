//! Discovery of agent-controllable latent state in factorized dynamical
//! systems: environments whose observations entangle a controlled agent with
//! exogenous distractors, exact tabular oracles for the identifiability
//! theory, a small hand-differentiated encoder with a discrete bottleneck,
//! multi-step inverse-model training, count-based latent planning, and
//! evaluation metrics against held-out ground truth.

pub mod env;
pub mod learner;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod planner;
