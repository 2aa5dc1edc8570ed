//! Desk-scale transformer world-model laboratory.
//!
//! The crate covers the whole loop: a seeded toy environment suite, offline
//! collection with a decaying random-action schedule, a Gaussian VAE over
//! pixels, a decoder-only transformer over `(z, a, r)` triplets, external
//! reward/termination classifiers, PPO both in the real environments and
//! inside imagined rollouts, and the depth-sweep tooling that labels each
//! environment's scaling regime.

pub mod tensor;
pub mod env;
pub mod sweep;
pub mod vae;
pub mod predictor;
pub mod ppo;
pub mod store;
pub mod wm;
