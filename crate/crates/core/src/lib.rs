//! Single-pick container unloading with masked deep Q-learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`container`]: package sizings, the substack catalog and wall generation.
//! - [`physics`]: support graph and the analytic lift model deciding which
//!   package can be picked.
//! - [`observation`]: visibility selection, normalization and per-axis
//!   histogram equalization into a fixed-size feature matrix.
//! - [`qnet`]: the permutation-equivariant Q-network with hand-written
//!   reverse-mode gradients, plus [`gradcheck`] to verify them.
//! - [`dqn`]: replay buffer, exploration schedule, losses, optimizers and
//!   action masking.
//! - [`env`]: the unloading and tuning environments, vectorized rollouts
//!   and the training / evaluation loops.

pub mod container;
pub mod dqn;
pub mod env;
pub mod gradcheck;
pub mod observation;
pub mod physics;
pub mod qnet;
pub mod rng;

/// Formats a float with 17 significant digits so it parses back bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
