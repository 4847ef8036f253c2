//! Hierarchical cooperative loco-manipulation for two floating-base
//! manipulators.
//!
//! Layers, from the top:
//! - [`refgen`]: scripted reference-trajectory provider with the
//!   canonical (task-frame) observation/action contract and receding-horizon
//!   execution.
//! - [`mpc`]: proactive kinematic MPC with discrete control-barrier
//!   collision constraints.
//! - [`wbc`]: reactive weighted velocity QP with cooperative admittance.
//! - [`sim`]: deterministic kinematic world used to close the loop.
//!
//! Supporting modules: [`geometry`], [`kinematics`], [`qp`], [`grasp`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod geometry;
pub mod grasp;
pub mod kinematics;
pub mod mpc;
pub mod qp;
pub mod refgen;
pub mod sim;
pub mod wbc;

pub use geometry::{Pose, Twist};
pub use kinematics::{RobotModel, WholeBodyState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream `stream` of an episode seed. Each consumer
/// owns its stream, so draws do not depend on call order across modules.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
