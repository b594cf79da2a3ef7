//! Range-only collaborative localization for fleets of planar ground vehicles.
//!
//! The crate is split along the processing chain:
//!
//! - [`kinematics`]: unicycle motion model, range model and noise injection.
//! - [`observability`]: Lie-derivative observability matrices, numerical rank and RREF.
//! - [`initializer`]: global frame construction (MDS + stress refinement) and
//!   motion-induced heading initialization.
//! - [`estimator`]: centralized error-state Kalman filter over all dynamic vehicles.
//! - [`uwb_net`]: deterministic simulation of the UWB TDMA ranging network.
//! - [`harness`]: scenarios, the end-to-end simulation driver, metrics and file I/O.

pub mod error;
pub mod estimator;
pub mod harness;
pub mod initializer;
pub mod kinematics;
pub mod observability;
pub mod uwb_net;

pub use error::{Error, Result};
pub use kinematics::{MotionMeasurement, NoiseSpec, RangeMeasurement, VehicleState};

/// Identifier of a vehicle in the fleet.
pub type VehicleId = u32;

/// Independent, reproducible random stream `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
