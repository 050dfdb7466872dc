//! Event-driven simulation of mechanical systems with unilateral constraints,
//! together with the piecewise-linear (Bouligand) derivative of the resulting
//! flow and the stability / controllability tests built on it.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`, which is what the default
//! tolerances are tuned for.

pub mod analysis;
pub mod integrate;
pub mod model;
pub mod numdiff;
pub mod scalar;
pub mod sensitivity;
pub mod sim;
pub mod systems;

pub use model::{ActiveSet, ControlledSystem, MechSystem, ModelError, State, Tolerances};
pub use scalar::Real;
pub use sensitivity::{b_derivative, b_derivative_controlled, BDerivative, SensitivityConfig};
pub use sim::{flow, HybridTrajectory, ResetLaw, SimConfig, Termination};

pub type State64 = model::State<f64>;
pub type Tolerances64 = model::Tolerances<f64>;
pub type SimConfig64 = sim::SimConfig<f64>;
pub type Trajectory64 = sim::HybridTrajectory<f64>;
pub type BDerivative64 = sensitivity::BDerivative<f64>;
