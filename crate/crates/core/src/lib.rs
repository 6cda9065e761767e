//! Solitary-wave dynamics of the nonlinear Klein-Gordon equation
//! `□_g φ − m²φ + |φ|^{p−1}φ = 0` on fixed, slowly varying Lorentzian
//! backgrounds.
//!
//! The crate provides the building blocks for test-particle numerics at desk
//! scale: radial ground states, the 8-parameter boosted soliton family,
//! Fermi coordinate charts along timelike geodesics, a finite-difference
//! evolution of the field equation with its conserved functionals, and the
//! modulation ODE system that tracks the soliton parameters.

pub mod evolution;
pub mod geometry;
pub mod grid;
pub mod ground_state;
pub mod modulation;
pub mod reduce;
pub mod soliton;

pub use grid::{FieldState, GridSpec};
pub use ground_state::{ProfileNorms, RadialProfile};
pub use soliton::SolitonParams;
