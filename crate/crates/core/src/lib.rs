//! Partially observed linear-quadratic-Gaussian mean field games with one
//! major agent and a population of minor agents.
//!
//! The pipeline is: describe a game with [`GameParameters`], check it with
//! [`validate`], compute the infinite-population equilibrium with
//! [`solve_fixed_point`], then evaluate it on finite populations with the
//! [`sim`] module.
//!
//! Everything is generic over the scalar type (`f32` or `f64`); the
//! aliases at the crate root fix it to one of the two.

pub mod consistency;
pub mod error;
pub mod filters;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod scalar;
pub mod sim;

pub use consistency::{
    apply_consistency_map, fixed_point_residual, solve_control_problems, solve_fixed_point,
    FixedPointOptions, MeanFieldCoefficients, MeanFieldSolution,
};
pub use error::{MfgError, Result};
pub use linalg::{Mat, Vector};
pub use model::{validate, validate_solution, AssumptionReport, CheckStatus, GameParameters, MinorType};
pub use riccati::{
    integrate_filter_covariances, solve_discounted_care, stationary_covariances, DiscountedCareProblem,
    FilterCovariances,
};
pub use scalar::Real;
pub use sim::{Deviation, Equilibrium, Population, PopulationMode, SimulationRun};

pub type GameParameters64 = GameParameters<f64>;
pub type GameParameters32 = GameParameters<f32>;
pub type MeanFieldSolution64 = MeanFieldSolution<f64>;
pub type MeanFieldSolution32 = MeanFieldSolution<f32>;
pub type Equilibrium64 = Equilibrium<f64>;
pub type Equilibrium32 = Equilibrium<f32>;
pub type SimulationRun64 = SimulationRun<f64>;
pub type Mat64 = Mat<f64>;
pub type Vector64 = Vector<f64>;
