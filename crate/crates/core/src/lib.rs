//! Numerical and stochastic laboratory for level-set percolation of the
//! Gaussian free field on the (d+1)-regular tree.
//!
//! The crate is organised bottom-up:
//!
//! * [`measures`]: model parameters, Gaussian densities, quadrature grids and
//!   functions of the field value stored on them.
//! * [`spectral`]: Nyström discretisation of the one-step branching operator
//!   `L_h`, its Perron eigenpair, the critical height `h*` and the tail
//!   constants `C1`, `C2`.
//! * [`fixedpoint`]: Picard solvers for the forward percolation probability
//!   and for the Laplace transform of the critical cluster size.
//! * [`simulator`]: Monte Carlo exploration of clusters through the
//!   branching-process representation of the field.
//! * [`harness`]: experiments that pit solver predictions against simulation
//!   and emit pass/fail verdicts.
//! * [`output`]: JSON/CSV writers shared by the harness and the CLI.

pub mod error;
pub mod fixedpoint;
pub mod harness;
pub mod measures;
pub mod output;
pub mod simulator;
pub mod spectral;

pub use error::{Error, Result};
pub use measures::{FieldFunction, Grid, GridSpec, ModelParams};
pub use spectral::{CriticalData, CriticalPoint, Eigenpair, OperatorDisc};
