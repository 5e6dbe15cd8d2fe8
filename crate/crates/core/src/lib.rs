//! Numerical Morse–Smale complexes on closed surfaces and on the standard
//! quadratic models of `R^n`.
//!
//! The pipeline runs in stages, each living in its own module:
//!
//! * [`geometry`] – manifold models, periodic coordinates and metrics;
//! * [`morse`] – Morse functions, critical points, standard charts and the
//!   critical-value ladder;
//! * [`flow`] – the gradient flow, the rescaled flow with unit speed in the
//!   function value, closed-form standard-model flows and level transfer maps;
//! * [`connections`] – unstable spheres, connecting orbits between critical
//!   points of adjacent index and their signs;
//! * [`strata`] – face lattices of broken-trajectory spaces;
//! * [`perturb`] – the model-box transversality perturbation;
//! * [`complex`] – the geometric cochain complex, exact ranks, Betti numbers
//!   and character-twisted complexes over cyclic coverings;
//! * [`derham`] – differential forms, integration over unstable manifolds and
//!   the Stokes chain-map identity;
//! * [`scenario`] and [`report`] – JSON scenarios, catalogs and the pipeline
//!   runner used by the `morseflow` binary.

pub mod complex;
pub mod connections;
pub mod cyclotomic;
pub mod derham;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod linalg;
pub mod morse;
pub mod ode;
pub mod perturb;
pub mod quadrature;
pub mod report;
pub mod scenario;
pub mod strata;

pub use error::{Error, Result};
