//! Numerical workbench for time quasi-periodic solutions of the random
//! discrete nonlinear Schrödinger equation
//! i∂ₜu = (εΔ + V)u + δ|u|^{2p}u on Z^d.

pub mod disorder;
pub mod evolve;
pub mod field;
pub mod lattice;
pub mod linop;
pub mod measure;
pub mod solver;
pub mod spectral;
