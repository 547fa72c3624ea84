//! Sparse fiber orientation distribution estimation on the sphere.
//!
//! The crate covers the whole pipeline: Healpix graphs ([`sphere_grid`]),
//! real spherical harmonics ([`harmonics`]), the multi-tissue forward model
//! and simulator ([`signal_model`]), the constrained spherical deconvolution
//! baseline ([`csd`]), a small reverse-mode differentiation engine
//! ([`autodiff`]), the equivariant spherical U-Net ([`esd`]), peak extraction
//! and scoring ([`peaks`]), and file formats plus the command line ([`io`],
//! [`cli`]).

pub mod autodiff;
pub mod cli;
pub mod csd;
pub mod error;
pub mod esd;
pub mod harmonics;
pub mod io;
pub mod peaks;
pub mod rng;
pub mod signal_model;
pub mod sparse;
pub mod sphere_grid;

pub use error::{Error, Result};
