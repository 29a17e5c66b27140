//! Forward models for hybrid NV-center / magnetic-nanoparticle thermometers.
//!
//! The chain runs from the mean-field magnetization of the particle
//! ([`magnet`]) through the NV spin Hamiltonian ([`spin`]) to the ensemble
//! ODMR spectrum ([`ensemble`]), the sensitivity estimators
//! ([`sensitivity`]) and Monte-Carlo measurement protocols ([`protocol`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod error;
pub mod magnet;
pub mod materials;
pub mod protocol;
pub mod scenarios;
pub mod sensitivity;
pub mod spin;

pub use error::{Error, Result};
