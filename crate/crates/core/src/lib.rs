//! Desk-scale federated averaging simulator.
//!
//! The crate is organized around the round protocol: [`tensor`] holds the
//! numeric kernels, [`model`] composes them into small classifiers with
//! exact backward passes, [`optim`] provides AdamW and cross-entropy,
//! [`data`] covers dataset storage, synthesis, preprocessing, and client
//! partitioning, and [`fed`] runs the client/server loop itself.

pub mod codec;
pub mod data;
pub mod error;
pub mod fed;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
