// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod config;
pub mod corpus;
pub mod dashboard;
pub mod error;
pub mod harness;
pub mod lm;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod sae;
pub mod steering;
pub mod tensorfile;

pub use error::{Error, Result};
