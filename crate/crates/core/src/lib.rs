// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod cli;
pub mod corpus;
pub mod diffcore;
pub mod editor;
pub mod error;
pub mod evalharness;
pub mod io;
pub mod optim;
pub mod transformer;
pub mod weightupdate;

pub use error::{Error, Result};
