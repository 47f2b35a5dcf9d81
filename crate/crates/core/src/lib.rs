pub mod backend;
pub mod colorspace;
pub mod config;
pub mod critic;
pub mod detect;
pub mod error;
pub mod evalharness;
pub mod losses;
pub mod maskops;
pub mod nn;
pub mod pipeline;
pub mod reference;
pub mod synthcorpus;
pub mod workflow;

pub use error::{Error, Result};
