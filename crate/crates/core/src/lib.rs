//! Persona-aware topic selection for dialogue.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoding;
pub mod error;
pub mod evalsuite;
pub mod expansion;
pub mod model;
pub mod nn;
pub mod personasel;
pub mod responder;
pub mod synthgen;
pub mod topichead;
pub mod training;

pub use error::{Error, Result};
