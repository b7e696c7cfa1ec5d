//! Gesture-driven patient positioning pipeline.

pub mod annotate;
pub mod augment;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hand;
pub mod image;
pub mod landmark;
pub mod par;
pub mod pipeline;
pub mod pose;
pub mod protocol;
pub mod recipe;
pub mod scenario;
pub mod service;
pub mod synth;
pub mod train;
pub mod workflow;

pub use error::{Error, Result};
