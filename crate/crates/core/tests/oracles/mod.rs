//! Independent reference implementations and the seeded agreement checks
//! built on them. Shared by the per-module suites and the acceptance run.
#![allow(dead_code)]

pub mod augment;
pub mod detect;
pub mod geometry;
pub mod rank;
pub mod workflow;

/// Fails with `msg` unless `cond` holds.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}
