//! Randomized verification suites shared by the core tests and the
//! acceptance target. Suites return reports instead of asserting so callers
//! can print or assert as they need.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod gradients;
pub mod oracle;
pub mod zero_cases;
