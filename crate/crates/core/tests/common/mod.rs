//! Oracles shared by the test targets; each target uses a different subset.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod oracles;
pub mod tdist;
