//! Gradient-check suites shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

pub mod models;
pub mod ops;
