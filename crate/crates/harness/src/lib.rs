//! Experiment harness: tuning, statistics, outputs and the `diff2` CLI.

#![allow(clippy::type_complexity)]

pub mod experiment;
pub mod output;
pub mod selftest;
pub mod stats;
pub mod tuning;
