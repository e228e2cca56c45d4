//! Differentially private distributed nonconvex optimization built on
//! gradient differences (DIFF2), with a Rényi-DP accountant, a small MLP model
//! family, a simulated federation and the data preprocessing used by the
//! experiment harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod data;
pub mod federation;
pub mod framework;
pub mod model;
pub mod numerics;

pub use numerics::{ParamVector, RngStream};
