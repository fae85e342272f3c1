#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod model;
pub mod numerics;
pub mod queries;
pub mod training;

pub use error::{Error, Result};
