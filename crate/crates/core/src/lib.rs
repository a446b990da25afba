//! Listwise learned query-plan ranking.

pub mod container;
pub mod dataset;
pub mod decision;
pub mod embedder;
pub mod error;
pub mod evalkit;
pub mod numerics;
pub mod ood;
pub mod plan_ir;
pub mod ranker;
pub mod training;

pub use error::{Error, ErrorKind, Result};
