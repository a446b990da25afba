//! Dense matrices and a reverse-mode tape.
//!
//! All reductions run left to right in index order, so forward and backward
//! passes are bit-reproducible for identical inputs.

mod array;
mod gradcheck;
mod graph;
mod params;

pub use array::NumArray;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{sigmoid, softmax_in_place, Graph, Var};
pub use params::{Param, ParamStore};
