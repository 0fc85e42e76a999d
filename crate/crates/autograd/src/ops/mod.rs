//! Differentiable operations recorded on a [`Graph`](crate::Graph).

pub(crate) mod arith;
pub mod conv;
pub mod linalg;
pub(crate) mod reduce;
pub mod sample;
pub(crate) mod shape;
