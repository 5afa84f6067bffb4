//! Scalar abstraction for the vector-math layer.
//!
//! Embedding math and graph clustering are generic over the float width so
//! the same code runs in `f32` or `f64`. The rest of the pipeline uses the
//! crate-root aliases ([`crate::Real`], [`crate::EmbeddingVector`]).

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar usable throughout the math layer: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}
