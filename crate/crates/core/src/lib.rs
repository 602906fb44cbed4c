//! Dense row-major tensors with reverse-mode automatic differentiation,
//! a string-keyed parameter store, deterministic named RNG substreams,
//! and an Adam optimizer.
//!
//! The engine is deliberately small: a define-by-run tape records every
//! operation, `backward` replays it in reverse, and a finite-difference
//! checker ([`gradcheck`]) validates each backward rule independently.
//! Speed is irrelevant at the scales this workspace targets, so everything
//! favors auditability: plain `Vec` storage, no threading, no SIMD.
//!
//! All math is generic over [`Scalar`]; downstream crates use the fp64
//! aliases exported at the crate root.

pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod session;
pub mod tape;

use std::fmt::{Debug, Display};

pub use error::{CoreError, Result};

/// Floating-point scalar the engine works over.
///
/// Blanket-implemented for any type with the required numeric traits,
/// which in practice means `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + std::iter::Sum
    + Debug
    + Display
    + Default
    + 'static
{
}

impl<T> Scalar for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::ToPrimitive
        + num_traits::NumAssignOps
        + std::iter::Sum
        + Debug
        + Display
        + Default
        + 'static
{
}

/// Converts an `f64` constant into the working scalar type.
pub fn sc<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("f64 constant must be representable in the scalar type")
}

// Concrete fp64 types used throughout the model, analysis, and harness crates.
pub type Tape = tape::Tape<f64>;
pub type Tensor = tape::Tensor<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type Param = params::Param<f64>;
pub type Session<'a> = session::Session<'a, f64>;
pub type Adam = optim::Adam<f64>;
