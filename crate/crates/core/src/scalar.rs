//! Numeric bounds for the reward and policy-gradient math.
//!
//! Rewards only need field arithmetic, so they work over any [`Scalar`],
//! including exact rationals. Advantages and surrogate losses need
//! `sqrt`/`exp`, so they require [`Real`] (`f32` or `f64`).

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, Num};

pub trait Scalar: Num + Copy + PartialOrd + Debug + Send + Sync + 'static {
    /// `n` as a scalar, built by repeated addition so it stays exact.
    fn from_count(n: usize) -> Self {
        (0..n).fold(Self::zero(), |acc, _| acc + Self::one())
    }
}

impl<T> Scalar for T where T: Num + Copy + PartialOrd + Debug + Send + Sync + 'static {}

pub trait Real: Scalar + Float + FromPrimitive {
    /// Converts an `f64` literal; exact for `f64`, rounded for `f32`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

impl<T> Real for T where T: Scalar + Float + FromPrimitive {}
