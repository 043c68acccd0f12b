//! Derivatives-based dynamic portfolio optimisation under Heston stochastic volatility.
//!
//! The crate covers path simulation ([`model`]), option pricing with the
//! sensitivities that make up the instrument variance matrix ([`pricing`]),
//! the PAMC backward-induction approximations of the CRRA value function
//! ([`pamc`]), l1-minimal derivative selection ([`selection`]) and closed-form
//! benchmarks ([`oracle`]).
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`); the `*64` aliases
//! below fix the scalar to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod pamc;
pub mod pricing;
pub mod rng;
pub mod scalar;
pub mod selection;

pub use error::{Error, Result};
pub use scalar::Real;

pub type HestonParams64 = model::HestonParams<f64>;
pub type HestonParams32 = model::HestonParams<f32>;
pub type MarketState64 = model::MarketState<f64>;
pub type SimConfig64 = model::SimConfig<f64>;
pub type PathSet64 = model::PathSet<f64>;
pub type InstrumentSpec64 = pricing::InstrumentSpec<f64>;
pub type PricerConfig64 = pricing::PricerConfig<f64>;
pub type SigmaMatrix64 = pricing::SigmaMatrix<f64>;
pub type InvestorSpec64 = pamc::InvestorSpec<f64>;
pub type ExposureVector64 = pamc::ExposureVector<f64>;
pub type AllocationResult64 = pamc::AllocationResult<f64>;
pub type ValueApprox64 = pamc::ValueApprox<f64>;
pub type PolyBasis64 = pamc::PolyBasis<f64>;
pub type Leg64 = pricing::Leg<f64>;
pub type CandidateGrid64 = selection::CandidateGrid<f64>;
pub type SweepRow64 = selection::SweepRow<f64>;
pub type SweepContext64 = selection::SweepContext<f64>;
