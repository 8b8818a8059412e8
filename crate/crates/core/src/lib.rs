//! Semi-supervised ladder networks fused with virtual adversarial training.
//!
//! This crate implements, from the numeric kernels up:
//!
//! * a reverse-mode autodiff tape over dense matrices ([`numerics`]);
//! * the ladder network — shared-weight clean/corrupted encoders, a
//!   denoising decoder with per-unit combinators, and the layer-wise
//!   reconstruction cost ([`ladder`]);
//! * virtual adversarial perturbations found by power iteration on the
//!   local KL curvature ([`vat`]);
//! * seven training variants that mix and match those costs — a supervised
//!   baseline, the plain ladder, plain VAT, and four fused combinations that
//!   apply per-layer virtual adversarial perturbations either as an extra
//!   KL cost or as extra encoder corruption ([`variants`]);
//! * fast-gradient attacks and error-rate evaluation ([`attack`]);
//! * a training harness with Adam, learning-rate decay, metrics records and
//!   an experiment matrix runner ([`harness`]);
//! * IDX dataset loading, class-balanced few-label splits, and a
//!   deterministic synthetic digit corpus for self-contained runs
//!   ([`data`]);
//! * a self-describing binary checkpoint format ([`checkpoint`]).
//!
//! Everything stochastic is driven by named substreams of a single seed, so
//! every run — including adversarial-direction searches — is reproducible
//! bit for bit at fixed thread count.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod ladder;
pub mod numerics;
pub mod variants;
pub mod vat;

pub use error::{Error, Result};
