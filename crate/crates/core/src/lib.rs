//! Variational next-token modelling with a closed control loop: homeostatic
//! latent regulation while training, structurally aware checkpoint retention
//! afterwards, and a calibrated uncertainty-aware controller at inference.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod numeric;
pub mod data;
pub mod backbone;
pub mod objective;
pub mod metrics;
pub mod retention;
pub mod controller;
pub mod agentic;
pub mod train;
pub mod config;
pub mod report;
pub mod pipeline;
