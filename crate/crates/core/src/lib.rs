//! Iterative conditional diffusion for blind face restoration.
//!
//! The crate is organised by pipeline stage: [`imaging`] (tensors, PNG, toy
//! corpus), [`degrade`] (synthetic degradation), [`schedule`] and
//! [`diffusion`] (forward process, training, sampling), [`denoiser`] (the
//! conditional U-Net and its autograd engine in [`nn`]), [`eval`] (metrics and
//! the authenticity harness) and [`extrinsic`] (corpus enhancement and the
//! second training round).

pub mod config;
pub mod degrade;
pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub mod error;
pub mod extrinsic;
pub mod imaging;
pub mod nn;
mod parallel;
pub mod schedule;

pub use error::{Error, Result};
pub use imaging::{ImageTensor, RngStream};
