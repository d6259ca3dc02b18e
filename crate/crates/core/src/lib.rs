//! Desk-scale RGB-D motion recognition pipeline: paired synthetic data,
//! spatiotemporal mixing augmentation, decoupled spatial/temporal networks
//! recoupled through self-distillation, and cross-modal late fusion.

pub mod aug;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod nn;
pub mod tensor;

pub use error::{Result, UmdrError};
