//! Teacher-free dynamic distillation for an axial-shift MLP detector.
//!
//! The student is [`backbone::Backbone`] + [`fpn::Fpn`] + a shared
//! [`head::Head`]. During training a dynamic teacher builds instructive
//! features from the ground-truth labels and the student's own pyramid
//! ([`label_encoder`], [`appearance`], [`interaction`], [`adaptor`]); the
//! student is pulled towards them by [`distill::distill_loss`]. Inference
//! runs the student only.

pub mod adaptor;
pub mod appearance;
pub mod backbone;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fpn;
pub mod head;
pub mod interaction;
pub mod label_encoder;
pub mod model;
pub mod nn;
pub mod plot;
pub mod spatial;
pub mod synth;
pub mod trainer;

pub use dyndistill_autodiff as autodiff;
pub use error::{Error, Result};
