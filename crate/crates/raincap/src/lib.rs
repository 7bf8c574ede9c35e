//! Captioning rain-degraded images by reconstructing the clean scene first.
//!
//! The pipeline has three stages: a physically-motivated rain model synthesises
//! heavy-rain images from clean scenes (`rainmodel`), a small reconstruction
//! network estimates the model's unknowns and algebraically inverts the
//! degradation (`decomp` + `irs`), and a visual-feature-matching stage adapts a
//! source image encoder so that a frozen caption decoder trained on clean
//! images keeps working on reconstructed ones (`captioner` + `svfms`).
//! Everything trains with the reverse-mode autodiff engine in `gradcore`;
//! `metrics` scores captions and `harness` supplies datasets, checkpoints and
//! the command-line front end.

pub mod captioner;
pub mod decomp;
pub mod gradcore;
pub mod harness;
pub mod irs;
pub mod metrics;
pub mod rainmodel;
pub mod svfms;
