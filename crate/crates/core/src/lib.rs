//! Adversarial rigid image registration.
//!
//! A generator network regresses the rigid transform that aligns a moving
//! image to a fixed image of a different modality; a critic network scores
//! how well a pair is aligned. Both are trained adversarially with a clipped
//! Wasserstein-style objective on top of a small reverse-mode autodiff core.

pub mod evaluator;
pub mod geometry;
pub mod nets;
pub mod resampler;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
