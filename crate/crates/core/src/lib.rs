//! Background-invariant anchor pre-training (BAP) on a synthetic
//! foreground/background compositing world.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, a reverse-mode tape, AdamW and schedules.
//! * [`encoders`]: planted (analytically additive) teachers and trainable
//!   linear / MLP / CNN students, all emitting unit-norm embeddings.
//! * [`scene`]: the procedural world, mask refinement and degradation,
//!   Lanczos resampling, alpha compositing and grouped datasets.
//! * [`additivity`]: the foreground/background linear-additivity probe.
//! * [`anchors`]: anchor extraction, background-mean diagnostics and the
//!   residual-variance `1/K` law.
//! * [`alignment`]: the cosine alignment loop plus cross-entropy controls.
//! * [`evaluation`]: probes, prototype classification, group metrics, BSI.
//!
//! The guide in `book/` walks through the same material with runnable
//! snippets; those snippets are compiled and run as doctests of this crate.

pub mod additivity;
pub mod alignment;
pub mod anchors;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod scene;
pub mod seed;

pub use error::{BapError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/additivity.md")]
    pub struct Additivity;
    #[doc = include_str!("../../../book/src/anchors.md")]
    pub struct Anchors;
    #[doc = include_str!("../../../book/src/alignment.md")]
    pub struct Alignment;
    #[doc = include_str!("../../../book/src/compositing.md")]
    pub struct Compositing;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/numerics.md")]
    pub struct Numerics;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
