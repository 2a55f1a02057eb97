//! Joint image/video training objectives and media-forensics tooling.
//!
//! The crate is organized bottom-up:
//!
//! * [`data`] holds the shared data model (sample records, manifests, planar
//!   float images) and PPM/PGM I/O.
//! * [`pixelops`] has color conversion, resizing, cropping and blur kernels.
//! * [`codecsim`] simulates blockwise-DCT transform coding (JPEG-style tables
//!   and a deadzone video quantizer) and composes degradation chains.
//! * [`forensics`] computes DCT AC histograms, radially averaged power
//!   spectra, luminance histograms and residual spectra.
//! * [`cmsupcon`] implements the cross-modal supervised contrastive loss,
//!   its vanilla counterpart, the joint objective and analytic gradients.
//! * [`trainer`] provides a small differentiable model, AdamW, a
//!   mixed-modality batch sampler and the training loop.
//! * [`metrics`] computes binary-classification metrics and subset reports.
//! * [`cli`] wires everything into the `xmodal` command-line tool.
//!
//! Per-sample work runs on rayon when the `parallel` feature is enabled
//! (default) and falls back to plain iterators otherwise. Reductions always
//! combine in input order, so results do not depend on the thread count.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cmsupcon;
pub mod codecsim;
pub mod data;
pub mod forensics;
pub mod linalg;
pub mod metrics;
pub mod par;
pub mod pixelops;
pub mod trainer;

pub use data::{EmbeddedSample, ImageBuffer, Label, Manifest, Modality, SampleRecord, ScoredPrediction};
pub use linalg::Matrix;
