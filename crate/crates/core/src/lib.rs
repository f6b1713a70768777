//! Compressed query delegation (CQD).
//!
//! A latent state tensor is compressed by adaptive spectral masking, the
//! masked core is serialized into a compact query, a (simulated) noisy oracle
//! answers it, and the state is updated by a retraction-based stochastic
//! Riemannian step on the fixed multilinear-rank manifold.
//!
//! Module map:
//!
//! - [`tensor`], [`matrix`]: dense algebra, unfoldings, HOSVD, tail energy
//! - [`masking`]: spectral masks, ASM projection, budget and ε controller
//! - [`manifold`]: Stiefel projection / QR retraction, Tucker tangent space
//! - [`codec`]: the binary query wire format
//! - [`oracle`]: noisy oracle simulator and ensemble aggregation
//! - [`optimizer`]: the CQD outer loop, step schedules, descent certificate
//! - [`experiments`], [`report`]: certification harnesses and report output

pub mod codec;
pub mod error;
pub mod experiments;
pub mod manifold;
pub mod masking;
pub mod matrix;
pub mod optimizer;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use manifold::{StiefelPoint, TuckerPoint, TuckerTangent};
pub use masking::{CompressedState, SpectralMaskSet};
pub use matrix::Matrix;
pub use tensor::{HosvdFactorization, Ranks, Shape, Tensor3};
