//! Staged latent-diffusion inference engine.
//!
//! The engine runs a toy video diffusion pipeline in three ledgered stages
//! (encode, denoise, decode) and implements the memory/speed techniques that
//! the harness crate ablates:
//!
//! * [`cache`]: interval feature caching of deep U-Net features,
//! * [`swap`]: moving cache entries between a fast and a slow memory tier,
//!   synchronously, on a background worker, or on a simulated clock,
//! * [`chunk`]: spatially tiled execution of blocks with halos,
//! * [`codec`]: frame-wise encode/decode, batched or sliced per frame.
//!
//! All allocations are visible to the [`ledger`], which produces per-stage,
//! per-tier peak memory.

pub mod cache;
pub mod chunk;
pub mod codec;
pub mod denoiser;
pub mod error;
pub mod ledger;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod swap;
pub mod tensor;

pub use error::{BudgetExceeded, Error, Result};
pub use ledger::{Ledger, MemLedger, StageTag, Tier};
pub use tensor::{KernelBank, Region, Shape5, Tensor5};
