//! Mutual-guided dynamic network for image fusion.
//!
//! The network filters each input with per-pixel kernels predicted under
//! cross-attention guidance from the other inputs, fuses the filtered
//! features through parallel global/local branches, and is trained with an
//! L1 term plus a masked normalized-mutual-information penalty on
//! intermediate features. Everything runs on a self-contained f64
//! reverse-mode autodiff core, so the whole stack is gradient-checkable.
//!
//! Entry points:
//! - [`model::Model`] — build, run and train the network
//! - [`data`] — deterministic synthetic datasets for the four fusion tasks
//! - [`metrics`] — PSNR / SSIM / NMI / entropy / RMSE
//! - [`cli`] — the `mgdn` command-line surface
//!
//! The `examples/` directory has one runnable program per capability.

// Training churns through hundreds of megabytes of short-lived tape
// buffers per step; mimalloc keeps that from ending up as mmap traffic.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod mgdf;
pub mod model;
pub mod pff;
pub mod tensor;

pub use error::{MgdnError, Result};
pub use model::{Model, ModelConfig, Task};
pub use tensor::{Tape, Tensor, Var};

/// Configures worker threads from `MGDN_THREADS`; call once at startup.
pub fn init_threads() {
    tensor::par::init_thread_pool();
}
