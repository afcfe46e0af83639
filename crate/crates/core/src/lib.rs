//! zootwin-core: train zoos of small CNNs, sparsify them by magnitude
//! pruning or variational dropout, analyze the resulting populations, and
//! learn latent representations of their weight spaces.
//!
//! Everything is deterministic: a root seed plus stable integer tags derive
//! every random stream, so identical configs reproduce identical bytes on a
//! given platform regardless of worker count.

pub mod analysis;
pub mod arch;
pub mod data;
pub mod error;
pub mod graph;
pub mod hyperrep;
pub mod kernels;
pub mod model;
pub mod mp;
pub mod optim;
pub mod report;
pub mod rng;
pub mod sparsify;
pub mod synth;
pub mod train;
pub mod vd;
pub mod zoo;
pub mod ztc;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
