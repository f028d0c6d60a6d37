//! Stable low-rank decompositions of convolution kernels.
//!
//! A `D×D×S×T` kernel is reshaped to an order-3 `D²×S×T` tensor and factorized
//! as a CP model (optionally corrected for degeneracy by error-preserving
//! sensitivity minimization), a bound-constrained Tucker-2 model, or the
//! hybrid of both. [`conv`] turns the factors into sequences of smaller
//! convolution layers and checks that they compute the same function.

pub mod conv;
pub mod cpd;
pub mod epc;
pub mod error;
pub mod hybrid;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod ranksearch;
pub mod synth;
pub mod tensor;
pub mod tucker2;

pub use cpd::{cpd_als, monte_carlo_sensitivity, AlsInit, AlsOptions, CPModel, CpdFit};
pub use epc::{epc_correct, factor_update_bounded, spherical_qp, EpcOptions, EpcTrace, WeightMode};
pub use error::{Error, Result};
pub use hybrid::{should_merge, tkd_cpd_epc, HybridModel, HybridOptions};
pub use tensor::{
    fold, khatri_rao, mode_product, reconstruct_cp, reshape_kernel, unfold, unreshape_kernel,
    DenseTensor, Matrix,
};
pub use tucker2::{tucker2_bounded, Tucker2Model, Tucker2Options};
