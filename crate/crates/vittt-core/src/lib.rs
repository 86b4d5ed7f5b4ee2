//! Test-time-training sequence layer and the Vittt vision backbone.
//!
//! The crate is organized around a small dense-tensor kernel set with a
//! multiply-accumulate counter, a reverse-mode tape, and a single generic
//! forward implementation that runs either eagerly or recorded:
//!
//! - [`tensor`]: kernels (matmul, layer norm, depthwise convolutions) and
//!   the MAC counter.
//! - [`autodiff`]: the tape engine for the outer training loop.
//! - [`backend`]: the eager/taped execution abstraction.
//! - [`ttt`]: the inner-loop TTT layer in primal and dual form.
//! - [`block`]: the bidirectional Vittt block (dual-dataset strategy,
//!   Conv2d preprocessing, gating).
//! - [`backbone`]: patchification, encoder stack, task adapters.
//! - [`train`]: toy dataset, optimizers, outer training loop.
//! - [`oracles`]: naive references for the equivalence theorems.
//! - [`interpret`]: gradient magnitude maps, reconstruction-loss traces,
//!   effective receptive fields.
//! - [`complexity`]: analytic FLOPs/memory models plus measured counts.
//! - [`verify`]: the property suites behind `vittt verify`.
//! - [`io`]: the checkpoint container, dataset directories, CSV/PGM export.

pub mod autodiff;
pub mod backbone;
pub mod backend;
pub mod block;
pub mod complexity;
pub mod error;
pub mod interpret;
pub mod io;
pub mod oracles;
pub mod tensor;
pub mod train;
pub mod ttt;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorOf};
