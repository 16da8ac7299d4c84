//! Dyad: structured-sparse approximate replacements for dense linear layers.
//!
//! A Dyad weight matrix is the sum of a block-diagonal component and a second
//! component that becomes block diagonal after permuting its columns (IT),
//! rows (OT) or both (DT). Both are applied with batched products over
//! strided views, costing `2 / n_dyad` of a dense layer's flops.
//!
//! * [`tensor`]: matrices, strided 3-D views, batched products.
//! * [`layer`]: Dyad and dense layers, forward and backward passes.
//! * [`oracle`]: dense materializations and brute-force references.
//! * [`bench`]: per-minibatch timing harness and width sweeps.
//! * [`mnist`]: IDX ingestion and a small MLP trained with SGD.
//! * [`cli`]: the `dyad` command-line front end.

pub mod bench;
pub mod cli;
pub mod error;
pub mod layer;
pub mod mnist;
pub mod oracle;
pub mod tensor;

pub use error::{Error, Result};
pub use layer::{DenseLayer, DyadConfig, DyadGradients, DyadLayer, Linear, Variant};
pub use tensor::{bmm, matmul, reshape3, Matrix, Scalar, Tensor3};
