//! Tile tensors for SIMD-packed (HE-style) computation.
//!
//! * [`shape`]: the `[n*d?/t, ...]` shape notation and its algebra.
//! * [`backend`]: a plaintext slot-vector machine that counts every primitive.
//! * [`dense`]: plaintext reference tensors.
//! * [`tile_tensor`]: packing, elementwise operators, summation, clean/replicate.
//! * [`linalg`]: matrix-vector and matrix-matrix products over tile tensors.
//! * [`cli`]: the `tiletensor` command line.
//! * [`nn`]: convolution lowering, CryptoNets-style inference, bootstrap
//!   bounds and plan checking.

pub mod backend;
pub mod cli;
pub mod dense;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod shape;
pub mod tile_tensor;

pub use backend::{BackendConfig, BackendError, CostReport, Session, Tile};
pub use dense::{dense_elementwise, dense_matmul, dense_sum, DenseError, DenseTensor};
pub use error::{Error, Result};
pub use shape::{
    elementwise_result_shape, external_shape, format_shape, parse_shape, sum_result_shape, DimSpec,
    ElementwiseOp, ExternalShape, ShapeError, TileTensorShape,
};
pub use tile_tensor::{
    clean_unknowns, logical_indices, replicate_dim, rotate_and_sum, slot_of, sum_tile_dim,
    sum_tile_flat, tt_elementwise, tt_sum, SumVariant, TileTensor,
};
