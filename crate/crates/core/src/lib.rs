//! Ternary network quantization by cluster-regularized retraining.
//!
//! Weights of each layer are pulled toward three centers `{-alpha, 0, +alpha}`
//! during retraining, then hard-quantized and fine-tuned with a
//! straight-through update. The pieces:
//!
//! * [`cluster`]: the constrained three-center clustering solver.
//! * [`nn`]: a small network stack with manual backpropagation.
//! * [`train`]: the regularized retraining loop.
//! * [`quantize`]: hard quantization, fine-tuning and 2-bit packing.
//! * [`metrics`]: weight/output reconstruction error and error rates.
//! * [`container`]: the `.crq` model and checkpoint format.
//! * [`experiment`] and [`report`]: the staged pipeline behind the CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cluster;
pub mod container;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod numeric;
pub mod quantize;
pub mod report;
pub mod train;

pub use cluster::{assign_codes, brute_force_solve, objective, solve, update_alpha, ClusterSolution, Codes, SolverConfig};
pub use error::{Error, Result};
pub use nn::{Architecture, Batch, Network};
pub use numeric::{DenseArray, Rng};
pub use quantize::{compression_ratio, pack_codes, quantize, unpack_codes, QuantizedModel};
pub use train::{crq_step, retrain, TrainConfig};
