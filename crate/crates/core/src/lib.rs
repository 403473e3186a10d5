//! Channel pruning toolkit for Darknet YOLOv3-family detectors.
//!
//! The pipeline: parse a network definition ([`cfg`]), load its weights
//! ([`weights`]), optionally insert SPP blocks ([`spp`]), train batch-norm
//! scaling factors toward sparsity ([`sparsity`]), prune channels whose
//! factors fall under a global/local threshold ([`prune`]), and check the
//! result with cost accounting ([`graph`]), a forward pass ([`inference`])
//! and detection metrics ([`eval`]).

pub mod cfg;
pub mod eval;
pub mod fixtures;
pub mod graph;
pub mod inference;
pub mod prune;
pub mod sparsity;
pub mod spp;
pub mod weights;

pub use cfg::{emit_cfg, parse_cfg, validate, NetworkDef};
pub use graph::{count_flops, count_params, infer_shapes, CostReport, Shape};
pub use inference::{run_network, Tensor};
pub use weights::{read_weights, write_weights, WeightStore};
