//! Block-level pruning of convolutional networks guided by linear probes.
//!
//! A network is described as a [`graph::BlockGraph`] whose weights live in a
//! [`weights::WeightStore`]. A probe is trained on every block's output;
//! blocks whose probe accuracy falls below that of their input are the first
//! to be removed. Surgery happens in [`graph::prune_blocks`], and
//! [`recovery`] restores accuracy with a teacher-mimic loss.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod criterion;
pub mod data;
pub mod error;
pub mod graph;
pub mod manifest;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod probes;
pub mod recovery;
pub mod report;
pub mod tensor;
pub mod weights;

pub use checkpoint::Checkpoint;
pub use config::{DatasetSource, PipelineMode, RunConfig, TeacherPolicy};
pub use error::{Error, Result};
pub use graph::{build_graph, prunable_blocks, prune_blocks, validate_graph, ArchDesc, BlockGraph, DatasetMeta};
pub use manifest::ExperimentManifest;
pub use network::Network;
pub use tensor::Tensor;
pub use weights::WeightStore;
